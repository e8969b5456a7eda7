#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cqr/tensor.hpp"

namespace cqr::nn {

struct TransformerConfig {
  int num_layers = 2;
  int num_heads = 4;
  int model_dim = 64;
  int max_seq_len = 128;
  int feed_forward_dim = 256;
  bool causal = true;
  // Layer whose pre-projection head-0 output feeds the gate features; -1 = last.
  int gate_attention_layer = -1;

  int head_dim() const { return model_dim / num_heads; }
  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

/// Owns named parameters plus Adam state. One store per trained model.
class ParameterStore {
 public:
  explicit ParameterStore(uint64_t seed = 0);

  enum class Init { kNormal, kZero, kOne };
  TensorPtr get_or_create(const std::string& name, int rows, int cols, Init init);
  TensorPtr at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const std::map<std::string, TensorPtr>& parameters() const { return params_; }

  void zero_grad();
  /// Adam with beta1=0.9, beta2=0.999, eps=1e-8; throws on non-finite gradients.
  void optimize_step(double learning_rate);

  long step() const { return step_; }
  uint64_t seed() const { return seed_; }
  void set_step(long step) { step_ = step; }

  /// Standard normal via Box-Muller so streams are identical across platforms.
  double next_normal();

 private:
  struct AdamSlot {
    std::vector<double> m, v;
  };
  std::map<std::string, TensorPtr> params_;
  std::map<std::string, AdamSlot> slots_;
  long step_ = 0;
  uint64_t seed_ = 0;
  std::mt19937_64 rng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

struct DecoderOutput {
  TensorPtr hidden;      // L x d, after the final layer norm
  TensorPtr gate_input;  // L x d, head-0 slice of the chosen layer's attention
  TensorPtr embeddings;  // L x d, token + position embeddings
};

/// Causal self-attention stack; creates parameters in `params` on first use.
DecoderOutput decoder_forward(const std::vector<int>& ids, ParameterStore& params,
                              const TransformerConfig& config);

/// Bidirectional stack with [PAD] keys masked out of attention.
TensorPtr encoder_forward(const std::vector<int>& ids, ParameterStore& params,
                          const TransformerConfig& config, int pad_id = 0);

/// Max over sampled parameter entries of |analytic-numeric| / max(|a|,|n|,1e-8),
/// with central differences at the given epsilon. loss_fn must rebuild the
/// graph from the store's current values on every call.
double gradient_check(ParameterStore& params, const std::function<TensorPtr()>& loss_fn,
                      double epsilon = 1e-5, size_t max_entries_per_param = 8,
                      uint64_t sample_seed = 1);

struct CheckpointHeader {
  uint32_t version = 1;
  TransformerConfig config;
  uint64_t vocab_hash = 0;
  long step = 0;
  std::string module_tag;
  std::string extra;  // free-form, e.g. a head's own hyperparameters
};

void save_checkpoint(const ParameterStore& params, const CheckpointHeader& header,
                     const std::string& path);
/// Loads all tensors into a fresh store; validates header magic and version.
CheckpointHeader load_checkpoint(ParameterStore& params, const std::string& path);

}  // namespace cqr::nn
