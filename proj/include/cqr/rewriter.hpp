#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cqr/data.hpp"
#include "cqr/text.hpp"
#include "cqr/transformer.hpp"

namespace cqr::rewrite {

struct RewriterConfig {
  nn::TransformerConfig transformer;  // causal; decoder side
  int mixture_components = 2;
  int window = 5;
  bool include_answers = false;
  int max_rewrite_len = 40;

  void validate() const;
};

struct RewriteResult {
  std::string rewritten_question;
  bool was_copied = false;
  std::vector<double> token_log_probs;
  bool truncated = false;  // hit the length budget before [EOS]
};

enum class HistoryMode { kRecursive, kGoldHistory };

/// [BOS] h1 [SEP] h2 [SEP] ... [SEP] current question. History is the last
/// `window` prior turns (generated rewrites when supplied, else originals),
/// answers interleaved when include_answers. Oldest history drops first when
/// the budget is tight; the current question never drops.
text::TokenSequence assemble_context(const data::Dialogue& dialogue, int turn_index,
                                     const std::vector<std::string>& rewrites_so_far,
                                     const text::Vocabulary& vocab, int window,
                                     bool include_answers, int max_len);

/// Case- and punctuation-insensitive equality used for the was_copied flag.
bool is_copy(const std::string& rewrite, const std::string& original);

class RewriterModel {
 public:
  RewriterModel(text::Vocabulary vocab, RewriterConfig config, uint64_t seed);

  /// Mean per-example loss; runs backward and one optimizer step.
  double train_step(const std::vector<std::pair<text::TokenSequence, text::TokenSequence>>& batch,
                    double learning_rate);

  /// Loss graph for one (context, target) pair; target must end with [EOS].
  nn::TensorPtr sequence_loss(const text::TokenSequence& context,
                              const text::TokenSequence& target);

  /// Greedy decoding from an assembled context; ties pick the lowest token id.
  RewriteResult decode(const text::TokenSequence& context, int max_len = 0) const;

  std::vector<RewriteResult> rewrite_dialogue(const data::Dialogue& dialogue,
                                              HistoryMode mode) const;

  /// Plain-math mixture for one position; h, x, g are d-vectors.
  std::vector<double> mixture_distribution(const std::vector<double>& h,
                                           const std::vector<double>& x,
                                           const std::vector<double>& g) const;
  /// Graph version over whole sequences (rows = positions).
  nn::TensorPtr mixture_rows(const nn::TensorPtr& hidden, const nn::TensorPtr& gate_input,
                             const nn::TensorPtr& embeddings);

  void save(const std::string& path) const;
  static RewriterModel load(const std::string& path, text::Vocabulary vocab);

  const RewriterConfig& config() const { return config_; }
  const text::Vocabulary& vocab() const { return vocab_; }
  nn::ParameterStore& params() { return params_; }

 private:
  text::Vocabulary vocab_;
  RewriterConfig config_;
  mutable nn::ParameterStore params_;
  void ensure_parameters();
};

struct RewriteRecord {
  std::string topic_id;
  int turn_id = 0;
  std::string rewrite;
  bool was_copied = false;

  bool operator==(const RewriteRecord&) const = default;
};

void write_rewrite_file(const std::vector<RewriteRecord>& records, const std::string& path);
std::vector<RewriteRecord> load_rewrite_file(const std::string& path);

std::string baseline_original(const data::Turn& turn);
/// Previous k original questions, [SEP]-joined, then the current question.
std::string baseline_kdt(const data::Dialogue& dialogue, int turn_index, int k);
/// Current question followed by analyzed history terms with idf above the
/// threshold, deduplicated in first-appearance order, minus terms the current
/// question already contains.
std::string baseline_kdt_star(const data::Dialogue& dialogue, int turn_index, int k,
                              const std::function<double(const std::string&)>& idf,
                              const text::Analyzer& analyzer, double idf_threshold = 0.0001);

}  // namespace cqr::rewrite
