#include "cqr/transformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "cqr/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores little-endian doubles");

namespace cqr::nn {
namespace {

constexpr double kTwoPi = 6.283185307179586477;

TensorPtr affine_layer_norm(const TensorPtr& x, ParameterStore& params, const std::string& prefix) {
  auto gamma = params.get_or_create(prefix + ".g", 1, x->cols, ParameterStore::Init::kOne);
  auto beta = params.get_or_create(prefix + ".b", 1, x->cols, ParameterStore::Init::kZero);
  return add_rowvec(mul_rowvec(layer_norm_rows(x), gamma), beta);
}

TensorPtr linear(const TensorPtr& x, ParameterStore& params, const std::string& prefix, int out_dim) {
  auto w = params.get_or_create(prefix + ".w", x->cols, out_dim, ParameterStore::Init::kNormal);
  auto b = params.get_or_create(prefix + ".b", 1, out_dim, ParameterStore::Init::kZero);
  return add_rowvec(matmul(x, w), b);
}

struct StackOutput {
  TensorPtr hidden;
  TensorPtr gate_input;
  TensorPtr embeddings;
};

// One pre-norm residual stack; the mask decides causal vs bidirectional.
StackOutput run_stack(const std::vector<int>& ids, ParameterStore& params,
                      const TransformerConfig& config, const std::vector<double>& attention_mask,
                      bool want_gate) {
  config.validate();
  int len = static_cast<int>(ids.size());
  if (len == 0) throw InternalError("transformer forward: empty sequence");
  if (len > config.max_seq_len)
    throw InternalError("transformer forward: sequence of " + std::to_string(len) +
                        " exceeds max_seq_len " + std::to_string(config.max_seq_len));

  if (!params.contains("wte"))
    throw InternalError("transformer forward: create the token table \"wte\" first");
  auto wte = params.at("wte");
  auto wpe = params.get_or_create("wpe", config.max_seq_len, config.model_dim,
                                  ParameterStore::Init::kNormal);
  std::vector<int> positions(ids.size());
  for (int t = 0; t < len; ++t) positions[t] = t;
  auto x = add(embedding_rows(wte, ids), embedding_rows(wpe, positions));
  StackOutput out;
  out.embeddings = x;

  int hd = config.head_dim();
  int gate_layer = config.gate_attention_layer < 0 ? config.num_layers - 1
                                                   : config.gate_attention_layer;
  double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int l = 0; l < config.num_layers; ++l) {
    std::string p = "h" + std::to_string(l);
    auto a = affine_layer_norm(x, params, p + ".ln1");
    auto q = linear(a, params, p + ".attn.q", config.model_dim);
    auto k = linear(a, params, p + ".attn.k", config.model_dim);
    auto v = linear(a, params, p + ".attn.v", config.model_dim);

    std::vector<TensorPtr> heads;
    for (int h = 0; h < config.num_heads; ++h) {
      auto qh = slice_cols(q, h * hd, (h + 1) * hd);
      auto kh = slice_cols(k, h * hd, (h + 1) * hd);
      auto vh = slice_cols(v, h * hd, (h + 1) * hd);
      auto scores = scale(matmul_nt(qh, kh), inv_sqrt_hd);
      auto weights = masked_softmax_rows(scores, attention_mask);
      auto oh = matmul(weights, vh);
      if (want_gate && l == gate_layer && h == 0)
        out.gate_input = zero_pad_cols(oh, config.model_dim, 0);
      heads.push_back(oh);
    }
    auto attn = linear(concat_cols(heads), params, p + ".attn.proj", config.model_dim);
    x = add(x, attn);

    auto m = affine_layer_norm(x, params, p + ".ln2");
    auto ff = linear(gelu(linear(m, params, p + ".mlp.in", config.feed_forward_dim)), params,
                     p + ".mlp.out", config.model_dim);
    x = add(x, ff);
  }
  out.hidden = affine_layer_norm(x, params, "ln_f");
  return out;
}

void append_bytes(std::string& buf, const void* data, size_t n) {
  buf.append(static_cast<const char*>(data), n);
}
template <typename T>
void append_pod(std::string& buf, T value) {
  append_bytes(buf, &value, sizeof(value));
}
void append_string(std::string& buf, const std::string& s) {
  append_pod<uint32_t>(buf, static_cast<uint32_t>(s.size()));
  append_bytes(buf, s.data(), s.size());
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void read(void* out, size_t n) {
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
    std::memcpy(out, buf.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T pod() {
    T value;
    read(&value, sizeof(value));
    return value;
  }
  std::string str() {
    auto n = pod<uint32_t>();
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

constexpr char kCheckpointMagic[8] = {'C', 'Q', 'R', 'C', 'K', 'P', 'T', '1'};

}  // namespace

void TransformerConfig::validate() const {
  if (num_layers <= 0 || num_heads <= 0 || model_dim <= 0 || max_seq_len <= 0 ||
      feed_forward_dim <= 0)
    throw InternalError("transformer config: all dimensions must be positive");
  if (model_dim % num_heads != 0)
    throw InternalError("transformer config: model_dim " + std::to_string(model_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
  if (gate_attention_layer < -1 || gate_attention_layer >= num_layers)
    throw InternalError("transformer config: gate_attention_layer out of range");
}

ParameterStore::ParameterStore(uint64_t seed) : seed_(seed), rng_(seed) {}

double ParameterStore::next_normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // Box-Muller on explicit 53-bit uniforms; std::normal_distribution is
  // implementation-defined and would break cross-platform determinism.
  double u1 = static_cast<double>(rng_() >> 11) * 0x1p-53;
  double u2 = static_cast<double>(rng_() >> 11) * 0x1p-53;
  double radius = std::sqrt(-2.0 * std::log1p(-u1));
  spare_ = radius * std::sin(kTwoPi * u2);
  have_spare_ = true;
  return radius * std::cos(kTwoPi * u2);
}

TensorPtr ParameterStore::get_or_create(const std::string& name, int rows, int cols, Init init) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second->rows != rows || it->second->cols != cols)
      throw InternalError("parameter " + name + " has shape " + std::to_string(it->second->rows) +
                          "x" + std::to_string(it->second->cols) + ", expected " +
                          std::to_string(rows) + "x" + std::to_string(cols));
    return it->second;
  }
  auto t = std::make_shared<Tensor>(rows, cols);
  t->name = name;
  t->is_param = true;
  if (init == Init::kNormal)
    for (double& x : t->v) x = 0.02 * next_normal();
  else if (init == Init::kOne)
    std::fill(t->v.begin(), t->v.end(), 1.0);
  params_.emplace(name, t);
  return t;
}

TensorPtr ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw InternalError("unknown parameter " + name);
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

void ParameterStore::optimize_step(double learning_rate) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++step_;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
  for (auto& [name, p] : params_) {
    auto& slot = slots_[name];
    if (slot.m.empty()) {
      slot.m.assign(p->size(), 0.0);
      slot.v.assign(p->size(), 0.0);
    }
    for (size_t i = 0; i < p->size(); ++i) {
      double grad = p->g[i];
      if (!std::isfinite(grad))
        throw InternalError("non-finite gradient in parameter " + name);
      slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * grad;
      slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * grad * grad;
      double mhat = slot.m[i] / bc1;
      double vhat = slot.v[i] / bc2;
      p->v[i] -= learning_rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

DecoderOutput decoder_forward(const std::vector<int>& ids, ParameterStore& params,
                              const TransformerConfig& config) {
  if (!config.causal) throw InternalError("decoder_forward requires causal=true");
  int len = static_cast<int>(ids.size());
  std::vector<double> mask(size_t(len) * len, 0.0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j <= i; ++j) mask[size_t(i) * len + j] = 1.0;
  auto out = run_stack(ids, params, config, mask, /*want_gate=*/true);
  return {out.hidden, out.gate_input, out.embeddings};
}

TensorPtr encoder_forward(const std::vector<int>& ids, ParameterStore& params,
                          const TransformerConfig& config, int pad_id) {
  if (config.causal) throw InternalError("encoder_forward requires causal=false");
  int len = static_cast<int>(ids.size());
  // pad positions are masked out as keys so no token attends to them
  std::vector<double> mask(size_t(len) * len, 0.0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j < len; ++j)
      if (ids[j] != pad_id) mask[size_t(i) * len + j] = 1.0;
  return run_stack(ids, params, config, mask, /*want_gate=*/false).hidden;
}

double gradient_check(ParameterStore& params, const std::function<TensorPtr()>& loss_fn,
                      double epsilon, size_t max_entries_per_param, uint64_t sample_seed) {
  params.zero_grad();
  auto loss = loss_fn();
  backward(loss);

  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, p] : params.parameters()) analytic[name] = p->g;

  double max_rel = 0.0;
  std::mt19937_64 rng(sample_seed);
  for (const auto& [name, p] : params.parameters()) {
    std::vector<size_t> entries;
    if (p->size() <= max_entries_per_param) {
      for (size_t i = 0; i < p->size(); ++i) entries.push_back(i);
    } else {
      for (size_t s = 0; s < max_entries_per_param; ++s) entries.push_back(rng() % p->size());
    }
    for (size_t i : entries) {
      double orig = p->v[i];
      p->v[i] = orig + epsilon;
      double up = loss_fn()->v[0];
      p->v[i] = orig - epsilon;
      double down = loss_fn()->v[0];
      p->v[i] = orig;
      double numeric = (up - down) / (2.0 * epsilon);
      double a = analytic[name][i];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

void save_checkpoint(const ParameterStore& params, const CheckpointHeader& header,
                     const std::string& path) {
  std::string buf;
  append_bytes(buf, kCheckpointMagic, sizeof(kCheckpointMagic));
  append_pod<uint32_t>(buf, header.version);
  append_pod<int32_t>(buf, header.config.num_layers);
  append_pod<int32_t>(buf, header.config.num_heads);
  append_pod<int32_t>(buf, header.config.model_dim);
  append_pod<int32_t>(buf, header.config.max_seq_len);
  append_pod<int32_t>(buf, header.config.feed_forward_dim);
  append_pod<uint8_t>(buf, header.config.causal ? 1 : 0);
  append_pod<int32_t>(buf, header.config.gate_attention_layer);
  append_pod<uint64_t>(buf, header.vocab_hash);
  append_pod<int64_t>(buf, header.step);
  append_string(buf, header.module_tag);
  append_string(buf, header.extra);
  append_pod<uint64_t>(buf, params.parameters().size());
  for (const auto& [name, p] : params.parameters()) {
    append_string(buf, name);
    append_pod<int32_t>(buf, p->rows);
    append_pod<int32_t>(buf, p->cols);
    append_bytes(buf, p->v.data(), p->v.size() * sizeof(double));
  }
  atomic_write_file(path, buf);
}

CheckpointHeader load_checkpoint(ParameterStore& params, const std::string& path) {
  std::string buf = read_file(path);
  ByteReader in(buf);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw DataError(path + ": not a checkpoint file");
  CheckpointHeader header;
  header.version = in.pod<uint32_t>();
  if (header.version != 1)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(header.version));
  header.config.num_layers = in.pod<int32_t>();
  header.config.num_heads = in.pod<int32_t>();
  header.config.model_dim = in.pod<int32_t>();
  header.config.max_seq_len = in.pod<int32_t>();
  header.config.feed_forward_dim = in.pod<int32_t>();
  header.config.causal = in.pod<uint8_t>() != 0;
  header.config.gate_attention_layer = in.pod<int32_t>();
  header.vocab_hash = in.pod<uint64_t>();
  header.step = static_cast<long>(in.pod<int64_t>());
  header.module_tag = in.str();
  header.extra = in.str();
  try {
    header.config.validate();
  } catch (const InternalError& e) {
    throw DataError(path + ": " + e.what());
  }

  auto count = in.pod<uint64_t>();
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = in.str();
    auto rows = in.pod<int32_t>();
    auto cols = in.pod<int32_t>();
    if (rows <= 0 || cols <= 0) throw DataError(path + ": bad shape for tensor " + name);
    auto t = params.get_or_create(name, rows, cols, ParameterStore::Init::kZero);
    in.read(t->v.data(), t->v.size() * sizeof(double));
  }
  if (in.pos != buf.size()) throw DataError(path + ": trailing bytes after tensors");
  params.set_step(header.step);
  return header;
}

}  // namespace cqr::nn
