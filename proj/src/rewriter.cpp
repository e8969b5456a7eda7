#include "cqr/rewriter.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"

#include "cqr/common.hpp"

namespace cqr::rewrite {
namespace {

using ordered_json = nlohmann::ordered_json;

std::string copy_normalize(const std::string& s) {
  std::string out;
  for (auto& token : text::tokenize(s)) {
    if (!token.is_word) continue;
    if (!out.empty()) out += ' ';
    out += token.surface;  // tokenizer already lowercases words
  }
  return out;
}

std::vector<double> softmax_vec(const std::vector<double>& logits) {
  double best = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double denom = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - best);
    denom += p[i];
  }
  for (double& x : p) x /= denom;
  return p;
}

std::vector<double> tensor_row(const nn::TensorPtr& t, int row) {
  std::vector<double> out(t->cols);
  for (int j = 0; j < t->cols; ++j) out[j] = t->at(row, j);
  return out;
}

}  // namespace

void RewriterConfig::validate() const {
  transformer.validate();
  if (!transformer.causal) throw InternalError("rewriter needs a causal transformer");
  if (mixture_components < 1) throw InternalError("rewriter needs mixture_components >= 1");
  if (window < 0) throw InternalError("rewriter window must be non-negative");
  if (max_rewrite_len < 1 || max_rewrite_len >= transformer.max_seq_len)
    throw InternalError("max_rewrite_len must leave room for the context");
}

text::TokenSequence assemble_context(const data::Dialogue& dialogue, int turn_index,
                                     const std::vector<std::string>& rewrites_so_far,
                                     const text::Vocabulary& vocab, int window,
                                     bool include_answers, int max_len) {
  if (turn_index < 0 || turn_index >= static_cast<int>(dialogue.turns.size()))
    throw InternalError("assemble_context: turn index out of range");
  if (window < 0) throw InternalError("assemble_context: negative window");
  if (!rewrites_so_far.empty() && rewrites_so_far.size() < static_cast<size_t>(turn_index))
    throw InternalError("assemble_context: need one rewrite per prior turn");

  std::vector<std::vector<int>> history;
  int first = std::max(0, turn_index - window);
  for (int t = first; t < turn_index; ++t) {
    const data::Turn& turn = dialogue.turns[t];
    const std::string& question =
        rewrites_so_far.empty() ? turn.original_question : rewrites_so_far[t];
    history.push_back(text::encode(question, vocab).ids);
    if (include_answers && turn.answer_given_in_dialogue())
      history.push_back(text::encode(*turn.answer_given_in_dialogue(), vocab).ids);
  }
  auto current = text::encode(dialogue.turns[turn_index].original_question, vocab).ids;

  auto total_length = [&] {
    size_t n = 1 + current.size();  // [BOS] plus the question
    for (const auto& item : history) n += item.size() + 1;  // item plus [SEP]
    return n;
  };
  if (max_len > 0) {
    while (total_length() > static_cast<size_t>(max_len) && !history.empty())
      history.erase(history.begin());
    if (total_length() > static_cast<size_t>(max_len))
      throw DataError("current question alone exceeds the context budget of " +
                      std::to_string(max_len) + " tokens");
  }

  text::TokenSequence seq;
  seq.ids.push_back(text::Vocabulary::kBosId);
  for (const auto& item : history) {
    seq.ids.insert(seq.ids.end(), item.begin(), item.end());
    seq.ids.push_back(text::Vocabulary::kSepId);
  }
  seq.ids.insert(seq.ids.end(), current.begin(), current.end());
  return seq;
}

bool is_copy(const std::string& rewrite, const std::string& original) {
  return copy_normalize(rewrite) == copy_normalize(original);
}

RewriterModel::RewriterModel(text::Vocabulary vocab, RewriterConfig config, uint64_t seed)
    : vocab_(std::move(vocab)), config_(std::move(config)), params_(seed) {
  config_.validate();
  ensure_parameters();
}

void RewriterModel::ensure_parameters() {
  params_.get_or_create("wte", static_cast<int>(vocab_.size()), config_.transformer.model_dim,
                        nn::ParameterStore::Init::kNormal);
  // one dummy pass materializes every tensor so checkpoints are complete
  auto out = nn::decoder_forward({text::Vocabulary::kBosId}, params_, config_.transformer);
  mixture_rows(out.hidden, out.gate_input, out.embeddings);
  params_.zero_grad();
}

nn::TensorPtr RewriterModel::mixture_rows(const nn::TensorPtr& hidden,
                                          const nn::TensorPtr& gate_input,
                                          const nn::TensorPtr& embeddings) {
  int d = config_.transformer.model_dim;
  int v = static_cast<int>(vocab_.size());
  int m = config_.mixture_components;
  auto shared_bias = params_.get_or_create("mix.bh", 1, v, nn::ParameterStore::Init::kZero);

  auto gate_w_norm = params_.get_or_create("mix.gate.wg", d, m, nn::ParameterStore::Init::kNormal);
  auto gate_w_emb = params_.get_or_create("mix.gate.wx", d, m, nn::ParameterStore::Init::kNormal);
  auto gate_bias = params_.get_or_create("mix.gate.b", 1, m, nn::ParameterStore::Init::kZero);
  auto gate_logits = add_rowvec(add(matmul(nn::layer_norm_rows(gate_input), gate_w_norm),
                                    matmul(embeddings, gate_w_emb)),
                                gate_bias);
  auto gates = nn::softmax_rows(gate_logits);

  nn::TensorPtr mixed;
  for (int i = 0; i < m; ++i) {
    auto head_w = params_.get_or_create("mix.h" + std::to_string(i) + ".w", d, v,
                                        nn::ParameterStore::Init::kNormal);
    auto head_dist = nn::softmax_rows(add_rowvec(matmul(hidden, head_w), shared_bias));
    auto weighted = nn::mul_colvec(head_dist, nn::slice_cols(gates, i, i + 1));
    mixed = mixed ? nn::add(mixed, weighted) : weighted;
  }
  return mixed;
}

std::vector<double> RewriterModel::mixture_distribution(const std::vector<double>& h,
                                                        const std::vector<double>& x,
                                                        const std::vector<double>& g) const {
  int d = config_.transformer.model_dim;
  int v = static_cast<int>(vocab_.size());
  int m = config_.mixture_components;
  if (h.size() != size_t(d) || x.size() != size_t(d) || g.size() != size_t(d))
    throw InternalError("mixture_distribution: vectors must have dimension d");

  // layer norm of g, no affine part, matching the graph op
  double mean = 0.0;
  for (double val : g) mean += val;
  mean /= d;
  double var = 0.0;
  for (double val : g) var += (val - mean) * (val - mean);
  var /= d;
  double inv_std = 1.0 / std::sqrt(var + 1e-8);
  std::vector<double> normed(d);
  for (int j = 0; j < d; ++j) normed[j] = (g[j] - mean) * inv_std;

  auto gate_w_norm = params_.at("mix.gate.wg");
  auto gate_w_emb = params_.at("mix.gate.wx");
  auto gate_bias = params_.at("mix.gate.b");
  std::vector<double> gate_logits(m);
  for (int i = 0; i < m; ++i) {
    double acc = gate_bias->v[i];
    for (int j = 0; j < d; ++j)
      acc += normed[j] * gate_w_norm->at(j, i) + x[j] * gate_w_emb->at(j, i);
    gate_logits[i] = acc;
  }
  auto alpha = softmax_vec(gate_logits);

  auto shared_bias = params_.at("mix.bh");
  std::vector<double> mixed(v, 0.0);
  for (int i = 0; i < m; ++i) {
    auto head_w = params_.at("mix.h" + std::to_string(i) + ".w");
    std::vector<double> logits(v);
    for (int t = 0; t < v; ++t) logits[t] = shared_bias->v[t];
    for (int j = 0; j < d; ++j) {
      double hj = h[j];
      for (int t = 0; t < v; ++t) logits[t] += hj * head_w->at(j, t);
    }
    auto dist = softmax_vec(logits);
    for (int t = 0; t < v; ++t) mixed[t] += alpha[i] * dist[t];
  }
  return mixed;
}

nn::TensorPtr RewriterModel::sequence_loss(const text::TokenSequence& context,
                                           const text::TokenSequence& target) {
  if (target.ids.empty()) throw InternalError("sequence_loss: empty target");
  if (target.ids.back() != text::Vocabulary::kEosId)
    throw InternalError("sequence_loss: target must end with [EOS]");
  if (context.ids.empty()) throw InternalError("sequence_loss: empty context");

  std::vector<int> full = context.ids;
  full.insert(full.end(), target.ids.begin(), target.ids.end());
  if (static_cast<int>(full.size()) - 1 > config_.transformer.max_seq_len)
    throw DataError("training sequence of " + std::to_string(full.size()) +
                    " tokens exceeds max_seq_len " +
                    std::to_string(config_.transformer.max_seq_len));

  std::vector<int> input(full.begin(), full.end() - 1);
  auto out = nn::decoder_forward(input, params_, config_.transformer);
  auto dist = mixture_rows(out.hidden, out.gate_input, out.embeddings);

  std::vector<int> next(full.begin() + 1, full.end());
  std::vector<double> weights(next.size(), 0.0);
  for (size_t t = 0; t < next.size(); ++t) {
    bool in_target = t + 1 >= context.ids.size();
    if (in_target && next[t] != text::Vocabulary::kPadId) weights[t] = 1.0;
  }
  auto picked = nn::gather_cols(dist, next);
  return nn::masked_mean(nn::scale(nn::log_elem(picked), -1.0), weights);
}

double RewriterModel::train_step(
    const std::vector<std::pair<text::TokenSequence, text::TokenSequence>>& batch,
    double learning_rate) {
  if (batch.empty()) throw InternalError("train_step: empty batch");
  params_.zero_grad();
  nn::TensorPtr total;
  for (const auto& [context, target] : batch) {
    auto loss = sequence_loss(context, target);
    total = total ? nn::add(total, loss) : loss;
  }
  total = nn::scale(total, 1.0 / static_cast<double>(batch.size()));
  nn::backward(total);
  params_.optimize_step(learning_rate);
  return total->v[0];
}

RewriteResult RewriterModel::decode(const text::TokenSequence& context, int max_len) const {
  if (max_len <= 0) max_len = config_.max_rewrite_len;
  std::vector<int> seq = context.ids;
  RewriteResult result;
  std::vector<int> generated;
  bool found_eos = false;
  for (int step = 0; step < max_len; ++step) {
    if (static_cast<int>(seq.size()) >= config_.transformer.max_seq_len) break;
    auto out = nn::decoder_forward(seq, params_, config_.transformer);
    int last = out.hidden->rows - 1;
    auto dist = mixture_distribution(tensor_row(out.hidden, last), tensor_row(out.embeddings, last),
                                     tensor_row(out.gate_input, last));
    int best = 0;
    for (int t = 1; t < static_cast<int>(dist.size()); ++t)
      if (dist[t] > dist[best]) best = t;  // strict: ties keep the lowest id
    result.token_log_probs.push_back(std::log(dist[best]));
    if (best == text::Vocabulary::kEosId) {
      found_eos = true;
      break;
    }
    generated.push_back(best);
    seq.push_back(best);
  }
  result.truncated = !found_eos;
  text::TokenSequence out_seq;
  out_seq.ids = generated;
  result.rewritten_question = text::decode(out_seq, vocab_);
  return result;
}

std::vector<RewriteResult> RewriterModel::rewrite_dialogue(const data::Dialogue& dialogue,
                                                           HistoryMode mode) const {
  std::vector<RewriteResult> results;
  std::vector<std::string> history;
  int budget = config_.transformer.max_seq_len - config_.max_rewrite_len;
  for (int t = 0; t < static_cast<int>(dialogue.turns.size()); ++t) {
    if (mode == HistoryMode::kGoldHistory && t > 0) {
      const auto& prev = dialogue.turns[t - 1];
      if (!prev.human_rewrite)
        throw DataError("dialogue " + dialogue.topic_id + ": turn " + std::to_string(t - 1) +
                        " has no human rewrite for gold-history mode");
      history.push_back(*prev.human_rewrite);
    }
    auto context = assemble_context(dialogue, t, history, vocab_, config_.window,
                                    config_.include_answers, budget);
    auto result = decode(context, 0);
    result.was_copied = is_copy(result.rewritten_question, dialogue.turns[t].original_question);
    if (mode == HistoryMode::kRecursive) history.push_back(result.rewritten_question);
    results.push_back(std::move(result));
  }
  return results;
}

void RewriterModel::save(const std::string& path) const {
  nn::CheckpointHeader header;
  header.config = config_.transformer;
  header.vocab_hash = vocab_.hash();
  header.step = params_.step();
  header.module_tag = "rewriter";
  ordered_json extra;
  extra["mixture_components"] = config_.mixture_components;
  extra["window"] = config_.window;
  extra["include_answers"] = config_.include_answers;
  extra["max_rewrite_len"] = config_.max_rewrite_len;
  header.extra = extra.dump();
  nn::save_checkpoint(params_, header, path);
}

RewriterModel RewriterModel::load(const std::string& path, text::Vocabulary vocab) {
  nn::ParameterStore probe(0);
  auto header = nn::load_checkpoint(probe, path);
  if (header.module_tag != "rewriter")
    throw DataError(path + ": checkpoint is a \"" + header.module_tag + "\" model, not a rewriter");
  if (header.vocab_hash != vocab.hash())
    throw DataError(path + ": checkpoint was trained with a different vocabulary");

  RewriterConfig config;
  config.transformer = header.config;
  try {
    auto extra = ordered_json::parse(header.extra);
    config.mixture_components = extra.at("mixture_components").get<int>();
    config.window = extra.at("window").get<int>();
    config.include_answers = extra.at("include_answers").get<bool>();
    config.max_rewrite_len = extra.at("max_rewrite_len").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad rewriter metadata: " + e.what());
  }

  RewriterModel model(std::move(vocab), config, 0);
  nn::load_checkpoint(model.params_, path);
  return model;
}

void write_rewrite_file(const std::vector<RewriteRecord>& records, const std::string& path) {
  std::string out;
  for (const auto& r : records) {
    ordered_json j;
    j["topic_id"] = r.topic_id;
    j["turn_id"] = r.turn_id;
    j["rewrite"] = r.rewrite;
    j["was_copied"] = r.was_copied;
    out += j.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

std::vector<RewriteRecord> load_rewrite_file(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<RewriteRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = ordered_json::parse(line);
      RewriteRecord r;
      r.topic_id = j.at("topic_id").get<std::string>();
      r.turn_id = j.at("turn_id").get<int>();
      r.rewrite = j.at("rewrite").get<std::string>();
      r.was_copied = j.at("was_copied").get<bool>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ", line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::string baseline_original(const data::Turn& turn) { return turn.original_question; }

std::string baseline_kdt(const data::Dialogue& dialogue, int turn_index, int k) {
  if (turn_index < 0 || turn_index >= static_cast<int>(dialogue.turns.size()))
    throw InternalError("baseline_kdt: turn index out of range");
  if (k < 0) throw InternalError("baseline_kdt: negative k");
  std::string out;
  int first = std::max(0, turn_index - k);
  for (int t = first; t < turn_index; ++t) {
    out += dialogue.turns[t].original_question;
    out += " [SEP] ";
  }
  out += dialogue.turns[turn_index].original_question;
  return out;
}

std::string baseline_kdt_star(const data::Dialogue& dialogue, int turn_index, int k,
                              const std::function<double(const std::string&)>& idf,
                              const text::Analyzer& analyzer, double idf_threshold) {
  if (turn_index < 0 || turn_index >= static_cast<int>(dialogue.turns.size()))
    throw InternalError("baseline_kdt_star: turn index out of range");
  if (k < 0) throw InternalError("baseline_kdt_star: negative k");

  const std::string& current = dialogue.turns[turn_index].original_question;
  std::set<std::string> present;
  for (const auto& term : analyzer.analyze(current)) present.insert(term);

  std::string out = current;
  int first = std::max(0, turn_index - k);
  for (int t = first; t < turn_index; ++t) {
    for (const auto& term : analyzer.analyze(dialogue.turns[t].original_question)) {
      if (present.count(term)) continue;  // also deduplicates across history
      if (idf(term) <= idf_threshold) continue;
      present.insert(term);
      out += ' ';
      out += term;
    }
  }
  return out;
}

}  // namespace cqr::rewrite
