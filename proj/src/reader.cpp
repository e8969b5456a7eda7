#include "cqr/reader.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "cqr/common.hpp"
#include "cqr/rewriter.hpp"

namespace cqr::reader {
namespace {

using ordered_json = nlohmann::ordered_json;

}  // namespace

std::string to_string(QaInputMode mode) {
  switch (mode) {
    case QaInputMode::kOriginal: return "original";
    case QaInputMode::kOriginalKdt: return "original-kdt";
    case QaInputMode::kRewrite: return "rewrite";
    case QaInputMode::kHuman: return "human";
  }
  throw InternalError("unknown qa input mode");
}

QaInputMode parse_qa_input_mode(const std::string& name) {
  if (name == "original") return QaInputMode::kOriginal;
  if (name == "original-kdt") return QaInputMode::kOriginalKdt;
  if (name == "rewrite") return QaInputMode::kRewrite;
  if (name == "human") return QaInputMode::kHuman;
  throw DataError("unknown qa input mode \"" + name +
                  "\" (expected original, original-kdt, rewrite, or human)");
}

void ReaderConfig::validate() const {
  transformer.validate();
  if (transformer.causal) throw DataError("reader: the encoder side must be bidirectional");
  if (max_span_len < 1) throw DataError("reader: max_span_len must be at least 1");
}

SpanPrediction predict_span(const std::vector<double>& start_probs,
                            const std::vector<double>& end_probs, int passage_first,
                            int passage_last, int max_span_len) {
  if (start_probs.size() != end_probs.size() || start_probs.empty())
    throw InternalError("predict_span: distribution sizes disagree");
  if (max_span_len < 1) throw InternalError("predict_span: max_span_len must be at least 1");
  int n = static_cast<int>(start_probs.size());
  if (passage_first < 0 || passage_last >= n)
    throw InternalError("predict_span: passage region out of range");

  double na_score = start_probs[0] + end_probs[0];
  double best = -std::numeric_limits<double>::infinity();
  int best_i = 0, best_j = 0;
  bool found = false;
  for (int i = std::max(passage_first, 1); i <= passage_last; ++i) {
    int j_hi = std::min(passage_last, i + max_span_len - 1);
    for (int j = i; j <= j_hi; ++j) {
      double s = start_probs[i] + end_probs[j];
      if (s > best) {
        best = s;
        best_i = i;
        best_j = j;
        found = true;
      }
    }
  }

  SpanPrediction out;
  if (!found || na_score >= best) {
    out.is_no_answer = true;
    out.start_token = 0;
    out.end_token = 0;
    out.score = na_score;
  } else {
    out.is_no_answer = false;
    out.start_token = best_i;
    out.end_token = best_j;
    out.score = best;
  }
  return out;
}

ReaderModel::ReaderModel(text::Vocabulary vocab, ReaderConfig config, uint64_t seed)
    : vocab_(std::move(vocab)), config_(std::move(config)), params_(seed) {
  config_.validate();
  ensure_parameters();
}

void ReaderModel::ensure_parameters() {
  const auto& t = config_.transformer;
  params_.get_or_create("wte", static_cast<int>(vocab_.size()), t.model_dim,
                        nn::ParameterStore::Init::kNormal);
  auto saved_step = params_.step();
  nn::encoder_forward({text::Vocabulary::kClsId, text::Vocabulary::kSepId}, params_, t);
  params_.get_or_create("span.ws", t.model_dim, 1, nn::ParameterStore::Init::kNormal);
  params_.get_or_create("span.we", t.model_dim, 1, nn::ParameterStore::Init::kNormal);
  params_.get_or_create("span.bs", 1, 1, nn::ParameterStore::Init::kZero);
  params_.get_or_create("span.be", 1, 1, nn::ParameterStore::Init::kZero);
  params_.zero_grad();
  params_.set_step(saved_step);
}

ReaderInput ReaderModel::build_input(const std::string& question, const std::string& passage) const {
  auto q = text::encode(question, vocab_).ids;
  auto p = text::encode_with_offsets(passage, vocab_);

  size_t head = 2 + q.size();  // [CLS] question [SEP]
  size_t max_len = static_cast<size_t>(config_.transformer.max_seq_len);
  if (head > max_len)
    throw DataError("question of " + std::to_string(q.size()) + " tokens does not fit the reader window");
  size_t keep = std::min(p.ids.size(), max_len - head);

  ReaderInput input;
  input.passage_text = passage;
  input.truncated = keep < p.ids.size();
  input.ids.reserve(head + keep);
  input.ids.push_back(text::Vocabulary::kClsId);
  input.ids.insert(input.ids.end(), q.begin(), q.end());
  input.ids.push_back(text::Vocabulary::kSepId);
  input.ids.insert(input.ids.end(), p.ids.begin(), p.ids.begin() + keep);

  input.char_alignment.assign(input.ids.size(), {0, 0});
  if (keep > 0) {
    input.passage_first = static_cast<int>(head);
    input.passage_last = static_cast<int>(head + keep) - 1;
    for (size_t i = 0; i < keep; ++i) input.char_alignment[head + i] = p.offsets[i];
  } else {
    input.passage_first = 0;
    input.passage_last = -1;
  }
  return input;
}

std::optional<std::pair<int, int>> ReaderModel::align_gold_span(const ReaderInput& input,
                                                                size_t char_start,
                                                                size_t char_end) const {
  if (char_end <= char_start) return std::nullopt;
  if (input.passage_last < input.passage_first) return std::nullopt;
  // Truncated inputs lose the tail; a span reaching past the kept region is gone.
  if (char_end > input.char_alignment[input.passage_last].second) return std::nullopt;

  int start = -1, end = -1;
  for (int t = input.passage_first; t <= input.passage_last; ++t) {
    const auto& [b, e] = input.char_alignment[t];
    if (start < 0 && e > char_start) start = t;
    if (b < char_end) end = t;
  }
  if (start < 0 || end < 0 || end < start) return std::nullopt;
  return std::make_pair(start, end);
}

nn::TensorPtr ReaderModel::distributions_graph(const ReaderInput& input, bool start_side) const {
  auto hidden = nn::encoder_forward(input.ids, params_, config_.transformer);
  auto w = params_.at(start_side ? "span.ws" : "span.we");
  auto b = params_.at(start_side ? "span.bs" : "span.be");
  auto logits = nn::transpose(nn::add_rowvec(nn::matmul(hidden, w), b));

  std::vector<double> mask(input.ids.size(), 0.0);
  mask[0] = 1.0;
  for (int t = input.passage_first; t <= input.passage_last && t >= 0; ++t) mask[t] = 1.0;
  return nn::masked_softmax_rows(logits, mask);
}

std::pair<std::vector<double>, std::vector<double>> ReaderModel::span_distributions(
    const ReaderInput& input) const {
  auto s = distributions_graph(input, true);
  auto e = distributions_graph(input, false);
  return {s->v, e->v};
}

nn::TensorPtr ReaderModel::loss_graph(const ReaderInput& input, int gold_start, int gold_end) {
  int n = static_cast<int>(input.ids.size());
  auto in_support = [&](int t) {
    return t == 0 || (t >= input.passage_first && t <= input.passage_last);
  };
  if (gold_start < 0 || gold_start >= n || gold_end < 0 || gold_end >= n ||
      !in_support(gold_start) || !in_support(gold_end))
    throw InternalError("reader loss: gold position outside the softmax support");

  auto hidden = nn::encoder_forward(input.ids, params_, config_.transformer);
  std::vector<double> mask(input.ids.size(), 0.0);
  mask[0] = 1.0;
  for (int t = input.passage_first; t <= input.passage_last && t >= 0; ++t) mask[t] = 1.0;

  auto side = [&](const char* wname, const char* bname, int gold) {
    auto logits = nn::transpose(nn::add_rowvec(nn::matmul(hidden, params_.at(wname)), params_.at(bname)));
    auto probs = nn::masked_softmax_rows(logits, mask);
    return nn::log_elem(nn::gather_cols(probs, {gold}));
  };
  return nn::scale(nn::add(side("span.ws", "span.bs", gold_start), side("span.we", "span.be", gold_end)),
                   -1.0);
}

SpanPrediction ReaderModel::predict(const ReaderInput& input) const {
  auto [s, e] = span_distributions(input);
  auto pred = predict_span(s, e, input.passage_first, input.passage_last, config_.max_span_len);
  if (!pred.is_no_answer) {
    size_t begin = input.char_alignment[pred.start_token].first;
    size_t end = input.char_alignment[pred.end_token].second;
    pred.answer_text = text::utf8::substr_scalars(input.passage_text, begin, end);
  }
  return pred;
}

ReaderTrainStats ReaderModel::train_step(const std::vector<ReaderExample>& batch,
                                         double learning_rate) {
  if (batch.empty()) throw DataError("reader train step: empty batch");
  ReaderTrainStats stats;
  params_.zero_grad();
  std::vector<nn::TensorPtr> losses;
  for (const auto& ex : batch) {
    auto input = build_input(ex.question, ex.passage);
    int gold_start = 0, gold_end = 0;
    if (ex.has_answer) {
      auto aligned = align_gold_span(input, ex.char_start, ex.char_end);
      if (!aligned) {
        ++stats.skipped;
        continue;
      }
      gold_start = aligned->first;
      gold_end = aligned->second;
    }
    losses.push_back(loss_graph(input, gold_start, gold_end));
  }
  stats.used = static_cast<int>(losses.size());
  if (losses.empty()) return stats;

  nn::TensorPtr total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
  auto mean = nn::scale(total, 1.0 / static_cast<double>(losses.size()));
  nn::backward(mean);
  params_.optimize_step(learning_rate);
  stats.loss = mean->v[0];
  return stats;
}

void ReaderModel::save(const std::string& path) const {
  nn::CheckpointHeader header;
  header.config = config_.transformer;
  header.vocab_hash = vocab_.hash();
  header.step = params_.step();
  header.module_tag = "reader";
  ordered_json extra;
  extra["max_span_len"] = config_.max_span_len;
  header.extra = extra.dump();
  nn::save_checkpoint(params_, header, path);
}

ReaderModel ReaderModel::load(const std::string& path, text::Vocabulary vocab) {
  nn::ParameterStore probe(0);
  auto header = nn::load_checkpoint(probe, path);
  if (header.module_tag != "reader")
    throw DataError(path + ": checkpoint is a \"" + header.module_tag + "\" model, not a reader");
  if (header.vocab_hash != vocab.hash())
    throw DataError(path + ": checkpoint was trained with a different vocabulary");

  ReaderConfig config;
  config.transformer = header.config;
  try {
    auto extra = ordered_json::parse(header.extra);
    config.max_span_len = extra.at("max_span_len").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad reader metadata: " + e.what());
  }

  ReaderModel model(std::move(vocab), config, 0);
  nn::load_checkpoint(model.params_, path);
  return model;
}

ReaderTrainStats train_reader(ReaderModel& model, const std::vector<ReaderExample>& dataset,
                              int steps, double learning_rate) {
  if (dataset.empty()) throw DataError("reader training needs a non-empty dataset");
  ReaderTrainStats stats;
  for (int s = 0; s < steps; ++s) stats = model.train_step(dataset, learning_rate);
  return stats;
}

std::string reader_question(const data::Dialogue& dialogue, int turn_index, QaInputMode mode,
                            int k_dt,
                            const std::map<std::pair<std::string, int>, std::string>* rewrites) {
  if (turn_index < 0 || turn_index >= static_cast<int>(dialogue.turns.size()))
    throw InternalError("reader_question: turn index out of range");
  const auto& turn = dialogue.turns[turn_index];
  switch (mode) {
    case QaInputMode::kOriginal:
      return turn.original_question;
    case QaInputMode::kOriginalKdt:
      return rewrite::baseline_kdt(dialogue, turn_index, k_dt);
    case QaInputMode::kRewrite: {
      if (!rewrites) throw DataError("rewrite mode needs a rewrite file");
      auto it = rewrites->find({dialogue.topic_id, turn.turn_id});
      if (it == rewrites->end())
        throw DataError("no rewrite for topic " + dialogue.topic_id + " turn " +
                        std::to_string(turn.turn_id));
      return it->second;
    }
    case QaInputMode::kHuman:
      if (!turn.human_rewrite)
        throw DataError("topic " + dialogue.topic_id + " turn " + std::to_string(turn.turn_id) +
                        " has no human rewrite");
      return *turn.human_rewrite;
  }
  throw InternalError("unknown qa input mode");
}

void write_predictions(const std::vector<ReaderPrediction>& predictions, const std::string& path) {
  std::string out;
  for (const auto& p : predictions) {
    ordered_json j;
    j["topic_id"] = p.topic_id;
    j["turn_id"] = p.turn_id;
    j["qa_input_mode"] = p.qa_input_mode;
    if (p.answer)
      j["answer"] = *p.answer;
    else
      j["answer"] = nullptr;
    j["score"] = p.score;
    out += j.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

std::vector<ReaderPrediction> load_predictions(const std::string& path) {
  std::vector<ReaderPrediction> out;
  std::istringstream in(read_file(path));
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const ordered_json::exception& e) {
      throw DataError(path + ", line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object()) throw DataError(path + ", line " + std::to_string(line_no) + ": expected an object");
    try {
      ReaderPrediction p;
      p.topic_id = j.at("topic_id").get<std::string>();
      p.turn_id = j.at("turn_id").get<int>();
      p.qa_input_mode = j.at("qa_input_mode").get<std::string>();
      if (!j.at("answer").is_null()) p.answer = j.at("answer").get<std::string>();
      p.score = j.at("score").get<double>();
      out.push_back(std::move(p));
    } catch (const ordered_json::exception& e) {
      throw DataError(path + ", line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cqr::reader
