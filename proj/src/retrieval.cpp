#include "cqr/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cqr/common.hpp"

namespace cqr::retrieval {
namespace {

using ordered_json = nlohmann::ordered_json;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void RetrievalConfig::validate() const {
  if (k1 < 0.0) throw DataError("retrieval config: k1 must be non-negative");
  if (b < 0.0 || b > 1.0) throw DataError("retrieval config: b must lie in [0, 1]");
  if (top_k <= 0) throw DataError("retrieval config: top_k must be positive");
}

InvertedIndex InvertedIndex::build(const std::vector<data::Passage>& passages,
                                   const text::Analyzer& analyzer) {
  InvertedIndex index(analyzer);
  for (const auto& p : passages) {
    if (index.doc_length_.count(p.passage_id))
      throw DataError("duplicate passage id \"" + p.passage_id + "\" while building index");
    auto terms = analyzer.analyze(p.text);
    std::map<std::string, int> counts;
    for (const auto& t : terms) ++counts[t];
    for (const auto& [term, tf] : counts) index.postings_[term].push_back({p.passage_id, tf});
    index.doc_length_[p.passage_id] = static_cast<long>(terms.size());
    index.texts_[p.passage_id] = p.text;
  }
  for (auto& [term, plist] : index.postings_)
    std::sort(plist.begin(), plist.end(),
              [](const Posting& a, const Posting& b) { return a.passage_id < b.passage_id; });
  long total = 0;
  for (const auto& [pid, dl] : index.doc_length_) total += dl;
  index.avgdl_ = index.doc_length_.empty() ? 0.0 : static_cast<double>(total) / index.doc_length_.size();
  return index;
}

InvertedIndex InvertedIndex::build_from_file(const std::string& collection_path,
                                             const text::Analyzer& analyzer) {
  InvertedIndex index(analyzer);
  long total = 0;
  data::scan_collection(collection_path, [&](const data::Passage& p) {
    if (index.doc_length_.count(p.passage_id))
      throw DataError(collection_path + ": duplicate passage id \"" + p.passage_id + "\"");
    auto terms = analyzer.analyze(p.text);
    std::map<std::string, int> counts;
    for (const auto& t : terms) ++counts[t];
    for (const auto& [term, tf] : counts) index.postings_[term].push_back({p.passage_id, tf});
    index.doc_length_[p.passage_id] = static_cast<long>(terms.size());
    index.texts_[p.passage_id] = p.text;
    total += static_cast<long>(terms.size());
  });
  for (auto& [term, plist] : index.postings_)
    std::sort(plist.begin(), plist.end(),
              [](const Posting& a, const Posting& b) { return a.passage_id < b.passage_id; });
  index.avgdl_ = index.doc_length_.empty() ? 0.0 : static_cast<double>(total) / index.doc_length_.size();
  return index;
}

int InvertedIndex::df(const std::string& term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? 0 : static_cast<int>(it->second.size());
}

double InvertedIndex::idf(const std::string& term) const {
  double n = static_cast<double>(collection_size());
  double d = static_cast<double>(df(term));
  return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

int InvertedIndex::tf(const std::string& term, const std::string& passage_id) const {
  auto it = postings_.find(term);
  if (it == postings_.end()) return 0;
  const auto& plist = it->second;
  auto pos = std::lower_bound(plist.begin(), plist.end(), passage_id,
                              [](const Posting& p, const std::string& pid) { return p.passage_id < pid; });
  return (pos != plist.end() && pos->passage_id == passage_id) ? pos->tf : 0;
}

long InvertedIndex::doc_length(const std::string& passage_id) const {
  auto it = doc_length_.find(passage_id);
  if (it == doc_length_.end()) throw DataError("unknown passage id \"" + passage_id + "\"");
  return it->second;
}

bool InvertedIndex::contains(const std::string& passage_id) const {
  return doc_length_.count(passage_id) != 0;
}

const std::string& InvertedIndex::passage_text(const std::string& passage_id) const {
  auto it = texts_.find(passage_id);
  if (it == texts_.end()) throw DataError("unknown passage id \"" + passage_id + "\"");
  return it->second;
}

double InvertedIndex::bm25_score(const std::vector<std::string>& query_terms,
                                 const std::string& passage_id, const RetrievalConfig& config) const {
  config.validate();
  double dl = static_cast<double>(doc_length(passage_id));
  double score = 0.0;
  for (const auto& term : query_terms) {
    int t = tf(term, passage_id);
    if (t == 0) continue;
    double norm = 1.0 - config.b + config.b * dl / avgdl_;
    score += idf(term) * (t * (config.k1 + 1.0)) / (t + config.k1 * norm);
  }
  return score;
}

data::RankedList InvertedIndex::retrieve(const std::string& question, const RetrievalConfig& config,
                                         const std::string& query_id, const std::string& tag) const {
  config.validate();
  auto terms = analyzer_.analyze(question);
  std::map<std::string, double> scores;
  for (const auto& term : terms) {
    auto it = postings_.find(term);
    if (it == postings_.end()) continue;
    double idf_t = idf(term);
    for (const auto& posting : it->second) {
      double dl = static_cast<double>(doc_length_.at(posting.passage_id));
      double norm = 1.0 - config.b + config.b * dl / avgdl_;
      scores[posting.passage_id] +=
          idf_t * (posting.tf * (config.k1 + 1.0)) / (posting.tf + config.k1 * norm);
    }
  }
  std::vector<std::pair<std::string, double>> hits;
  hits.reserve(scores.size());
  for (const auto& [pid, s] : scores)
    if (s > 0.0) hits.emplace_back(pid, s);
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (hits.size() > static_cast<size_t>(config.top_k)) hits.resize(config.top_k);

  data::RankedList out;
  out.query_id = query_id;
  out.tag = tag;
  out.entries.reserve(hits.size());
  for (size_t i = 0; i < hits.size(); ++i)
    out.entries.push_back({hits[i].first, static_cast<int>(i) + 1, hits[i].second});
  return out;
}

void InvertedIndex::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError(dir + ": cannot create index directory: " + ec.message());

  ordered_json meta;
  meta["format"] = "cqr-index";
  meta["version"] = 1;
  meta["passage_count"] = collection_size();
  meta["avgdl"] = avgdl_;
  meta["stemming"] = analyzer_.stemming();
  atomic_write_file(dir + "/meta.json", meta.dump(2) + "\n");

  std::ostringstream lengths;
  for (const auto& [pid, dl] : doc_length_) lengths << pid << '\t' << dl << '\n';
  atomic_write_file(dir + "/doc_lengths.tsv", lengths.str());

  std::ostringstream posts;
  for (const auto& [term, plist] : postings_) {
    posts << term;
    for (const auto& p : plist) posts << '\t' << p.passage_id << ' ' << p.tf;
    posts << '\n';
  }
  atomic_write_file(dir + "/postings.txt", posts.str());

  std::ostringstream texts;
  for (const auto& [pid, body] : texts_) texts << pid << '\t' << body << '\n';
  atomic_write_file(dir + "/texts.tsv", texts.str());
}

InvertedIndex InvertedIndex::load(const std::string& dir) {
  ordered_json meta;
  try {
    meta = ordered_json::parse(read_file(dir + "/meta.json"));
  } catch (const ordered_json::exception& e) {
    throw DataError(dir + "/meta.json: " + e.what());
  }
  if (!meta.is_object() || meta.value("format", "") != "cqr-index")
    throw DataError(dir + "/meta.json: not an index directory");
  if (meta.value("version", 0) != 1)
    throw DataError(dir + "/meta.json: unsupported index version");
  bool stem = meta.value("stemming", false);

  InvertedIndex index(text::Analyzer::with_default_stopwords(stem));

  {
    std::istringstream in(read_file(dir + "/doc_lengths.tsv"));
    std::string line;
    size_t line_no = 0;
    long total = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw DataError(dir + "/doc_lengths.tsv, line " + std::to_string(line_no) + ": expected pid<TAB>length");
      std::string pid = line.substr(0, tab);
      long dl = 0;
      try {
        dl = std::stol(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw DataError(dir + "/doc_lengths.tsv, line " + std::to_string(line_no) + ": bad length");
      }
      if (!index.doc_length_.emplace(pid, dl).second)
        throw DataError(dir + "/doc_lengths.tsv, line " + std::to_string(line_no) + ": duplicate pid");
      total += dl;
    }
    index.avgdl_ = index.doc_length_.empty() ? 0.0 : static_cast<double>(total) / index.doc_length_.size();
  }

  {
    std::istringstream in(read_file(dir + "/postings.txt"));
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string term;
      if (!std::getline(fields, term, '\t') || term.empty())
        throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) + ": missing term");
      auto& plist = index.postings_[term];
      std::string cell;
      while (std::getline(fields, cell, '\t')) {
        auto space = cell.find(' ');
        if (space == std::string::npos)
          throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) + ": expected \"pid tf\"");
        Posting p;
        p.passage_id = cell.substr(0, space);
        try {
          p.tf = std::stoi(cell.substr(space + 1));
        } catch (const std::exception&) {
          throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) + ": bad tf");
        }
        if (p.tf <= 0)
          throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) + ": tf must be positive");
        if (!index.doc_length_.count(p.passage_id))
          throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) + ": unknown pid \"" +
                          p.passage_id + "\"");
        if (!plist.empty() && plist.back().passage_id >= p.passage_id)
          throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) +
                          ": postings not sorted by pid");
        plist.push_back(std::move(p));
      }
      if (plist.empty())
        throw DataError(dir + "/postings.txt, line " + std::to_string(line_no) + ": empty postings list");
    }
  }

  data::scan_collection(dir + "/texts.tsv", [&](const data::Passage& p) {
    if (!index.doc_length_.count(p.passage_id))
      throw DataError(dir + "/texts.tsv: pid \"" + p.passage_id + "\" missing from doc_lengths.tsv");
    index.texts_[p.passage_id] = p.text;
  });
  if (index.texts_.size() != index.doc_length_.size())
    throw DataError(dir + ": texts.tsv and doc_lengths.tsv disagree on the passage set");

  if (meta.contains("passage_count") &&
      meta["passage_count"].get<size_t>() != index.collection_size())
    throw DataError(dir + ": meta passage_count does not match doc_lengths.tsv");
  return index;
}

data::RankedList rerank(const std::string& question, const data::RankedList& candidates,
                        const RerankScorer& scorer, const InvertedIndex& index,
                        const std::string& tag) {
  struct Scored {
    const data::RankedList::Entry* entry;
    double score;
  };
  std::vector<Scored> scored;
  scored.reserve(candidates.entries.size());
  for (const auto& e : candidates.entries) {
    double s = scorer(question, index.passage_text(e.passage_id));
    if (!(s >= 0.0 && s <= 1.0))
      throw InternalError("reranker score " + std::to_string(s) + " for passage \"" + e.passage_id +
                          "\" is outside [0, 1]");
    scored.push_back({&e, s});
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });

  data::RankedList out;
  out.query_id = candidates.query_id;
  out.tag = tag;
  out.entries.reserve(scored.size());
  for (size_t i = 0; i < scored.size(); ++i)
    out.entries.push_back({scored[i].entry->passage_id, static_cast<int>(i) + 1, scored[i].score});
  return out;
}

void CrossEncoderConfig::validate() const {
  auto t = transformer;
  t.validate();
  if (transformer.causal) throw DataError("cross-encoder: the encoder side must be bidirectional");
}

CrossEncoderModel::CrossEncoderModel(text::Vocabulary vocab, CrossEncoderConfig config, uint64_t seed)
    : vocab_(std::move(vocab)), config_(std::move(config)), params_(seed) {
  config_.validate();
  ensure_parameters();
}

void CrossEncoderModel::ensure_parameters() {
  const auto& t = config_.transformer;
  params_.get_or_create("wte", static_cast<int>(vocab_.size()), t.model_dim,
                        nn::ParameterStore::Init::kNormal);
  auto saved_step = params_.step();
  nn::encoder_forward({text::Vocabulary::kClsId, text::Vocabulary::kSepId}, params_, t);
  params_.get_or_create("cls.w", t.model_dim, 1, nn::ParameterStore::Init::kNormal);
  params_.get_or_create("cls.b", 1, 1, nn::ParameterStore::Init::kZero);
  params_.zero_grad();
  params_.set_step(saved_step);
}

std::vector<int> CrossEncoderModel::encode_pair(const std::string& question,
                                                const std::string& passage) const {
  auto q = text::encode(question, vocab_).ids;
  auto p = text::encode(passage, vocab_).ids;
  size_t head = 2 + q.size();  // [CLS] question [SEP]
  size_t max_len = static_cast<size_t>(config_.transformer.max_seq_len);
  if (head > max_len)
    throw DataError("question of " + std::to_string(q.size()) +
                    " tokens does not fit the cross-encoder window");
  size_t room = max_len - head;
  if (p.size() > room) p.resize(room);

  std::vector<int> ids;
  ids.reserve(head + p.size());
  ids.push_back(text::Vocabulary::kClsId);
  ids.insert(ids.end(), q.begin(), q.end());
  ids.push_back(text::Vocabulary::kSepId);
  ids.insert(ids.end(), p.begin(), p.end());
  return ids;
}

nn::TensorPtr CrossEncoderModel::logit_graph(const std::vector<int>& ids) {
  auto hidden = nn::encoder_forward(ids, params_, config_.transformer);
  auto cls = nn::slice_rows(hidden, 0, 1);
  return nn::add(nn::matmul(cls, params_.at("cls.w")), params_.at("cls.b"));
}

double CrossEncoderModel::score(const std::string& question, const std::string& passage) const {
  auto ids = encode_pair(question, passage);
  auto hidden = nn::encoder_forward(ids, params_, config_.transformer);
  auto cls = nn::slice_rows(hidden, 0, 1);
  auto logit = nn::add(nn::matmul(cls, params_.at("cls.w")), params_.at("cls.b"));
  return sigmoid(logit->v[0]);
}

double CrossEncoderModel::train_step(const std::vector<Example>& batch, double learning_rate) {
  if (batch.empty()) throw DataError("cross-encoder train step: empty batch");
  params_.zero_grad();
  std::vector<nn::TensorPtr> losses;
  losses.reserve(batch.size());
  for (const auto& ex : batch) {
    auto logit = logit_graph(encode_pair(ex.question, ex.passage));
    losses.push_back(nn::bce_with_logits(logit, ex.label));
  }
  nn::TensorPtr total = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
  auto mean = nn::scale(total, 1.0 / static_cast<double>(batch.size()));
  nn::backward(mean);
  params_.optimize_step(learning_rate);
  return mean->v[0];
}

RerankScorer CrossEncoderModel::as_scorer() const {
  return [this](const std::string& question, const std::string& passage) {
    return score(question, passage);
  };
}

void CrossEncoderModel::save(const std::string& path) const {
  nn::CheckpointHeader header;
  header.config = config_.transformer;
  header.vocab_hash = vocab_.hash();
  header.step = params_.step();
  header.module_tag = "reranker";
  header.extra = "{}";
  nn::save_checkpoint(params_, header, path);
}

CrossEncoderModel CrossEncoderModel::load(const std::string& path, text::Vocabulary vocab) {
  nn::ParameterStore probe;
  auto header = nn::load_checkpoint(probe, path);
  if (header.module_tag != "reranker")
    throw DataError(path + ": checkpoint is a \"" + header.module_tag + "\" model, not a reranker");
  if (header.vocab_hash != vocab.hash())
    throw DataError(path + ": checkpoint was trained with a different vocabulary");
  CrossEncoderConfig config;
  config.transformer = header.config;
  CrossEncoderModel model(std::move(vocab), config, 0);
  nn::load_checkpoint(model.params_, path);
  return model;
}

double train_reranker(CrossEncoderModel& model, const std::vector<CrossEncoderModel::Example>& examples,
                      int steps, double learning_rate) {
  bool has_pos = false, has_neg = false;
  for (const auto& ex : examples) (ex.label > 0.5 ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg)
    throw DataError("reranker training needs both relevant and non-relevant examples");
  double loss = 0.0;
  for (int s = 0; s < steps; ++s) loss = model.train_step(examples, learning_rate);
  return loss;
}

std::vector<CrossEncoderModel::Example> build_reranker_examples(
    const std::string& question, const std::string& query_id, const data::Qrels& qrels,
    const InvertedIndex& index, const RetrievalConfig& config, int negatives_per_query,
    int relevance_cutoff) {
  auto judged = qrels.find(query_id);
  if (judged == qrels.end())
    throw DataError("no relevance judgments for query \"" + query_id + "\"");

  std::vector<CrossEncoderModel::Example> out;
  for (const auto& [pid, grade] : judged->second) {
    if (grade < relevance_cutoff) continue;
    if (!index.contains(pid)) continue;
    out.push_back({question, index.passage_text(pid), 1.0});
  }

  auto candidates = index.retrieve(question, config, query_id);
  int taken = 0;
  for (const auto& e : candidates.entries) {
    if (taken >= negatives_per_query) break;
    auto it = judged->second.find(e.passage_id);
    if (it != judged->second.end() && it->second >= relevance_cutoff) continue;
    out.push_back({question, index.passage_text(e.passage_id), 0.0});
    ++taken;
  }
  return out;
}

}  // namespace cqr::retrieval
