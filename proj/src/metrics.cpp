#include "cqr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

#include "cqr/common.hpp"

namespace cqr::metrics {
namespace {

using ordered_json = nlohmann::ordered_json;

bool is_article(const std::string& word) { return word == "a" || word == "an" || word == "the"; }

std::map<std::string, int> counts_of(const std::vector<std::string>& tokens) {
  std::map<std::string, int> counts;
  for (const auto& t : tokens) ++counts[t];
  return counts;
}

int clipped_overlap(const std::map<std::string, int>& a, const std::map<std::string, int>& b) {
  int overlap = 0;
  for (const auto& [token, count] : a) {
    auto it = b.find(token);
    if (it != b.end()) overlap += std::min(count, it->second);
  }
  return overlap;
}

int binarized_relevant_total(const QueryJudgments& judgments, int cutoff) {
  int total = 0;
  for (const auto& [pid, grade] : judgments)
    if (grade >= cutoff) ++total;
  return total;
}

bool entry_relevant(const QueryJudgments& judgments, const std::string& pid, int cutoff) {
  auto it = judgments.find(pid);
  return it != judgments.end() && it->second >= cutoff;
}

}  // namespace

std::vector<std::string> metric_tokens(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& token : text::tokenize(text))
    if (token.is_word) out.push_back(token.surface);
  return out;
}

std::vector<std::string> answer_tokens(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& token : text::tokenize(text)) {
    if (!token.is_word) continue;
    if (is_article(token.surface)) continue;
    auto scalars = text::utf8::decode(token.surface);
    std::vector<char32_t> kept;
    for (char32_t c : scalars)
      if ((c >= U'0' && c <= U'9') || (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || c >= 128)
        kept.push_back(c);
    if (kept.empty()) continue;
    out.push_back(text::utf8::encode(kept));
  }
  return out;
}

double rouge1_recall(const std::string& candidate, const std::string& reference) {
  auto ref = metric_tokens(reference);
  auto cand = metric_tokens(candidate);
  if (ref.empty()) return cand.empty() ? 1.0 : 0.0;
  int overlap = clipped_overlap(counts_of(ref), counts_of(cand));
  return static_cast<double>(overlap) / static_cast<double>(ref.size());
}

int rewrite_exact_match(const std::string& candidate, const std::string& reference) {
  return metric_tokens(candidate) == metric_tokens(reference) ? 1 : 0;
}

double answer_em(const std::optional<std::string>& prediction, const std::optional<std::string>& gold) {
  if (!prediction || !gold) return (!prediction && !gold) ? 1.0 : 0.0;
  return answer_tokens(*prediction) == answer_tokens(*gold) ? 1.0 : 0.0;
}

double answer_f1(const std::optional<std::string>& prediction, const std::optional<std::string>& gold) {
  if (!prediction || !gold) return (!prediction && !gold) ? 1.0 : 0.0;
  auto p = answer_tokens(*prediction);
  auto g = answer_tokens(*gold);
  if (p.empty() || g.empty()) return p == g ? 1.0 : 0.0;
  int overlap = clipped_overlap(counts_of(p), counts_of(g));
  if (overlap == 0) return 0.0;
  double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
  double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

Embedder count_embedder(const text::Vocabulary& vocab) {
  return [vocab](const std::string& input) {
    std::vector<double> v(vocab.size(), 0.0);
    for (int id : text::encode(input, vocab).ids) v[static_cast<size_t>(id)] += 1.0;
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm > 0.0) {
      norm = std::sqrt(norm);
      for (double& x : v) x /= norm;
    }
    return v;
  };
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError("cosine: embedding sizes disagree");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double similarity(const std::string& candidate, const std::string& reference,
                  const Embedder& embedder) {
  return cosine(embedder(candidate), embedder(reference));
}

RewriteEval evaluate_rewrite(const std::string& candidate, const std::string& reference,
                             const Embedder* embedder) {
  RewriteEval eval;
  eval.rouge1_recall = rouge1_recall(candidate, reference);
  eval.exact_match = rewrite_exact_match(candidate, reference);
  if (embedder) eval.similarity = similarity(candidate, reference, *embedder);
  return eval;
}

RewriteEvalSummary evaluate_rewrites(const std::vector<std::pair<std::string, std::string>>& pairs,
                                     const Embedder* embedder) {
  if (pairs.empty()) throw DataError("rewrite evaluation needs at least one pair");
  RewriteEvalSummary summary;
  double sim_sum = 0.0;
  for (const auto& [candidate, reference] : pairs) {
    auto eval = evaluate_rewrite(candidate, reference, embedder);
    summary.rouge1_recall += eval.rouge1_recall;
    summary.exact_match += eval.exact_match;
    if (eval.similarity) sim_sum += *eval.similarity;
  }
  summary.count = static_cast<int>(pairs.size());
  summary.rouge1_recall /= summary.count;
  summary.exact_match /= summary.count;
  if (embedder) summary.similarity = sim_sum / summary.count;
  return summary;
}

void RetrievalMetricsConfig::validate() const {
  if (depth < 1) throw DataError("retrieval metrics: depth must be at least 1");
  if (ndcg_k < 1) throw DataError("retrieval metrics: ndcg_k must be at least 1");
}

std::optional<double> average_precision(const data::RankedList& run, const QueryJudgments& judgments,
                                        const RetrievalMetricsConfig& config) {
  config.validate();
  int total_relevant = binarized_relevant_total(judgments, config.cutoff_grade);
  if (total_relevant == 0) return std::nullopt;
  double sum = 0.0;
  int seen_relevant = 0;
  for (const auto& e : run.entries) {
    if (e.rank > config.depth) break;
    if (entry_relevant(judgments, e.passage_id, config.cutoff_grade)) {
      ++seen_relevant;
      sum += static_cast<double>(seen_relevant) / static_cast<double>(e.rank);
    }
  }
  return sum / static_cast<double>(total_relevant);
}

double reciprocal_rank(const data::RankedList& run, const QueryJudgments& judgments,
                       const RetrievalMetricsConfig& config) {
  config.validate();
  for (const auto& e : run.entries) {
    if (e.rank > config.depth) break;
    if (entry_relevant(judgments, e.passage_id, config.cutoff_grade))
      return 1.0 / static_cast<double>(e.rank);
  }
  return 0.0;
}

double precision_at_1(const data::RankedList& run, const QueryJudgments& judgments,
                      const RetrievalMetricsConfig& config) {
  config.validate();
  if (run.entries.empty()) return 0.0;
  return entry_relevant(judgments, run.entries.front().passage_id, config.cutoff_grade) ? 1.0 : 0.0;
}

std::optional<double> ndcg_at_k(const data::RankedList& run, const QueryJudgments& judgments,
                                const RetrievalMetricsConfig& config) {
  config.validate();
  auto gain = [&](int grade) -> double {
    if (config.ndcg_binarize) return grade >= config.cutoff_grade ? 1.0 : 0.0;
    return static_cast<double>(grade);
  };

  std::vector<double> ideal;
  for (const auto& [pid, grade] : judgments) ideal.push_back(gain(grade));
  std::sort(ideal.begin(), ideal.end(), std::greater<double>());

  double idcg = 0.0;
  for (int r = 1; r <= config.ndcg_k && r <= static_cast<int>(ideal.size()); ++r)
    idcg += ideal[r - 1] / std::log2(static_cast<double>(r) + 1.0);
  if (idcg == 0.0) return std::nullopt;

  double dcg = 0.0;
  for (const auto& e : run.entries) {
    if (e.rank > config.ndcg_k) break;
    auto it = judgments.find(e.passage_id);
    if (it == judgments.end()) continue;
    dcg += gain(it->second) / std::log2(static_cast<double>(e.rank) + 1.0);
  }
  return dcg / idcg;
}

RetrievalEval evaluate_run(const std::vector<data::RankedList>& run, const data::Qrels& qrels,
                           const RetrievalMetricsConfig& config) {
  config.validate();
  RetrievalEval eval;
  double ap_sum = 0.0, rr_sum = 0.0, p1_sum = 0.0, ndcg_sum = 0.0;
  for (const auto& list : run) {
    auto judged = qrels.find(list.query_id);
    if (judged == qrels.end()) {
      eval.missing_queries.push_back(list.query_id);
      continue;
    }
    QueryEval q;
    q.query_id = list.query_id;

    q.ndcg = ndcg_at_k(list, judged->second, config);
    if (q.ndcg) {
      ndcg_sum += *q.ndcg;
      ++eval.ndcg_evaluated;
    } else {
      eval.zero_idcg_queries.push_back(list.query_id);
    }

    q.ap = average_precision(list, judged->second, config);
    if (q.ap) {
      q.rr = reciprocal_rank(list, judged->second, config);
      q.p1 = precision_at_1(list, judged->second, config);
      ap_sum += *q.ap;
      rr_sum += *q.rr;
      p1_sum += *q.p1;
      ++eval.evaluated;
    } else {
      eval.no_relevant_queries.push_back(list.query_id);
    }
    eval.per_query.push_back(std::move(q));
  }
  if (eval.per_query.empty())
    throw DataError("no run query has relevance judgments");
  if (eval.evaluated > 0) {
    eval.map = ap_sum / eval.evaluated;
    eval.mrr = rr_sum / eval.evaluated;
    eval.p1 = p1_sum / eval.evaluated;
  }
  if (eval.ndcg_evaluated > 0) eval.ndcg3 = ndcg_sum / eval.ndcg_evaluated;
  return eval;
}

std::vector<std::pair<double, double>> pr_curve(const std::vector<data::RankedList>& run,
                                                const data::Qrels& qrels,
                                                const RetrievalMetricsConfig& config) {
  config.validate();
  std::vector<double> level_sums(11, 0.0);
  int queries = 0;
  for (const auto& list : run) {
    auto judged = qrels.find(list.query_id);
    if (judged == qrels.end()) continue;
    int total_relevant = binarized_relevant_total(judged->second, config.cutoff_grade);
    if (total_relevant == 0) continue;

    // Precision and recall at every cutoff, then interpolated precision.
    std::vector<std::pair<double, double>> points;  // (recall, precision)
    int seen_relevant = 0;
    int examined = 0;
    for (const auto& e : list.entries) {
      if (e.rank > config.depth) break;
      ++examined;
      if (entry_relevant(judged->second, e.passage_id, config.cutoff_grade)) ++seen_relevant;
      points.emplace_back(static_cast<double>(seen_relevant) / total_relevant,
                          static_cast<double>(seen_relevant) / examined);
    }
    for (int level = 0; level <= 10; ++level) {
      double target = level / 10.0;
      double best = 0.0;
      for (const auto& [recall, precision] : points)
        if (recall >= target - 1e-12) best = std::max(best, precision);
      level_sums[level] += best;
    }
    ++queries;
  }
  if (queries == 0) throw DataError("no run query has a relevant passage to plot");

  std::vector<std::pair<double, double>> out;
  for (int level = 0; level <= 10; ++level)
    out.emplace_back(level / 10.0, level_sums[level] / queries);
  return out;
}

ExtractiveEval evaluate_extractive(const std::vector<AnswerPair>& pairs) {
  if (pairs.empty()) throw DataError("extractive evaluation needs at least one pair");
  ExtractiveEval eval;
  double em_sum = 0.0, f1_sum = 0.0;
  int na_correct = 0;
  for (const auto& pair : pairs) {
    em_sum += answer_em(pair.prediction, pair.gold);
    f1_sum += answer_f1(pair.prediction, pair.gold);
    if (!pair.gold) {
      ++eval.na_total;
      if (!pair.prediction) ++na_correct;
    }
  }
  eval.total = static_cast<int>(pairs.size());
  eval.em = em_sum / eval.total;
  eval.f1 = f1_sum / eval.total;
  if (eval.na_total > 0) eval.na_acc = static_cast<double>(na_correct) / eval.na_total;
  return eval;
}

std::string retrieval_report_json(const RetrievalEval& eval) {
  ordered_json j;
  j["map"] = eval.map;
  j["mrr"] = eval.mrr;
  j["ndcg3"] = eval.ndcg3;
  j["p1"] = eval.p1;
  j["evaluated"] = eval.evaluated;
  j["ndcg_evaluated"] = eval.ndcg_evaluated;
  j["missing_queries"] = eval.missing_queries;
  j["no_relevant_queries"] = eval.no_relevant_queries;
  j["zero_idcg_queries"] = eval.zero_idcg_queries;
  ordered_json per_query = ordered_json::array();
  for (const auto& q : eval.per_query) {
    ordered_json row;
    row["query_id"] = q.query_id;
    row["ap"] = q.ap ? ordered_json(*q.ap) : ordered_json(nullptr);
    row["rr"] = q.rr ? ordered_json(*q.rr) : ordered_json(nullptr);
    row["p1"] = q.p1 ? ordered_json(*q.p1) : ordered_json(nullptr);
    row["ndcg"] = q.ndcg ? ordered_json(*q.ndcg) : ordered_json(nullptr);
    per_query.push_back(row);
  }
  j["per_query"] = per_query;
  return j.dump(2) + "\n";
}

std::string pr_points_csv(const std::vector<std::pair<double, double>>& points) {
  std::string out = "recall,precision\n";
  for (const auto& [recall, precision] : points) {
    out += format_real(recall);
    out += ',';
    out += format_real(precision);
    out += '\n';
  }
  return out;
}

}  // namespace cqr::metrics
