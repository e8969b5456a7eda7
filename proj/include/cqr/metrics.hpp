#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cqr/data.hpp"
#include "cqr/text.hpp"

namespace cqr::metrics {

/// Lowercased word tokens with punctuation tokens dropped. The shared
/// normalizer behind ROUGE and rewrite exact match.
std::vector<std::string> metric_tokens(const std::string& text);
/// metric_tokens plus article removal (a/an/the) and in-word punctuation
/// stripping, for answer comparison.
std::vector<std::string> answer_tokens(const std::string& text);

double rouge1_recall(const std::string& candidate, const std::string& reference);
int rewrite_exact_match(const std::string& candidate, const std::string& reference);

/// nullopt means No-Answer on either side.
double answer_em(const std::optional<std::string>& prediction, const std::optional<std::string>& gold);
double answer_f1(const std::optional<std::string>& prediction, const std::optional<std::string>& gold);

using Embedder = std::function<std::vector<double>(const std::string&)>;

/// L2-normalized per-vocabulary-id token counts.
Embedder count_embedder(const text::Vocabulary& vocab);
double cosine(const std::vector<double>& a, const std::vector<double>& b);
double similarity(const std::string& candidate, const std::string& reference, const Embedder& embedder);

struct RewriteEval {
  double rouge1_recall = 0.0;
  int exact_match = 0;
  std::optional<double> similarity;
};

RewriteEval evaluate_rewrite(const std::string& candidate, const std::string& reference,
                             const Embedder* embedder = nullptr);

struct RewriteEvalSummary {
  double rouge1_recall = 0.0;  // means over pairs
  double exact_match = 0.0;
  std::optional<double> similarity;
  int count = 0;
};

RewriteEvalSummary evaluate_rewrites(const std::vector<std::pair<std::string, std::string>>& pairs,
                                     const Embedder* embedder = nullptr);

struct RetrievalMetricsConfig {
  int cutoff_grade = 2;
  int depth = 1000;
  int ndcg_k = 3;
  bool ndcg_binarize = false;

  void validate() const;
};

/// Judgments for one query: passage_id -> grade.
using QueryJudgments = std::map<std::string, int>;

/// nullopt when the query has no relevant passage under the cutoff.
std::optional<double> average_precision(const data::RankedList& run, const QueryJudgments& judgments,
                                        const RetrievalMetricsConfig& config);
double reciprocal_rank(const data::RankedList& run, const QueryJudgments& judgments,
                       const RetrievalMetricsConfig& config);
double precision_at_1(const data::RankedList& run, const QueryJudgments& judgments,
                      const RetrievalMetricsConfig& config);
/// nullopt when the ideal DCG is zero (nothing judged above grade 0).
std::optional<double> ndcg_at_k(const data::RankedList& run, const QueryJudgments& judgments,
                                const RetrievalMetricsConfig& config);

struct QueryEval {
  std::string query_id;
  std::optional<double> ap;
  std::optional<double> rr;
  std::optional<double> p1;
  std::optional<double> ndcg;
};

struct RetrievalEval {
  double map = 0.0;
  double mrr = 0.0;
  double ndcg3 = 0.0;
  double p1 = 0.0;
  int evaluated = 0;       // queries behind map/mrr/p1
  int ndcg_evaluated = 0;  // queries behind ndcg3
  std::vector<std::string> missing_queries;      // in the run, absent from qrels
  std::vector<std::string> no_relevant_queries;  // judged but nothing at or above the cutoff
  std::vector<std::string> zero_idcg_queries;    // all judged grades zero
  std::vector<QueryEval> per_query;
};

RetrievalEval evaluate_run(const std::vector<data::RankedList>& run, const data::Qrels& qrels,
                           const RetrievalMetricsConfig& config);

/// Eleven (recall level, interpolated precision) points macro-averaged over
/// queries with at least one relevant passage.
std::vector<std::pair<double, double>> pr_curve(const std::vector<data::RankedList>& run,
                                                const data::Qrels& qrels,
                                                const RetrievalMetricsConfig& config);

struct AnswerPair {
  std::optional<std::string> prediction;  // nullopt = No-Answer
  std::optional<std::string> gold;
};

struct ExtractiveEval {
  double em = 0.0;
  double f1 = 0.0;
  std::optional<double> na_acc;  // over gold-No-Answer pairs; nullopt when none
  int total = 0;
  int na_total = 0;
};

ExtractiveEval evaluate_extractive(const std::vector<AnswerPair>& pairs);

std::string retrieval_report_json(const RetrievalEval& eval);
std::string pr_points_csv(const std::vector<std::pair<double, double>>& points);

}  // namespace cqr::metrics
