#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cqr/data.hpp"
#include "cqr/text.hpp"
#include "cqr/transformer.hpp"

namespace cqr::retrieval {

struct RetrievalConfig {
  double k1 = 0.82;
  double b = 0.68;
  int top_k = 1000;

  void validate() const;
};

/// Term postings plus per-passage stats and texts. Passage length is the
/// analyzed term count, the same unit tf is measured in.
class InvertedIndex {
 public:
  struct Posting {
    std::string passage_id;
    int tf = 0;
    bool operator==(const Posting&) const = default;
  };

  static InvertedIndex build(const std::vector<data::Passage>& passages,
                             const text::Analyzer& analyzer);
  /// Streaming build from a collection TSV file.
  static InvertedIndex build_from_file(const std::string& collection_path,
                                       const text::Analyzer& analyzer);

  size_t collection_size() const { return doc_length_.size(); }
  double avgdl() const { return avgdl_; }
  int df(const std::string& term) const;
  double idf(const std::string& term) const;
  int tf(const std::string& term, const std::string& passage_id) const;
  long doc_length(const std::string& passage_id) const;
  bool contains(const std::string& passage_id) const;
  const std::string& passage_text(const std::string& passage_id) const;
  const std::map<std::string, std::vector<Posting>>& postings() const { return postings_; }
  const text::Analyzer& analyzer() const { return analyzer_; }

  double bm25_score(const std::vector<std::string>& query_terms, const std::string& passage_id,
                    const RetrievalConfig& config) const;
  /// Analyzes the question, scores matching passages, orders by score
  /// descending then passage_id ascending, truncates at top_k.
  data::RankedList retrieve(const std::string& question, const RetrievalConfig& config,
                            const std::string& query_id = "", const std::string& tag = "bm25") const;

  void save(const std::string& dir) const;
  static InvertedIndex load(const std::string& dir);

 private:
  explicit InvertedIndex(text::Analyzer analyzer) : analyzer_(std::move(analyzer)) {}
  text::Analyzer analyzer_;
  std::map<std::string, std::vector<Posting>> postings_;
  std::map<std::string, long> doc_length_;
  std::map<std::string, std::string> texts_;
  double avgdl_ = 0.0;
};

/// (question text, passage text) -> relevance score in [0,1].
using RerankScorer = std::function<double(const std::string&, const std::string&)>;

/// Reorders the candidates by scorer descending, ties keeping the prior
/// order; ranks reassigned from 1. The passage set never changes.
data::RankedList rerank(const std::string& question, const data::RankedList& candidates,
                        const RerankScorer& scorer, const InvertedIndex& index,
                        const std::string& tag);

struct CrossEncoderConfig {
  nn::TransformerConfig transformer;  // bidirectional side

  void validate() const;
};

class CrossEncoderModel {
 public:
  struct Example {
    std::string question;
    std::string passage;
    double label = 0.0;  // 1 = relevant
  };

  CrossEncoderModel(text::Vocabulary vocab, CrossEncoderConfig config, uint64_t seed);

  /// [CLS] question [SEP] passage, passage truncated from the end to fit.
  std::vector<int> encode_pair(const std::string& question, const std::string& passage) const;
  /// Sigmoid of the classification projection of the [CLS] hidden state.
  double score(const std::string& question, const std::string& passage) const;
  nn::TensorPtr logit_graph(const std::vector<int>& ids);
  /// Mean binary cross-entropy over the batch; one optimizer step.
  double train_step(const std::vector<Example>& batch, double learning_rate);

  RerankScorer as_scorer() const;

  void save(const std::string& path) const;
  static CrossEncoderModel load(const std::string& path, text::Vocabulary vocab);

  const CrossEncoderConfig& config() const { return config_; }
  const text::Vocabulary& vocab() const { return vocab_; }
  nn::ParameterStore& params() { return params_; }

 private:
  text::Vocabulary vocab_;
  CrossEncoderConfig config_;
  mutable nn::ParameterStore params_;
  void ensure_parameters();
};

/// Full-batch training until `steps`; requires both labels in the set.
double train_reranker(CrossEncoderModel& model, const std::vector<CrossEncoderModel::Example>& examples,
                      int steps, double learning_rate);

/// Labeled pairs for one query: the relevant passages (grade >= cutoff) as
/// positives, the first BM25 candidates not labeled relevant as negatives.
std::vector<CrossEncoderModel::Example> build_reranker_examples(
    const std::string& question, const std::string& query_id, const data::Qrels& qrels,
    const InvertedIndex& index, const RetrievalConfig& config, int negatives_per_query,
    int relevance_cutoff = 2);

}  // namespace cqr::retrieval
