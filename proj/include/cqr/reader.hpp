#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cqr/data.hpp"
#include "cqr/text.hpp"
#include "cqr/transformer.hpp"

namespace cqr::reader {

/// Which question text feeds the reader for a dialogue turn.
enum class QaInputMode { kOriginal, kOriginalKdt, kRewrite, kHuman };

std::string to_string(QaInputMode mode);
QaInputMode parse_qa_input_mode(const std::string& name);

struct ReaderConfig {
  nn::TransformerConfig transformer;  // bidirectional side
  int max_span_len = 30;

  void validate() const;
};

/// [CLS] question [SEP] passage with the passage's token indices and their
/// scalar offsets into the passage text.
struct ReaderInput {
  std::vector<int> ids;
  int passage_first = 0;  // inclusive; empty region when last < first
  int passage_last = -1;
  /// Per input position, [begin, end) scalar offsets into passage_text;
  /// (0, 0) outside the passage region.
  std::vector<std::pair<size_t, size_t>> char_alignment;
  std::string passage_text;
  bool truncated = false;
};

struct SpanPrediction {
  int start_token = 0;
  int end_token = 0;
  double score = 0.0;
  bool is_no_answer = true;
  std::string answer_text;
};

/// Best passage span by S_i + E_j with i <= j <= i + max_span_len - 1;
/// No-Answer when S_0 + E_0 ties or beats the best span. Ties between spans
/// go to the earlier start, then the shorter span. answer_text stays empty.
SpanPrediction predict_span(const std::vector<double>& start_probs,
                            const std::vector<double>& end_probs, int passage_first,
                            int passage_last, int max_span_len);

struct ReaderExample {
  std::string question;
  std::string passage;
  bool has_answer = false;
  size_t char_start = 0;  // scalar offsets into passage when has_answer
  size_t char_end = 0;
};

struct ReaderTrainStats {
  double loss = 0.0;
  int used = 0;
  int skipped = 0;  // gold span truncated away or unalignable
};

class ReaderModel {
 public:
  ReaderModel(text::Vocabulary vocab, ReaderConfig config, uint64_t seed);

  ReaderInput build_input(const std::string& question, const std::string& passage) const;
  /// Token positions covering [char_start, char_end); nullopt when the span
  /// falls outside the kept passage region.
  std::optional<std::pair<int, int>> align_gold_span(const ReaderInput& input, size_t char_start,
                                                     size_t char_end) const;

  /// Start and end probabilities over every input position; softmax support
  /// is {0} plus the passage region, question positions carry exactly 0.
  std::pair<std::vector<double>, std::vector<double>> span_distributions(const ReaderInput& input) const;
  nn::TensorPtr loss_graph(const ReaderInput& input, int gold_start, int gold_end);
  SpanPrediction predict(const ReaderInput& input) const;

  ReaderTrainStats train_step(const std::vector<ReaderExample>& batch, double learning_rate);

  void save(const std::string& path) const;
  static ReaderModel load(const std::string& path, text::Vocabulary vocab);

  const ReaderConfig& config() const { return config_; }
  const text::Vocabulary& vocab() const { return vocab_; }
  nn::ParameterStore& params() { return params_; }

 private:
  text::Vocabulary vocab_;
  ReaderConfig config_;
  mutable nn::ParameterStore params_;
  void ensure_parameters();
  nn::TensorPtr distributions_graph(const ReaderInput& input, bool start_side) const;
};

ReaderTrainStats train_reader(ReaderModel& model, const std::vector<ReaderExample>& dataset,
                              int steps, double learning_rate);

/// Question text for a turn under the given mode. kOriginalKdt prepends the
/// previous k original questions joined by [SEP]; kRewrite looks up
/// (topic_id, turn_id) in rewrites; kHuman uses the annotated rewrite.
std::string reader_question(const data::Dialogue& dialogue, int turn_index, QaInputMode mode,
                            int k_dt, const std::map<std::pair<std::string, int>, std::string>* rewrites);

struct ReaderPrediction {
  std::string topic_id;
  int turn_id = 0;
  std::string qa_input_mode;
  std::optional<std::string> answer;  // nullopt = No-Answer
  double score = 0.0;

  bool operator==(const ReaderPrediction&) const = default;
};

void write_predictions(const std::vector<ReaderPrediction>& predictions, const std::string& path);
std::vector<ReaderPrediction> load_predictions(const std::string& path);

}  // namespace cqr::reader
