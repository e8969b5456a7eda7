#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cqr::breakdown {

/// (topic_id, turn_id), the join key across prediction variants.
using QuestionKey = std::pair<std::string, int>;

/// One question's metric value under each input variant.
struct TripleOutcome {
  std::string topic_id;
  int turn_id = 0;
  double original = 0.0;
  double qr = 0.0;
  double human = 0.0;
  bool was_copied = false;
};

struct ThresholdSpec {
  enum class Op { kGreater, kGreaterEqual, kEqual };

  std::string label;  // shown verbatim in table headers
  Op op = Op::kGreaterEqual;
  double value = 0.0;

  bool passes(double metric) const;
};

/// "f1>0", "p@1=1", "ndcg3>=0.5": label kept verbatim, operator parsed out.
ThresholdSpec parse_threshold_spec(const std::string& spec);

/// Bucket 1..8 in the fixed row order (original, qr, human):
/// (xxx, vxx, xvx, vvx, xxv, vxv, xvv, vvv).
int classify(const TripleOutcome& outcome, const ThresholdSpec& threshold);

struct BucketCounts {
  std::array<int, 8> count{};
  std::array<int, 8> copied{};
};

struct BreakdownTable {
  std::vector<ThresholdSpec> thresholds;
  std::vector<BucketCounts> columns;  // parallel to thresholds
  int total = 0;
};

BreakdownTable build_breakdown_table(const std::vector<TripleOutcome>& outcomes,
                                     const std::vector<ThresholdSpec>& thresholds);

struct ErrorAttribution {
  int qa_errors = 0;        // rows 1..4: the answer fails even from the human rewrite
  int qr_errors = 0;        // rows 5..6: human rewrite works, model rewrite does not
  int true_positives = 0;   // rows 7..8
  int anomalies = 0;        // rows 2..4: original succeeded where the human rewrite failed
};

ErrorAttribution attribute_errors(const BucketCounts& column);

/// Joins per-variant metric maps on identical key sets; missing keys on
/// either side raise an error naming them. Copy flags default to false for
/// keys absent from the copies map.
BreakdownTable run_breakdown(const std::map<QuestionKey, double>& original,
                             const std::map<QuestionKey, double>& qr,
                             const std::map<QuestionKey, double>& human,
                             const std::map<QuestionKey, bool>& copies,
                             const std::vector<ThresholdSpec>& thresholds);

std::string render_text(const BreakdownTable& table);
std::string render_csv(const BreakdownTable& table);

}  // namespace cqr::breakdown
