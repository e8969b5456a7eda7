#include "cqr/breakdown.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cqr/common.hpp"

namespace cqr::breakdown {
namespace {

constexpr double kEqualityTolerance = 1e-9;

const char* bucket_pattern(int bucket) {
  static const char* patterns[8] = {
      "✗✗✗", "✓✗✗", "✗✓✗", "✓✓✗",
      "✗✗✓", "✓✗✓", "✗✓✓", "✓✓✓"};
  return patterns[bucket - 1];
}

std::string list_keys(const std::vector<QuestionKey>& keys) {
  std::string out;
  size_t shown = std::min<size_t>(keys.size(), 5);
  for (size_t i = 0; i < shown; ++i) {
    if (i) out += ", ";
    out += keys[i].first + "_" + std::to_string(keys[i].second);
  }
  if (keys.size() > shown) out += ", ... (" + std::to_string(keys.size()) + " total)";
  return out;
}

}  // namespace

bool ThresholdSpec::passes(double metric) const {
  switch (op) {
    case Op::kGreater: return metric > value;
    case Op::kGreaterEqual: return metric >= value;
    case Op::kEqual: return std::abs(metric - value) <= kEqualityTolerance;
  }
  throw InternalError("unknown threshold operator");
}

ThresholdSpec parse_threshold_spec(const std::string& spec) {
  ThresholdSpec out;
  out.label = spec;
  size_t pos;
  if ((pos = spec.find(">=")) != std::string::npos) {
    out.op = ThresholdSpec::Op::kGreaterEqual;
  } else if ((pos = spec.find('>')) != std::string::npos) {
    out.op = ThresholdSpec::Op::kGreater;
  } else if ((pos = spec.find('=')) != std::string::npos) {
    out.op = ThresholdSpec::Op::kEqual;
  } else {
    throw DataError("threshold \"" + spec + "\" has no operator (expected >, >=, or =)");
  }
  size_t value_at = pos + (out.op == ThresholdSpec::Op::kGreaterEqual ? 2 : 1);
  try {
    size_t used = 0;
    out.value = std::stod(spec.substr(value_at), &used);
    if (value_at + used != spec.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw DataError("threshold \"" + spec + "\" has no numeric value after the operator");
  }
  if (pos == 0) throw DataError("threshold \"" + spec + "\" is missing a metric label");
  return out;
}

int classify(const TripleOutcome& outcome, const ThresholdSpec& threshold) {
  int bucket = 1;
  if (threshold.passes(outcome.original)) bucket += 1;
  if (threshold.passes(outcome.qr)) bucket += 2;
  if (threshold.passes(outcome.human)) bucket += 4;
  return bucket;
}

BreakdownTable build_breakdown_table(const std::vector<TripleOutcome>& outcomes,
                                     const std::vector<ThresholdSpec>& thresholds) {
  if (outcomes.empty()) throw DataError("breakdown needs at least one outcome");
  if (thresholds.empty()) throw DataError("breakdown needs at least one threshold");
  BreakdownTable table;
  table.thresholds = thresholds;
  table.columns.resize(thresholds.size());
  table.total = static_cast<int>(outcomes.size());
  for (size_t c = 0; c < thresholds.size(); ++c) {
    for (const auto& outcome : outcomes) {
      int bucket = classify(outcome, thresholds[c]);
      ++table.columns[c].count[bucket - 1];
      if (outcome.was_copied) ++table.columns[c].copied[bucket - 1];
    }
  }
  return table;
}

ErrorAttribution attribute_errors(const BucketCounts& column) {
  ErrorAttribution out;
  for (int row = 1; row <= 4; ++row) out.qa_errors += column.count[row - 1];
  for (int row = 5; row <= 6; ++row) out.qr_errors += column.count[row - 1];
  for (int row = 7; row <= 8; ++row) out.true_positives += column.count[row - 1];
  for (int row = 2; row <= 4; ++row) out.anomalies += column.count[row - 1];
  return out;
}

BreakdownTable run_breakdown(const std::map<QuestionKey, double>& original,
                             const std::map<QuestionKey, double>& qr,
                             const std::map<QuestionKey, double>& human,
                             const std::map<QuestionKey, bool>& copies,
                             const std::vector<ThresholdSpec>& thresholds) {
  auto missing_from = [&](const std::map<QuestionKey, double>& reference,
                          const std::map<QuestionKey, double>& probe) {
    std::vector<QuestionKey> missing;
    for (const auto& [key, value] : reference)
      if (!probe.count(key)) missing.push_back(key);
    return missing;
  };
  const std::pair<const char*, const std::map<QuestionKey, double>*> variants[] = {{"qr", &qr},
                                                                                   {"human", &human}};
  for (const auto& [name, variant] : variants) {
    auto missing = missing_from(original, *variant);
    if (!missing.empty())
      throw DataError(std::string(name) + " predictions are missing questions: " + list_keys(missing));
    auto extra = missing_from(*variant, original);
    if (!extra.empty())
      throw DataError(std::string(name) + " predictions cover unknown questions: " + list_keys(extra));
  }

  std::vector<TripleOutcome> outcomes;
  outcomes.reserve(original.size());
  for (const auto& [key, value] : original) {
    TripleOutcome outcome;
    outcome.topic_id = key.first;
    outcome.turn_id = key.second;
    outcome.original = value;
    outcome.qr = qr.at(key);
    outcome.human = human.at(key);
    auto copy = copies.find(key);
    outcome.was_copied = copy != copies.end() && copy->second;
    outcomes.push_back(std::move(outcome));
  }
  return build_breakdown_table(outcomes, thresholds);
}

std::string render_text(const BreakdownTable& table) {
  std::ostringstream out;
  out << "bucket";
  for (const auto& t : table.thresholds) out << '\t' << t.label;
  out << '\n';
  for (int bucket = 1; bucket <= 8; ++bucket) {
    out << bucket << ' ' << bucket_pattern(bucket);
    for (const auto& column : table.columns)
      out << '\t' << column.count[bucket - 1] << " (" << column.copied[bucket - 1] << ")";
    out << '\n';
  }
  out << "total";
  for (size_t c = 0; c < table.columns.size(); ++c) out << '\t' << table.total;
  out << '\n';
  for (size_t c = 0; c < table.columns.size(); ++c) {
    auto attribution = attribute_errors(table.columns[c]);
    out << table.thresholds[c].label << ": qa_errors " << attribution.qa_errors << ", qr_errors "
        << attribution.qr_errors << ", true_positives " << attribution.true_positives
        << ", anomalies " << attribution.anomalies << '\n';
  }
  return out.str();
}

std::string render_csv(const BreakdownTable& table) {
  std::string out = "threshold,bucket,original,qr,human,count,copied\n";
  for (size_t c = 0; c < table.columns.size(); ++c) {
    for (int bucket = 1; bucket <= 8; ++bucket) {
      int bits = bucket - 1;
      out += table.thresholds[c].label;
      out += ',';
      out += std::to_string(bucket);
      out += ',';
      out += (bits & 1) ? '1' : '0';
      out += ',';
      out += (bits & 2) ? '1' : '0';
      out += ',';
      out += (bits & 4) ? '1' : '0';
      out += ',';
      out += std::to_string(table.columns[c].count[bucket - 1]);
      out += ',';
      out += std::to_string(table.columns[c].copied[bucket - 1]);
      out += '\n';
    }
  }
  return out;
}

}  // namespace cqr::breakdown
