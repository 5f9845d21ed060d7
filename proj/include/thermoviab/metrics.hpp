#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "thermoviab/learning.hpp"

namespace thermoviab {

/// Positive class = viable (label 1).
struct ConfusionCounts {
  long tp = 0;
  long fn = 0;
  long tn = 0;
  long fp = 0;

  /// tp / (tp + fn); throws EmptyClass without positives.
  double sensitivity() const;
  /// tn / (tn + fp); throws EmptyClass without negatives.
  double specificity() const;
};

ConfusionCounts confusion(const std::vector<int>& labels, const std::vector<int>& predictions);

/// Mann-Whitney AUC with midranks for ties. Throws EmptyClass.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Formats a ratio as a percentage with two decimals ("68.18").
std::string percent(double ratio);

struct SplitItem {
  std::string id;
  int label = 0;
  std::string group;  // participant; used by the group-aware variant
};

struct SplitPlan {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::string ratio;
  std::uint64_t seed = 0;
  bool stratified = true;
  bool group_aware = false;
};

/// "80:20" or "32:8:20" -> integer parts (train, validation[, test]).
std::vector<int> parse_ratio(std::string_view text);

/// Stratified shuffle split. Per class, fold sizes follow the largest-remainder
/// apportionment of the ratio. Group-aware mode keeps every group in one fold.
/// Throws TooFewCases (< 2 per class) and InvalidSpec.
SplitPlan stratified_split(const std::vector<SplitItem>& items, std::string_view ratio, std::uint64_t seed,
                           bool group_aware = false);

struct ReportRow {
  std::string name;  // family name or "ensemble"
  bool present = true;
  ConfusionCounts counts;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double auc = 0.0;
};

struct StudyReport {
  std::vector<ReportRow> rows;  // five families then the ensemble
  std::size_t cases = 0;
  long positives = 0;
  long negatives = 0;
  double ensemble_auc_mean_p = 0.0;  // secondary diagnostic
  int vote_threshold = 2;
};

/// Per-family rows use votes C_i (sens/spec) and p_i (AUC); the ensemble row
/// uses the label (sens/spec) and F (AUC). `present[i] == false` marks a
/// family as absent.
StudyReport build_report(const std::vector<ClassificationOutcome>& outcomes, const std::vector<int>& labels,
                         int vote_threshold, const std::array<bool, 5>& present = {true, true, true, true, true});

std::string report_json(const StudyReport& report);
std::string report_markdown(const StudyReport& report);

}  // namespace thermoviab
