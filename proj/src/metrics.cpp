#include "thermoviab/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "thermoviab/error.hpp"
#include "thermoviab/rng.hpp"

namespace thermoviab {

double ConfusionCounts::sensitivity() const {
  if (tp + fn == 0) fail(ErrorCode::EmptyClass, "sensitivity undefined without positive cases");
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double ConfusionCounts::specificity() const {
  if (tn + fp == 0) fail(ErrorCode::EmptyClass, "specificity undefined without negative cases");
  return static_cast<double>(tn) / static_cast<double>(tn + fp);
}

ConfusionCounts confusion(const std::vector<int>& labels, const std::vector<int>& predictions) {
  if (labels.size() != predictions.size()) fail(ErrorCode::DimensionMismatch, "label and prediction counts differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool truth = labels[i] != 0;
    const bool pred = predictions[i] != 0;
    if (truth && pred) ++c.tp;
    if (truth && !pred) ++c.fn;
    if (!truth && !pred) ++c.tn;
    if (!truth && pred) ++c.fp;
  }
  return c;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) fail(ErrorCode::DimensionMismatch, "score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks are half-integers; doubling keeps everything integral.
  long twice_rank_sum = 0;
  long positives = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const long twice_mid = static_cast<long>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) {
        twice_rank_sum += twice_mid;
        ++positives;
      }
    }
    i = j + 1;
  }
  const long negatives = static_cast<long>(scores.size()) - positives;
  if (positives == 0 || negatives == 0) fail(ErrorCode::EmptyClass, "AUC needs both classes");
  // U = R - P(P+1)/2, computed in doubled integers, then one division.
  const long twice_u = twice_rank_sum - positives * (positives + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

std::string percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * ratio);
  return buf;
}

std::vector<int> parse_ratio(std::string_view text) {
  std::vector<int> parts;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t colon = std::min(text.find(':', start), text.size());
    int v = 0;
    const auto res = std::from_chars(text.data() + start, text.data() + colon, v);
    if (res.ec != std::errc() || res.ptr != text.data() + colon || v < 0) {
      fail(ErrorCode::InvalidSpec, "bad split ratio '" + std::string(text) + "'");
    }
    parts.push_back(v);
    start = colon + 1;
  }
  if (parts.size() < 2 || parts.size() > 3 || parts[0] <= 0 || parts[1] <= 0 ||
      std::accumulate(parts.begin(), parts.end(), 0) <= 0) {
    fail(ErrorCode::InvalidSpec, "split ratio needs 2 or 3 parts with positive train and validation shares");
  }
  return parts;
}

namespace {

// Largest-remainder apportionment of n over the ratio parts; ties go to the
// earlier fold.
std::vector<long> apportion(long n, const std::vector<int>& parts) {
  const long total = std::accumulate(parts.begin(), parts.end(), 0L);
  std::vector<long> counts(parts.size());
  std::vector<std::pair<long, std::size_t>> remainders;
  long assigned = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    counts[i] = n * parts[i] / total;
    assigned += counts[i];
    remainders.push_back({-(n * parts[i] % total), i});
  }
  std::sort(remainders.begin(), remainders.end());
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

}  // namespace

SplitPlan stratified_split(const std::vector<SplitItem>& items, std::string_view ratio, std::uint64_t seed,
                           bool group_aware) {
  const std::vector<int> parts = parse_ratio(ratio);
  std::map<int, std::vector<const SplitItem*>> by_class;
  for (const auto& item : items) by_class[item.label != 0 ? 1 : 0].push_back(&item);
  for (int label : {0, 1}) {
    if (by_class[label].size() < 2) fail(ErrorCode::TooFewCases, "split needs at least two cases per class");
  }

  SplitPlan plan;
  plan.ratio = std::string(ratio);
  plan.seed = seed;
  plan.group_aware = group_aware;
  std::vector<std::vector<std::string>> folds(parts.size());
  Rng rng(seed);

  if (!group_aware) {
    for (auto& [label, members] : by_class) {
      std::sort(members.begin(), members.end(), [](auto* a, auto* b) { return a->id < b->id; });
      rng.shuffle(members.begin(), members.end());
      const auto counts = apportion(static_cast<long>(members.size()), parts);
      std::size_t next = 0;
      for (std::size_t f = 0; f < parts.size(); ++f) {
        for (long k = 0; k < counts[f]; ++k) folds[f].push_back(members[next++]->id);
      }
    }
  } else {
    // Whole groups are placed greedily into the fold with the largest
    // outstanding per-class deficit.
    std::map<std::string, std::array<long, 2>> group_counts;
    std::map<std::string, std::vector<std::string>> group_ids;
    for (const auto& item : items) {
      const std::string key = item.group.empty() ? item.id : item.group;
      ++group_counts[key][item.label != 0 ? 1 : 0];
      group_ids[key].push_back(item.id);
    }
    std::vector<std::array<long, 2>> target(parts.size());
    for (int label : {0, 1}) {
      const auto counts = apportion(static_cast<long>(by_class[label].size()), parts);
      for (std::size_t f = 0; f < parts.size(); ++f) target[f][static_cast<std::size_t>(label)] = counts[f];
    }
    std::vector<std::string> groups;
    for (const auto& [key, counts] : group_counts) groups.push_back(key);
    rng.shuffle(groups.begin(), groups.end());
    // Largest groups first so they do not overshoot late.
    std::stable_sort(groups.begin(), groups.end(), [&](const auto& a, const auto& b) {
      return group_counts[a][0] + group_counts[a][1] > group_counts[b][0] + group_counts[b][1];
    });
    std::vector<std::array<long, 2>> filled(parts.size(), {0, 0});
    for (const auto& g : groups) {
      const auto& c = group_counts[g];
      std::size_t best = 0;
      long best_gain = std::numeric_limits<long>::min();
      for (std::size_t f = 0; f < parts.size(); ++f) {
        long gain = 0;
        for (std::size_t l = 0; l < 2; ++l) {
          const long deficit = std::max(0L, target[f][l] - filled[f][l]);
          gain += std::min(deficit, c[l]) - std::max(0L, c[l] - deficit);  // filled minus overshoot
        }
        if (gain > best_gain) {
          best_gain = gain;
          best = f;
        }
      }
      filled[best][0] += c[0];
      filled[best][1] += c[1];
      for (const auto& id : group_ids[g]) folds[best].push_back(id);
    }
  }
  for (auto& fold : folds) std::sort(fold.begin(), fold.end());
  plan.train = folds[0];
  plan.validation = folds[1];
  if (folds.size() > 2) plan.test = folds[2];
  return plan;
}

StudyReport build_report(const std::vector<ClassificationOutcome>& outcomes, const std::vector<int>& labels,
                         int vote_threshold, const std::array<bool, 5>& present) {
  if (outcomes.size() != labels.size()) fail(ErrorCode::DimensionMismatch, "outcome and label counts differ");
  StudyReport report;
  report.cases = outcomes.size();
  report.vote_threshold = vote_threshold;
  for (int l : labels) (l ? report.positives : report.negatives) += 1;

  for (std::size_t i = 0; i < 5; ++i) {
    ReportRow row;
    row.name = std::string(to_string(kFamilies[i]));
    row.present = present[i];
    if (row.present) {
      std::vector<int> votes;
      std::vector<double> p;
      for (const auto& o : outcomes) {
        votes.push_back(o.votes[i]);
        p.push_back(o.p[i]);
      }
      row.counts = confusion(labels, votes);
      row.sensitivity = row.counts.sensitivity();
      row.specificity = row.counts.specificity();
      row.auc = auc(p, labels);
    }
    report.rows.push_back(row);
  }
  ReportRow ensemble;
  ensemble.name = "ensemble";
  std::vector<int> predicted;
  std::vector<double> F;
  std::vector<double> mean_p;
  for (const auto& o : outcomes) {
    predicted.push_back(o.label == Label::Viable ? 1 : 0);
    F.push_back(o.F);
    mean_p.push_back(std::accumulate(o.p.begin(), o.p.end(), 0.0) / 5.0);
  }
  ensemble.counts = confusion(labels, predicted);
  ensemble.sensitivity = ensemble.counts.sensitivity();
  ensemble.specificity = ensemble.counts.specificity();
  ensemble.auc = auc(F, labels);
  report.ensemble_auc_mean_p = auc(mean_p, labels);
  report.rows.push_back(ensemble);
  return report;
}

namespace {

double round4(double v) { return std::round(v * 1e4) / 1e4; }

}  // namespace

std::string report_json(const StudyReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    if (!row.present) {
      rows.push_back({{"classifier", row.name}, {"present", false}});
      continue;
    }
    rows.push_back({{"classifier", row.name},
                    {"present", true},
                    {"sensitivity", round4(row.sensitivity)},
                    {"specificity", round4(row.specificity)},
                    {"auc", round4(row.auc)},
                    {"tp", row.counts.tp},
                    {"fn", row.counts.fn},
                    {"tn", row.counts.tn},
                    {"fp", row.counts.fp}});
  }
  const nlohmann::json doc = {{"schema_version", 1},
                              {"cases", report.cases},
                              {"positives", report.positives},
                              {"negatives", report.negatives},
                              {"vote_threshold", report.vote_threshold},
                              {"ensemble_auc_mean_p", round4(report.ensemble_auc_mean_p)},
                              {"rows", rows}};
  return doc.dump(2) + "\n";
}

std::string report_markdown(const StudyReport& report) {
  std::string out = "| Classifier | Sensitivity (%) | Specificity (%) | AUC |\n";
  out += "|---|---|---|---|\n";
  for (const auto& row : report.rows) {
    if (!row.present) {
      out += "| " + row.name + " | absent | absent | absent |\n";
      continue;
    }
    char auc_text[16];
    std::snprintf(auc_text, sizeof(auc_text), "%.2f", row.auc);
    out += "| " + row.name + " | " + percent(row.sensitivity) + " | " + percent(row.specificity) + " | " + auc_text +
           " |\n";
  }
  char tail[160];
  std::snprintf(tail, sizeof(tail), "\n%zu cases (%ld viable, %ld nonviable); ensemble votes >= %d; AUC over mean p: %.2f\n",
                report.cases, report.positives, report.negatives, report.vote_threshold, report.ensemble_auc_mean_p);
  return out + tail;
}

}  // namespace thermoviab
