#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "thermoviab/features.hpp"

namespace thermoviab {

// ---------------------------------------------------------------------------
// PCA

/// z-score standardization followed by PCA. Columns with zero training
/// variance are dropped before the decomposition.
struct PcaModel {
  Family family = Family::Temporal;
  std::vector<double> mean;                // per input column
  std::vector<double> scale;               // per input column (sample std)
  std::vector<std::size_t> kept_columns;   // columns with non-zero variance
  Eigen::MatrixXd components;              // k x kept, orthonormal rows
  std::vector<double> eigenvalues;         // all non-negative eigenvalues, descending
  std::vector<double> explained_ratio;     // eigenvalues / total variance
  double variance_target = 0.95;

  int k() const { return static_cast<int>(components.rows()); }
  double kept_variance() const;

  /// Standardized (kept columns only) rows of X.
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& X) const;
  /// n x k scores.
  Eigen::MatrixXd transform(const Eigen::MatrixXd& X) const;
  /// Back-projection of scores into the standardized space.
  Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& scores) const;
};

/// Throws DegenerateData when n < 2 or every column is constant.
PcaModel fit_pca(const Eigen::MatrixXd& X, double variance_target = 0.95, Family family = Family::Temporal);

// ---------------------------------------------------------------------------
// Random forest

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double p_viable = 0.0;  // training fraction of positives reaching the node
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  const TreeNode& leaf_for(const double* x) const;
  int depth() const;
};

struct ForestConfig {
  int trees = 40;
  int max_depth = 3;
  std::uint64_t seed = 1;
};

struct ForestModel {
  std::vector<DecisionTree> trees;
  std::uint64_t seed = 1;
  int max_depth = 3;

  /// Fraction of trees whose leaf votes viable (positive fraction > 0.5).
  double predict_proba(const double* x) const;
  std::vector<double> predict_proba(const Eigen::MatrixXd& Z) const;
};

/// Bootstrap trees with sqrt(k) candidate features per split, Gini impurity,
/// midpoint thresholds (go left when x <= threshold). y holds 0/1 labels.
/// Throws SingleClass, TooFewSamples.
ForestModel fit_forest(const Eigen::MatrixXd& Z, const std::vector<int>& y, const ForestConfig& cfg = {});

// ---------------------------------------------------------------------------
// Operating point and ensemble

struct OperatingPoint {
  double tau = 0.5;
  double sensitivity = 0.0;
  double specificity = 0.0;
  bool low_quality = false;  // no threshold met both targets
};

/// Threshold on p (positive iff p >= tau). Candidates are the smallest score
/// and the midpoints between consecutive distinct scores. Throws SingleClass.
OperatingPoint calibrate_threshold(const std::vector<double>& p, const std::vector<int>& y,
                                   double specificity_target = 0.95, double sensitivity_target = 0.60);

struct ClassificationOutcome {
  std::array<double, 5> p{};
  std::array<int, 5> votes{};
  int F = 0;
  Label label = Label::Nonviable;
};

/// viable iff popcount(votes) >= V.
Label ensemble_label(const std::array<int, 5>& votes, int vote_threshold);
ClassificationOutcome combine(const std::array<double, 5>& p, const std::array<double, 5>& tau, int vote_threshold);

struct FamilyModel {
  Family family = Family::Temporal;
  PcaModel pca;
  ForestModel forest;
  OperatingPoint op;
};

struct ModelBundle {
  static constexpr int kSchemaVersion = 1;
  std::array<FamilyModel, 5> members;  // kFamilies order
  int vote_threshold = 2;
  std::uint64_t seed = 1;
  double variance_target = 0.95;
  double specificity_target = 0.95;
  double sensitivity_target = 0.60;
  std::vector<std::string> train_ids;
  std::vector<std::string> validation_ids;
  std::vector<std::string> test_ids;
};

struct TrainOptions {
  ForestConfig forest;
  double variance_target = 0.95;
  double specificity_target = 0.95;
  double sensitivity_target = 0.60;
  int vote_threshold = 2;

  /// Throws InvalidSpec.
  void validate() const;
};

/// Per-family feature matrix (rows = records). Throws MissingFamily.
Eigen::MatrixXd family_matrix(const std::vector<FeatureRecord>& records, Family family);

ModelBundle train_bundle(const std::vector<FeatureRecord>& train, const std::vector<int>& train_labels,
                         const std::vector<FeatureRecord>& validation, const std::vector<int>& validation_labels,
                         const TrainOptions& options);

/// Per-family probabilities for one record. Throws MissingFamily.
std::array<double, 5> family_probabilities(const ModelBundle& bundle, const FeatureRecord& record);
ClassificationOutcome predict(const ModelBundle& bundle, const FeatureRecord& record);

/// Directory with manifest.json, pca_<family>.bin and forest_<family>.json.
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir);
/// Throws ModelFormat.
ModelBundle load_bundle(const std::filesystem::path& dir);

}  // namespace thermoviab
