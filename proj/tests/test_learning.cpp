#include <doctest.h>

#include <functional>

#include <bit>
#include <cmath>
#include <fstream>

#include "support.hpp"
#include "thermoviab/error.hpp"
#include "thermoviab/learning.hpp"
#include "thermoviab/rng.hpp"

using namespace thermoviab;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::IoFailure;
}

// Rows with a few latent factors so that the spectrum decays.
Eigen::MatrixXd latent_data(Rng& rng, int n, int m, int factors) {
  Eigen::MatrixXd load(factors, m);
  for (int f = 0; f < factors; ++f) {
    for (int j = 0; j < m; ++j) load(f, j) = rng.normal() / (1.0 + f);
  }
  Eigen::MatrixXd X(n, m);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd z(factors);
    for (int f = 0; f < factors; ++f) z(f) = rng.normal();
    X.row(i) = z * load;
    for (int j = 0; j < m; ++j) X(i, j) += 0.05 * rng.normal() + 10.0 * j;
  }
  return X;
}

void check_pca_properties(const Eigen::MatrixXd& X, double target) {
  const PcaModel pca = fit_pca(X, target);
  CHECK(pca.kept_variance() >= target - 1e-12);
  // Orthonormal rows.
  const Eigen::MatrixXd gram = pca.components * pca.components.transpose();
  CHECK((gram - Eigen::MatrixXd::Identity(pca.k(), pca.k())).cwiseAbs().maxCoeff() <= 1e-8);
  // Eigenvalues descending, ratios sum to one.
  double ratio_sum = 0;
  for (std::size_t i = 0; i < pca.eigenvalues.size(); ++i) {
    if (i > 0) CHECK(pca.eigenvalues[i] <= pca.eigenvalues[i - 1] + 1e-12);
    ratio_sum += pca.explained_ratio[i];
  }
  CHECK(ratio_sum == doctest::Approx(1.0).epsilon(1e-9));
  // Reconstruction error equals (n - 1) times the discarded eigenvalues.
  const Eigen::MatrixXd Z = pca.standardize(X);
  const Eigen::MatrixXd back = pca.reconstruct(pca.transform(X));
  const double err = (Z - back).squaredNorm();
  double discarded = 0;
  for (std::size_t i = static_cast<std::size_t>(pca.k()); i < pca.eigenvalues.size(); ++i) discarded += pca.eigenvalues[i];
  const double expected = (X.rows() - 1) * discarded;
  CHECK(std::abs(err - expected) <= 1e-6 * std::max(1.0, Z.squaredNorm()));
  // Sign convention: the largest-magnitude loading of each component is positive.
  for (int r = 0; r < pca.k(); ++r) {
    Eigen::Index idx;
    pca.components.row(r).cwiseAbs().maxCoeff(&idx);
    CHECK(pca.components(r, idx) > 0.0);
  }
}

// Power iteration on the correlation matrix: an independent estimate of the
// leading eigenvalue.
double leading_eigenvalue(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Z = X.rowwise() - X.colwise().mean();
  for (int j = 0; j < Z.cols(); ++j) Z.col(j) /= std::sqrt(Z.col(j).squaredNorm() / (Z.rows() - 1));
  const Eigen::MatrixXd C = Z.transpose() * Z / (Z.rows() - 1);
  Eigen::VectorXd v = Eigen::VectorXd::Ones(C.rows());
  double lambda = 0;
  for (int it = 0; it < 2000; ++it) {
    const Eigen::VectorXd w = C * v;
    lambda = w.norm();
    v = w / lambda;
  }
  return lambda;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("learning") {
  TEST_CASE("PCA invariants with more rows than columns") {
    Rng rng(1);
    check_pca_properties(latent_data(rng, 40, 12, 3), 0.95);
  }

  TEST_CASE("PCA invariants with more columns than rows") {
    Rng rng(2);
    check_pca_properties(latent_data(rng, 12, 80, 4), 0.95);
    check_pca_properties(latent_data(rng, 12, 80, 4), 0.99);
  }

  TEST_CASE("PCA leading eigenvalue matches power iteration") {
    Rng rng(3);
    for (auto [n, m] : {std::pair{40, 10}, std::pair{10, 30}}) {
      const Eigen::MatrixXd X = latent_data(rng, n, m, 2);
      CHECK(fit_pca(X).eigenvalues.front() == doctest::Approx(leading_eigenvalue(X)).epsilon(1e-8));
    }
  }

  TEST_CASE("constant columns are dropped") {
    Rng rng(4);
    Eigen::MatrixXd X = latent_data(rng, 20, 6, 2);
    X.col(2).setConstant(7.0);
    const PcaModel pca = fit_pca(X);
    CHECK(pca.kept_columns == std::vector<std::size_t>{0, 1, 3, 4, 5});
    CHECK(pca.components.cols() == 5);
    CHECK(code_of([] { fit_pca(Eigen::MatrixXd::Ones(5, 3)); }) == ErrorCode::DegenerateData);
    CHECK(code_of([] { fit_pca(Eigen::MatrixXd::Random(1, 3)); }) == ErrorCode::DegenerateData);
  }

  TEST_CASE("tree traversal sends ties to the left") {
    DecisionTree t;
    t.nodes = {{0, 1.5, 1, 2, 0.5}, {-1, 0, -1, -1, 0.0}, {-1, 0, -1, -1, 1.0}};
    const double at[] = {1.5};
    const double above[] = {1.5000001};
    CHECK(t.leaf_for(at).p_viable == 0.0);
    CHECK(t.leaf_for(above).p_viable == 1.0);
    CHECK(t.depth() == 1);
  }

  TEST_CASE("forest separates separable data and is deterministic") {
    Rng rng(5);
    Eigen::MatrixXd Z(40, 3);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
      y[static_cast<std::size_t>(i)] = i % 2;
      Z(i, 0) = (i % 2 ? 2.0 : -2.0) + 0.3 * rng.normal();
      Z(i, 1) = rng.normal();
      Z(i, 2) = rng.normal();
    }
    ForestConfig cfg;
    cfg.seed = 9;
    const ForestModel a = fit_forest(Z, y, cfg);
    const ForestModel b = fit_forest(Z, y, cfg);
    CHECK(a.trees.size() == 40);
    const auto pa = a.predict_proba(Z);
    CHECK(pa == b.predict_proba(Z));
    int correct = 0;
    for (int i = 0; i < 40; ++i) correct += (pa[static_cast<std::size_t>(i)] > 0.5) == (y[static_cast<std::size_t>(i)] == 1);
    CHECK(correct >= 38);
    for (const auto& t : a.trees) CHECK(t.depth() <= cfg.max_depth);
    for (double p : pa) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      // A probability is a fraction of 40 trees.
      CHECK(std::abs(p * 40 - std::round(p * 40)) < 1e-9);
    }
  }

  TEST_CASE("forest input errors") {
    const Eigen::MatrixXd Z = Eigen::MatrixXd::Random(6, 2);
    CHECK(code_of([&] { fit_forest(Z, {1, 1, 1, 1, 1, 1}); }) == ErrorCode::SingleClass);
    CHECK(code_of([&] { fit_forest(Z.topRows(3), {0, 1, 0}); }) == ErrorCode::TooFewSamples);
  }

  TEST_CASE("threshold calibration on a separable validation set") {
    const std::vector<double> p{0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9};
    const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
    const OperatingPoint op = calibrate_threshold(p, y);
    CHECK(op.tau == doctest::Approx(0.5));
    CHECK(op.sensitivity == 1.0);
    CHECK(op.specificity == 1.0);
    CHECK_FALSE(op.low_quality);
  }

  TEST_CASE("calibration reports the rates it actually achieves") {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> p(20);
      std::vector<int> y(20);
      for (std::size_t i = 0; i < 20; ++i) {
        y[i] = i < 10;
        p[i] = std::round(rng.uniform() * 10) / 10 + (y[i] ? 0.1 : 0.0);
      }
      const OperatingPoint op = calibrate_threshold(p, y);
      int tp = 0, tn = 0;
      for (std::size_t i = 0; i < 20; ++i) {
        const bool pos = p[i] >= op.tau;
        tp += pos && y[i];
        tn += !pos && !y[i];
      }
      CHECK(op.sensitivity == doctest::Approx(tp / 10.0));
      CHECK(op.specificity == doctest::Approx(tn / 10.0));
      if (!op.low_quality) {
        CHECK(op.specificity > 0.95);
        CHECK(op.sensitivity > 0.60);
      }
    }
    CHECK(code_of([] { calibrate_threshold({0.1, 0.2}, {1, 1}); }) == ErrorCode::SingleClass);
  }

  TEST_CASE("unreachable targets fall back and are flagged") {
    const std::vector<double> p{0.9, 0.1, 0.8, 0.2, 0.7, 0.3};
    const std::vector<int> y{0, 1, 0, 1, 0, 1};
    const OperatingPoint op = calibrate_threshold(p, y);
    CHECK(op.low_quality);
    CHECK(op.sensitivity > 0.0);
  }

  TEST_CASE("ensemble label is popcount >= V for all 32 vote vectors") {
    for (int mask = 0; mask < 32; ++mask) {
      std::array<int, 5> votes{};
      for (int i = 0; i < 5; ++i) votes[static_cast<std::size_t>(i)] = (mask >> i) & 1;
      const int pop = std::popcount(static_cast<unsigned>(mask));
      for (int V = 1; V <= 5; ++V) {
        CHECK(ensemble_label(votes, V) == (pop >= V ? Label::Viable : Label::Nonviable));
      }
    }
    const ClassificationOutcome o = combine({0.5, 0.2, 0.9, 0.1, 0.4}, {0.5, 0.5, 0.95, 0.1, 0.5}, 2);
    CHECK(o.votes == std::array<int, 5>{1, 0, 0, 1, 0});
    CHECK(o.F == 2);
    CHECK(o.label == Label::Viable);
  }

  TEST_CASE("bundle training, persistence and reload") {
    tvtest::TempDir tmp("bundle");
    Rng rng(7);
    std::vector<FeatureRecord> train, val;
    std::vector<int> ytrain, yval;
    for (int i = 0; i < 24; ++i) {
      train.push_back(tvtest::synthetic_record(rng, i % 2, "t" + std::to_string(i)));
      ytrain.push_back(i % 2);
    }
    for (int i = 0; i < 10; ++i) {
      val.push_back(tvtest::synthetic_record(rng, i % 2, "v" + std::to_string(i)));
      yval.push_back(i % 2);
    }
    TrainOptions opts;
    opts.forest.seed = 3;
    const ModelBundle bundle = train_bundle(train, ytrain, val, yval, opts);
    save_bundle(bundle, tmp.path / "a");
    save_bundle(train_bundle(train, ytrain, val, yval, opts), tmp.path / "b");
    for (const auto& entry : std::filesystem::directory_iterator(tmp.path / "a")) {
      CHECK(slurp(entry.path()) == slurp(tmp.path / "b" / entry.path().filename()));
    }
    const ModelBundle loaded = load_bundle(tmp.path / "a");
    for (const auto& r : val) {
      const ClassificationOutcome x = predict(bundle, r);
      const ClassificationOutcome z = predict(loaded, r);
      CHECK(x.p == z.p);
      CHECK(x.votes == z.votes);
      CHECK(x.label == z.label);
    }
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(loaded.members[i].op.tau == bundle.members[i].op.tau);
      CHECK(loaded.members[i].pca.kept_variance() >= 0.95 - 1e-12);
    }

    std::ofstream(tmp.path / "a" / "manifest.json") << "{\"format\": \"something-else\"}";
    CHECK(code_of([&] { load_bundle(tmp.path / "a"); }) == ErrorCode::ModelFormat);
  }

  TEST_CASE("training options are validated") {
    TrainOptions o;
    o.vote_threshold = 6;
    CHECK(code_of([&] { o.validate(); }) == ErrorCode::InvalidSpec);
    o = {};
    o.specificity_target = 1.0;
    CHECK(code_of([&] { o.validate(); }) == ErrorCode::InvalidSpec);
  }
}
