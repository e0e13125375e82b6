#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "layerprobe/cca.hpp"
#include "layerprobe/error.hpp"
#include "support/oracles.hpp"

using namespace layerprobe;
using namespace layerprobe::cca;
using layerprobe::testing::gaussian;

TEST_CASE("config validation") {
  CcaConfig c;
  CHECK_NOTHROW(c.validate());
  c.reg_epsilon = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.n_folds = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.n_test_folds = 10;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.max_components = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("self correlation") {
  Rng rng(1);
  const auto x = gaussian(rng, 500, 6);
  const auto m = fit_cca(x, x, {});
  CHECK(m.components() == 6);
  CHECK(m.train_correlations.minCoeff() >= 0.999);
  CHECK(pwcca_score(m, x, x) >= 0.999);
  CHECK(cross_validated_cca(x, x, {}) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("linear transform of a view") {
  Rng rng(2);
  const auto x = gaussian(rng, 800, 8);
  // The default ridge caps per-component correlations once the transformed
  // covariance spans ~1e5 in eigenvalue; held-out PWCCA is unaffected.
  const auto a = layerprobe::testing::conditioned_matrix(rng, 8, 100.0);
  const auto m = fit_cca(x, x * a, {});
  CHECK(m.train_correlations.minCoeff() >= 0.99);
  const auto b = layerprobe::testing::conditioned_matrix(rng, 8, 999.0);
  CHECK(cross_validated_cca(x, x * b, {}) >= 0.99);
}

TEST_CASE("correlations match an unregularized QR oracle") {
  Rng rng(3);
  for (int c = 0; c < 5; ++c) {
    const auto x = gaussian(rng, 300, 5);
    const Eigen::MatrixXd y = x.leftCols(3) * gaussian(rng, 3, 4) + gaussian(rng, 300, 4);
    const auto m = fit_cca(x, y, {});
    const auto want = layerprobe::testing::qr_canonical_correlations(x, y);
    REQUIRE(m.components() == 4);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(m.train_correlations[i] == doctest::Approx(want[i]).epsilon(1e-5));
    for (Eigen::Index i = 1; i < 4; ++i) CHECK(m.train_correlations[i] <= m.train_correlations[i - 1]);
  }
}

TEST_CASE("independent views have a low null level") {
  Rng rng(4);
  const auto x = gaussian(rng, 2000, 10);
  const auto y = gaussian(rng, 2000, 10);
  const auto m = fit_cca(x, y, {});
  CHECK(m.train_correlations.mean() < 0.15);
  const double threshold = layerprobe::testing::pwcca_null_threshold(200, 10, 400, 0.99, 77);
  CHECK(cross_validated_cca(x, y, {}) < threshold);
}

TEST_CASE("row-shuffled target scores near the null level") {
  Rng rng(5);
  const auto x = gaussian(rng, 1000, 6);
  Eigen::MatrixXd y = x * gaussian(rng, 6, 6);
  const auto perm = rng.permutation(1000);
  Eigen::MatrixXd shuffled(1000, 6);
  for (Eigen::Index i = 0; i < 1000; ++i) shuffled.row(i) = y.row(static_cast<Eigen::Index>(perm[i]));
  const double threshold = layerprobe::testing::pwcca_null_threshold(100, 6, 400, 0.99, 78);
  CHECK(cross_validated_cca(x, shuffled, {}) < threshold);
}

TEST_CASE("pwcca weights are normalized and the score is bounded") {
  Rng rng(6);
  for (int c = 0; c < 20; ++c) {
    const Eigen::Index d1 = 2 + static_cast<Eigen::Index>(rng.uniform_index(6));
    const Eigen::Index d2 = 1 + static_cast<Eigen::Index>(rng.uniform_index(6));
    const auto x = gaussian(rng, 120, d1);
    const Eigen::MatrixXd y = x * gaussian(rng, d1, d2) * rng.uniform(0.0, 1.0) + gaussian(rng, 120, d2);
    const auto m = fit_cca(x, y, {});
    const auto r = pwcca_detail(m, x, y);
    CHECK(r.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((r.weights.array() >= 0.0).all());
    CHECK((r.correlations.array() >= 0.0).all());
    CHECK((r.correlations.array() <= 1.0).all());
    CHECK(r.score <= r.correlations.maxCoeff() + 1e-9);
  }
}

TEST_CASE("all-zero representation view is rejected") {
  Rng rng(7);
  const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(50, 3);
  const auto y = gaussian(rng, 50, 2);
  CHECK_THROWS_AS(fit_cca(x, y, {}), NumericalError);
  CHECK_THROWS_AS(fit_cca(gaussian(rng, 1, 2), gaussian(rng, 1, 2), {}), InputError);
  CHECK_THROWS_AS(fit_cca(gaussian(rng, 5, 2), gaussian(rng, 6, 2), {}), InputError);

  const auto xs = gaussian(rng, 50, 3);
  const auto m = fit_cca(xs, y, {});
  CHECK_THROWS_AS(pwcca_detail(m, Eigen::MatrixXd::Constant(50, 3, 0.0).rowwise() + m.mean_x.transpose(), y),
                  NumericalError);
  CHECK_THROWS_AS(pwcca_score(m, gaussian(rng, 50, 4), y), InputError);
}

TEST_CASE("invariance under invertible transforms") {
  // Exact invariance is broken only by the ridge, whose effect grows with the
  // squared condition number: cond 10 under the default ridge, cond 999 with
  // a negligible one.
  Rng rng(8);
  const auto x = gaussian(rng, 1000, 5);
  const Eigen::MatrixXd y = x.leftCols(3) * gaussian(rng, 3, 4) + 0.7 * gaussian(rng, 1000, 4);
  for (auto [cond, eps] : {std::pair{10.0, 1e-6}, std::pair{999.0, 1e-12}}) {
    CAPTURE(cond);
    CcaConfig cfg;
    cfg.reg_epsilon = eps;
    const auto base = fit_cca(x, y, cfg);
    const auto ax = layerprobe::testing::conditioned_matrix(rng, 5, cond);
    const auto ay = layerprobe::testing::conditioned_matrix(rng, 4, cond);

    const auto tx = fit_cca(x * ax, y, cfg);
    const auto ty = fit_cca(x, y * ay, cfg);
    CHECK((tx.train_correlations - base.train_correlations).cwiseAbs().maxCoeff() < 1e-4);
    CHECK((ty.train_correlations - base.train_correlations).cwiseAbs().maxCoeff() < 1e-4);

    // Held out: a Y-side transform leaves the whole score unchanged (weights
    // come from X); an X-side transform leaves the component correlations.
    const auto folds = make_folds(1000, cfg);
    CHECK(std::abs(cross_validated_cca(x, y * ay, cfg, folds) - cross_validated_cca(x, y, cfg, folds)) < 1e-4);
    const auto rx = pwcca_detail(tx, x.topRows(200) * ax, y.topRows(200));
    const auto rb = pwcca_detail(base, x.topRows(200), y.topRows(200));
    CHECK((rx.correlations - rb.correlations).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("swapping views keeps component correlations") {
  Rng rng(9);
  const auto x = gaussian(rng, 400, 4);
  const Eigen::MatrixXd y = x * gaussian(rng, 4, 4) + gaussian(rng, 400, 4);
  const auto xy = fit_cca(x, y, {});
  const auto yx = fit_cca(y, x, {});
  CHECK((xy.train_correlations - yx.train_correlations).cwiseAbs().maxCoeff() < 1e-8);
  const auto a = pwcca_detail(xy, x, y);
  const auto b = pwcca_detail(yx, y, x);
  CHECK((a.correlations - b.correlations).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("one-hot target is rank deficient but finite") {
  Rng rng(10);
  const Eigen::Index n = 600;
  const Eigen::Index classes = 5;
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, classes);
  Eigen::MatrixXd means = gaussian(rng, classes, 8);
  Eigen::MatrixXd x(n, 8);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(rng.uniform_index(classes));
    y(i, c) = 1.0;
    x.row(i) = means.row(c) + 0.5 * gaussian(rng, 1, 8);
  }
  const auto m = fit_cca(x, y, {});
  CHECK(m.proj_x.allFinite());
  CHECK(m.proj_y.allFinite());
  CHECK(m.components() == classes);
  // Centered one-hot columns span C - 1 dimensions.
  CHECK(m.train_correlations[classes - 1] < 0.2);
  const double s = cross_validated_cca(x, y, {});
  CHECK(std::isfinite(s));
  CHECK(s > 0.5);
}

TEST_CASE("max components") {
  Rng rng(11);
  const auto x = gaussian(rng, 200, 6);
  CcaConfig cfg;
  cfg.max_components = 2;
  CHECK(fit_cca(x, x, cfg).components() == 2);
}

TEST_CASE("folds") {
  CcaConfig cfg;
  cfg.seed = 42;
  const auto folds = make_folds(103, cfg);
  REQUIRE(folds.size() == 10);
  std::set<Eigen::Index> all;
  for (const auto& f : folds) {
    CHECK((f.size() == 10 || f.size() == 11));
    all.insert(f.begin(), f.end());
  }
  CHECK(all.size() == 103);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 102);
  CHECK(make_folds(103, cfg) == folds);
  cfg.seed = 43;
  CHECK(make_folds(103, cfg) != folds);
  CHECK_THROWS_AS(make_folds(9, cfg), InputError);
}

TEST_CASE("cross validation averages exactly the first test folds") {
  Rng rng(12);
  const auto x = gaussian(rng, 300, 4);
  const Eigen::MatrixXd y = x * gaussian(rng, 4, 3) + 2.0 * gaussian(rng, 300, 3);
  CcaConfig cfg;
  cfg.seed = 5;
  const auto folds = make_folds(300, cfg);
  double manual = 0.0;
  for (std::size_t f = 0; f < 3; ++f) {
    std::vector<Eigen::Index> train;
    for (std::size_t g = 0; g < 10; ++g) {
      if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
    }
    Eigen::MatrixXd xtr(train.size(), 4), ytr(train.size(), 3), xte(folds[f].size(), 4), yte(folds[f].size(), 3);
    for (std::size_t i = 0; i < train.size(); ++i) {
      xtr.row(i) = x.row(train[i]);
      ytr.row(i) = y.row(train[i]);
    }
    for (std::size_t i = 0; i < folds[f].size(); ++i) {
      xte.row(i) = x.row(folds[f][i]);
      yte.row(i) = y.row(folds[f][i]);
    }
    manual += pwcca_score(fit_cca(xtr, ytr, cfg), xte, yte);
  }
  CHECK(cross_validated_cca(x, y, cfg) == manual / 3.0);
  CHECK(cross_validated_cca(x, y, cfg) == cross_validated_cca(x, y, cfg));

  cfg.weight_source = WeightSource::kTraining;
  const double trained = cross_validated_cca(x, y, cfg);
  CHECK(std::isfinite(trained));
  CHECK(trained != manual / 3.0);
}

TEST_CASE("tiny test folds are rejected") {
  Rng rng(13);
  const auto x = gaussian(rng, 15, 2);
  CHECK_THROWS_AS(cross_validated_cca(x, x, {}), InputError);
}

TEST_CASE("layer sweep") {
  Rng rng(14);
  const Eigen::Index n = 600;
  const auto y = gaussian(rng, n, 3);
  std::vector<Eigen::MatrixXd> layers;
  for (int l = 0; l < 12; ++l) {
    if (l == 7) {
      layers.push_back(y * gaussian(rng, 3, 8) + 0.5 * gaussian(rng, n, 8));
    } else {
      layers.push_back(gaussian(rng, n, 8));
    }
  }
  const auto one = layerwise_cca_sweep(layers, y, {}, 1);
  const auto many = layerwise_cca_sweep(layers, y, {}, 8);
  REQUIRE(one.size() == 12);
  for (std::size_t l = 0; l < 12; ++l) {
    CHECK(one[l].layer == l);
    CHECK(one[l].score == many[l].score);
    if (l != 7) CHECK(one[l].score < one[7].score);
  }

  const std::vector<Eigen::MatrixXd> same(12, layers[7]);
  const auto eq = layerwise_cca_sweep(same, y, {}, 4);
  for (const auto& s : eq) CHECK(s.score == eq[0].score);

  std::vector<Eigen::MatrixXd> bad = layers;
  bad[3] = gaussian(rng, n - 1, 8);
  CHECK_THROWS_AS(layerwise_cca_sweep(bad, y, {}, 4), InputError);
  bad[3] = Eigen::MatrixXd::Zero(n, 8);
  CHECK_THROWS_AS(layerwise_cca_sweep(bad, y, {}, 4), NumericalError);
}
