#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "layerprobe/ctc_eval.hpp"
#include "layerprobe/error.hpp"
#include "support/ctc_helpers.hpp"
#include "support/oracles.hpp"

using namespace layerprobe;
using namespace layerprobe::ctc;
using namespace layerprobe::testing;

TEST_CASE("greedy decoding collapses repeats and drops blanks") {
  CHECK(greedy_decode(one_hot_path({0, 1, 1, 0, 1, 2, 2, 0}, 3)) == PhoneSeq{1, 1, 2});
  CHECK(greedy_decode(one_hot_path({0, 0, 0}, 3)).empty());
  CHECK(greedy_decode(one_hot_path({2, 2, 2}, 3)) == PhoneSeq{2});
  CHECK(greedy_decode(LogitGrid(0, 3)).empty());
  // Ties go to the lowest index, here the blank.
  LogitGrid tie = LogitGrid::Zero(2, 3);
  CHECK(greedy_decode(tie).empty());
  tie(1, 1) = 1.0;
  tie(1, 2) = 1.0;
  CHECK(greedy_decode(tie) == PhoneSeq{1});
}

TEST_CASE("greedy decoding matches hand-collapsed random paths") {
  Rng rng(1);
  for (int c = 0; c < 200; ++c) {
    std::vector<int> path(1 + rng.uniform_index(12));
    for (auto& p : path) p = static_cast<int>(rng.uniform_index(4));
    PhoneSeq want;
    for (std::size_t t = 0; t < path.size(); ++t) {
      if (path[t] != 0 && (t == 0 || path[t] != path[t - 1])) want.push_back(path[t]);
    }
    CHECK(greedy_decode(one_hot_path(path, 4)) == want);
  }
}

TEST_CASE("levenshtein") {
  auto a = levenshtein_align({1, 2, 3}, {1, 2, 3});
  CHECK(a.errors() == 0);
  a = levenshtein_align({1, 2, 3}, {1, 3});
  CHECK(a.deletions == 1);
  CHECK(a.errors() == 1);
  a = levenshtein_align({1, 2}, {1, 4, 2});
  CHECK(a.insertions == 1);
  a = levenshtein_align({1, 2}, {3, 4});
  CHECK(a.substitutions == 2);
  a = levenshtein_align({}, {1, 2});
  CHECK(a.insertions == 2);
  CHECK(a.trace.size() == 2);
  // Diagonal preferred over an equal-cost deletion + insertion.
  a = levenshtein_align({1}, {2});
  CHECK(a.substitutions == 1);
  CHECK(a.trace.size() == 1);
}

TEST_CASE("property: edit counts match the recursive oracle") {
  Rng rng(2);
  for (int c = 0; c < 1000; ++c) {
    const auto r = random_seq(rng, 5, 4);
    const auto h = random_seq(rng, 5, 4);
    const auto a = levenshtein_align(r, h);
    CHECK(a.errors() == layerprobe::testing::edit_distance_oracle(r, h));
    int ref_steps = 0;
    int hyp_steps = 0;
    for (const auto& s : a.trace) {
      if (s.op != EditOp::kInsertion) CHECK(s.ref_pos == ref_steps++);
      if (s.op != EditOp::kDeletion) CHECK(s.hyp_pos == hyp_steps++);
      if (s.op == EditOp::kMatch) CHECK(r[s.ref_pos] == h[s.hyp_pos]);
      if (s.op == EditOp::kSubstitution) CHECK(r[s.ref_pos] != h[s.hyp_pos]);
    }
    CHECK(ref_steps == static_cast<int>(r.size()));
    CHECK(hyp_steps == static_cast<int>(h.size()));
  }
}

TEST_CASE("phone error rate") {
  CHECK(phone_error_rate({{{1, 2, 3, 4}, {1, 2, 3, 4}}}) == 0.0);
  CHECK(phone_error_rate({{{1, 2, 3, 4}, {1, 3, 4}}}) == 25.0);
  CHECK(phone_error_rate({{{1}, {2, 3, 4}}}) == 300.0);
  CHECK_THROWS_AS(phone_error_rate({{{}, {1}}}), InputError);
  CHECK_THROWS_AS(phone_error_rate({}), InputError);
}

TEST_CASE("property: PER matches the oracle and ignores utterance order") {
  Rng rng(3);
  for (int c = 0; c < 100; ++c) {
    std::vector<RefHyp> pairs;
    long long errors = 0;
    long long len = 0;
    for (int i = 0; i < 10; ++i) {
      PhoneSeq r;
      do r = random_seq(rng, 5, 3); while (r.empty());
      const auto h = random_seq(rng, 5, 3);
      errors += layerprobe::testing::edit_distance_oracle(r, h);
      len += static_cast<long long>(r.size());
      pairs.push_back({r, h});
    }
    const double per = phone_error_rate(pairs);
    CHECK(per == doctest::Approx(100.0 * static_cast<double>(errors) / static_cast<double>(len)));
    rng.shuffle(pairs);
    CHECK(phone_error_rate(pairs) == per);
  }
}

TEST_CASE("ctc minimum frames and infeasible targets") {
  CHECK(ctc_min_frames({}) == 0);
  CHECK(ctc_min_frames({1, 2}) == 2);
  CHECK(ctc_min_frames({1, 1}) == 3);
  CHECK(ctc_min_frames({1, 1, 1}) == 5);
  Rng rng(4);
  const auto r = ctc_forward_loss(random_grid(rng, 2, 3), {1, 1});
  CHECK_FALSE(r.feasible);
  CHECK(std::isinf(r.loss));
  CHECK(r.loss > 0.0);
  CHECK(r.gradient.size() == 0);
  CHECK_THROWS_AS(ctc_forward_loss(random_grid(rng, 3, 3), {3}), InputError);
  CHECK_THROWS_AS(ctc_forward_loss(random_grid(rng, 3, 3), {0}), InputError);
  LogitGrid bad = random_grid(rng, 3, 3);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ctc_forward_loss(bad, {1}), InputError);
}

TEST_CASE("ctc loss equals brute-force path enumeration") {
  Rng rng(5);
  int checked = 0;
  for (int n_phones = 1; n_phones <= 3; ++n_phones) {
    const auto targets = all_targets(n_phones, 3);
    for (Eigen::Index t = 1; t <= 6; ++t) {
      const auto grid = random_grid(rng, t, n_phones + 1);
      for (const auto& target : targets) {
        const auto r = ctc_forward_loss(grid, target);
        if (t < ctc_min_frames(target)) {
          CHECK_FALSE(r.feasible);
          continue;
        }
        REQUIRE(r.feasible);
        CHECK(std::abs(r.loss - layerprobe::testing::ctc_brute_force_loss(grid, target)) < 1e-6);
        ++checked;
      }
    }
  }
  CHECK(checked > 200);
}

TEST_CASE("ctc gradient matches finite differences") {
  Rng rng(6);
  for (int c = 0; c < 10; ++c) {
    const auto grid = random_grid(rng, 6, 4);
    PhoneSeq target;
    do target = random_seq(rng, 3, 3); while (ctc_min_frames(target) > 6);
    const auto r = ctc_forward_loss(grid, target);
    const double h = 1e-5;
    for (Eigen::Index t = 0; t < grid.rows(); ++t) {
      for (Eigen::Index k = 0; k < grid.cols(); ++k) {
        auto plus = grid;
        auto minus = grid;
        plus(t, k) += h;
        minus(t, k) -= h;
        const double fd = (ctc_forward_loss(plus, target).loss - ctc_forward_loss(minus, target).loss) / (2 * h);
        CHECK(std::abs(fd - r.gradient(t, k)) < 1e-6);
      }
    }
    // Softmax minus occupancy: each row sums to zero.
    CHECK(r.gradient.rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("ctc is stable for long confident grids") {
  LogitGrid g = LogitGrid::Constant(400, 5, -50.0);
  for (Eigen::Index t = 0; t < 400; ++t) g(t, t % 2 == 0 ? 0 : 1 + (t / 2) % 4) = 50.0;
  const auto r = ctc_forward_loss(g, greedy_decode(g));
  CHECK(r.feasible);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss < 1e-6);
}

TEST_CASE("mapsswe identical systems") {
  const std::vector<MapsswePair> pairs = {{{1, 2, 3}, {1, 3, 3}, {1, 3, 3}}, {{2, 2}, {2}, {2}}};
  const auto r = mapsswe_test(pairs);
  CHECK(r.w == 0.0);
  CHECK(r.p == 1.0);
  CHECK(significance_stars(r.p).empty());
  const auto single = mapsswe_test({{{1}, {2}, {2}}});
  CHECK(single.p == 1.0);
}

TEST_CASE("mapsswe segmentation") {
  // Positions 0, 2 and 4 are correct in both; two error islands remain.
  const MapsswePair p{{1, 2, 3, 4, 5}, {1, 9, 3, 9, 5}, {1, 2, 3, 4, 5}};
  CHECK(mapsswe_segments(p, SegmentMode::kBothCorrect) == std::vector<double>{1.0, 1.0});
  CHECK(mapsswe_segments(p, SegmentMode::kUtterance) == std::vector<double>{2.0});
  // Adjacent errors share a segment.
  const MapsswePair q{{1, 2, 3, 4, 5}, {1, 9, 9, 4, 5}, {1, 2, 3, 4, 5}};
  CHECK(mapsswe_segments(q, SegmentMode::kBothCorrect) == std::vector<double>{2.0});
  // An insertion next to a correct token keeps it out of the boundary set.
  const MapsswePair r{{1, 2, 3}, {1, 7, 2, 3}, {1, 2, 3}};
  CHECK(mapsswe_segments(r, SegmentMode::kBothCorrect) == std::vector<double>{1.0});
  const MapsswePair s{{1, 2}, {1, 2, 8}, {1, 2}};
  CHECK(mapsswe_segments(s, SegmentMode::kBothCorrect) == std::vector<double>{1.0});
  // Error-count differences are conserved across segments.
  Rng rng(7);
  for (int c = 0; c < 300; ++c) {
    MapsswePair m{random_seq(rng, 8, 3), random_seq(rng, 8, 3), random_seq(rng, 8, 3)};
    double total = 0.0;
    for (double z : mapsswe_segments(m, SegmentMode::kBothCorrect)) total += z;
    CHECK(total == levenshtein_align(m.ref, m.hyp_a).errors() - levenshtein_align(m.ref, m.hyp_b).errors());
  }
}

TEST_CASE("property: mapsswe is antisymmetric under system swap") {
  Rng rng(8);
  for (int c = 0; c < 100; ++c) {
    std::vector<MapsswePair> pairs;
    std::vector<MapsswePair> swapped;
    for (int i = 0; i < 20; ++i) {
      MapsswePair m{random_seq(rng, 8, 4), random_seq(rng, 8, 4), random_seq(rng, 8, 4)};
      if (m.ref.empty()) m.ref = {1};
      pairs.push_back(m);
      swapped.push_back({m.ref, m.hyp_b, m.hyp_a});
    }
    MapssweResult a;
    MapssweResult b;
    try {
      a = mapsswe_test(pairs);
      b = mapsswe_test(swapped);
    } catch (const InputError&) {
      continue;
    }
    CHECK(a.w == -b.w);
    CHECK(a.p == b.p);
    CHECK(std::abs(a.p - layerprobe::testing::normal_two_sided_p_oracle(a.w)) < 1e-9);
  }
}

TEST_CASE("mapsswe statistic by hand") {
  // Z = {1, 1, 2, 0, 1}: mean 1, sample sd sqrt(0.5), W = 1 * sqrt(5) / sqrt(0.5).
  std::vector<MapsswePair> pairs = {
      {{1}, {2}, {1}}, {{1}, {2}, {1}}, {{1, 2}, {3, 3}, {1, 2}}, {{1}, {2}, {2}}, {{1}, {2}, {1}}};
  const auto r = mapsswe_test(pairs, SegmentMode::kUtterance);
  REQUIRE(r.z == std::vector<double>{1, 1, 2, 0, 1});
  CHECK(r.w == doctest::Approx(std::sqrt(10.0)));
  CHECK(std::abs(r.p - layerprobe::testing::normal_two_sided_p_oracle(std::sqrt(10.0))) < 1e-9);
  CHECK(significance_stars(r.p) == "*");
}

TEST_CASE("mapsswe degenerate cases") {
  const auto constant = mapsswe_test({{{1}, {2}, {1}}, {{1}, {2}, {1}}}, SegmentMode::kUtterance);
  CHECK(std::isinf(constant.w));
  CHECK(constant.w > 0.0);
  CHECK(constant.p == 0.0);
  CHECK(significance_stars(constant.p) == "***");
  CHECK_THROWS_AS(mapsswe_test({{{1}, {2}, {1}}}, SegmentMode::kUtterance), InputError);
}

TEST_CASE("significance stars and p values") {
  CHECK(significance_stars(0.018) == "*");
  CHECK(significance_stars(0.0009) == "***");
  CHECK(significance_stars(0.001) == "*");
  CHECK(significance_stars(0.05).empty());
  CHECK(significance_stars(0.049999) == "*");
  CHECK(significance_stars(1.0).empty());
  for (double w = -6.0; w <= 6.0; w += 0.01) {
    CHECK(std::abs(two_sided_p(w) - layerprobe::testing::normal_two_sided_p_oracle(w)) < 1e-9);
  }
  CHECK(two_sided_p(0.0) == 1.0);
}
