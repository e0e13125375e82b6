#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "layerprobe/error.hpp"
#include "layerprobe/probe.hpp"
#include "layerprobe/textio.hpp"
#include "support/oracles.hpp"
#include "support/probe_checks.hpp"
#include "support/probe_fixture.hpp"
#include "support/tempdir.hpp"

using namespace layerprobe;
using namespace layerprobe::probe;
using namespace layerprobe::testing;

TEST_CASE("init and layer weights") {
  const WaProbe p = init_probe(12, 8, 16, {{"t", 3}}, 1);
  CHECK(p.n_layers() == 12);
  CHECK(p.in_dim() == 8);
  CHECK(p.hidden() == 16);
  CHECK(p.theta.isZero());
  CHECK(p.b1.isZero());
  const auto w = extract_layer_weights(p);
  for (Eigen::Index l = 0; l < 12; ++l) CHECK(w[l] == doctest::Approx(1.0 / 12.0));
  LayerMask mask(12, false);
  mask[5] = mask[6] = mask[7] = true;
  const auto wm = extract_layer_weights(init_probe(12, 8, 16, {{"t", 3}}, 1, mask));
  for (Eigen::Index l = 0; l < 12; ++l) {
    CHECK(wm[l] == doctest::Approx(l >= 5 && l <= 7 ? 1.0 / 3.0 : 0.0));
  }
  CHECK(init_probe(3, 2, 4, {{"t", 2}}, 9).w1 == init_probe(3, 2, 4, {{"t", 2}}, 9).w1);
  CHECK(init_probe(3, 2, 4, {{"t", 2}}, 9).w1 != init_probe(3, 2, 4, {{"t", 2}}, 10).w1);
  CHECK_THROWS_AS(p.task_index("missing"), InputError);
}

TEST_CASE("property: layer weights sum to one") {
  Rng rng(2);
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 1 + rng.uniform_index(16);
    WaProbe p = init_probe(n, 2, 2, {{"t", 2}}, c);
    for (Eigen::Index i = 0; i < p.theta.size(); ++i) p.theta[i] = 30.0 * rng.normal();
    LayerMask mask(n);
    for (std::size_t l = 0; l < n; ++l) mask[l] = rng.uniform01() < 0.5;
    mask[rng.uniform_index(n)] = true;
    p.layer_mask = mask;
    const auto w = extract_layer_weights(p);
    CHECK(std::abs(w.sum() - 1.0) < 1e-6);
    for (std::size_t l = 0; l < n; ++l) {
      if (!mask[l]) CHECK(w[static_cast<Eigen::Index>(l)] == 0.0);
      CHECK(w[static_cast<Eigen::Index>(l)] >= 0.0);
    }
  }
}

TEST_CASE("forward") {
  Rng rng(3);
  WaProbe p = randomized(3);
  const Eigen::MatrixXd x = testing::gaussian(rng, 5, 4);
  const auto probs = forward(p, x, "a");
  CHECK(probs.size() == 3);
  CHECK(std::abs(probs.sum() - 1.0) < 1e-9);

  // Identical layers make theta irrelevant.
  Eigen::MatrixXd same(5, 4);
  for (Eigen::Index l = 0; l < 5; ++l) same.row(l) = x.row(0);
  const auto before = forward(p, same, "b");
  p.theta.setRandom();
  CHECK((forward(p, same, "b") - before).cwiseAbs().maxCoeff() < 1e-12);

  // A one-layer mask sees only that layer.
  LayerMask one(5, false);
  one[2] = true;
  WaProbe q = randomized(4, one);
  Eigen::MatrixXd only(5, 4);
  for (Eigen::Index l = 0; l < 5; ++l) only.row(l) = x.row(2);
  CHECK((forward(q, x, "a") - forward(q, only, "a")).cwiseAbs().maxCoeff() < 1e-12);

  // Zero output weights and biases give uniform probabilities.
  p.heads[0].w.setZero();
  p.heads[0].b.setZero();
  CHECK((forward(p, x, "a").array() - 1.0 / 3.0).abs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(forward(p, x, "zzz"), InputError);
  CHECK_THROWS_AS(forward(p, testing::gaussian(rng, 4, 4), "a"), InputError);
  CHECK_THROWS_AS(forward(p, testing::gaussian(rng, 5, 3), "a"), InputError);
}

TEST_CASE("multitask loss") {
  Rng rng(5);
  WaProbe p = randomized(5);
  for (auto& h : p.heads) {
    h.w.setZero();
    h.b.setZero();
  }
  const auto a = random_examples(rng, 7, 5, 4, 3);
  const auto b = random_examples(rng, 4, 5, 4, 2);
  CHECK(loss_multitask(p, batches_of(a, {})) == doctest::Approx(std::log(3.0)));
  CHECK(loss_multitask(p, batches_of(a, b)) == doctest::Approx((std::log(3.0) + std::log(2.0)) / 2));

  WaProbe r = randomized(6);
  const double la = loss_multitask(r, batches_of(a, {}));
  const double lb = loss_multitask(r, batches_of({}, b));
  CHECK(loss_multitask(r, batches_of(a, b)) == doctest::Approx((la + lb) / 2));

  // Perfect predictions drive the loss to zero.
  WaProbe perfect = init_probe(1, 1, 1, {{"a", 2}}, 0);
  perfect.w1(0, 0) = 1.0;
  perfect.heads[0].w << -1000.0, 1000.0;
  Example ex{Eigen::MatrixXd::Constant(1, 1, 1.0), 1};
  CHECK(loss_multitask(perfect, {{"a", {&ex}}}) <= 1e-6);
  // Clamping keeps a confidently wrong prediction finite.
  ex.label = 0;
  CHECK(loss_multitask(perfect, {{"a", {&ex}}}) == doctest::Approx(-std::log(kProbClamp)));

  CHECK_THROWS_AS(loss_multitask(r, batches_of({}, {})), InputError);
}

TEST_CASE("property: gradients match central finite differences") {
  Rng rng(7);
  for (int c = 0; c < 20; ++c) {
    const WaProbe p = randomized(100 + c);
    const auto a = random_examples(rng, 6, 5, 4, 3);
    const auto b = random_examples(rng, 3, 5, 4, 2);
    CHECK(max_relative_fd_error(p, batches_of(a, b)) < 1e-4);
  }
}

TEST_CASE("gradient structure") {
  Rng rng(8);
  // Identical layers give zero theta gradient.
  auto a = random_examples(rng, 5, 5, 4, 3);
  for (auto& ex : a) {
    for (Eigen::Index l = 1; l < 5; ++l) ex.layers.row(l) = ex.layers.row(0);
  }
  CHECK(gradient(randomized(8), batches_of(a, {})).theta.cwiseAbs().maxCoeff() < 1e-12);
  // Masked-out layers receive none either.
  LayerMask mask = {true, false, true, false, false};
  const auto b = random_examples(rng, 5, 5, 4, 2);
  const auto g = gradient(randomized(9, mask), batches_of({}, b));
  CHECK(g.theta[1] == 0.0);
  CHECK(g.theta[3] == 0.0);
  CHECK(g.theta[4] == 0.0);
  CHECK(g.theta[0] != 0.0);
  CHECK(g.head_w[0].isZero());
  CHECK(max_relative_fd_error(randomized(9, mask), batches_of({}, b)) < 1e-4);
}

TEST_CASE("flatten and unflatten") {
  WaProbe p = randomized(10);
  const auto v = flatten(p);
  CHECK(v.size() == 5 + 4 * 6 + 6 + 6 * 3 + 3 + 6 * 2 + 2);
  WaProbe q = init_probe(5, 4, 6, kTwoTasks, 0);
  unflatten(q, v);
  CHECK(flatten(q) == v);
  CHECK_THROWS_AS(unflatten(q, v.head(v.size() - 1)), InputError);
  Eigen::VectorXd longer(v.size() + 1);
  longer << v, 0.0;
  CHECK_THROWS_AS(unflatten(q, longer), InputError);
}

TEST_CASE("classification metrics") {
  auto r = classification_metrics({0, 1, 2}, {0, 1, 2}, 3);
  CHECK(r.accuracy == 1.0);
  CHECK(r.macro_f1 == 1.0);
  r = classification_metrics({0, 1, 2, 0, 1, 2}, {0, 0, 0, 0, 0, 0}, 3);
  CHECK(r.accuracy == doctest::Approx(1.0 / 3.0));
  CHECK(r.macro_f1 == doctest::Approx(0.5 / 3.0));
  r = classification_metrics({1}, {0}, 2);
  CHECK(r.accuracy == 0.0);
  CHECK(r.macro_f1 == 0.0);
  // An absent class still counts in the average.
  r = classification_metrics({0, 1}, {0, 1}, 3);
  CHECK(r.macro_f1 == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(classification_metrics({}, {}, 2), InputError);
  CHECK_THROWS_AS(classification_metrics({0}, {0, 1}, 2), InputError);
  CHECK_THROWS_AS(classification_metrics({0}, {5}, 2), InputError);
  CHECK_THROWS_AS(evaluate(randomized(1), {}, "a"), InputError);
}

TEST_CASE("best-k layer selection") {
  Eigen::VectorXd w(12);
  w << 0.01, 0.01, 0.02, 0.03, 0.05, 0.2, 0.25, 0.3, 0.05, 0.04, 0.02, 0.02;
  CHECK(mask_indices(select_best_k_layers(w)) == std::vector<std::size_t>{5, 6, 7});
  CHECK(mask_indices(select_best_k_layers(Eigen::VectorXd::Constant(12, 1.0 / 12))) ==
        std::vector<std::size_t>{0, 1, 2});
  CHECK(mask_indices(select_best_k_layers(w, 12)).size() == 12);
  CHECK(mask_indices(select_best_k_layers(w, 1)) == std::vector<std::size_t>{7});
  CHECK_THROWS_AS(select_best_k_layers(w, 0), ConfigError);
  CHECK_THROWS_AS(select_best_k_layers(w, 13), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.tasks = {{"t", 2}};
  CHECK_NOTHROW(c.validate());
  auto bad = c;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.newbob.factor = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.tasks.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training on the single-informative-layer fixture") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto f = testing::informative_layer_fixture(seed);
    TrainConfig c;
    c.lr = 0.5;
    c.seed = seed;
    c.tasks = {{"toy", 3}};
    const auto r = train_probe(f.train, f.dev, c);
    REQUIRE(r.history.size() == 10);
    const auto w = extract_layer_weights(r.probe);
    CHECK(std::abs(w.sum() - 1.0) < 1e-6);
    CHECK(w[7] > 0.5);
    CHECK(r.history[static_cast<std::size_t>(r.best_epoch - 1)].dev_accuracy >= 0.95);
    CHECK(evaluate(r.probe, f.dev[0].examples, "toy").macro_f1 ==
          r.history[static_cast<std::size_t>(r.best_epoch - 1)].dev_macro_f1);

    const double full_f1 = evaluate(r.probe, f.test[0].examples, "toy").macro_f1;
    c.layer_mask = select_best_k_layers(w, 3);
    CHECK(c.layer_mask[7]);
    const auto r3 = train_probe(f.train, f.dev, c);
    const double best3_f1 = evaluate(r3.probe, f.test[0].examples, "toy").macro_f1;
    CHECK(std::abs(best3_f1 - full_f1) * 100.0 <= 2.0);
  }
}

TEST_CASE("training is deterministic and anneals") {
  const auto f = testing::informative_layer_fixture(4, 4, 1, 2, 4, 120, 40, 40);
  TrainConfig c;
  c.lr = 0.2;
  c.hidden = 16;
  c.seed = 11;
  c.tasks = {{"toy", 2}};
  const auto r1 = train_probe(f.train, f.dev, c);
  const auto r2 = train_probe(f.train, f.dev, c);
  CHECK(flatten(r1.probe) == flatten(r2.probe));
  for (std::size_t e = 1; e < r1.history.size(); ++e) {
    const double prev = r1.history[e - 1].dev_macro_f1;
    const double cur = r1.history[e].dev_macro_f1;
    const bool stalled = prev != 0.0 && (cur - prev) / std::abs(prev) < c.newbob.improvement_threshold;
    const double want = stalled ? r1.history[e].lr * c.newbob.factor : r1.history[e].lr;
    if (e + 1 < r1.history.size()) CHECK(r1.history[e + 1].lr == want);
  }
  CHECK(r1.history.front().lr == 0.2);
  c.seed = 12;
  CHECK(flatten(train_probe(f.train, f.dev, c).probe) != flatten(r1.probe));
}

TEST_CASE("loss decreases over the first epoch with full batches") {
  const auto f = testing::informative_layer_fixture(5, 4, 1, 2, 4, 100, 20, 20);
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 1;
  c.batch = 100;
  c.hidden = 32;
  c.tasks = {{"toy", 2}};
  WaProbe p = init_probe(4, 4, 32, c.tasks, c.seed);
  TaskBatch b{"toy", {}};
  for (const auto& ex : f.train[0].examples) b.examples.push_back(&ex);
  double prev = loss_multitask(p, {b});
  for (int step = 0; step < 20; ++step) {
    const auto g = gradient(p, {b});
    unflatten(p, flatten(p) - c.lr * flatten(g));
    const double cur = loss_multitask(p, {b});
    CHECK(cur < prev);
    prev = cur;
  }
}

TEST_CASE("training errors") {
  const auto f = testing::informative_layer_fixture(6, 3, 1, 2, 2, 20, 10, 10);
  TrainConfig c;
  c.hidden = 4;
  c.tasks = {{"toy", 2}};
  CHECK_THROWS_AS(train_probe({}, f.dev, c), InputError);
  CHECK_THROWS_AS(train_probe(f.train, {}, c), InputError);
  auto wrong = f.train;
  wrong[0].task_id = "other";
  CHECK_THROWS_AS(train_probe(wrong, f.dev, c), InputError);
  c.lr = 1e300;
  try {
    train_probe(f.train, f.dev, c);
    FAIL("expected divergence");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("at epoch ") != std::string::npos);
  }
}

TEST_CASE("LPRB round trip and errors") {
  testing::TempDir dir;
  LayerMask mask = {true, true, false, true, true};
  const WaProbe p = randomized(12, mask);
  write_probe(dir / "p.lprb", p);
  const WaProbe q = read_probe(dir / "p.lprb");
  CHECK(flatten(q) == flatten(p));
  CHECK(q.layer_mask == p.layer_mask);
  REQUIRE(q.heads.size() == 2);
  CHECK(q.heads[1].id == "b");
  CHECK(q.heads[1].b.size() == 2);

  std::string bytes = text::read_file(dir / "p.lprb");
  text::write_file(dir / "bad_magic", "XXXX" + bytes.substr(4));
  CHECK_THROWS_AS(read_probe(dir / "bad_magic"), InputError);
  text::write_file(dir / "short", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_probe(dir / "short"), InputError);
  text::write_file(dir / "long", bytes + "z");
  CHECK_THROWS_AS(read_probe(dir / "long"), InputError);
  std::string v2 = bytes;
  v2[4] = 2;
  text::write_file(dir / "v2", v2);
  CHECK_THROWS_AS(read_probe(dir / "v2"), InputError);
  CHECK_THROWS_AS(read_probe(dir / "missing"), InputError);
}
