#pragma once

// Random probes and batches plus a central-difference gradient check.

#include <algorithm>
#include <cmath>

#include "layerprobe/probe.hpp"
#include "support/oracles.hpp"

namespace layerprobe::testing {

using probe::Example;
using probe::LayerMask;
using probe::TaskBatch;
using probe::TaskSpec;
using probe::WaProbe;

inline const std::vector<TaskSpec> kTwoTasks = {{"a", 3}, {"b", 2}};

inline std::vector<Example> random_examples(Rng& rng, std::size_t n, std::size_t layers,
                                            Eigen::Index dim, int classes) {
  std::vector<Example> out(n);
  for (auto& ex : out) {
    ex.layers = gaussian(rng, static_cast<Eigen::Index>(layers), dim);
    ex.label = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(classes)));
  }
  return out;
}

inline std::vector<TaskBatch> batches_of(const std::vector<Example>& a, const std::vector<Example>& b) {
  TaskBatch ba{"a", {}};
  TaskBatch bb{"b", {}};
  for (const auto& ex : a) ba.examples.push_back(&ex);
  for (const auto& ex : b) bb.examples.push_back(&ex);
  return {ba, bb};
}

inline WaProbe randomized(std::uint64_t seed, LayerMask mask = {}) {
  WaProbe p = probe::init_probe(5, 4, 6, kTwoTasks, seed, std::move(mask));
  Rng rng(seed + 100);
  for (Eigen::Index i = 0; i < p.theta.size(); ++i) p.theta[i] = rng.normal();
  for (Eigen::Index i = 0; i < p.b1.size(); ++i) p.b1[i] = 0.3 * rng.normal();
  for (auto& h : p.heads) {
    for (Eigen::Index i = 0; i < h.b.size(); ++i) h.b[i] = 0.3 * rng.normal();
  }
  return p;
}

inline double max_relative_fd_error(const WaProbe& net, const std::vector<TaskBatch>& batches) {
  const Eigen::VectorXd analytic = probe::flatten(probe::gradient(net, batches));
  const Eigen::VectorXd params = probe::flatten(net);
  const double h = 1e-4;
  double worst = 0.0;
  WaProbe work = net;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    Eigen::VectorXd p = params;
    p[i] += h;
    probe::unflatten(work, p);
    const double up = probe::loss_multitask(work, batches);
    p[i] -= 2 * h;
    probe::unflatten(work, p);
    const double down = probe::loss_multitask(work, batches);
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace layerprobe::testing
