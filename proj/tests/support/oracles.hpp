#pragma once

// Independent reference computations used to check the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "layerprobe/rng.hpp"

namespace layerprobe::testing {

inline Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
  }
  return m;
}

/// Random d x d matrix U diag(s) V^T with singular values log-spaced in [1, cond].
inline Eigen::MatrixXd conditioned_matrix(Rng& rng, Eigen::Index d, double cond) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qu(gaussian(rng, d, d));
  Eigen::HouseholderQR<Eigen::MatrixXd> qv(gaussian(rng, d, d));
  const Eigen::MatrixXd u = qu.householderQ();
  const Eigen::MatrixXd v = qv.householderQ();
  Eigen::VectorXd s(d);
  for (Eigen::Index i = 0; i < d; ++i) s[i] = std::pow(cond, d > 1 ? double(i) / double(d - 1) : 0.0);
  return u * s.asDiagonal() * v.transpose();
}

/// Canonical correlations as singular values of Qx^T Qy from thin QR of the
/// centered views (no regularization).
inline Eigen::VectorXd qr_canonical_correlations(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  Eigen::HouseholderQR<Eigen::MatrixXd> qx(xc);
  Eigen::HouseholderQR<Eigen::MatrixXd> qy(yc);
  const Eigen::MatrixXd ax = qx.householderQ() * Eigen::MatrixXd::Identity(x.rows(), x.cols());
  const Eigen::MatrixXd ay = qy.householderQ() * Eigen::MatrixXd::Identity(y.rows(), y.cols());
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ax.transpose() * ay);
  const Eigen::Index k = std::min(x.cols(), y.cols());
  return svd.singularValues().head(k);
}

inline double pearson_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    saa += a[i] * a[i];
    sbb += b[i] * b[i];
    sab += a[i] * b[i];
  }
  return (sab - sa * sb / n) / std::sqrt((saa - sa * sa / n) * (sbb - sb * sb / n));
}

/// Monte-Carlo null level for a held-out PWCCA score: the given quantile of
/// max_i |r_i| over k Pearson correlations of independent Gaussian pairs of
/// length n_test. A weighted mean of clipped correlations never exceeds it.
inline double pwcca_null_threshold(std::size_t n_test, std::size_t k, std::size_t trials,
                                   double quantile, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> maxima;
  std::vector<double> a(n_test), b(n_test);
  for (std::size_t t = 0; t < trials; ++t) {
    double m = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < n_test; ++j) {
        a[j] = rng.normal();
        b[j] = rng.normal();
      }
      m = std::max(m, std::abs(pearson_oracle(a, b)));
    }
    maxima.push_back(m);
  }
  std::sort(maxima.begin(), maxima.end());
  return maxima[static_cast<std::size_t>(quantile * static_cast<double>(trials - 1))];
}

/// CTC loss by enumerating every frame path over n_classes symbols.
inline double ctc_brute_force_loss(const Eigen::MatrixXd& logits, const std::vector<int>& target) {
  const auto t_len = logits.rows();
  const auto c = logits.cols();
  Eigen::MatrixXd prob(t_len, c);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    double z = 0.0;
    for (Eigen::Index k = 0; k < c; ++k) z += std::exp(logits(t, k));
    for (Eigen::Index k = 0; k < c; ++k) prob(t, k) = std::exp(logits(t, k)) / z;
  }
  std::vector<int> path(static_cast<std::size_t>(t_len), 0);
  double total = 0.0;
  while (true) {
    std::vector<int> collapsed;
    int prev = -1;
    for (int s : path) {
      if (s != prev && s != 0) collapsed.push_back(s);
      prev = s;
    }
    if (collapsed == target) {
      double p = 1.0;
      for (Eigen::Index t = 0; t < t_len; ++t) p *= prob(t, path[static_cast<std::size_t>(t)]);
      total += p;
    }
    std::size_t i = 0;
    while (i < path.size() && path[i] == c - 1) path[i++] = 0;
    if (i == path.size()) break;
    ++path[i];
  }
  return -std::log(total);
}

/// Unit-cost edit distance by memoized recursion over suffixes.
inline int edit_distance_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<std::pair<std::size_t, std::size_t>, int> memo;
  std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
    if (i == a.size()) return static_cast<int>(b.size() - j);
    if (j == b.size()) return static_cast<int>(a.size() - i);
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const int v = std::min({go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1), go(i + 1, j) + 1, go(i, j + 1) + 1});
    memo[key] = v;
    return v;
  };
  return go(0, 0);
}

/// Two-sided normal p-value from the CDF written with erf.
inline double normal_two_sided_p_oracle(double w) {
  const double phi = 0.5 * (1.0 + std::erf(std::abs(w) / std::sqrt(2.0)));
  return 2.0 * (1.0 - phi);
}

}  // namespace layerprobe::testing
