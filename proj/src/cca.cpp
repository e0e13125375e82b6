#include "layerprobe/cca.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "layerprobe/error.hpp"
#include "layerprobe/rng.hpp"

namespace layerprobe::cca {

namespace {

// Symmetric inverse square root with an eigenvalue floor.
Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& s, double floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  if (es.info() != Eigen::Success) throw NumericalError("covariance eigendecomposition failed");
  Eigen::VectorXd inv = es.eigenvalues().unaryExpr(
      [floor](double v) { return 1.0 / std::sqrt(std::max(v, floor)); });
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ac = a.array() - a.mean();
  const Eigen::VectorXd bc = b.array() - b.mean();
  const double na = ac.norm();
  const double nb = bc.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return ac.dot(bc) / (na * nb);
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace

void CcaConfig::validate() const {
  if (!(reg_epsilon > 0.0)) throw ConfigError("reg_epsilon must be > 0");
  if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
  if (n_test_folds < 1 || n_test_folds >= n_folds) {
    throw ConfigError("n_test_folds must satisfy 1 <= n_test_folds < n_folds");
  }
  if (max_components && *max_components < 1) throw ConfigError("max_components must be >= 1");
}

CcaModel fit_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const CcaConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = x.rows();
  if (y.rows() != n) throw InputError("CCA views have different row counts");
  if (n < 2) throw InputError("CCA needs at least 2 rows");
  if (x.cols() < 1 || y.cols() < 1) throw InputError("CCA views need at least one column");

  CcaModel m;
  m.mean_x = x.colwise().mean().transpose();
  m.mean_y = y.colwise().mean().transpose();
  const Eigen::MatrixXd xc = x.rowwise() - m.mean_x.transpose();
  const Eigen::MatrixXd yc = y.rowwise() - m.mean_y.transpose();
  const double denom = static_cast<double>(n - 1);
  Eigen::MatrixXd sxx = xc.transpose() * xc / denom;
  Eigen::MatrixXd syy = yc.transpose() * yc / denom;
  const Eigen::MatrixXd sxy = xc.transpose() * yc / denom;

  const double eps_x = cfg.reg_epsilon * sxx.diagonal().mean();
  const double eps_y = cfg.reg_epsilon * syy.diagonal().mean();
  if (!(eps_x > 0.0) || !(eps_y > 0.0) || !std::isfinite(eps_x) || !std::isfinite(eps_y)) {
    throw NumericalError("degenerate covariance: a CCA view has zero variance");
  }
  sxx.diagonal().array() += eps_x;
  syy.diagonal().array() += eps_y;

  const Eigen::MatrixXd wx = inverse_sqrt(sxx, eps_x);
  const Eigen::MatrixXd wy = inverse_sqrt(syy, eps_y);
  const Eigen::MatrixXd t = wx * sxy * wy;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(t, Eigen::ComputeThinU | Eigen::ComputeThinV);

  Eigen::Index k = std::min(x.cols(), y.cols());
  if (cfg.max_components) k = std::min(k, *cfg.max_components);
  m.proj_x = wx * svd.matrixU().leftCols(k);
  m.proj_y = wy * svd.matrixV().leftCols(k);
  m.train_correlations = svd.singularValues().head(k).cwiseMax(0.0).cwiseMin(1.0);
  if (!m.proj_x.allFinite() || !m.proj_y.allFinite()) {
    throw NumericalError("non-finite CCA projections");
  }
  return m;
}

PwccaResult pwcca_detail(const CcaModel& model, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& y, const Eigen::MatrixXd* weight_x) {
  if (x.cols() != model.mean_x.size() || y.cols() != model.mean_y.size()) {
    throw InputError("PWCCA data columns do not match the model");
  }
  if (x.rows() != y.rows()) throw InputError("PWCCA views have different row counts");
  const Eigen::MatrixXd xc = x.rowwise() - model.mean_x.transpose();
  const Eigen::MatrixXd yc = y.rowwise() - model.mean_y.transpose();
  const Eigen::MatrixXd hx = xc * model.proj_x;
  const Eigen::MatrixXd hy = yc * model.proj_y;
  const Eigen::Index k = model.components();

  PwccaResult r;
  r.correlations.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    r.correlations[i] = std::clamp(pearson(hx.col(i), hy.col(i)), 0.0, 1.0);
  }

  Eigen::MatrixXd wxc;
  Eigen::MatrixXd whx;
  if (weight_x) {
    if (weight_x->cols() != model.mean_x.size()) throw InputError("weight data columns mismatch");
    wxc = weight_x->rowwise() - model.mean_x.transpose();
    whx = wxc * model.proj_x;
  }
  const Eigen::MatrixXd& xw = weight_x ? wxc : xc;
  const Eigen::MatrixXd& hw = weight_x ? whx : hx;

  r.weights.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double norm = hw.col(i).norm();
    if (norm == 0.0) {
      r.weights[i] = 0.0;
      continue;
    }
    const Eigen::VectorXd h = hw.col(i) / norm;
    r.weights[i] = (h.transpose() * xw).cwiseAbs().sum();
  }
  const double total = r.weights.sum();
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw NumericalError("PWCCA weights sum to zero (all-zero representation view?)");
  }
  r.weights /= total;
  r.score = r.weights.dot(r.correlations);
  return r;
}

double pwcca_score(const CcaModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  return pwcca_detail(model, x, y).score;
}

std::vector<std::vector<Eigen::Index>> make_folds(Eigen::Index n, const CcaConfig& cfg) {
  cfg.validate();
  if (n < cfg.n_folds) throw InputError("fewer rows than folds");
  Rng rng(cfg.seed);
  auto perm = rng.permutation(static_cast<std::size_t>(n));
  std::vector<std::vector<Eigen::Index>> folds(static_cast<std::size_t>(cfg.n_folds));
  const auto k = static_cast<std::size_t>(cfg.n_folds);
  const auto total = static_cast<std::size_t>(n);
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t lo = f * total / k;
    const std::size_t hi = (f + 1) * total / k;
    for (std::size_t i = lo; i < hi; ++i) folds[f].push_back(static_cast<Eigen::Index>(perm[i]));
  }
  return folds;
}

double cross_validated_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                           const CcaConfig& cfg) {
  return cross_validated_cca(x, y, cfg, make_folds(x.rows(), cfg));
}

double cross_validated_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                           const CcaConfig& cfg,
                           const std::vector<std::vector<Eigen::Index>>& folds) {
  cfg.validate();
  if (x.rows() != y.rows()) throw InputError("CCA views have different row counts");
  if (static_cast<int>(folds.size()) != cfg.n_folds) throw InputError("fold plan size mismatch");
  double sum = 0.0;
  for (int f = 0; f < cfg.n_test_folds; ++f) {
    const auto& test = folds[static_cast<std::size_t>(f)];
    if (test.size() < 2) throw InputError("test fold too small to evaluate (fewer than 2 rows)");
    std::vector<Eigen::Index> train;
    for (std::size_t g = 0; g < folds.size(); ++g) {
      if (static_cast<int>(g) == f) continue;
      train.insert(train.end(), folds[g].begin(), folds[g].end());
    }
    const Eigen::MatrixXd xtr = take_rows(x, train);
    const Eigen::MatrixXd ytr = take_rows(y, train);
    const CcaModel model = fit_cca(xtr, ytr, cfg);
    const Eigen::MatrixXd xte = take_rows(x, test);
    const Eigen::MatrixXd yte = take_rows(y, test);
    const Eigen::MatrixXd* wx = cfg.weight_source == WeightSource::kTraining ? &xtr : nullptr;
    sum += pwcca_detail(model, xte, yte, wx).score;
  }
  return sum / cfg.n_test_folds;
}

std::vector<LayerScore> layerwise_cca_sweep(const std::vector<Eigen::MatrixXd>& per_layer_x,
                                            const Eigen::MatrixXd& y, const CcaConfig& cfg,
                                            unsigned jobs) {
  for (const auto& x : per_layer_x) {
    if (x.rows() != y.rows()) throw InputError("layer and target row counts differ");
  }
  const auto folds = make_folds(y.rows(), cfg);
  std::vector<LayerScore> out(per_layer_x.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t l = next++; l < per_layer_x.size(); l = next++) {
      try {
        out[l] = {l, cross_validated_cca(per_layer_x[l], y, cfg, folds)};
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n_threads =
      std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(per_layer_x.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace layerprobe::cca
