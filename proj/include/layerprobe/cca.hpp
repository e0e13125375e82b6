#pragma once

// Canonical correlation analysis and projection-weighted CCA (PWCCA) scores
// between a layer's pooled representations (X) and a target view (Y).
//
// Callers always pass the representation as X: PWCCA weights are taken from
// the X view.

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace layerprobe::cca {

/// Which data the PWCCA weights are computed from in cross-validation.
enum class WeightSource { kHeldOut, kTraining };

struct CcaConfig {
  double reg_epsilon = 1e-6;  // ridge, relative to the mean covariance diagonal
  std::optional<Eigen::Index> max_components;
  int n_folds = 10;
  int n_test_folds = 3;
  std::uint64_t seed = 0;
  WeightSource weight_source = WeightSource::kHeldOut;

  /// Throws ConfigError on violated invariants.
  void validate() const;
};

struct CcaModel {
  Eigen::VectorXd mean_x;
  Eigen::VectorXd mean_y;
  Eigen::MatrixXd proj_x;  // d1 x k
  Eigen::MatrixXd proj_y;  // d2 x k
  Eigen::VectorXd train_correlations;  // k, non-increasing, in [0, 1]

  Eigen::Index components() const { return train_correlations.size(); }
};

CcaModel fit_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const CcaConfig& cfg);

struct PwccaResult {
  double score = 0.0;
  Eigen::VectorXd correlations;  // per component, on the evaluated data
  Eigen::VectorXd weights;       // normalized, sums to 1
};

/// Projects both views (centered with the model means), correlates each
/// component pair and weights by the X-side projections. weight_x, when given,
/// supplies the X data the weights are computed from.
PwccaResult pwcca_detail(const CcaModel& model, const Eigen::MatrixXd& x,
                         const Eigen::MatrixXd& y, const Eigen::MatrixXd* weight_x = nullptr);

double pwcca_score(const CcaModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Seeded shuffle of 0..n-1 split into n_folds near-equal contiguous folds.
std::vector<std::vector<Eigen::Index>> make_folds(Eigen::Index n, const CcaConfig& cfg);

/// Fits on all-but-one fold and scores the held-out fold, for each of the first
/// n_test_folds folds; returns the mean score.
double cross_validated_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                           const CcaConfig& cfg);
double cross_validated_cca(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                           const CcaConfig& cfg,
                           const std::vector<std::vector<Eigen::Index>>& folds);

struct LayerScore {
  std::size_t layer = 0;
  double score = 0.0;
};

/// One cross-validated score per layer on shared folds. jobs > 1 fans layers
/// out to worker threads; results are always returned in layer order.
std::vector<LayerScore> layerwise_cca_sweep(const std::vector<Eigen::MatrixXd>& per_layer_x,
                                            const Eigen::MatrixXd& y, const CcaConfig& cfg,
                                            unsigned jobs = 1);

}  // namespace layerprobe::cca
