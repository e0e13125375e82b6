#pragma once

// Weighted-average-layer probe: softmax-normalized layer weights combine
// per-layer pooled vectors, a shared one-hidden-layer ReLU trunk feeds one
// linear softmax head per task.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace layerprobe::probe {

using LayerMask = std::vector<bool>;

struct TaskSpec {
  std::string id;
  int n_classes = 0;
};

struct TaskHead {
  std::string id;
  Eigen::MatrixXd w;  // hidden x classes
  Eigen::VectorXd b;  // classes
};

struct WaProbe {
  Eigen::VectorXd theta;  // pre-softmax layer logits
  LayerMask layer_mask;   // true = layer may carry weight
  Eigen::MatrixXd w1;     // in_dim x hidden
  Eigen::VectorXd b1;     // hidden
  std::vector<TaskHead> heads;

  std::size_t n_layers() const { return static_cast<std::size_t>(theta.size()); }
  Eigen::Index in_dim() const { return w1.rows(); }
  Eigen::Index hidden() const { return w1.cols(); }
  /// Throws InputError for an unknown task id.
  std::size_t task_index(const std::string& task_id) const;
};

/// theta = 0; trunk and heads Glorot-uniform from seed; biases 0. An empty
/// mask means all layers.
WaProbe init_probe(std::size_t n_layers, Eigen::Index in_dim, Eigen::Index hidden,
                   const std::vector<TaskSpec>& tasks, std::uint64_t seed,
                   LayerMask mask = {});

struct Example {
  Eigen::MatrixXd layers;  // n_layers x in_dim
  int label = 0;
};

struct TaskData {
  std::string task_id;
  std::vector<Example> examples;
};

struct TaskBatch {
  std::string task_id;
  std::vector<const Example*> examples;
};

/// Masked softmax of theta; zero on masked-out layers, sums to 1.
Eigen::VectorXd extract_layer_weights(const WaProbe& probe);

Eigen::VectorXd forward(const WaProbe& probe, const Eigen::MatrixXd& layers,
                        const std::string& task_id);

inline constexpr double kProbClamp = 1e-12;

/// Mean over non-empty task batches of the mean cross-entropy in each.
double loss_multitask(const WaProbe& probe, const std::vector<TaskBatch>& batches);

/// Gradient with the same layout as the probe parameters.
struct ProbeGradient {
  Eigen::VectorXd theta;
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  std::vector<Eigen::MatrixXd> head_w;
  std::vector<Eigen::VectorXd> head_b;
  double loss = 0.0;
};

ProbeGradient gradient(const WaProbe& probe, const std::vector<TaskBatch>& batches);

/// Flat parameter views, in the order theta, w1, b1, then each head's w, b
/// (column-major).
Eigen::VectorXd flatten(const WaProbe& probe);
Eigen::VectorXd flatten(const ProbeGradient& grad);
void unflatten(WaProbe& probe, const Eigen::VectorXd& params);

struct NewBob {
  double factor = 0.5;
  double improvement_threshold = 0.0025;
};

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 10;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  Eigen::Index hidden = 256;
  NewBob newbob;
  std::vector<TaskSpec> tasks;
  LayerMask layer_mask;  // empty = all layers

  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;          // rate used during this epoch
  double train_loss = 0.0;  // mean of per-step batch losses
  double dev_accuracy = 0.0;
  double dev_macro_f1 = 0.0;  // selection metric, mean over tasks
};

struct TrainResult {
  WaProbe probe;  // parameters from the best dev epoch
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
};

/// Mini-batch gradient descent with new-bob annealing on the dev macro F1.
/// Throws NumericalError naming the epoch if the loss becomes non-finite.
TrainResult train_probe(const std::vector<TaskData>& train, const std::vector<TaskData>& dev,
                        const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

/// Accuracy and unweighted mean of per-class F1 over all classes of the task.
EvalResult evaluate(const WaProbe& probe, const std::vector<Example>& test,
                    const std::string& task_id);

/// Same metrics from raw label/prediction pairs.
EvalResult classification_metrics(const std::vector<int>& truth, const std::vector<int>& pred,
                                  int n_classes);

/// Mask of the k largest weights; ties prefer the lower layer index.
LayerMask select_best_k_layers(const Eigen::VectorXd& weights, std::size_t k = 3);

std::vector<std::size_t> mask_indices(const LayerMask& mask);

/// Versioned binary "LPRB" container, little-endian, f64 parameters.
void write_probe(const std::filesystem::path& path, const WaProbe& probe);
WaProbe read_probe(const std::filesystem::path& path);

}  // namespace layerprobe::probe
