#include "layerprobe/probe.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include "layerprobe/error.hpp"
#include "layerprobe/rng.hpp"
#include "layerprobe/textio.hpp"

namespace layerprobe::probe {

namespace {

void glorot(Eigen::MatrixXd& m, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.uniform(-a, a);
  }
}

Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  Eigen::VectorXd e = (v.array() - m).exp();
  return e / e.sum();
}

struct Activations {
  Eigen::VectorXd z;       // weighted layer sum
  Eigen::VectorXd pre;     // trunk pre-activation
  Eigen::VectorXd hidden;  // ReLU output
  Eigen::VectorXd probs;
};

Activations run(const WaProbe& p, const Eigen::VectorXd& weights, const Eigen::MatrixXd& x,
                const TaskHead& head) {
  if (static_cast<std::size_t>(x.rows()) != p.n_layers() || x.cols() != p.in_dim()) {
    throw InputError("probe input shape does not match the probe");
  }
  Activations a;
  a.z = x.transpose() * weights;
  a.pre = p.w1.transpose() * a.z + p.b1;
  a.hidden = a.pre.cwiseMax(0.0);
  a.probs = softmax(head.w.transpose() * a.hidden + head.b);
  return a;
}

int argmax(const Eigen::VectorXd& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

std::size_t count_nonempty(const std::vector<TaskBatch>& batches) {
  return static_cast<std::size_t>(std::count_if(
      batches.begin(), batches.end(), [](const TaskBatch& b) { return !b.examples.empty(); }));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

void put_matrix(std::string& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) put_f64(out, m(r, c));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string str(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void matrix(Eigen::MatrixXd& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = f64();
    }
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw InputError("truncated LPRB probe file");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

constexpr char kProbeMagic[4] = {'L', 'P', 'R', 'B'};
constexpr std::uint32_t kProbeVersion = 1;

}  // namespace

std::size_t WaProbe::task_index(const std::string& task_id) const {
  for (std::size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].id == task_id) return i;
  }
  throw InputError("unknown task id '" + task_id + "'");
}

WaProbe init_probe(std::size_t n_layers, Eigen::Index in_dim, Eigen::Index hidden,
                   const std::vector<TaskSpec>& tasks, std::uint64_t seed, LayerMask mask) {
  if (n_layers == 0 || in_dim < 1 || hidden < 1) throw ConfigError("probe dimensions must be positive");
  if (tasks.empty()) throw ConfigError("probe needs at least one task");
  if (mask.empty()) mask.assign(n_layers, true);
  if (mask.size() != n_layers) throw ConfigError("layer mask size does not match layer count");
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw ConfigError("layer mask selects no layers");
  }
  Rng rng(seed);
  WaProbe p;
  p.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_layers));
  p.layer_mask = std::move(mask);
  p.w1.resize(in_dim, hidden);
  glorot(p.w1, rng);
  p.b1 = Eigen::VectorXd::Zero(hidden);
  for (const auto& t : tasks) {
    if (t.n_classes < 2) throw ConfigError("task '" + t.id + "' needs at least 2 classes");
    TaskHead h{t.id, Eigen::MatrixXd(hidden, t.n_classes), Eigen::VectorXd::Zero(t.n_classes)};
    glorot(h.w, rng);
    p.heads.push_back(std::move(h));
  }
  return p;
}

Eigen::VectorXd extract_layer_weights(const WaProbe& probe) {
  const auto n = static_cast<Eigen::Index>(probe.n_layers());
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index l = 0; l < n; ++l) {
    if (probe.layer_mask[static_cast<std::size_t>(l)]) m = std::max(m, probe.theta[l]);
  }
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  for (Eigen::Index l = 0; l < n; ++l) {
    if (probe.layer_mask[static_cast<std::size_t>(l)]) w[l] = std::exp(probe.theta[l] - m);
  }
  return w / w.sum();
}

Eigen::VectorXd forward(const WaProbe& probe, const Eigen::MatrixXd& layers,
                        const std::string& task_id) {
  const auto& head = probe.heads[probe.task_index(task_id)];
  return run(probe, extract_layer_weights(probe), layers, head).probs;
}

double loss_multitask(const WaProbe& probe, const std::vector<TaskBatch>& batches) {
  return gradient(probe, batches).loss;
}

ProbeGradient gradient(const WaProbe& probe, const std::vector<TaskBatch>& batches) {
  const std::size_t n_tasks = count_nonempty(batches);
  if (n_tasks == 0) throw InputError("all task batches are empty");

  ProbeGradient g;
  const auto n_layers = static_cast<Eigen::Index>(probe.n_layers());
  g.theta = Eigen::VectorXd::Zero(n_layers);
  g.w1 = Eigen::MatrixXd::Zero(probe.w1.rows(), probe.w1.cols());
  g.b1 = Eigen::VectorXd::Zero(probe.b1.size());
  for (const auto& h : probe.heads) {
    g.head_w.push_back(Eigen::MatrixXd::Zero(h.w.rows(), h.w.cols()));
    g.head_b.push_back(Eigen::VectorXd::Zero(h.b.size()));
  }

  const Eigen::VectorXd weights = extract_layer_weights(probe);
  Eigen::VectorXd d_weights = Eigen::VectorXd::Zero(n_layers);
  for (const auto& batch : batches) {
    if (batch.examples.empty()) continue;
    const std::size_t t = probe.task_index(batch.task_id);
    const auto& head = probe.heads[t];
    const double scale = 1.0 / (static_cast<double>(n_tasks) * static_cast<double>(batch.examples.size()));
    for (const Example* ex : batch.examples) {
      if (ex->label < 0 || ex->label >= head.b.size()) throw InputError("label out of range for task");
      const Activations a = run(probe, weights, ex->layers, head);
      const double p_true = a.probs[ex->label];
      g.loss += -std::log(std::max(p_true, kProbClamp)) * scale;
      if (p_true < kProbClamp) continue;  // clamped region: constant loss

      Eigen::VectorXd d_out = a.probs * scale;
      d_out[ex->label] -= scale;
      g.head_w[t].noalias() += a.hidden * d_out.transpose();
      g.head_b[t] += d_out;
      Eigen::VectorXd d_pre = head.w * d_out;
      for (Eigen::Index i = 0; i < d_pre.size(); ++i) {
        if (a.pre[i] <= 0.0) d_pre[i] = 0.0;
      }
      g.w1.noalias() += a.z * d_pre.transpose();
      g.b1 += d_pre;
      const Eigen::VectorXd d_z = probe.w1 * d_pre;
      d_weights.noalias() += ex->layers * d_z;
    }
  }
  // Softmax Jacobian restricted to the masked layers.
  const double mixed = weights.dot(d_weights);
  for (Eigen::Index l = 0; l < n_layers; ++l) {
    if (probe.layer_mask[static_cast<std::size_t>(l)]) g.theta[l] = weights[l] * (d_weights[l] - mixed);
  }
  return g;
}

Eigen::VectorXd flatten(const WaProbe& p) {
  std::vector<double> v(p.theta.data(), p.theta.data() + p.theta.size());
  v.insert(v.end(), p.w1.data(), p.w1.data() + p.w1.size());
  v.insert(v.end(), p.b1.data(), p.b1.data() + p.b1.size());
  for (const auto& h : p.heads) {
    v.insert(v.end(), h.w.data(), h.w.data() + h.w.size());
    v.insert(v.end(), h.b.data(), h.b.data() + h.b.size());
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::VectorXd flatten(const ProbeGradient& g) {
  std::vector<double> v(g.theta.data(), g.theta.data() + g.theta.size());
  v.insert(v.end(), g.w1.data(), g.w1.data() + g.w1.size());
  v.insert(v.end(), g.b1.data(), g.b1.data() + g.b1.size());
  for (std::size_t i = 0; i < g.head_w.size(); ++i) {
    v.insert(v.end(), g.head_w[i].data(), g.head_w[i].data() + g.head_w[i].size());
    v.insert(v.end(), g.head_b[i].data(), g.head_b[i].data() + g.head_b[i].size());
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void unflatten(WaProbe& p, const Eigen::VectorXd& params) {
  Eigen::Index at = 0;
  auto take = [&](double* dst, Eigen::Index n) {
    if (at + n > params.size()) throw InputError("parameter vector too short");
    std::copy(params.data() + at, params.data() + at + n, dst);
    at += n;
  };
  take(p.theta.data(), p.theta.size());
  take(p.w1.data(), p.w1.size());
  take(p.b1.data(), p.b1.size());
  for (auto& h : p.heads) {
    take(h.w.data(), h.w.size());
    take(h.b.data(), h.b.size());
  }
  if (at != params.size()) throw InputError("parameter vector too long");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (hidden < 1) throw ConfigError("hidden must be >= 1");
  if (!(newbob.factor > 0.0) || newbob.factor > 1.0) throw ConfigError("newbob factor must be in (0, 1]");
  if (tasks.empty()) throw ConfigError("at least one task is required");
}

TrainResult train_probe(const std::vector<TaskData>& train, const std::vector<TaskData>& dev,
                        const TrainConfig& cfg) {
  cfg.validate();
  const Example* first = nullptr;
  for (const auto& t : train) {
    if (!t.examples.empty()) {
      first = &t.examples.front();
      break;
    }
  }
  if (!first) throw InputError("no training examples");
  const std::size_t n_layers = static_cast<std::size_t>(first->layers.rows());

  TrainResult result;
  WaProbe probe = init_probe(n_layers, first->layers.cols(), cfg.hidden, cfg.tasks, cfg.seed,
                             cfg.layer_mask);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  std::size_t max_n = 0;
  for (const auto& t : train) {
    probe.task_index(t.task_id);
    max_n = std::max(max_n, t.examples.size());
  }
  const std::size_t steps = (max_n + cfg.batch - 1) / cfg.batch;

  double lr = cfg.lr;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::optional<double> prev_metric;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::vector<std::size_t>> order;
    for (const auto& t : train) order.push_back(rng.permutation(t.examples.size()));

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<TaskBatch> batches;
      for (std::size_t ti = 0; ti < train.size(); ++ti) {
        TaskBatch b{train[ti].task_id, {}};
        const std::size_t lo = s * cfg.batch;
        const std::size_t hi = std::min(lo + cfg.batch, order[ti].size());
        for (std::size_t i = lo; i < hi; ++i) b.examples.push_back(&train[ti].examples[order[ti][i]]);
        batches.push_back(std::move(b));
      }
      if (count_nonempty(batches) == 0) continue;
      const ProbeGradient g = gradient(probe, batches);
      if (!std::isfinite(g.loss)) {
        throw NumericalError("probe training diverged (non-finite loss) at epoch " +
                             std::to_string(epoch));
      }
      loss_sum += g.loss;
      ++loss_count;
      Eigen::VectorXd params = flatten(probe) - lr * flatten(g);
      if (!params.allFinite()) {
        throw NumericalError("probe training diverged (non-finite parameters) at epoch " +
                             std::to_string(epoch));
      }
      unflatten(probe, params);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    std::size_t dev_tasks = 0;
    for (const auto& d : dev) {
      if (d.examples.empty()) continue;
      const auto r = evaluate(probe, d.examples, d.task_id);
      m.dev_accuracy += r.accuracy;
      m.dev_macro_f1 += r.macro_f1;
      ++dev_tasks;
    }
    if (dev_tasks == 0) throw InputError("no development examples");
    m.dev_accuracy /= static_cast<double>(dev_tasks);
    m.dev_macro_f1 /= static_cast<double>(dev_tasks);
    result.history.push_back(m);

    if (m.dev_macro_f1 > best_metric) {
      best_metric = m.dev_macro_f1;
      result.best_epoch = epoch;
      result.probe = probe;
    }
    if (prev_metric) {
      const double improvement =
          *prev_metric != 0.0 ? (m.dev_macro_f1 - *prev_metric) / std::abs(*prev_metric)
                              : (m.dev_macro_f1 > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
      if (improvement < cfg.newbob.improvement_threshold) lr *= cfg.newbob.factor;
    }
    prev_metric = m.dev_macro_f1;
  }
  return result;
}

EvalResult classification_metrics(const std::vector<int>& truth, const std::vector<int>& pred,
                                  int n_classes) {
  if (truth.empty()) throw InputError("cannot evaluate an empty test set");
  if (truth.size() != pred.size()) throw InputError("truth/prediction length mismatch");
  std::vector<long> tp(static_cast<std::size_t>(n_classes), 0);
  std::vector<long> fp(tp.size(), 0);
  std::vector<long> fn(tp.size(), 0);
  long correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = static_cast<std::size_t>(truth[i]);
    const auto p = static_cast<std::size_t>(pred[i]);
    if (t >= tp.size() || p >= tp.size()) throw InputError("class index out of range");
    if (t == p) {
      ++tp[t];
      ++correct;
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  EvalResult r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const long denom = 2 * tp[c] + fp[c] + fn[c];
    f1_sum += denom ? 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom) : 0.0;
  }
  r.macro_f1 = f1_sum / static_cast<double>(n_classes);
  return r;
}

EvalResult evaluate(const WaProbe& probe, const std::vector<Example>& test,
                    const std::string& task_id) {
  if (test.empty()) throw InputError("cannot evaluate an empty test set");
  const auto& head = probe.heads[probe.task_index(task_id)];
  const Eigen::VectorXd weights = extract_layer_weights(probe);
  std::vector<int> truth;
  std::vector<int> pred;
  for (const auto& ex : test) {
    truth.push_back(ex.label);
    pred.push_back(argmax(run(probe, weights, ex.layers, head).probs));
  }
  return classification_metrics(truth, pred, static_cast<int>(head.b.size()));
}

LayerMask select_best_k_layers(const Eigen::VectorXd& weights, std::size_t k) {
  const auto n = static_cast<std::size_t>(weights.size());
  if (k < 1 || k > n) throw ConfigError("k must satisfy 1 <= k <= number of layers");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return weights[static_cast<Eigen::Index>(a)] > weights[static_cast<Eigen::Index>(b)];
  });
  LayerMask mask(n, false);
  for (std::size_t i = 0; i < k; ++i) mask[idx[i]] = true;
  return mask;
}

std::vector<std::size_t> mask_indices(const LayerMask& mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(i);
  }
  return out;
}

void write_probe(const std::filesystem::path& path, const WaProbe& p) {
  std::string out(kProbeMagic, 4);
  put_u32(out, kProbeVersion);
  put_u32(out, static_cast<std::uint32_t>(p.n_layers()));
  put_u32(out, static_cast<std::uint32_t>(p.in_dim()));
  put_u32(out, static_cast<std::uint32_t>(p.hidden()));
  put_u32(out, static_cast<std::uint32_t>(p.heads.size()));
  for (Eigen::Index l = 0; l < p.theta.size(); ++l) put_f64(out, p.theta[l]);
  for (bool b : p.layer_mask) out.push_back(b ? 1 : 0);
  put_matrix(out, p.w1);
  put_matrix(out, p.b1);
  for (const auto& h : p.heads) {
    put_u32(out, static_cast<std::uint32_t>(h.id.size()));
    out += h.id;
    put_u32(out, static_cast<std::uint32_t>(h.b.size()));
    put_matrix(out, h.w);
    put_matrix(out, h.b);
  }
  text::write_file(path, out);
}

WaProbe read_probe(const std::filesystem::path& path) {
  const std::string bytes = text::read_file(path);
  if (bytes.size() < 4 || !std::equal(kProbeMagic, kProbeMagic + 4, bytes.begin())) {
    throw InputError(path.string() + ": missing LPRB magic");
  }
  Reader r(bytes);
  r.str(4);
  if (r.u32() != kProbeVersion) throw InputError(path.string() + ": unsupported LPRB version");
  const std::uint32_t n_layers = r.u32();
  const std::uint32_t in_dim = r.u32();
  const std::uint32_t hidden = r.u32();
  const std::uint32_t n_tasks = r.u32();
  WaProbe p;
  p.theta.resize(n_layers);
  for (std::uint32_t l = 0; l < n_layers; ++l) p.theta[l] = r.f64();
  for (std::uint32_t l = 0; l < n_layers; ++l) p.layer_mask.push_back(r.str(1)[0] != 0);
  p.w1.resize(in_dim, hidden);
  r.matrix(p.w1);
  Eigen::MatrixXd b1(hidden, 1);
  r.matrix(b1);
  p.b1 = b1.col(0);
  for (std::uint32_t t = 0; t < n_tasks; ++t) {
    TaskHead h;
    h.id = r.str(r.u32());
    const std::uint32_t classes = r.u32();
    h.w.resize(hidden, classes);
    r.matrix(h.w);
    Eigen::MatrixXd b(classes, 1);
    r.matrix(b);
    h.b = b.col(0);
    p.heads.push_back(std::move(h));
  }
  if (!r.done()) throw InputError(path.string() + ": trailing bytes in LPRB file");
  if (!flatten(p).allFinite()) throw InputError(path.string() + ": non-finite probe parameters");
  return p;
}

}  // namespace layerprobe::probe
