#include "layerprobe/ctc_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "layerprobe/error.hpp"

namespace layerprobe::ctc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

Eigen::MatrixXd log_softmax_rows(const LogitGrid& grid) {
  Eigen::MatrixXd out(grid.rows(), grid.cols());
  for (Eigen::Index t = 0; t < grid.rows(); ++t) {
    const double m = grid.row(t).maxCoeff();
    const double lse = m + std::log((grid.row(t).array() - m).exp().sum());
    out.row(t) = grid.row(t).array() - lse;
  }
  return out;
}

}  // namespace

PhoneSeq greedy_decode(const LogitGrid& grid) {
  PhoneSeq out;
  int prev = -1;
  for (Eigen::Index t = 0; t < grid.rows(); ++t) {
    int best = 0;
    for (Eigen::Index c = 1; c < grid.cols(); ++c) {
      if (grid(t, c) > grid(t, best)) best = static_cast<int>(c);
    }
    if (best != prev && best != 0) out.push_back(best);
    prev = best;
  }
  return out;
}

Alignment levenshtein_align(const PhoneSeq& ref, const PhoneSeq& hyp) {
  const std::size_t n = ref.size();
  const std::size_t m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) d[at(i, 0)] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) d[at(0, j)] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = d[at(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      d[at(i, j)] = std::min({sub, d[at(i - 1, j)] + 1, d[at(i, j - 1)] + 1});
    }
  }

  Alignment a;
  std::size_t i = n;
  std::size_t j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (d[at(i, j)] == d[at(i - 1, j - 1)] + (same ? 0 : 1)) {
        a.trace.push_back({same ? EditOp::kMatch : EditOp::kSubstitution,
                           static_cast<int>(i - 1), static_cast<int>(j - 1)});
        if (!same) ++a.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1) {
      a.trace.push_back({EditOp::kDeletion, static_cast<int>(i - 1), -1});
      ++a.deletions;
      --i;
      continue;
    }
    a.trace.push_back({EditOp::kInsertion, -1, static_cast<int>(j - 1)});
    ++a.insertions;
    --j;
  }
  std::reverse(a.trace.begin(), a.trace.end());
  return a;
}

double phone_error_rate(const std::vector<RefHyp>& pairs) {
  long long errors = 0;
  long long ref_len = 0;
  for (const auto& p : pairs) {
    errors += levenshtein_align(p.ref, p.hyp).errors();
    ref_len += static_cast<long long>(p.ref.size());
  }
  if (ref_len == 0) throw InputError("PER needs a non-empty total reference");
  return 100.0 * static_cast<double>(errors) / static_cast<double>(ref_len);
}

int ctc_min_frames(const PhoneSeq& target) {
  int n = static_cast<int>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i) {
    if (target[i] == target[i - 1]) ++n;
  }
  return n;
}

CtcResult ctc_forward_loss(const LogitGrid& grid, const PhoneSeq& target) {
  const Eigen::Index n_frames = grid.rows();
  const Eigen::Index n_classes = grid.cols();
  if (!grid.allFinite()) throw InputError("CTC logits must be finite");
  for (int c : target) {
    if (c < 1 || c >= n_classes) throw InputError("CTC target index out of range");
  }
  CtcResult r;
  if (n_frames < ctc_min_frames(target) || n_frames == 0) {
    r.feasible = false;
    r.loss = std::numeric_limits<double>::infinity();
    return r;
  }

  // Blank-interleaved target: blank, c1, blank, c2, ..., blank.
  std::vector<int> ext(2 * target.size() + 1, 0);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  const auto s_len = static_cast<Eigen::Index>(ext.size());
  auto can_skip = [&](Eigen::Index s) {  // transition s-2 -> s
    return s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];
  };

  const Eigen::MatrixXd logp = log_softmax_rows(grid);
  Eigen::MatrixXd alpha = Eigen::MatrixXd::Constant(n_frames, s_len, kNegInf);
  Eigen::MatrixXd beta = Eigen::MatrixXd::Constant(n_frames, s_len, kNegInf);

  alpha(0, 0) = logp(0, ext[0]);
  if (s_len > 1) alpha(0, 1) = logp(0, ext[1]);
  for (Eigen::Index t = 1; t < n_frames; ++t) {
    for (Eigen::Index s = 0; s < s_len; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + logp(t, ext[s]);
    }
  }

  // beta(t, s): log prob of emitting frames t+1.. given state s at frame t.
  beta(n_frames - 1, s_len - 1) = 0.0;
  if (s_len > 1) beta(n_frames - 1, s_len - 2) = 0.0;
  for (Eigen::Index t = n_frames - 2; t >= 0; --t) {
    for (Eigen::Index s = 0; s < s_len; ++s) {
      double b = beta(t + 1, s) + logp(t + 1, ext[s]);
      if (s + 1 < s_len) b = log_add(b, beta(t + 1, s + 1) + logp(t + 1, ext[s + 1]));
      if (s + 2 < s_len && can_skip(s + 2)) {
        b = log_add(b, beta(t + 1, s + 2) + logp(t + 1, ext[s + 2]));
      }
      beta(t, s) = b;
    }
  }

  double log_like = alpha(n_frames - 1, s_len - 1);
  if (s_len > 1) log_like = log_add(log_like, alpha(n_frames - 1, s_len - 2));
  if (!std::isfinite(log_like)) throw NumericalError("CTC likelihood underflow");
  r.loss = -log_like;

  r.gradient = logp.array().exp().matrix();
  for (Eigen::Index t = 0; t < n_frames; ++t) {
    for (Eigen::Index s = 0; s < s_len; ++s) {
      const double lg = alpha(t, s) + beta(t, s) - log_like;
      if (lg != kNegInf) r.gradient(t, ext[s]) -= std::exp(lg);
    }
  }
  return r;
}

std::vector<double> mapsswe_segments(const MapsswePair& pair, SegmentMode mode) {
  const auto a = levenshtein_align(pair.ref, pair.hyp_a);
  const auto b = levenshtein_align(pair.ref, pair.hyp_b);
  if (mode == SegmentMode::kUtterance) {
    return {static_cast<double>(a.errors() - b.errors())};
  }

  const std::size_t n = pair.ref.size();
  struct PerRef {
    std::vector<int> err;        // S or D at each reference position
    std::vector<bool> correct;   // match at each reference position
    std::vector<int> ins_before; // insertions before position j (j == n: at end)
  };
  auto tabulate = [n](const Alignment& al) {
    PerRef p{std::vector<int>(n, 0), std::vector<bool>(n, false), std::vector<int>(n + 1, 0)};
    std::size_t next = 0;
    for (const auto& step : al.trace) {
      switch (step.op) {
        case EditOp::kInsertion:
          ++p.ins_before[next];
          break;
        case EditOp::kMatch:
          p.correct[next++] = true;
          break;
        case EditOp::kSubstitution:
        case EditOp::kDeletion:
          p.err[next++] = 1;
          break;
      }
    }
    return p;
  };
  const PerRef pa = tabulate(a);
  const PerRef pb = tabulate(b);

  std::vector<double> z;
  int err_a = 0;
  int err_b = 0;
  bool open = false;
  auto close = [&] {
    if (open) z.push_back(static_cast<double>(err_a - err_b));
    err_a = err_b = 0;
    open = false;
  };
  for (std::size_t j = 0; j < n; ++j) {
    if (pa.ins_before[j] + pb.ins_before[j] > 0) {
      err_a += pa.ins_before[j];
      err_b += pb.ins_before[j];
      open = true;
    }
    const bool boundary = pa.correct[j] && pb.correct[j] && pa.ins_before[j] == 0 &&
                          pa.ins_before[j + 1] == 0 && pb.ins_before[j] == 0 &&
                          pb.ins_before[j + 1] == 0;
    if (boundary) {
      close();
    } else {
      err_a += pa.err[j];
      err_b += pb.err[j];
      open = true;
    }
  }
  if (pa.ins_before[n] + pb.ins_before[n] > 0) {
    err_a += pa.ins_before[n];
    err_b += pb.ins_before[n];
    open = true;
  }
  close();
  return z;
}

double two_sided_p(double w) {
  if (std::isinf(w)) return 0.0;
  return std::erfc(std::abs(w) / std::numbers::sqrt2);
}

MapssweResult mapsswe_test(const std::vector<MapsswePair>& pairs, SegmentMode mode) {
  MapssweResult r;
  for (const auto& p : pairs) {
    auto seg = mapsswe_segments(p, mode);
    r.z.insert(r.z.end(), seg.begin(), seg.end());
  }
  const bool all_zero = std::all_of(r.z.begin(), r.z.end(), [](double v) { return v == 0.0; });
  if (all_zero) {
    r.w = 0.0;
    r.p = 1.0;
    return r;
  }
  const auto n = static_cast<double>(r.z.size());
  if (r.z.size() < 2) throw InputError("MAPSSWE needs at least 2 segments");
  double mean = 0.0;
  for (double v : r.z) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : r.z) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (sd == 0.0) {
    r.w = mean > 0 ? std::numeric_limits<double>::infinity()
                   : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.w = mean * std::sqrt(n) / sd;
  r.p = two_sided_p(r.w);
  return r;
}

std::string significance_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.05) return "*";
  return "";
}

}  // namespace layerprobe::ctc
