#pragma once

// CTC greedy decoding, phone error rate, CTC forward loss and MAPSSWE
// matched-pairs significance testing.
//
// Phone sequences are inventory indices (1..N); index 0 is the CTC blank.

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace layerprobe::ctc {

using PhoneSeq = std::vector<int>;

/// Row-per-frame logits; column 0 is blank, column c is inventory index c.
using LogitGrid = Eigen::MatrixXd;

/// Per-frame argmax (lowest index wins ties), collapse repeats, drop blanks.
PhoneSeq greedy_decode(const LogitGrid& grid);

enum class EditOp { kMatch, kSubstitution, kDeletion, kInsertion };

struct AlignStep {
  EditOp op;
  int ref_pos;  // -1 for insertions
  int hyp_pos;  // -1 for deletions
};

struct Alignment {
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
  std::vector<AlignStep> trace;  // in sequence order

  int errors() const { return substitutions + insertions + deletions; }
};

/// Unit-cost edit distance. The backtrace prefers the diagonal (match or
/// substitution), then deletion, then insertion.
Alignment levenshtein_align(const PhoneSeq& ref, const PhoneSeq& hyp);

struct RefHyp {
  PhoneSeq ref;
  PhoneSeq hyp;
};

/// 100 * (S + I + D) / total reference length. Can exceed 100.
double phone_error_rate(const std::vector<RefHyp>& pairs);

struct CtcResult {
  bool feasible = true;
  double loss = 0.0;     // -ln p(target | grid); +inf when infeasible
  LogitGrid gradient;    // d loss / d logits, empty when infeasible
};

/// Minimum frames needed to emit target: its length plus one blank between
/// each pair of equal neighbours.
int ctc_min_frames(const PhoneSeq& target);

/// Log-space forward-backward over the blank-interleaved target.
CtcResult ctc_forward_loss(const LogitGrid& grid, const PhoneSeq& target);

struct MapsswePair {
  PhoneSeq ref;
  PhoneSeq hyp_a;
  PhoneSeq hyp_b;
};

enum class SegmentMode {
  kBothCorrect,   // split at reference tokens both systems got right
  kUtterance,     // one segment per utterance
};

struct MapssweResult {
  double w = 0.0;
  double p = 1.0;
  std::vector<double> z;  // errA - errB per segment
  std::size_t n_segments() const { return z.size(); }
};

/// Error differences per segment for one utterance.
std::vector<double> mapsswe_segments(const MapsswePair& pair, SegmentMode mode);

/// W = mean(Z) * sqrt(n) / stdev(Z) (sample stdev), p = 2 * (1 - Phi(|W|)).
/// All-zero Z gives W = 0, p = 1. Zero variance with nonzero mean gives
/// W = +/-inf, p = 0. Fewer than 2 segments throws InputError.
MapssweResult mapsswe_test(const std::vector<MapsswePair>& pairs,
                           SegmentMode mode = SegmentMode::kBothCorrect);

/// Two-sided normal p-value for a statistic.
double two_sided_p(double w);

/// "" for p >= 0.05, "*" for p < 0.05, "***" for p < 0.001.
std::string significance_stars(double p);

}  // namespace layerprobe::ctc
