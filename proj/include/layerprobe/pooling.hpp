#pragma once

// Frame-level to phoneme/utterance/window-level pooling of representations.
//
// Frame f of a tensor is centered at f * hop + offset. All time intervals are
// half-open, so a frame belongs to [start, end) iff start <= center < end.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "layerprobe/corpus_io.hpp"

namespace layerprobe {

struct TimeSpan {
  double start_s = 0.0;
  double end_s = 0.0;
};

struct PhonemeSample {
  std::string utterance_id;
  std::string phone;
  std::vector<Eigen::VectorXd> layers;  // one dim-length vector per layer
};

struct WindowSample {
  std::string utterance_id;
  double start_s = 0.0;
  std::string label;
  std::vector<Eigen::VectorXd> layers;
};

/// Indices of frames whose centers fall in [start, end).
std::vector<std::size_t> frames_in_span(const ReprTensor& tensor, TimeSpan span);

/// Index of the frame whose center is nearest t (ties go to the lower index).
std::size_t nearest_frame(const ReprTensor& tensor, double t);

/// True when [start, end) lies inside the tensor's extent, allowing 1.5 hops
/// of slack beyond the outermost frame centers.
bool within_extent(const ReprTensor& tensor, TimeSpan span);

/// Per-layer mean over frames in the central third of the entry's interval;
/// falls back to the single frame nearest the interval midpoint when no frame
/// center is inside. Throws InputError if the entry does not touch the tensor.
PhonemeSample central_third_pool(const ReprTensor& tensor, const AlignmentEntry& entry);

/// Per-layer arithmetic mean over frames in span (whole utterance if absent).
std::vector<Eigen::VectorXd> utterance_mean_pool(const ReprTensor& tensor,
                                                 std::optional<TimeSpan> span = std::nullopt);

struct PooledUtterance {
  std::vector<PhonemeSample> samples;
  std::size_t dropped = 0;  // entries crossing the dump boundary
};

/// Pools every entry of one utterance. Entries that extend past the tensor
/// extent are dropped and counted.
PooledUtterance pool_utterance_phones(const ReprTensor& tensor,
                                      const std::vector<AlignmentEntry>& entries);

struct TrackInterval {
  double start_s = 0.0;
  double end_s = 0.0;
  std::string label;
};

struct WindowConfig {
  double win_s = 2.0;
  double hop_s = 0.2;
  double core_s = 1.0;
};

struct LabeledWindow {
  double start_s = 0.0;
  std::optional<std::string> label;
};

/// Slides win_s windows every hop_s from 0 while they fit in total_s. Each
/// window is labeled with the majority label (by duration) of its centered
/// core_s sub-interval; ties go to the label that starts earliest in the core.
std::vector<LabeledWindow> window_label_track(std::vector<TrackInterval> track, double total_s,
                                              const WindowConfig& cfg = {});

/// Number of windows produced for total_s (0 when total_s < win_s).
std::size_t window_count(double total_s, const WindowConfig& cfg);

struct PhonemeDataset {
  std::vector<Eigen::MatrixXd> per_layer;  // n x dim each, identical row order
  Eigen::MatrixXd one_hot;                 // n x |inventory|
  std::vector<std::size_t> source_index;   // row -> index into the input samples
};

/// Uniform subsample without replacement of at most per_phone_cap samples per
/// phone, deterministic under seed. Rows keep input order.
PhonemeDataset build_phoneme_dataset(const std::vector<PhonemeSample>& samples,
                                     const PhoneInventory& inventory, std::size_t per_phone_cap,
                                     std::uint64_t seed);

/// A pooled dataset on disk: layer_<k>.lrep (1-layer tensor, one frame per
/// row) for each layer plus rows.jsonl describing each row.
struct PooledRow {
  std::string utterance_id;
  std::string label;  // phone symbol or class label
  double start_s = 0.0;
  double end_s = 0.0;
};

void write_pooled_dataset(const std::filesystem::path& dir,
                          const std::vector<Eigen::MatrixXd>& per_layer,
                          const std::vector<PooledRow>& rows);

struct PooledDataset {
  std::vector<Eigen::MatrixXd> per_layer;
  std::vector<PooledRow> rows;
};

PooledDataset read_pooled_dataset(const std::filesystem::path& dir);

}  // namespace layerprobe
