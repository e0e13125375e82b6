#pragma once

// Ingestion and serialization of representation dumps, alignments, phone
// inventories, labels, manifests and group partitions.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "layerprobe/error.hpp"

namespace layerprobe {

inline constexpr double kDefaultFrameHopS = 0.020;
inline constexpr double kDefaultFrameOffsetS = 0.0125;

/// Layer-major activations of one utterance: values[(layer * n_frames + frame) * dim + d].
struct ReprTensor {
  std::uint32_t n_layers = 0;
  std::uint32_t n_frames = 0;
  std::uint32_t dim = 0;
  double frame_hop_s = kDefaultFrameHopS;
  double frame_offset_s = kDefaultFrameOffsetS;
  std::vector<float> values;

  ReprTensor() = default;
  ReprTensor(std::uint32_t layers, std::uint32_t frames, std::uint32_t d,
             double hop_s = kDefaultFrameHopS, double offset_s = kDefaultFrameOffsetS);

  std::span<const float> frame(std::size_t layer, std::size_t f) const {
    return {values.data() + (layer * n_frames + f) * dim, dim};
  }
  std::span<float> frame(std::size_t layer, std::size_t f) {
    return {values.data() + (layer * n_frames + f) * dim, dim};
  }

  /// Center time of frame f: f * hop + offset.
  double frame_time(std::size_t f) const {
    return static_cast<double>(f) * frame_hop_s + frame_offset_s;
  }

  /// Throws ReprFormatError(kShape / kNonFinite) if the invariants do not hold.
  void validate() const;

  friend bool operator==(const ReprTensor&, const ReprTensor&) = default;
};

class ReprFormatError : public InputError {
 public:
  enum class Kind { kBadMagic, kVersionMismatch, kTruncated, kNonFinite, kShape, kIo };
  ReprFormatError(Kind kind, const std::string& what) : InputError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kReprVersion = 1;

ReprTensor read_repr_tensor(const std::filesystem::path& path);
ReprTensor decode_repr_tensor(std::span<const std::uint8_t> bytes);
void write_repr_tensor(const std::filesystem::path& path, const ReprTensor& tensor);
std::vector<std::uint8_t> encode_repr_tensor(const ReprTensor& tensor);

/// Ordered phone symbols. Index 0 is the CTC blank; symbol i has index i + 1.
class PhoneInventory {
 public:
  static constexpr int kBlankIndex = 0;
  static constexpr const char* kBlankSymbol = "<blank>";

  PhoneInventory() = default;
  /// expected_size, when given, must equal the number of symbols.
  explicit PhoneInventory(std::vector<std::string> symbols,
                          std::optional<std::size_t> expected_size = std::nullopt);

  /// One symbol per line; blank lines are ignored.
  static PhoneInventory load(const std::filesystem::path& path,
                             std::optional<std::size_t> expected_size = std::nullopt);

  std::size_t size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  bool contains(const std::string& s) const { return index_.count(s) != 0; }
  /// 1-based index (blank excluded); throws InputError for unknown symbols.
  int index_of(const std::string& s) const;
  const std::string& symbol(int index) const;

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

struct AlignmentEntry {
  std::string utterance_id;
  std::string phone;
  double start_s = 0.0;
  double end_s = 0.0;

  friend bool operator==(const AlignmentEntry&, const AlignmentEntry&) = default;
};

/// TSV with columns utterance_id, phone, start_s, end_s and no header.
std::vector<AlignmentEntry> read_alignments(const std::filesystem::path& path,
                                            const PhoneInventory& inventory);
std::vector<AlignmentEntry> parse_alignments(const std::vector<std::string>& lines,
                                             const PhoneInventory& inventory);
void write_alignments(const std::filesystem::path& path,
                      const std::vector<AlignmentEntry>& entries);

using SampaTable = std::map<std::string, std::string>;

/// TSV rows "sampa<TAB>ipa".
SampaTable load_sampa_table(const std::filesystem::path& path);
std::vector<std::string> map_sampa_to_ipa(const std::vector<std::string>& symbols,
                                          const SampaTable& table);

struct UtteranceManifest {
  std::string utterance_id;
  std::optional<std::string> audio_path;
  std::optional<std::string> repr_path;
  std::string group_key;
  double duration_s = 0.0;

  friend bool operator==(const UtteranceManifest&, const UtteranceManifest&) = default;
};

/// JSON-lines. Relative paths are kept as written; callers resolve them.
std::vector<UtteranceManifest> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<UtteranceManifest>& manifest);

struct LabelRecord {
  std::string utterance_id;
  std::string task_id;
  std::string label;

  friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

std::vector<LabelRecord> read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& labels);

/// Checks every label of task_id against its closed class set.
void validate_labels(const std::vector<LabelRecord>& labels, const std::string& task_id,
                     const std::vector<std::string>& classes);

struct GroupSplit {
  std::vector<UtteranceManifest> train;
  std::vector<UtteranceManifest> heldout;
};

/// Partition by group_key; every held-out group must occur in the manifest.
GroupSplit split_by_group(const std::vector<UtteranceManifest>& manifest,
                          const std::set<std::string>& held_out_groups);

}  // namespace layerprobe
