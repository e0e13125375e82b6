#include "layerprobe/corpus_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "layerprobe/textio.hpp"

namespace layerprobe {

namespace {

constexpr std::uint8_t kMagic[4] = {'L', 'R', 'E', 'P'};
constexpr std::size_t kHeaderBytes = 4 + 4 * 4 + 8 * 2;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}

std::string line_context(const std::string& what, std::size_t line_no) {
  return what + " (line " + std::to_string(line_no) + ")";
}

nlohmann::json parse_json_line(const std::string& line, std::size_t line_no,
                               const std::filesystem::path& path) {
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw InputError("not a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
  }
}

std::string required_string(const nlohmann::json& j, const char* key, std::size_t line_no) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw InputError(line_context(std::string("missing string key '") + key + "'", line_no));
  }
  return it->get<std::string>();
}

}  // namespace

ReprTensor::ReprTensor(std::uint32_t layers, std::uint32_t frames, std::uint32_t d,
                       double hop_s, double offset_s)
    : n_layers(layers),
      n_frames(frames),
      dim(d),
      frame_hop_s(hop_s),
      frame_offset_s(offset_s),
      values(static_cast<std::size_t>(layers) * frames * d, 0.0f) {}

void ReprTensor::validate() const {
  using K = ReprFormatError::Kind;
  if (n_layers < 1) throw ReprFormatError(K::kShape, "n_layers must be >= 1");
  if (!(frame_hop_s > 0.0) || !std::isfinite(frame_hop_s)) {
    throw ReprFormatError(K::kShape, "frame_hop_s must be positive");
  }
  if (!std::isfinite(frame_offset_s)) throw ReprFormatError(K::kShape, "frame_offset_s not finite");
  if (values.size() != static_cast<std::size_t>(n_layers) * n_frames * dim) {
    throw ReprFormatError(K::kShape, "values length does not match n_layers*n_frames*dim");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ReprFormatError(K::kNonFinite, "non-finite value at flat index " + std::to_string(i));
    }
  }
}

std::vector<std::uint8_t> encode_repr_tensor(const ReprTensor& tensor) {
  tensor.validate();
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + tensor.values.size() * 4);
  for (std::uint8_t c : kMagic) out.push_back(c);
  put_u32(out, kReprVersion);
  put_u32(out, tensor.n_layers);
  put_u32(out, tensor.n_frames);
  put_u32(out, tensor.dim);
  put_u64(out, std::bit_cast<std::uint64_t>(tensor.frame_hop_s));
  put_u64(out, std::bit_cast<std::uint64_t>(tensor.frame_offset_s));
  for (float v : tensor.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

ReprTensor decode_repr_tensor(std::span<const std::uint8_t> bytes) {
  using K = ReprFormatError::Kind;
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw ReprFormatError(K::kBadMagic, "missing LREP magic");
  }
  if (bytes.size() < 8) throw ReprFormatError(K::kTruncated, "truncated header");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kReprVersion) {
    throw ReprFormatError(K::kVersionMismatch,
                          "unsupported LREP version " + std::to_string(version));
  }
  if (bytes.size() < kHeaderBytes) throw ReprFormatError(K::kTruncated, "truncated header");

  ReprTensor t;
  t.n_layers = get_u32(bytes, 8);
  t.n_frames = get_u32(bytes, 12);
  t.dim = get_u32(bytes, 16);
  t.frame_hop_s = std::bit_cast<double>(get_u64(bytes, 20));
  t.frame_offset_s = std::bit_cast<double>(get_u64(bytes, 28));

  const std::uint64_t count = static_cast<std::uint64_t>(t.n_layers) * t.n_frames * t.dim;
  const std::uint64_t payload = bytes.size() - kHeaderBytes;
  if (payload < count * 4) {
    throw ReprFormatError(K::kTruncated, "payload holds " + std::to_string(payload / 4) +
                                             " floats, header promises " + std::to_string(count));
  }
  if (payload > count * 4) {
    throw ReprFormatError(K::kShape, "trailing bytes after payload");
  }
  t.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    t.values[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
  }
  t.validate();
  return t;
}

ReprTensor read_repr_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ReprFormatError(ReprFormatError::Kind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_repr_tensor(bytes);
  } catch (const ReprFormatError& e) {
    throw ReprFormatError(e.kind(), path.string() + ": " + e.what());
  }
}

void write_repr_tensor(const std::filesystem::path& path, const ReprTensor& tensor) {
  auto bytes = encode_repr_tensor(tensor);
  text::write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

PhoneInventory::PhoneInventory(std::vector<std::string> symbols,
                               std::optional<std::size_t> expected_size)
    : symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const auto& s = symbols_[i];
    if (s.empty()) throw InputError("empty phone symbol at position " + std::to_string(i));
    if (s == kBlankSymbol) throw InputError("inventory must not list the blank symbol");
    if (!index_.emplace(s, static_cast<int>(i) + 1).second) {
      throw InputError("duplicate phone symbol '" + s + "'");
    }
  }
  if (expected_size && *expected_size != symbols_.size()) {
    throw InputError("inventory has " + std::to_string(symbols_.size()) + " symbols, expected " +
                     std::to_string(*expected_size));
  }
}

PhoneInventory PhoneInventory::load(const std::filesystem::path& path,
                                    std::optional<std::size_t> expected_size) {
  std::vector<std::string> symbols;
  for (auto& line : text::read_lines(path)) {
    if (!line.empty()) symbols.push_back(std::move(line));
  }
  return PhoneInventory(std::move(symbols), expected_size);
}

int PhoneInventory::index_of(const std::string& s) const {
  auto it = index_.find(s);
  if (it == index_.end()) throw InputError("unknown phone symbol '" + s + "'");
  return it->second;
}

const std::string& PhoneInventory::symbol(int index) const {
  if (index < 1 || static_cast<std::size_t>(index) > symbols_.size()) {
    throw InputError("phone index out of range: " + std::to_string(index));
  }
  return symbols_[static_cast<std::size_t>(index) - 1];
}

std::vector<AlignmentEntry> parse_alignments(const std::vector<std::string>& lines,
                                             const PhoneInventory& inventory) {
  std::vector<AlignmentEntry> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (lines[i].empty()) continue;
    auto cols = text::split(lines[i], '\t');
    if (cols.size() != 4) {
      throw InputError(line_context("malformed alignment row, expected 4 columns", line_no));
    }
    AlignmentEntry e;
    e.utterance_id = std::string(cols[0]);
    e.phone = std::string(cols[1]);
    try {
      e.start_s = text::parse_double(cols[2]);
      e.end_s = text::parse_double(cols[3]);
    } catch (const InputError& err) {
      throw InputError(line_context(err.what(), line_no));
    }
    if (e.utterance_id.empty()) throw InputError(line_context("empty utterance id", line_no));
    if (!inventory.contains(e.phone)) {
      throw InputError(line_context("unknown phone symbol '" + e.phone + "'", line_no));
    }
    if (!(e.end_s > e.start_s)) {
      throw InputError(line_context("interval end must exceed start", line_no));
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<AlignmentEntry> read_alignments(const std::filesystem::path& path,
                                            const PhoneInventory& inventory) {
  try {
    return parse_alignments(text::read_lines(path), inventory);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_alignments(const std::filesystem::path& path,
                      const std::vector<AlignmentEntry>& entries) {
  std::string out;
  for (const auto& e : entries) {
    out += e.utterance_id + '\t' + e.phone + '\t' + text::format_double(e.start_s) + '\t' +
           text::format_double(e.end_s) + '\n';
  }
  text::write_file(path, out);
}

SampaTable load_sampa_table(const std::filesystem::path& path) {
  SampaTable table;
  auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i][0] == '#') continue;
    auto cols = text::split(lines[i], '\t');
    if (cols.size() != 2 || cols[0].empty() || cols[1].empty()) {
      throw InputError(path.string() + ": " + line_context("malformed SAMPA row", i + 1));
    }
    if (!table.emplace(std::string(cols[0]), std::string(cols[1])).second) {
      throw InputError(path.string() + ": " +
                       line_context("duplicate SAMPA symbol '" + std::string(cols[0]) + "'", i + 1));
    }
  }
  return table;
}

std::vector<std::string> map_sampa_to_ipa(const std::vector<std::string>& symbols,
                                          const SampaTable& table) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    auto it = table.find(symbols[i]);
    if (it == table.end()) {
      throw InputError("unmapped SAMPA symbol '" + symbols[i] + "' at position " +
                       std::to_string(i));
    }
    out.push_back(it->second);
  }
  return out;
}

std::vector<UtteranceManifest> read_manifest(const std::filesystem::path& path) {
  std::vector<UtteranceManifest> out;
  std::set<std::string> seen;
  auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    if (lines[i].empty()) continue;
    auto j = parse_json_line(lines[i], line_no, path);
    UtteranceManifest m;
    m.utterance_id = required_string(j, "utterance_id", line_no);
    m.group_key = required_string(j, "group_key", line_no);
    auto dur = j.find("duration_s");
    if (dur == j.end() || !dur->is_number()) {
      throw InputError(path.string() + ": " + line_context("missing numeric duration_s", line_no));
    }
    m.duration_s = dur->get<double>();
    for (auto [key, dest] : {std::pair{"audio_path", &m.audio_path}, std::pair{"repr_path", &m.repr_path}}) {
      auto it = j.find(key);
      if (it == j.end() || it->is_null()) continue;
      if (!it->is_string()) {
        throw InputError(path.string() + ": " + line_context(std::string(key) + " must be a string", line_no));
      }
      *dest = it->get<std::string>();
    }
    if (!(m.duration_s > 0.0)) {
      throw InputError(path.string() + ": " + line_context("duration_s must be positive", line_no));
    }
    if (!m.audio_path && !m.repr_path) {
      throw InputError(path.string() + ": " +
                       line_context("one of audio_path/repr_path is required", line_no));
    }
    if (!seen.insert(m.utterance_id).second) {
      throw InputError(path.string() + ": " +
                       line_context("duplicate utterance_id '" + m.utterance_id + "'", line_no));
    }
    out.push_back(std::move(m));
  }
  return out;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<UtteranceManifest>& manifest) {
  std::string out;
  for (const auto& m : manifest) {
    nlohmann::ordered_json j;
    j["utterance_id"] = m.utterance_id;
    j["group_key"] = m.group_key;
    j["duration_s"] = m.duration_s;
    if (m.audio_path) j["audio_path"] = *m.audio_path;
    if (m.repr_path) j["repr_path"] = *m.repr_path;
    out += j.dump() + '\n';
  }
  text::write_file(path, out);
}

std::vector<LabelRecord> read_labels(const std::filesystem::path& path) {
  std::vector<LabelRecord> out;
  auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto j = parse_json_line(lines[i], i + 1, path);
    LabelRecord r;
    r.utterance_id = required_string(j, "utterance_id", i + 1);
    r.task_id = required_string(j, "task_id", i + 1);
    r.label = required_string(j, "label", i + 1);
    out.push_back(std::move(r));
  }
  return out;
}

void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& labels) {
  std::string out;
  for (const auto& r : labels) {
    nlohmann::ordered_json j;
    j["utterance_id"] = r.utterance_id;
    j["task_id"] = r.task_id;
    j["label"] = r.label;
    out += j.dump() + '\n';
  }
  text::write_file(path, out);
}

void validate_labels(const std::vector<LabelRecord>& labels, const std::string& task_id,
                     const std::vector<std::string>& classes) {
  for (const auto& r : labels) {
    if (r.task_id != task_id) continue;
    if (std::find(classes.begin(), classes.end(), r.label) == classes.end()) {
      throw InputError("label '" + r.label + "' of utterance " + r.utterance_id +
                       " is not a class of task " + task_id);
    }
  }
}

GroupSplit split_by_group(const std::vector<UtteranceManifest>& manifest,
                          const std::set<std::string>& held_out_groups) {
  std::set<std::string> present;
  for (const auto& m : manifest) present.insert(m.group_key);
  for (const auto& g : held_out_groups) {
    if (!present.count(g)) throw InputError("held-out group '" + g + "' not in manifest");
  }
  GroupSplit split;
  for (const auto& m : manifest) {
    (held_out_groups.count(m.group_key) ? split.heldout : split.train).push_back(m);
  }
  return split;
}

}  // namespace layerprobe
