#include "layerprobe/pooling.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "json.hpp"

#include "layerprobe/rng.hpp"
#include "layerprobe/textio.hpp"

namespace layerprobe {

namespace {

std::vector<Eigen::VectorXd> mean_over_frames(const ReprTensor& t,
                                              const std::vector<std::size_t>& frames) {
  std::vector<Eigen::VectorXd> out(t.n_layers, Eigen::VectorXd::Zero(t.dim));
  for (std::size_t l = 0; l < t.n_layers; ++l) {
    for (std::size_t f : frames) {
      auto v = t.frame(l, f);
      for (std::size_t d = 0; d < v.size(); ++d) out[l][static_cast<Eigen::Index>(d)] += v[d];
    }
    out[l] /= static_cast<double>(frames.size());
  }
  return out;
}

}  // namespace

std::vector<std::size_t> frames_in_span(const ReprTensor& tensor, TimeSpan span) {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < tensor.n_frames; ++f) {
    const double c = tensor.frame_time(f);
    if (c >= span.start_s && c < span.end_s) out.push_back(f);
  }
  return out;
}

std::size_t nearest_frame(const ReprTensor& tensor, double t) {
  if (tensor.n_frames == 0) throw InputError("tensor has no frames");
  double pos = (t - tensor.frame_offset_s) / tensor.frame_hop_s;
  auto lo = static_cast<long long>(std::floor(pos));
  lo = std::clamp<long long>(lo, 0, static_cast<long long>(tensor.n_frames) - 1);
  std::size_t best = static_cast<std::size_t>(lo);
  double best_d = std::abs(tensor.frame_time(best) - t);
  if (best + 1 < tensor.n_frames) {
    double d = std::abs(tensor.frame_time(best + 1) - t);
    if (d < best_d) best = best + 1;
  }
  return best;
}

bool within_extent(const ReprTensor& tensor, TimeSpan span) {
  if (tensor.n_frames == 0) return false;
  const double lo = tensor.frame_time(0) - 1.5 * tensor.frame_hop_s;
  const double hi = tensor.frame_time(tensor.n_frames - 1) + 1.5 * tensor.frame_hop_s;
  return span.start_s >= lo && span.end_s <= hi;
}

PhonemeSample central_third_pool(const ReprTensor& tensor, const AlignmentEntry& entry) {
  if (tensor.n_frames == 0) throw InputError("tensor has no frames");
  const double lo = tensor.frame_time(0) - 1.5 * tensor.frame_hop_s;
  const double hi = tensor.frame_time(tensor.n_frames - 1) + 1.5 * tensor.frame_hop_s;
  if (entry.end_s <= lo || entry.start_s >= hi) {
    throw InputError("alignment entry [" + text::format_double(entry.start_s) + ", " +
                     text::format_double(entry.end_s) + ") of " + entry.utterance_id +
                     " lies outside the representation extent");
  }
  const double d = entry.end_s - entry.start_s;
  auto frames = frames_in_span(tensor, {entry.start_s + d / 3.0, entry.end_s - d / 3.0});
  if (frames.empty()) frames.push_back(nearest_frame(tensor, 0.5 * (entry.start_s + entry.end_s)));

  PhonemeSample s;
  s.utterance_id = entry.utterance_id;
  s.phone = entry.phone;
  s.layers = mean_over_frames(tensor, frames);
  return s;
}

std::vector<Eigen::VectorXd> utterance_mean_pool(const ReprTensor& tensor,
                                                 std::optional<TimeSpan> span) {
  std::vector<std::size_t> frames;
  if (span) {
    frames = frames_in_span(tensor, *span);
  } else {
    frames.resize(tensor.n_frames);
    for (std::size_t f = 0; f < frames.size(); ++f) frames[f] = f;
  }
  if (frames.empty()) throw InputError("pooling span contains no frames");
  return mean_over_frames(tensor, frames);
}

PooledUtterance pool_utterance_phones(const ReprTensor& tensor,
                                      const std::vector<AlignmentEntry>& entries) {
  PooledUtterance out;
  for (const auto& e : entries) {
    if (!within_extent(tensor, {e.start_s, e.end_s})) {
      ++out.dropped;
      continue;
    }
    out.samples.push_back(central_third_pool(tensor, e));
  }
  return out;
}

std::size_t window_count(double total_s, const WindowConfig& cfg) {
  if (total_s + 1e-9 < cfg.win_s) return 0;
  return static_cast<std::size_t>(std::floor((total_s - cfg.win_s) / cfg.hop_s + 1e-9)) + 1;
}

std::vector<LabeledWindow> window_label_track(std::vector<TrackInterval> track, double total_s,
                                              const WindowConfig& cfg) {
  if (!(cfg.hop_s > 0.0) || !(cfg.core_s > 0.0)) throw ConfigError("window hop/core must be positive");
  if (cfg.win_s < cfg.core_s) throw ConfigError("window length must be >= core length");
  std::stable_sort(track.begin(), track.end(),
                   [](const TrackInterval& a, const TrackInterval& b) { return a.start_s < b.start_s; });
  for (std::size_t i = 0; i < track.size(); ++i) {
    if (!(track[i].end_s > track[i].start_s)) throw InputError("label interval with end <= start");
    if (i > 0 && track[i].start_s < track[i - 1].end_s) {
      throw InputError("overlapping label intervals at " + text::format_double(track[i].start_s));
    }
  }

  const std::size_t n = window_count(total_s, cfg);
  std::vector<LabeledWindow> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double start = static_cast<double>(k) * cfg.hop_s;
    const double core_lo = start + 0.5 * (cfg.win_s - cfg.core_s);
    const double core_hi = core_lo + cfg.core_s;

    struct Tally {
      double duration = 0.0;
      double first = 0.0;
    };
    std::map<std::string, Tally> tally;
    for (const auto& iv : track) {
      const double a = std::max(iv.start_s, core_lo);
      const double b = std::min(iv.end_s, core_hi);
      if (b <= a) continue;
      auto [it, inserted] = tally.try_emplace(iv.label, Tally{0.0, a});
      it->second.duration += b - a;
      if (!inserted) it->second.first = std::min(it->second.first, a);
    }

    LabeledWindow w{start, std::nullopt};
    const Tally* best = nullptr;
    for (const auto& [label, t] : tally) {
      if (!best || t.duration > best->duration ||
          (t.duration == best->duration && t.first < best->first)) {
        best = &t;
        w.label = label;
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

PhonemeDataset build_phoneme_dataset(const std::vector<PhonemeSample>& samples,
                                     const PhoneInventory& inventory, std::size_t per_phone_cap,
                                     std::uint64_t seed) {
  if (samples.empty()) throw InputError("no phoneme samples to build a dataset from");
  if (per_phone_cap < 1) throw ConfigError("per_phone_cap must be >= 1");
  const std::size_t n_layers = samples.front().layers.size();
  if (n_layers == 0) throw InputError("phoneme sample without layers");
  const Eigen::Index dim = samples.front().layers.front().size();

  std::vector<std::vector<std::size_t>> by_phone(inventory.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.layers.size() != n_layers) throw InputError("inconsistent layer count across samples");
    for (const auto& v : s.layers) {
      if (v.size() != dim) throw InputError("inconsistent vector dimension across samples");
    }
    by_phone[static_cast<std::size_t>(inventory.index_of(s.phone) - 1)].push_back(i);
  }

  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (auto& idx : by_phone) {
    if (idx.size() > per_phone_cap) {
      // Partial Fisher-Yates: the first cap slots become a uniform subset.
      for (std::size_t i = 0; i < per_phone_cap; ++i) {
        std::size_t j = i + rng.uniform_index(idx.size() - i);
        std::swap(idx[i], idx[j]);
      }
      idx.resize(per_phone_cap);
    }
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());

  PhonemeDataset ds;
  const auto n = static_cast<Eigen::Index>(keep.size());
  ds.per_layer.assign(n_layers, Eigen::MatrixXd(n, dim));
  ds.one_hot = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(inventory.size()));
  ds.source_index = keep;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& s = samples[keep[static_cast<std::size_t>(r)]];
    for (std::size_t l = 0; l < n_layers; ++l) ds.per_layer[l].row(r) = s.layers[l].transpose();
    ds.one_hot(r, inventory.index_of(s.phone) - 1) = 1.0;
  }
  return ds;
}

void write_pooled_dataset(const std::filesystem::path& dir,
                          const std::vector<Eigen::MatrixXd>& per_layer,
                          const std::vector<PooledRow>& rows) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    const auto& m = per_layer[l];
    if (static_cast<std::size_t>(m.rows()) != rows.size()) {
      throw InputError("pooled layer row count does not match row index");
    }
    ReprTensor t(1, static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()),
                 1.0, 0.0);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      auto f = t.frame(0, static_cast<std::size_t>(r));
      for (Eigen::Index c = 0; c < m.cols(); ++c) f[static_cast<std::size_t>(c)] = static_cast<float>(m(r, c));
    }
    write_repr_tensor(dir / ("layer_" + std::to_string(l) + ".lrep"), t);
  }
  std::string index;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    nlohmann::ordered_json j;
    j["row"] = r;
    j["utterance_id"] = rows[r].utterance_id;
    j["label"] = rows[r].label;
    j["start_s"] = rows[r].start_s;
    j["end_s"] = rows[r].end_s;
    index += j.dump() + '\n';
  }
  text::write_file(dir / "rows.jsonl", index);
}

PooledDataset read_pooled_dataset(const std::filesystem::path& dir) {
  PooledDataset ds;
  for (const auto& line : text::read_lines(dir / "rows.jsonl")) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      ds.rows.push_back({j.at("utterance_id").get<std::string>(), j.at("label").get<std::string>(),
                         j.at("start_s").get<double>(), j.at("end_s").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw InputError((dir / "rows.jsonl").string() + ": " + e.what());
    }
  }
  for (std::size_t l = 0;; ++l) {
    auto p = dir / ("layer_" + std::to_string(l) + ".lrep");
    if (!std::filesystem::exists(p)) break;
    auto t = read_repr_tensor(p);
    if (t.n_layers != 1 || t.n_frames != ds.rows.size()) {
      throw InputError(p.string() + ": pooled layer shape does not match rows.jsonl");
    }
    Eigen::MatrixXd m(t.n_frames, t.dim);
    for (std::size_t r = 0; r < t.n_frames; ++r) {
      auto f = t.frame(0, r);
      for (std::size_t c = 0; c < t.dim; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = f[c];
    }
    ds.per_layer.push_back(std::move(m));
  }
  if (ds.per_layer.empty()) throw InputError(dir.string() + ": no layer_*.lrep files");
  return ds;
}

}  // namespace layerprobe
