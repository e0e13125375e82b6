#include <algorithm>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "layerprobe/cli.hpp"
#include "layerprobe/corpus_io.hpp"
#include "layerprobe/error.hpp"
#include "layerprobe/rng.hpp"
#include "layerprobe/textio.hpp"
#include "util.hpp"

namespace layerprobe::cli {

namespace {

using J = nlohmann::ordered_json;

void note(const std::string& msg) { std::cout << msg << '\n'; }

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

fs::path command_dir(const RunConfig& cfg, const std::string& name) {
  return make_dir(cfg.out_dir / name);
}

void write_echo(const RunConfig& cfg, const fs::path& dir, const std::string& command) {
  write_json(dir / "config.json", config_echo(cfg, command));
}

// A manifest with repr/audio paths resolved against the manifest's directory.
struct Corpus {
  std::vector<UtteranceManifest> utterances;
  std::map<std::string, std::size_t> index;

  const UtteranceManifest& at(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) throw InputError("utterance '" + id + "' is not in the manifest");
    return utterances[it->second];
  }
};

Corpus load_corpus(const fs::path& manifest_path) {
  Corpus c;
  c.utterances = read_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    auto& u = c.utterances[i];
    if (u.repr_path && fs::path(*u.repr_path).is_relative()) u.repr_path = (dir / *u.repr_path).string();
    if (u.audio_path && fs::path(*u.audio_path).is_relative()) u.audio_path = (dir / *u.audio_path).string();
    c.index[u.utterance_id] = i;
  }
  return c;
}

fs::path repr_of(const UtteranceManifest& u) {
  if (!u.repr_path) throw InputError("utterance '" + u.utterance_id + "' has no repr_path");
  return *u.repr_path;
}

fs::path audio_of(const UtteranceManifest& u) {
  if (!u.audio_path) throw InputError("utterance '" + u.utterance_id + "' has no audio_path");
  return *u.audio_path;
}

// Fails with the full list of missing dumps/audio before any compute starts.
void require_media(const Corpus& c, const std::set<std::string>& ids, bool repr, bool audio) {
  std::vector<std::pair<std::string, fs::path>> files;
  for (const auto& u : c.utterances) {
    if (!ids.count(u.utterance_id)) continue;
    if (repr) files.emplace_back("repr dump of " + u.utterance_id, repr_of(u));
    if (audio) files.emplace_back("audio of " + u.utterance_id, audio_of(u));
  }
  require_files(files);
}

PhoneInventory load_inventory(const RunConfig& cfg) {
  return PhoneInventory::load(cfg.resolve(cfg.inventory), cfg.inventory_size);
}

std::vector<AlignmentEntry> load_alignments(const RunConfig& cfg, const fs::path& path,
                                            const PhoneInventory& inventory) {
  auto lines = text::read_lines(path);
  if (cfg.sampa_alignments) {
    const SampaTable table = load_sampa_table(cfg.resolve(cfg.sampa_table));
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      auto fields = text::split(lines[i], '\t');
      if (fields.size() != 4) continue;  // reported by the parser below
      std::vector<std::string> phone = {std::string(fields[1])};
      try {
        phone = map_sampa_to_ipa(phone, table);
      } catch (const InputError& e) {
        throw InputError(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
      }
      lines[i] = std::string(fields[0]) + '\t' + phone[0] + '\t' + std::string(fields[2]) + '\t' +
                 std::string(fields[3]);
    }
  }
  try {
    return parse_alignments(lines, inventory);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

// Alignment entries grouped per utterance in manifest order.
std::vector<std::pair<std::size_t, std::vector<AlignmentEntry>>> group_alignments(
    const Corpus& c, const std::vector<AlignmentEntry>& entries) {
  std::map<std::size_t, std::vector<AlignmentEntry>> by;
  for (const auto& e : entries) {
    auto it = c.index.find(e.utterance_id);
    if (it == c.index.end()) {
      throw InputError("alignment for utterance '" + e.utterance_id + "' which is not in the manifest");
    }
    by[it->second].push_back(e);
  }
  return {by.begin(), by.end()};
}

struct PooledPhones {
  std::vector<PhonemeSample> samples;
  std::vector<PooledRow> rows;
  std::size_t dropped = 0;
  std::size_t n_layers = 0;
};

PooledPhones pool_phones(const Corpus& c, const std::vector<AlignmentEntry>& entries, unsigned jobs) {
  const auto groups = group_alignments(c, entries);
  std::set<std::string> ids;
  for (const auto& [u, _] : groups) ids.insert(c.utterances[u].utterance_id);
  require_media(c, ids, true, false);

  struct Part {
    std::vector<PhonemeSample> samples;
    std::vector<PooledRow> rows;
    std::size_t dropped = 0;
    std::size_t n_layers = 0;
    std::size_t dim = 0;
  };
  std::vector<Part> parts(groups.size());
  parallel_for(groups.size(), jobs, [&](std::size_t g) {
    const auto& u = c.utterances[groups[g].first];
    const ReprTensor t = read_repr_tensor(repr_of(u));
    Part& p = parts[g];
    p.n_layers = t.n_layers;
    p.dim = t.dim;
    for (const auto& e : groups[g].second) {
      if (!within_extent(t, {e.start_s, e.end_s})) {
        ++p.dropped;
        continue;
      }
      p.samples.push_back(central_third_pool(t, e));
      p.rows.push_back({e.utterance_id, e.phone, e.start_s, e.end_s});
    }
  });
  PooledPhones out;
  for (auto& p : parts) {
    if (out.n_layers == 0) out.n_layers = p.n_layers;
    if (p.n_layers != out.n_layers) throw InputError("repr dumps disagree on the number of layers");
    if (!parts.empty() && p.dim != parts.front().dim) throw InputError("repr dumps disagree on dim");
    std::move(p.samples.begin(), p.samples.end(), std::back_inserter(out.samples));
    std::move(p.rows.begin(), p.rows.end(), std::back_inserter(out.rows));
    out.dropped += p.dropped;
  }
  if (out.dropped) warn(std::to_string(out.dropped) + " phone(s) crossing a dump boundary were dropped");
  if (out.samples.empty()) throw InputError("no phoneme samples could be pooled");
  return out;
}

std::vector<Eigen::MatrixXd> stack_layers(const std::vector<PhonemeSample>& samples) {
  const std::size_t n_layers = samples.front().layers.size();
  const auto dim = samples.front().layers.front().size();
  std::vector<Eigen::MatrixXd> per_layer(n_layers, Eigen::MatrixXd(static_cast<Eigen::Index>(samples.size()), dim));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      per_layer[l].row(static_cast<Eigen::Index>(i)) = samples[i].layers[l].transpose();
    }
  }
  return per_layer;
}

std::string csv_double(double v) { return text::format_double(v); }

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// TSV rows utterance_id, start_s, end_s, label grouped per utterance.
std::map<std::string, std::vector<TrackInterval>> read_tracks(const fs::path& path) {
  const auto lines = text::read_lines(path);
  std::map<std::string, std::vector<TrackInterval>> by;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = text::split(lines[i], '\t');
    const std::string at = path.string() + ":" + std::to_string(i + 1);
    if (f.size() != 4) throw InputError(at + ": expected 4 tab-separated columns");
    TrackInterval t;
    try {
      t.start_s = text::parse_double(f[1]);
      t.end_s = text::parse_double(f[2]);
    } catch (const InputError& e) {
      throw InputError(at + ": " + e.what());
    }
    if (!(t.end_s > t.start_s)) throw InputError(at + ": end must be greater than start");
    t.label = std::string(f[3]);
    by[std::string(f[0])].push_back(t);
  }
  return by;
}

std::vector<double> read_weights_csv(const fs::path& path) {
  const auto lines = text::read_lines(path);
  if (lines.empty() || lines[0] != "layer,weight") throw InputError(path.string() + ": expected header layer,weight");
  std::vector<double> w;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = text::split(lines[i], ',');
    if (f.size() != 2 || text::parse_int(f[0]) != static_cast<long long>(w.size())) {
      throw InputError(path.string() + ":" + std::to_string(i + 1) + ": malformed row");
    }
    w.push_back(text::parse_double(f[1]));
  }
  if (w.empty()) throw InputError(path.string() + ": no layer weights");
  return w;
}

using Transcripts = std::map<std::string, ctc::PhoneSeq>;

Transcripts read_transcripts(const fs::path& path, const PhoneInventory& inv) {
  Transcripts out;
  const auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::istringstream in(lines[i]);
    std::string id;
    if (!(in >> id)) continue;
    ctc::PhoneSeq seq;
    std::string sym;
    while (in >> sym) {
      if (!inv.contains(sym)) {
        throw InputError(path.string() + ":" + std::to_string(i + 1) + ": unknown phone '" + sym + "'");
      }
      seq.push_back(inv.index_of(sym));
    }
    if (!out.emplace(id, std::move(seq)).second) {
      throw InputError(path.string() + ":" + std::to_string(i + 1) + ": duplicate utterance '" + id + "'");
    }
  }
  return out;
}

Transcripts decode_logits(const fs::path& dir, const std::vector<std::string>& ids,
                          const PhoneInventory& inv, unsigned jobs) {
  std::vector<std::pair<std::string, fs::path>> files;
  for (const auto& id : ids) files.emplace_back("logits of " + id, dir / (id + ".lrep"));
  require_files(files);
  std::vector<ctc::PhoneSeq> seqs(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const ReprTensor t = read_repr_tensor(files[i].second);
    if (t.n_layers != 1 || t.dim != inv.size() + 1) {
      throw InputError(files[i].second.string() + ": logits must have 1 layer and " +
                       std::to_string(inv.size() + 1) + " columns");
    }
    ctc::LogitGrid g(t.n_frames, t.dim);
    for (std::uint32_t f = 0; f < t.n_frames; ++f) {
      const auto row = t.frame(0, f);
      for (std::uint32_t k = 0; k < t.dim; ++k) g(f, k) = row[k];
    }
    seqs[i] = ctc::greedy_decode(g);
  });
  Transcripts out;
  for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]] = seqs[i];
  return out;
}

std::string join_phones(const ctc::PhoneSeq& s, const PhoneInventory& inv) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += inv.symbol(s[i]);
  }
  return out;
}

}  // namespace

void cmd_ingest(const RunConfig& cfg) {
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"corpus.manifest", cfg.manifest.empty() ? fs::path() : cfg.resolve(cfg.manifest)},
      {"corpus.inventory", cfg.inventory.empty() ? fs::path() : cfg.resolve(cfg.inventory)}};
  if (!cfg.alignments.empty()) inputs.emplace_back("corpus.alignments", cfg.resolve(cfg.alignments));
  if (!cfg.labels.empty()) inputs.emplace_back("corpus.labels", cfg.resolve(cfg.labels));
  if (cfg.sampa_alignments) inputs.emplace_back("corpus.sampa_table", cfg.resolve(cfg.sampa_table));
  require_files(inputs);

  const PhoneInventory inv = load_inventory(cfg);
  const Corpus corpus = load_corpus(cfg.resolve(cfg.manifest));
  std::set<std::string> with_repr;
  for (const auto& u : corpus.utterances) {
    if (u.repr_path) with_repr.insert(u.utterance_id);
    if (u.audio_path && !fs::exists(*u.audio_path)) {
      throw InputError("audio of " + u.utterance_id + " not found: " + *u.audio_path);
    }
  }
  require_media(corpus, with_repr, true, false);

  struct Shape {
    std::uint32_t layers = 0, frames = 0, dim = 0;
    bool present = false;
  };
  std::vector<Shape> shapes(corpus.utterances.size());
  parallel_for(corpus.utterances.size(), cfg.jobs, [&](std::size_t i) {
    const auto& u = corpus.utterances[i];
    if (!u.repr_path) return;
    const ReprTensor t = read_repr_tensor(*u.repr_path);
    shapes[i] = {t.n_layers, t.n_frames, t.dim, true};
  });
  std::optional<Shape> ref;
  std::uint64_t frames = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (!shapes[i].present) continue;
    if (!ref) ref = shapes[i];
    if (shapes[i].layers != ref->layers || shapes[i].dim != ref->dim) {
      throw InputError("repr dump of " + corpus.utterances[i].utterance_id +
                       " has a different layer count or dim than the rest of the corpus");
    }
    frames += shapes[i].frames;
  }

  const fs::path dir = command_dir(cfg, "ingest");
  J summary;
  summary["utterances"] = corpus.utterances.size();
  std::map<std::string, std::size_t> groups;
  for (const auto& u : corpus.utterances) ++groups[u.group_key];
  summary["groups"] = groups;
  summary["repr"] = ref ? J{{"utterances", with_repr.size()}, {"n_layers", ref->layers},
                             {"dim", ref->dim}, {"frames", frames}}
                        : J(nullptr);
  summary["inventory_size"] = inv.size();

  if (!cfg.alignments.empty()) {
    const auto entries = load_alignments(cfg, cfg.resolve(cfg.alignments), inv);
    group_alignments(corpus, entries);
    std::map<std::string, std::size_t> counts;
    for (const auto& e : entries) ++counts[e.phone];
    J phones = J::object();
    for (const auto& s : inv.symbols()) phones[s] = counts.count(s) ? counts[s] : 0;
    summary["alignments"] = {{"entries", entries.size()}, {"phones", phones}};
    write_alignments(dir / "alignments.tsv", entries);
  }
  if (!cfg.labels.empty()) {
    const auto labels = read_labels(cfg.resolve(cfg.labels));
    J per_task = J::object();
    for (const auto& l : labels) corpus.at(l.utterance_id);
    for (const auto& t : cfg.tasks) {
      validate_labels(labels, t.id, t.classes);
      J counts = J::object();
      for (const auto& c : t.classes) counts[c] = 0;
      for (const auto& l : labels) {
        if (l.task_id == t.id) counts[l.label] = counts[l.label].get<std::size_t>() + 1;
      }
      per_task[t.id] = counts;
    }
    summary["labels"] = {{"records", labels.size()}, {"tasks", per_task}};
  }
  write_json(dir / "summary.json", summary);
  write_echo(cfg, dir, "ingest");
  note("ingest: " + std::to_string(corpus.utterances.size()) + " utterances checked, wrote " +
       (dir / "summary.json").string());
}

void cmd_pool(const RunConfig& cfg) {
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"corpus.manifest", cfg.manifest.empty() ? fs::path() : cfg.resolve(cfg.manifest)}};
  if (!cfg.alignments.empty()) {
    inputs.emplace_back("corpus.alignments", cfg.resolve(cfg.alignments));
    inputs.emplace_back("corpus.inventory", cfg.inventory.empty() ? fs::path() : cfg.resolve(cfg.inventory));
  }
  for (const auto& w : cfg.pool.windows) inputs.emplace_back("pool.windows tracks for " + w.task, cfg.resolve(w.tracks));
  if (cfg.alignments.empty() && cfg.pool.windows.empty()) {
    throw ConfigError("pool needs corpus.alignments and/or [[pool.windows]]");
  }
  require_files(inputs);
  const Corpus corpus = load_corpus(cfg.resolve(cfg.manifest));
  const fs::path dir = command_dir(cfg, "pool");
  J summary;

  if (!cfg.alignments.empty()) {
    const PhoneInventory inv = load_inventory(cfg);
    const auto pooled = pool_phones(corpus, load_alignments(cfg, cfg.resolve(cfg.alignments), inv), cfg.jobs);
    write_pooled_dataset(dir / "phonemes", stack_layers(pooled.samples), pooled.rows);
    summary["phonemes"] = {{"rows", pooled.rows.size()}, {"dropped", pooled.dropped}};
  }

  for (const auto& src : cfg.pool.windows) {
    const TaskDef& task = cfg.task(src.task);
    const auto by = read_tracks(cfg.resolve(src.tracks));
    std::vector<std::size_t> utts;
    std::set<std::string> ids;
    for (const auto& [id, track] : by) {
      corpus.at(id);
      utts.push_back(corpus.index.at(id));
      ids.insert(id);
      for (const auto& t : track) {
        if (std::find(task.classes.begin(), task.classes.end(), t.label) == task.classes.end()) {
          throw InputError("track label '" + t.label + "' is not a class of task '" + task.id + "'");
        }
      }
    }
    std::sort(utts.begin(), utts.end());
    require_media(corpus, ids, true, false);

    struct Part {
      std::vector<PhonemeSample> samples;
      std::vector<PooledRow> rows;
      std::size_t unlabeled = 0;
    };
    std::vector<Part> parts(utts.size());
    parallel_for(utts.size(), cfg.jobs, [&](std::size_t i) {
      const auto& u = corpus.utterances[utts[i]];
      const ReprTensor t = read_repr_tensor(repr_of(u));
      for (const auto& w : window_label_track(by.at(u.utterance_id), u.duration_s, cfg.pool.window)) {
        if (!w.label) {
          ++parts[i].unlabeled;
          continue;
        }
        const TimeSpan span{w.start_s, w.start_s + cfg.pool.window.win_s};
        parts[i].samples.push_back({u.utterance_id, *w.label, utterance_mean_pool(t, span)});
        parts[i].rows.push_back({u.utterance_id, *w.label, span.start_s, span.end_s});
      }
    });
    std::vector<PhonemeSample> samples;
    std::vector<PooledRow> rows;
    std::size_t unlabeled = 0;
    for (auto& p : parts) {
      std::move(p.samples.begin(), p.samples.end(), std::back_inserter(samples));
      std::move(p.rows.begin(), p.rows.end(), std::back_inserter(rows));
      unlabeled += p.unlabeled;
    }
    if (samples.empty()) throw InputError("task '" + task.id + "': no labeled windows");
    write_pooled_dataset(dir / task.id, stack_layers(samples), rows);
    summary["windows"][task.id] = {{"rows", rows.size()}, {"unlabeled", unlabeled}};
  }
  write_json(dir / "summary.json", summary);
  write_echo(cfg, dir, "pool");
  note("pool: wrote " + dir.string());
}

void cmd_cca_phoneme(const RunConfig& cfg) {
  std::vector<CorpusDef> corpora = cfg.cca_phoneme.corpora;
  if (corpora.empty()) corpora.push_back({"corpus", cfg.manifest, cfg.alignments});
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"corpus.inventory", cfg.inventory.empty() ? fs::path() : cfg.resolve(cfg.inventory)}};
  for (const auto& c : corpora) {
    inputs.emplace_back(c.name + " manifest", c.manifest.empty() ? fs::path() : cfg.resolve(c.manifest));
    inputs.emplace_back(c.name + " alignments", c.alignments.empty() ? fs::path() : cfg.resolve(c.alignments));
  }
  if (cfg.sampa_alignments) inputs.emplace_back("corpus.sampa_table", cfg.resolve(cfg.sampa_table));
  require_files(inputs);

  const PhoneInventory inv = load_inventory(cfg);
  std::vector<Corpus> loaded;
  std::vector<std::vector<AlignmentEntry>> entries;
  std::vector<std::pair<std::string, fs::path>> media;
  for (const auto& c : corpora) {
    loaded.push_back(load_corpus(cfg.resolve(c.manifest)));
    entries.push_back(load_alignments(cfg, cfg.resolve(c.alignments), inv));
    for (const auto& [u, _] : group_alignments(loaded.back(), entries.back())) {
      media.emplace_back(c.name + " repr dump of " + loaded.back().utterances[u].utterance_id,
                         repr_of(loaded.back().utterances[u]));
    }
  }
  require_files(media);

  cca::CcaConfig cc = cfg.cca;
  cc.seed = cfg.seed;
  std::ostringstream csv;
  csv << "corpus,layer,score\n";
  J results = J::array();
  std::vector<Series> series;
  for (std::size_t k = 0; k < corpora.size(); ++k) {
    const auto pooled = pool_phones(loaded[k], entries[k], cfg.jobs);
    const PhonemeDataset data =
        build_phoneme_dataset(pooled.samples, inv, cfg.cca_phoneme.per_phone_cap, cfg.seed);
    const auto scores = cca::layerwise_cca_sweep(data.per_layer, data.one_hot, cc, cfg.jobs);
    Series s{corpora[k].name, {}};
    J layer_scores = J::array();
    for (const auto& ls : scores) {
      csv << corpora[k].name << ',' << ls.layer << ',' << csv_double(ls.score) << '\n';
      s.y.push_back(ls.score);
      layer_scores.push_back(ls.score);
    }
    std::set<std::string> phones;
    for (std::size_t i : data.source_index) phones.insert(pooled.samples[i].phone);
    results.push_back({{"corpus", corpora[k].name}, {"samples", data.source_index.size()},
                       {"phones", phones.size()}, {"dropped", pooled.dropped},
                       {"best_layer", argmax(s.y)}, {"scores", layer_scores}});
    series.push_back(std::move(s));
  }
  const fs::path dir = command_dir(cfg, "cca_phoneme");
  text::write_file(dir / "scores.csv", csv.str());
  write_json(dir / "scores.json", {{"config", config_echo(cfg, "cca-phoneme")}, {"results", results}});
  write_echo(cfg, dir, "cca-phoneme");
  if (cfg.cca_phoneme.svg) {
    text::write_file(dir / "scores.svg", svg_line_chart("Phoneme CCA by layer", "PWCCA", series));
  }
  note("cca-phoneme: wrote " + (dir / "scores.csv").string());
}

void cmd_cca_paraling(const RunConfig& cfg) {
  if (cfg.cca_paraling.task.empty()) throw ConfigError("cca_paraling.task is required");
  const TaskDef& task = cfg.task(cfg.cca_paraling.task);
  require_files({{"corpus.manifest", cfg.manifest.empty() ? fs::path() : cfg.resolve(cfg.manifest)},
                 {"corpus.labels", cfg.labels.empty() ? fs::path() : cfg.resolve(cfg.labels)}});
  const Corpus corpus = load_corpus(cfg.resolve(cfg.manifest));
  const auto labels = read_labels(cfg.resolve(cfg.labels));
  validate_labels(labels, task.id, task.classes);

  std::map<std::string, std::string> label_of;
  for (const auto& l : labels) {
    if (l.task_id != task.id) continue;
    corpus.at(l.utterance_id);
    if (!label_of.emplace(l.utterance_id, l.label).second) {
      throw InputError("utterance '" + l.utterance_id + "' has two labels for task '" + task.id + "'");
    }
  }
  // Seeded per-class draw; selected utterances keep manifest order within a class.
  const std::size_t per_class = cfg.cca_paraling.per_class;
  std::vector<std::size_t> chosen;
  Rng rng(cfg.seed);
  for (const auto& cls : task.classes) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
      auto it = label_of.find(corpus.utterances[i].utterance_id);
      if (it != label_of.end() && it->second == cls) pool.push_back(i);
    }
    if (pool.size() < per_class) {
      throw InputError("class '" + cls + "' has " + std::to_string(pool.size()) +
                       " samples, the plan needs " + std::to_string(per_class));
    }
    const auto perm = rng.permutation(pool.size());
    std::vector<std::size_t> take;
    for (std::size_t i = 0; i < per_class; ++i) take.push_back(pool[perm[i]]);
    std::sort(take.begin(), take.end());
    chosen.insert(chosen.end(), take.begin(), take.end());
  }
  std::set<std::string> ids;
  for (std::size_t i : chosen) ids.insert(corpus.utterances[i].utterance_id);
  require_media(corpus, ids, true, true);

  const std::size_t n = chosen.size();
  std::vector<dsp::FeatureGroupVector> feats(n);
  std::vector<std::vector<Eigen::VectorXd>> reps(n);
  parallel_for(n, cfg.jobs, [&](std::size_t i) {
    const auto& u = corpus.utterances[chosen[i]];
    const auto frames = dsp::extract_llds(dsp::read_wav(audio_of(u)), cfg.dsp);
    if (frames.empty()) throw InputError("audio of " + u.utterance_id + " is too short for analysis");
    feats[i] = dsp::utterance_functionals(frames, cfg.dsp);
    reps[i] = utterance_mean_pool(read_repr_tensor(repr_of(u)));
  });
  const std::size_t n_layers = reps.front().size();
  std::vector<Eigen::MatrixXd> per_layer(n_layers, Eigen::MatrixXd(static_cast<Eigen::Index>(n), reps.front().front().size()));
  for (std::size_t i = 0; i < n; ++i) {
    if (reps[i].size() != n_layers || reps[i].front().size() != per_layer.front().cols()) {
      throw InputError("repr dumps disagree on layer count or dim");
    }
    for (std::size_t l = 0; l < n_layers; ++l) per_layer[l].row(static_cast<Eigen::Index>(i)) = reps[i][l].transpose();
  }
  std::size_t no_voiced = 0;
  for (const auto& f : feats) no_voiced += f.no_voiced_frames ? 1 : 0;
  if (no_voiced) warn(std::to_string(no_voiced) + " sample(s) had no voiced frames; neutral values used");

  cca::CcaConfig cc = cfg.cca;
  cc.seed = cfg.seed;
  std::ostringstream csv;
  csv << "group,layer,score\n";
  J results = J::array();
  std::vector<Series> series;
  for (std::size_t g = 0; g < dsp::kNumGroups; ++g) {
    const auto dim = static_cast<Eigen::Index>(dsp::kGroupDims[g]);
    Eigen::MatrixXd y(static_cast<Eigen::Index>(n), dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto vals = feats[i].group(static_cast<dsp::FeatureGroup>(g));
      for (Eigen::Index j = 0; j < dim; ++j) y(static_cast<Eigen::Index>(i), j) = vals[static_cast<std::size_t>(j)];
    }
    const std::string name(dsp::kGroupNames[g]);
    std::vector<cca::LayerScore> scores;
    try {
      scores = cca::layerwise_cca_sweep(per_layer, y, cc, cfg.jobs);
    } catch (const NumericalError& e) {
      throw NumericalError("feature group '" + name + "': " + e.what());
    }
    Series s{name, {}};
    for (const auto& ls : scores) {
      csv << name << ',' << ls.layer << ',' << csv_double(ls.score) << '\n';
      s.y.push_back(ls.score);
    }
    results.push_back({{"group", name}, {"dim", dim}, {"best_layer", argmax(s.y)}, {"scores", s.y}});
    series.push_back(std::move(s));
  }
  const fs::path dir = command_dir(cfg, "cca_paraling");
  text::write_file(dir / "scores.csv", csv.str());
  J samples = J::array();
  for (std::size_t i : chosen) {
    const auto& id = corpus.utterances[i].utterance_id;
    samples.push_back({{"utterance_id", id}, {"label", label_of.at(id)}});
  }
  write_json(dir / "scores.json", {{"config", config_echo(cfg, "cca-paraling")},
                                   {"samples", n},
                                   {"no_voiced_samples", no_voiced},
                                   {"results", results},
                                   {"selection", samples}});
  write_echo(cfg, dir, "cca-paraling");
  if (cfg.cca_paraling.svg) {
    text::write_file(dir / "scores.svg", svg_line_chart("Paralinguistic CCA by layer", "PWCCA", series));
  }
  note("cca-paraling: wrote " + (dir / "scores.csv").string());
}

void cmd_probe(const RunConfig& cfg) {
  std::vector<std::string> task_ids = cfg.probe.tasks;
  if (task_ids.empty()) {
    for (const auto& w : cfg.pool.windows) task_ids.push_back(w.task);
  }
  if (task_ids.empty()) throw ConfigError("probe.tasks is empty and no [[pool.windows]] are configured");
  const bool by_group = !cfg.probe.dev_groups.empty() || !cfg.probe.test_groups.empty();
  std::vector<std::pair<std::string, fs::path>> inputs;
  for (const auto& id : task_ids) inputs.emplace_back("pooled windows for " + id, cfg.out_dir / "pool" / id / "rows.jsonl");
  if (by_group) inputs.emplace_back("corpus.manifest", cfg.manifest.empty() ? fs::path() : cfg.resolve(cfg.manifest));
  if (!cfg.probe.mask_from.empty()) inputs.emplace_back("probe.mask_from", cfg.resolve(cfg.probe.mask_from));
  require_files(inputs);

  // Utterance -> split (0 train, 1 dev, 2 test).
  std::vector<PooledDataset> sets;
  std::set<std::string> utt_ids;
  for (const auto& id : task_ids) {
    sets.push_back(read_pooled_dataset(cfg.out_dir / "pool" / id));
    for (const auto& r : sets.back().rows) utt_ids.insert(r.utterance_id);
  }
  std::map<std::string, int> split;
  if (by_group) {
    const Corpus corpus = load_corpus(cfg.resolve(cfg.manifest));
    std::set<std::string> known;
    for (const auto& u : corpus.utterances) known.insert(u.group_key);
    for (const auto* list : {&cfg.probe.dev_groups, &cfg.probe.test_groups}) {
      for (const auto& g : *list) {
        if (!known.count(g)) throw InputError("probe: group '" + g + "' does not occur in the manifest");
      }
    }
    for (const auto& id : utt_ids) {
      const auto& g = corpus.at(id).group_key;
      const auto has = [&](const std::vector<std::string>& v) { return std::find(v.begin(), v.end(), g) != v.end(); };
      if (has(cfg.probe.dev_groups) && has(cfg.probe.test_groups)) {
        throw ConfigError("probe: group '" + g + "' is listed as both dev and test");
      }
      split[id] = has(cfg.probe.test_groups) ? 2 : has(cfg.probe.dev_groups) ? 1 : 0;
    }
  } else {
    std::vector<std::string> ids(utt_ids.begin(), utt_ids.end());
    Rng rng(cfg.seed ^ 0x5eed5eedULL);
    const auto perm = rng.permutation(ids.size());
    const auto n = static_cast<double>(ids.size());
    const auto n_test = static_cast<std::size_t>(std::llround(cfg.probe.test_fraction * n));
    const auto n_dev = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.probe.dev_fraction * n)));
    if (n_test + n_dev >= ids.size()) throw InputError("probe: too few utterances for a train/dev/test split");
    for (std::size_t i = 0; i < ids.size(); ++i) split[ids[perm[i]]] = i < n_test ? 2 : i < n_test + n_dev ? 1 : 0;
  }

  std::vector<probe::TaskData> train, dev, test;
  std::vector<probe::TaskSpec> specs;
  std::size_t n_layers = 0;
  for (std::size_t k = 0; k < task_ids.size(); ++k) {
    const TaskDef& task = cfg.task(task_ids[k]);
    const auto& ds = sets[k];
    if (ds.per_layer.empty()) throw InputError("pooled dataset for " + task.id + " has no layers");
    if (n_layers == 0) n_layers = ds.per_layer.size();
    if (ds.per_layer.size() != n_layers) throw InputError("pooled datasets disagree on layer count");
    specs.push_back({task.id, static_cast<int>(task.classes.size())});
    probe::TaskData parts[3] = {{task.id, {}}, {task.id, {}}, {task.id, {}}};
    std::set<std::string> seen;
    for (std::size_t i = 0; i < ds.rows.size(); ++i) {
      const auto it = std::find(task.classes.begin(), task.classes.end(), ds.rows[i].label);
      if (it == task.classes.end()) {
        throw InputError("pooled label '" + ds.rows[i].label + "' is not a class of task '" + task.id + "'");
      }
      seen.insert(ds.rows[i].label);
      probe::Example ex;
      ex.label = static_cast<int>(it - task.classes.begin());
      ex.layers.resize(static_cast<Eigen::Index>(n_layers), ds.per_layer[0].cols());
      for (std::size_t l = 0; l < n_layers; ++l) {
        ex.layers.row(static_cast<Eigen::Index>(l)) = ds.per_layer[l].row(static_cast<Eigen::Index>(i));
      }
      parts[split.at(ds.rows[i].utterance_id)].examples.push_back(std::move(ex));
    }
    if (seen.size() < 2) {
      throw InputError("task '" + task.id + "' has a degenerate label distribution (single class)");
    }
    if (parts[0].examples.empty()) throw InputError("task '" + task.id + "' has no training examples");
    if (parts[1].examples.empty()) throw InputError("task '" + task.id + "' has no development examples");
    train.push_back(std::move(parts[0]));
    dev.push_back(std::move(parts[1]));
    test.push_back(std::move(parts[2]));
  }

  probe::TrainConfig tc;
  tc.lr = cfg.probe.lr;
  tc.epochs = cfg.probe.epochs;
  tc.batch = cfg.probe.batch;
  tc.hidden = cfg.probe.hidden;
  tc.newbob = cfg.probe.newbob;
  tc.seed = cfg.seed;
  tc.tasks = specs;
  if (!cfg.probe.mask_from.empty()) {
    const auto w = read_weights_csv(cfg.resolve(cfg.probe.mask_from));
    if (w.size() != n_layers) throw InputError("probe.mask_from has " + std::to_string(w.size()) + " layers, data has " + std::to_string(n_layers));
    if (cfg.probe.best_k > n_layers) throw ConfigError("probe.best_k exceeds the number of layers");
    tc.layer_mask = probe::select_best_k_layers(Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size())), cfg.probe.best_k);
  }
  const auto result = probe::train_probe(train, dev, tc);
  const Eigen::VectorXd weights = probe::extract_layer_weights(result.probe);

  const fs::path dir = command_dir(cfg, "probe");
  std::ostringstream csv;
  csv << "layer,weight\n";
  std::vector<double> wv;
  for (Eigen::Index l = 0; l < weights.size(); ++l) {
    csv << l << ',' << csv_double(weights[l]) << '\n';
    wv.push_back(weights[l]);
  }
  text::write_file(dir / "layer_weights.csv", csv.str());
  probe::write_probe(dir / "probe.lprb", result.probe);

  J tasks = J::array();
  for (std::size_t k = 0; k < task_ids.size(); ++k) {
    const auto d = probe::evaluate(result.probe, dev[k].examples, task_ids[k]);
    J t = {{"id", task_ids[k]}, {"classes", cfg.task(task_ids[k]).classes},
           {"train", train[k].examples.size()}, {"dev", dev[k].examples.size()},
           {"test", test[k].examples.size()},
           {"dev_metrics", {{"accuracy", d.accuracy}, {"macro_f1", d.macro_f1}}}};
    if (!test[k].examples.empty()) {
      const auto r = probe::evaluate(result.probe, test[k].examples, task_ids[k]);
      t["test_metrics"] = {{"accuracy", r.accuracy}, {"macro_f1", r.macro_f1}};
    } else {
      t["test_metrics"] = nullptr;
    }
    tasks.push_back(t);
  }
  J history = J::array();
  for (const auto& m : result.history) {
    history.push_back({{"epoch", m.epoch}, {"lr", m.lr}, {"train_loss", m.train_loss},
                       {"dev_accuracy", m.dev_accuracy}, {"dev_macro_f1", m.dev_macro_f1}});
  }
  J mask = J::array();
  for (std::size_t l : probe::mask_indices(result.probe.layer_mask)) mask.push_back(l);
  write_json(dir / "metrics.json", {{"config", config_echo(cfg, "probe")},
                                    {"layer_mask", mask},
                                    {"best_epoch", result.best_epoch},
                                    {"tasks", tasks},
                                    {"layer_weights", wv},
                                    {"history", history}});
  write_echo(cfg, dir, "probe");
  if (cfg.probe.svg) text::write_file(dir / "layer_weights.svg", svg_bar_chart("Learned layer weights", "weight", wv));
  note("probe: best epoch " + std::to_string(result.best_epoch) + ", wrote " + (dir / "metrics.json").string());
}

void cmd_score(const RunConfig& cfg) {
  if (cfg.score.systems.empty()) throw ConfigError("score needs at least one [[score.system]]");
  std::vector<std::pair<std::string, fs::path>> inputs = {
      {"corpus.inventory", cfg.inventory.empty() ? fs::path() : cfg.resolve(cfg.inventory)},
      {"score.reference", cfg.score.reference.empty() ? fs::path() : cfg.resolve(cfg.score.reference)}};
  for (const auto& s : cfg.score.systems) {
    inputs.emplace_back("system " + s.name, cfg.resolve(s.transcript.empty() ? s.logits : s.transcript));
  }
  require_files(inputs);
  const PhoneInventory inv = load_inventory(cfg);
  const Transcripts ref = read_transcripts(cfg.resolve(cfg.score.reference), inv);
  if (ref.empty()) throw InputError("reference transcript is empty");
  std::vector<std::string> ids;
  for (const auto& [id, _] : ref) ids.push_back(id);

  const fs::path dir = command_dir(cfg, "score");
  std::vector<Transcripts> hyps;
  for (const auto& s : cfg.score.systems) {
    Transcripts h = s.transcript.empty() ? decode_logits(cfg.resolve(s.logits), ids, inv, cfg.jobs)
                                         : read_transcripts(cfg.resolve(s.transcript), inv);
    std::vector<std::string> only_ref, only_hyp;
    for (const auto& id : ids) if (!h.count(id)) only_ref.push_back(id);
    for (const auto& [id, _] : h) if (!ref.count(id)) only_hyp.push_back(id);
    if (!only_ref.empty() || !only_hyp.empty()) {
      std::string msg = "system '" + s.name + "': utterance ids do not match the reference";
      if (!only_ref.empty()) msg += "; missing " + std::to_string(only_ref.size()) + " (first: " + only_ref.front() + ")";
      if (!only_hyp.empty()) msg += "; extra " + std::to_string(only_hyp.size()) + " (first: " + only_hyp.front() + ")";
      throw InputError(msg);
    }
    if (!s.logits.empty()) {
      std::string out;
      for (const auto& [id, seq] : h) out += id + (seq.empty() ? "" : " " + join_phones(seq, inv)) + "\n";
      text::write_file(dir / ("decoded_" + s.name + ".txt"), out);
    }
    hyps.push_back(std::move(h));
  }

  std::ostringstream csv;
  csv << "system,per,substitutions,insertions,deletions,ref_phones,utterances\n";
  J systems = J::array();
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    std::vector<ctc::RefHyp> pairs;
    int s = 0, ins = 0, del = 0;
    std::size_t len = 0;
    for (const auto& id : ids) {
      const auto a = ctc::levenshtein_align(ref.at(id), hyps[k].at(id));
      s += a.substitutions;
      ins += a.insertions;
      del += a.deletions;
      len += ref.at(id).size();
      pairs.push_back({ref.at(id), hyps[k].at(id)});
    }
    const double per = ctc::phone_error_rate(pairs);
    const auto& name = cfg.score.systems[k].name;
    csv << name << ',' << csv_double(per) << ',' << s << ',' << ins << ',' << del << ',' << len << ','
        << ids.size() << '\n';
    systems.push_back({{"name", name}, {"per", per}, {"substitutions", s}, {"insertions", ins},
                       {"deletions", del}, {"ref_phones", len}});
  }
  J report = {{"config", config_echo(cfg, "score")}, {"utterances", ids.size()}, {"systems", systems}};
  if (hyps.size() == 2) {
    std::vector<ctc::MapsswePair> pairs;
    for (const auto& id : ids) pairs.push_back({ref.at(id), hyps[0].at(id), hyps[1].at(id)});
    const auto m = ctc::mapsswe_test(pairs, cfg.score.segment_mode);
    const J w = std::isfinite(m.w) ? J(m.w) : J(m.w > 0 ? "inf" : "-inf");
    report["mapsswe"] = {{"system_a", cfg.score.systems[0].name},
                         {"system_b", cfg.score.systems[1].name},
                         {"segments", m.n_segments()},
                         {"w", w},
                         {"p", m.p},
                         {"stars", ctc::significance_stars(m.p)}};
  }
  text::write_file(dir / "per.csv", csv.str());
  write_json(dir / "score.json", report);
  write_echo(cfg, dir, "score");
  note("score: wrote " + (dir / "per.csv").string());
}

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::optional<CsvTable> read_csv(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  CsvTable t;
  const auto lines = text::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> f;
    for (auto s : text::split(lines[i], ',')) f.emplace_back(s);
    if (i == 0) {
      t.header = f;
    } else {
      if (f.size() != t.header.size()) throw InputError(path.string() + ":" + std::to_string(i + 1) + ": wrong column count");
      t.rows.push_back(f);
    }
  }
  return t;
}

// series name -> per-layer scores, from a <name>,layer,score table.
std::vector<Series> series_of(const CsvTable& t) {
  std::vector<Series> out;
  for (const auto& r : t.rows) {
    if (out.empty() || out.back().name != r[0]) out.push_back({r[0], {}});
    if (text::parse_int(r[1]) != static_cast<long long>(out.back().y.size())) {
      throw InputError("layer scores out of order for " + r[0]);
    }
    out.back().y.push_back(text::parse_double(r[2]));
  }
  return out;
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void layer_table(std::ostringstream& md, const std::vector<Series>& series, const char* first) {
  std::size_t n = 0;
  for (const auto& s : series) n = std::max(n, s.y.size());
  md << "| " << first << " |";
  for (std::size_t l = 0; l < n; ++l) md << ' ' << l << " |";
  md << " best |\n|---|";
  for (std::size_t l = 0; l <= n; ++l) md << "---|";
  md << '\n';
  for (const auto& s : series) {
    md << "| " << s.name << " |";
    for (double v : s.y) md << ' ' << fmt3(v) << " |";
    md << ' ' << argmax(s.y) << " |\n";
  }
  md << '\n';
}

}  // namespace

void cmd_report(const RunConfig& cfg) {
  const fs::path out = cfg.out_dir;
  const auto phon = read_csv(out / "cca_phoneme" / "scores.csv");
  const auto para = read_csv(out / "cca_paraling" / "scores.csv");
  const auto weights = read_csv(out / "probe" / "layer_weights.csv");
  const auto per = read_csv(out / "score" / "per.csv");
  if (!phon && !para && !weights && !per) {
    throw InputError("nothing to report: no command outputs under " + out.string());
  }
  const fs::path dir = command_dir(cfg, "report");
  std::ostringstream md;
  md << "# layerprobe report\n\n";
  if (phon) {
    const auto s = series_of(*phon);
    md << "## Phoneme CCA\n\n";
    layer_table(md, s, "corpus");
    md << "![phoneme CCA](cca_phoneme.svg)\n\n";
    text::write_file(dir / "cca_phoneme.svg", svg_line_chart("Phoneme CCA by layer", "PWCCA", s));
  }
  if (para) {
    const auto s = series_of(*para);
    md << "## Paralinguistic CCA\n\n";
    layer_table(md, s, "group");
    md << "![paralinguistic CCA](cca_paraling.svg)\n\n";
    text::write_file(dir / "cca_paraling.svg", svg_line_chart("Paralinguistic CCA by layer", "PWCCA", s));
  }
  if (weights) {
    std::vector<double> w;
    for (const auto& r : weights->rows) w.push_back(text::parse_double(r[1]));
    md << "## Probe\n\n";
    layer_table(md, {{"weight", w}}, "layer");
    if (fs::exists(out / "probe" / "metrics.json")) {
      const auto j = nlohmann::json::parse(text::read_file(out / "probe" / "metrics.json"), nullptr, false);
      if (j.is_discarded()) throw InputError("probe/metrics.json is not valid JSON");
      md << "| task | dev acc | dev F1 | test acc | test F1 |\n|---|---|---|---|---|\n";
      for (const auto& t : j.value("tasks", nlohmann::json::array())) {
        const auto& d = t["dev_metrics"];
        const auto& x = t["test_metrics"];
        md << "| " << t.value("id", "") << " | " << fmt3(d.value("accuracy", 0.0)) << " | "
           << fmt3(d.value("macro_f1", 0.0)) << " | "
           << (x.is_null() ? "-" : fmt3(x.value("accuracy", 0.0))) << " | "
           << (x.is_null() ? "-" : fmt3(x.value("macro_f1", 0.0))) << " |\n";
      }
      md << '\n';
    }
    md << "![layer weights](layer_weights.svg)\n\n";
    text::write_file(dir / "layer_weights.svg", svg_bar_chart("Learned layer weights", "weight", w));
  }
  if (per) {
    std::string stars;
    std::string better;
    if (fs::exists(out / "score" / "score.json")) {
      const auto j = nlohmann::json::parse(text::read_file(out / "score" / "score.json"), nullptr, false);
      if (j.is_discarded()) throw InputError("score/score.json is not valid JSON");
      if (j.contains("mapsswe")) stars = j["mapsswe"].value("stars", "");
    }
    if (!stars.empty() && per->rows.size() == 2) {
      better = text::parse_double(per->rows[0][1]) <= text::parse_double(per->rows[1][1]) ? per->rows[0][0]
                                                                                           : per->rows[1][0];
    }
    md << "## Phone error rate\n\n| system | PER (%) |\n|---|---|\n";
    for (const auto& r : per->rows) {
      md << "| " << r[0] << " | " << fmt3(text::parse_double(r[1])) << (r[0] == better ? " (" + stars + ")" : "")
         << " |\n";
    }
    md << '\n';
    if (!stars.empty()) md << "(*) p < 0.05, (***) p < 0.001, matched-pairs test.\n\n";
  }
  text::write_file(dir / "report.md", md.str());
  note("report: wrote " + (dir / "report.md").string());
}

}  // namespace layerprobe::cli
