#include <algorithm>
#include <set>
#include <sstream>

#include "toml.hpp"

#include "layerprobe/cli.hpp"
#include "layerprobe/error.hpp"
#include "layerprobe/textio.hpp"

namespace layerprobe::cli {

namespace {

std::string where(const toml::node& n) {
  const auto& b = n.source().begin;
  return b.line ? " (line " + std::to_string(b.line) + ")" : "";
}

// Typed view of one TOML table that remembers its dotted path.
class Section {
 public:
  Section() = default;
  Section(const toml::table* t, std::string path) : t_(t), path_(std::move(path)) {}

  void allow(std::initializer_list<std::string_view> keys) const {
    if (!t_) return;
    for (auto&& [k, v] : *t_) {
      if (std::find(keys.begin(), keys.end(), k.str()) == keys.end()) {
        throw ConfigError("unknown config key '" + name(k.str()) + "'" + where(v));
      }
    }
  }

  std::optional<std::string> str(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return std::nullopt;
    if (!n->is_string()) throw type_error(key, "a string", *n);
    return n->as_string()->get();
  }

  std::optional<std::int64_t> integer(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return std::nullopt;
    if (!n->is_integer()) throw type_error(key, "an integer", *n);
    return n->as_integer()->get();
  }

  std::optional<std::size_t> count(std::string_view key, std::int64_t min) const {
    const auto v = integer(key);
    if (!v) return std::nullopt;
    if (*v < min) throw ConfigError(name(key) + " must be >= " + std::to_string(min));
    return static_cast<std::size_t>(*v);
  }

  std::optional<double> number(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return std::nullopt;
    if (n->is_integer()) return static_cast<double>(n->as_integer()->get());
    if (!n->is_floating_point()) throw type_error(key, "a number", *n);
    return n->as_floating_point()->get();
  }

  std::optional<bool> boolean(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return std::nullopt;
    if (!n->is_boolean()) throw type_error(key, "a boolean", *n);
    return n->as_boolean()->get();
  }

  std::optional<std::vector<std::string>> strings(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return std::nullopt;
    if (!n->is_array()) throw type_error(key, "an array of strings", *n);
    std::vector<std::string> out;
    for (const auto& e : *n->as_array()) {
      if (!e.is_string()) throw type_error(key, "an array of strings", e);
      out.push_back(e.as_string()->get());
    }
    return out;
  }

  Section table(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return {nullptr, name(key)};
    if (!n->is_table()) throw type_error(key, "a table", *n);
    return {n->as_table(), name(key)};
  }

  std::vector<Section> tables(std::string_view key) const {
    const toml::node* n = get(key);
    if (!n) return {};
    if (!n->is_array_of_tables()) throw type_error(key, "an array of tables", *n);
    std::vector<Section> out;
    std::size_t i = 0;
    for (const auto& e : *n->as_array()) {
      out.emplace_back(e.as_table(), name(key) + "[" + std::to_string(i++) + "]");
    }
    return out;
  }

  std::string name(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

 private:
  const toml::node* get(std::string_view key) const { return t_ ? t_->get(key) : nullptr; }

  ConfigError type_error(std::string_view key, const char* want, const toml::node& n) const {
    return ConfigError(name(key) + " must be " + want + where(n));
  }

  const toml::table* t_ = nullptr;
  std::string path_;
};

template <typename T, typename U>
void set_if(T& dst, const std::optional<U>& v) {
  if (v) dst = static_cast<T>(*v);
}

void read_cca(const Section& s, cca::CcaConfig& c) {
  s.allow({"reg_epsilon", "max_components", "n_folds", "n_test_folds", "weight_source"});
  set_if(c.reg_epsilon, s.number("reg_epsilon"));
  if (auto k = s.count("max_components", 1)) c.max_components = static_cast<Eigen::Index>(*k);
  set_if(c.n_folds, s.integer("n_folds"));
  set_if(c.n_test_folds, s.integer("n_test_folds"));
  if (auto w = s.str("weight_source")) {
    if (*w == "heldout") {
      c.weight_source = cca::WeightSource::kHeldOut;
    } else if (*w == "training") {
      c.weight_source = cca::WeightSource::kTraining;
    } else {
      throw ConfigError(s.name("weight_source") + " must be \"heldout\" or \"training\"");
    }
  }
}

void read_dsp(const Section& s, dsp::DspConfig& d) {
  s.allow({"pitch_win_s", "spec_win_s", "hop_s", "f0_min_hz", "f0_max_hz", "voicing_threshold",
           "mfcc_fft_size", "n_mel", "mel_lo_hz", "mel_hi_hz", "lpc_order", "preemphasis",
           "formant_min_hz", "formant_max_hz", "formant_max_bw_hz", "spectrum_fft_size",
           "neutral_value"});
  set_if(d.pitch_win_s, s.number("pitch_win_s"));
  set_if(d.spec_win_s, s.number("spec_win_s"));
  set_if(d.hop_s, s.number("hop_s"));
  set_if(d.f0_min_hz, s.number("f0_min_hz"));
  set_if(d.f0_max_hz, s.number("f0_max_hz"));
  set_if(d.voicing_threshold, s.number("voicing_threshold"));
  set_if(d.mfcc_fft_size, s.integer("mfcc_fft_size"));
  set_if(d.n_mel, s.integer("n_mel"));
  set_if(d.mel_lo_hz, s.number("mel_lo_hz"));
  set_if(d.mel_hi_hz, s.number("mel_hi_hz"));
  set_if(d.lpc_order, s.integer("lpc_order"));
  set_if(d.preemphasis, s.number("preemphasis"));
  set_if(d.formant_min_hz, s.number("formant_min_hz"));
  set_if(d.formant_max_hz, s.number("formant_max_hz"));
  set_if(d.formant_max_bw_hz, s.number("formant_max_bw_hz"));
  set_if(d.spectrum_fft_size, s.integer("spectrum_fft_size"));
  set_if(d.neutral_value, s.number("neutral_value"));
}

std::string weight_source_name(cca::WeightSource w) {
  return w == cca::WeightSource::kHeldOut ? "heldout" : "training";
}

std::string segment_mode_name(ctc::SegmentMode m) {
  return m == ctc::SegmentMode::kBothCorrect ? "both_correct" : "utterance";
}

}  // namespace

const TaskDef& RunConfig::task(const std::string& id) const {
  for (const auto& t : tasks) {
    if (t.id == id) return t;
  }
  throw ConfigError("task '" + id + "' is not defined in [[tasks]]");
}

void RunConfig::validate() const {
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  cca.validate();
  dsp.validate();
  std::set<std::string> ids;
  for (const auto& t : tasks) {
    if (t.id.empty()) throw ConfigError("tasks: id must not be empty");
    if (!ids.insert(t.id).second) throw ConfigError("tasks: duplicate id '" + t.id + "'");
    if (t.classes.size() < 2) throw ConfigError("task '" + t.id + "' needs at least 2 classes");
    if (std::set<std::string>(t.classes.begin(), t.classes.end()).size() != t.classes.size()) {
      throw ConfigError("task '" + t.id + "' lists a class twice");
    }
  }
  if (!(pool.window.win_s > 0.0) || !(pool.window.hop_s > 0.0) || !(pool.window.core_s > 0.0) ||
      pool.window.core_s > pool.window.win_s) {
    throw ConfigError("pool: need win_s >= core_s > 0 and hop_s > 0");
  }
  for (const auto& w : pool.windows) task(w.task);
  if (cca_phoneme.per_phone_cap < 1) throw ConfigError("cca_phoneme.per_phone_cap must be >= 1");
  if (!cca_paraling.task.empty()) task(cca_paraling.task);
  if (cca_paraling.per_class < 1) throw ConfigError("cca_paraling.per_class must be >= 1");
  for (const auto& t : probe.tasks) task(t);
  if (!(probe.dev_fraction > 0.0) || !(probe.test_fraction >= 0.0) ||
      probe.dev_fraction + probe.test_fraction >= 1.0) {
    throw ConfigError("probe: need dev_fraction > 0, test_fraction >= 0 and their sum < 1");
  }
  if (probe.best_k < 1) throw ConfigError("probe.best_k must be >= 1");
  probe::TrainConfig tc;
  tc.lr = probe.lr;
  tc.epochs = probe.epochs;
  tc.batch = probe.batch;
  tc.hidden = probe.hidden;
  tc.newbob = probe.newbob;
  tc.tasks = {{"t", 2}};
  tc.validate();
  for (const auto& s : score.systems) {
    if (s.name.empty()) throw ConfigError("score.system: name must not be empty");
    if (s.transcript.empty() == s.logits.empty()) {
      throw ConfigError("score.system '" + s.name + "' needs exactly one of transcript or logits");
    }
  }
  if (score.systems.size() > 2) throw ConfigError("score: at most two systems can be compared");
}

RunConfig parse_config(const std::string& toml_text, const fs::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw ConfigError("config parse error: " + std::string(e.description()) + " (line " +
                      std::to_string(e.source().begin.line) + ")");
  }
  RunConfig cfg;
  cfg.base_dir = base_dir;
  const Section top(&root, "");
  top.allow({"seed", "out_dir", "jobs", "corpus", "tasks", "cca", "dsp", "pool", "cca_phoneme",
             "cca_paraling", "probe", "score"});
  if (auto s = top.integer("seed")) {
    if (*s < 0) throw ConfigError("seed must be >= 0");
    cfg.seed = static_cast<std::uint64_t>(*s);
  }
  set_if(cfg.out_dir, top.str("out_dir"));
  set_if(cfg.jobs, top.count("jobs", 1));

  const Section corpus = top.table("corpus");
  corpus.allow({"manifest", "inventory", "inventory_size", "alignments", "alignment_format",
                "sampa_table", "labels"});
  set_if(cfg.manifest, corpus.str("manifest"));
  set_if(cfg.inventory, corpus.str("inventory"));
  if (auto n = corpus.count("inventory_size", 1)) cfg.inventory_size = *n;
  set_if(cfg.alignments, corpus.str("alignments"));
  if (auto f = corpus.str("alignment_format")) {
    if (*f != "ipa" && *f != "sampa") throw ConfigError("corpus.alignment_format must be \"ipa\" or \"sampa\"");
    cfg.sampa_alignments = *f == "sampa";
  }
  set_if(cfg.sampa_table, corpus.str("sampa_table"));
  set_if(cfg.labels, corpus.str("labels"));
  if (cfg.sampa_alignments && cfg.sampa_table.empty()) {
    throw ConfigError("corpus.alignment_format = \"sampa\" needs corpus.sampa_table");
  }

  for (const auto& t : top.tables("tasks")) {
    t.allow({"id", "classes"});
    TaskDef d;
    set_if(d.id, t.str("id"));
    set_if(d.classes, t.strings("classes"));
    cfg.tasks.push_back(std::move(d));
  }

  read_cca(top.table("cca"), cfg.cca);
  read_dsp(top.table("dsp"), cfg.dsp);

  const Section pool = top.table("pool");
  pool.allow({"win_s", "hop_s", "core_s", "windows"});
  set_if(cfg.pool.window.win_s, pool.number("win_s"));
  set_if(cfg.pool.window.hop_s, pool.number("hop_s"));
  set_if(cfg.pool.window.core_s, pool.number("core_s"));
  for (const auto& w : pool.tables("windows")) {
    w.allow({"task", "tracks"});
    WindowSource src;
    set_if(src.task, w.str("task"));
    set_if(src.tracks, w.str("tracks"));
    if (src.task.empty() || src.tracks.empty()) throw ConfigError("pool.windows entries need task and tracks");
    cfg.pool.windows.push_back(std::move(src));
  }

  const Section cp = top.table("cca_phoneme");
  cp.allow({"per_phone_cap", "svg", "corpus"});
  set_if(cfg.cca_phoneme.per_phone_cap, cp.count("per_phone_cap", 1));
  set_if(cfg.cca_phoneme.svg, cp.boolean("svg"));
  for (const auto& c : cp.tables("corpus")) {
    c.allow({"name", "manifest", "alignments"});
    CorpusDef d;
    set_if(d.name, c.str("name"));
    set_if(d.manifest, c.str("manifest"));
    set_if(d.alignments, c.str("alignments"));
    if (d.manifest.empty() || d.alignments.empty()) {
      throw ConfigError(c.name("manifest") + " and alignments are required");
    }
    cfg.cca_phoneme.corpora.push_back(std::move(d));
  }

  const Section cq = top.table("cca_paraling");
  cq.allow({"task", "per_class", "svg"});
  set_if(cfg.cca_paraling.task, cq.str("task"));
  set_if(cfg.cca_paraling.per_class, cq.count("per_class", 1));
  set_if(cfg.cca_paraling.svg, cq.boolean("svg"));

  const Section pr = top.table("probe");
  pr.allow({"tasks", "lr", "epochs", "batch", "hidden", "newbob_factor", "newbob_threshold",
            "dev_groups", "test_groups", "dev_fraction", "test_fraction", "mask_from", "best_k",
            "svg"});
  set_if(cfg.probe.tasks, pr.strings("tasks"));
  set_if(cfg.probe.lr, pr.number("lr"));
  set_if(cfg.probe.epochs, pr.count("epochs", 1));
  set_if(cfg.probe.batch, pr.count("batch", 1));
  set_if(cfg.probe.hidden, pr.count("hidden", 1));
  set_if(cfg.probe.newbob.factor, pr.number("newbob_factor"));
  set_if(cfg.probe.newbob.improvement_threshold, pr.number("newbob_threshold"));
  set_if(cfg.probe.dev_groups, pr.strings("dev_groups"));
  set_if(cfg.probe.test_groups, pr.strings("test_groups"));
  set_if(cfg.probe.dev_fraction, pr.number("dev_fraction"));
  set_if(cfg.probe.test_fraction, pr.number("test_fraction"));
  set_if(cfg.probe.mask_from, pr.str("mask_from"));
  set_if(cfg.probe.best_k, pr.count("best_k", 1));
  set_if(cfg.probe.svg, pr.boolean("svg"));

  const Section sc = top.table("score");
  sc.allow({"reference", "segment_mode", "system"});
  set_if(cfg.score.reference, sc.str("reference"));
  if (auto m = sc.str("segment_mode")) {
    if (*m == "both_correct") {
      cfg.score.segment_mode = ctc::SegmentMode::kBothCorrect;
    } else if (*m == "utterance") {
      cfg.score.segment_mode = ctc::SegmentMode::kUtterance;
    } else {
      throw ConfigError("score.segment_mode must be \"both_correct\" or \"utterance\"");
    }
  }
  for (const auto& s : sc.tables("system")) {
    s.allow({"name", "transcript", "logits"});
    SystemDef d;
    set_if(d.name, s.str("name"));
    set_if(d.transcript, s.str("transcript"));
    set_if(d.logits, s.str("logits"));
    cfg.score.systems.push_back(std::move(d));
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = text::read_file(path);
  } catch (const InputError& e) {
    throw ConfigError("cannot read config: " + std::string(e.what()));
  }
  auto dir = path.parent_path();
  return parse_config(text, dir.empty() ? fs::path(".") : dir);
}

nlohmann::ordered_json config_echo(const RunConfig& cfg, const std::string& command) {
  using J = nlohmann::ordered_json;
  auto path = [](const fs::path& p) { return p.generic_string(); };
  auto strings = [](const std::vector<std::string>& v) { return J(v); };
  J j;
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["corpus"] = {{"manifest", path(cfg.manifest)},
                 {"inventory", path(cfg.inventory)},
                 {"inventory_size", cfg.inventory_size ? J(*cfg.inventory_size) : J(nullptr)},
                 {"alignments", path(cfg.alignments)},
                 {"alignment_format", cfg.sampa_alignments ? "sampa" : "ipa"},
                 {"sampa_table", path(cfg.sampa_table)},
                 {"labels", path(cfg.labels)}};
  J tasks = J::array();
  for (const auto& t : cfg.tasks) tasks.push_back({{"id", t.id}, {"classes", strings(t.classes)}});
  j["tasks"] = tasks;

  const J cca = {{"reg_epsilon", cfg.cca.reg_epsilon},
                 {"max_components", cfg.cca.max_components ? J(*cfg.cca.max_components) : J(nullptr)},
                 {"n_folds", cfg.cca.n_folds},
                 {"n_test_folds", cfg.cca.n_test_folds},
                 {"weight_source", weight_source_name(cfg.cca.weight_source)}};
  const auto& d = cfg.dsp;
  const J dsp = {{"pitch_win_s", d.pitch_win_s}, {"spec_win_s", d.spec_win_s}, {"hop_s", d.hop_s},
                 {"f0_min_hz", d.f0_min_hz}, {"f0_max_hz", d.f0_max_hz},
                 {"voicing_threshold", d.voicing_threshold}, {"mfcc_fft_size", d.mfcc_fft_size},
                 {"n_mel", d.n_mel}, {"mel_lo_hz", d.mel_lo_hz}, {"mel_hi_hz", d.mel_hi_hz},
                 {"lpc_order", d.lpc_order}, {"preemphasis", d.preemphasis},
                 {"formant_min_hz", d.formant_min_hz}, {"formant_max_hz", d.formant_max_hz},
                 {"formant_max_bw_hz", d.formant_max_bw_hz},
                 {"spectrum_fft_size", d.spectrum_fft_size}, {"neutral_value", d.neutral_value}};

  if (command == "pool") {
    J windows = J::array();
    for (const auto& w : cfg.pool.windows) windows.push_back({{"task", w.task}, {"tracks", path(w.tracks)}});
    j["pool"] = {{"win_s", cfg.pool.window.win_s}, {"hop_s", cfg.pool.window.hop_s},
                 {"core_s", cfg.pool.window.core_s}, {"windows", windows}};
  } else if (command == "cca-phoneme") {
    J corpora = J::array();
    for (const auto& c : cfg.cca_phoneme.corpora) {
      corpora.push_back({{"name", c.name}, {"manifest", path(c.manifest)}, {"alignments", path(c.alignments)}});
    }
    j["cca"] = cca;
    j["cca_phoneme"] = {{"per_phone_cap", cfg.cca_phoneme.per_phone_cap},
                        {"svg", cfg.cca_phoneme.svg}, {"corpus", corpora}};
  } else if (command == "cca-paraling") {
    j["cca"] = cca;
    j["dsp"] = dsp;
    j["cca_paraling"] = {{"task", cfg.cca_paraling.task}, {"per_class", cfg.cca_paraling.per_class},
                         {"svg", cfg.cca_paraling.svg}};
  } else if (command == "probe") {
    const auto& p = cfg.probe;
    j["pool"] = {{"win_s", cfg.pool.window.win_s}, {"hop_s", cfg.pool.window.hop_s},
                 {"core_s", cfg.pool.window.core_s}};
    j["probe"] = {{"tasks", strings(p.tasks)}, {"lr", p.lr}, {"epochs", p.epochs},
                  {"batch", p.batch}, {"hidden", p.hidden}, {"newbob_factor", p.newbob.factor},
                  {"newbob_threshold", p.newbob.improvement_threshold},
                  {"dev_groups", strings(p.dev_groups)}, {"test_groups", strings(p.test_groups)},
                  {"dev_fraction", p.dev_fraction}, {"test_fraction", p.test_fraction},
                  {"mask_from", path(p.mask_from)}, {"best_k", p.best_k}, {"svg", p.svg}};
  } else if (command == "score") {
    J systems = J::array();
    for (const auto& s : cfg.score.systems) {
      systems.push_back({{"name", s.name}, {"transcript", path(s.transcript)}, {"logits", path(s.logits)}});
    }
    j["score"] = {{"reference", path(cfg.score.reference)},
                  {"segment_mode", segment_mode_name(cfg.score.segment_mode)}, {"system", systems}};
  }
  return j;
}

}  // namespace layerprobe::cli
