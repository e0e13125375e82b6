#pragma once

// Command-line front end: one TOML run configuration, per-command sections,
// flag overrides, and the pipelines behind each subcommand.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "layerprobe/cca.hpp"
#include "layerprobe/ctc_eval.hpp"
#include "layerprobe/dsp.hpp"
#include "layerprobe/pooling.hpp"
#include "layerprobe/probe.hpp"

namespace layerprobe::cli {

namespace fs = std::filesystem;

struct TaskDef {
  std::string id;
  std::vector<std::string> classes;
};

struct CorpusDef {
  std::string name = "corpus";
  fs::path manifest;
  fs::path alignments;
};

struct WindowSource {
  std::string task;
  fs::path tracks;  // TSV utterance_id, start_s, end_s, label
};

/// A hypothesis either as a transcript file or as a directory of per-utterance
/// logit dumps (<utterance_id>.lrep, one layer, |inventory| + 1 columns).
struct SystemDef {
  std::string name;
  fs::path transcript;
  fs::path logits;
};

struct RunConfig {
  fs::path base_dir;  // relative input paths resolve against this
  fs::path out_dir = "layerprobe_out";
  std::uint64_t seed = 0;
  unsigned jobs = 1;

  // [corpus]
  fs::path manifest;
  fs::path inventory;
  std::optional<std::size_t> inventory_size;
  fs::path alignments;
  bool sampa_alignments = false;
  fs::path sampa_table;
  fs::path labels;

  std::vector<TaskDef> tasks;
  cca::CcaConfig cca;
  dsp::DspConfig dsp;

  struct {
    WindowConfig window;
    std::vector<WindowSource> windows;
  } pool;

  struct {
    std::vector<CorpusDef> corpora;  // empty = the [corpus] section
    std::size_t per_phone_cap = 600;
    bool svg = true;
  } cca_phoneme;

  struct {
    std::string task;
    std::size_t per_class = 1500;
    bool svg = true;
  } cca_paraling;

  struct {
    std::vector<std::string> tasks;
    double lr = 1e-3;
    int epochs = 10;
    std::size_t batch = 32;
    Eigen::Index hidden = 256;
    probe::NewBob newbob;
    std::vector<std::string> dev_groups;
    std::vector<std::string> test_groups;
    double dev_fraction = 0.15;
    double test_fraction = 0.15;
    fs::path mask_from;  // layer-weight CSV of a prior run
    std::size_t best_k = 3;
    bool svg = true;
  } probe;

  struct {
    fs::path reference;
    std::vector<SystemDef> systems;
    ctc::SegmentMode segment_mode = ctc::SegmentMode::kBothCorrect;
  } score;

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : base_dir / p; }
  const TaskDef& task(const std::string& id) const;
  void validate() const;
};

/// Parses a TOML document. Unknown keys and ill-typed values throw ConfigError.
RunConfig parse_config(const std::string& toml_text, const fs::path& base_dir);
RunConfig load_config(const fs::path& path);

/// Effective settings for one command. Execution-only settings (jobs, output
/// directory) are left out so the echo depends only on what shapes results.
nlohmann::ordered_json config_echo(const RunConfig& cfg, const std::string& command);

void cmd_ingest(const RunConfig& cfg);
void cmd_pool(const RunConfig& cfg);
void cmd_cca_phoneme(const RunConfig& cfg);
void cmd_cca_paraling(const RunConfig& cfg);
void cmd_probe(const RunConfig& cfg);
void cmd_score(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

/// Full command line. Returns 0 on success, 2 for configuration errors, 3 for
/// input errors and 4 for numerical failures.
int run(int argc, const char* const* argv);

}  // namespace layerprobe::cli
