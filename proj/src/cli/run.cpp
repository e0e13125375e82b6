#include <cstdlib>
#include <iostream>
#include <map>

#include "CLI11.hpp"

#include "layerprobe/cli.hpp"
#include "layerprobe/error.hpp"

namespace layerprobe::cli {

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  unsigned jobs = 1;

  double reg_epsilon = 0.0;
  int n_folds = 0;
  int n_test_folds = 0;
  std::size_t per_phone_cap = 0;
  std::size_t per_class = 0;
  std::string task;

  double lr = 0.0;
  int epochs = 0;
  std::size_t batch = 0;
  Eigen::Index hidden = 0;
  std::string mask_from;
  std::size_t best_k = 0;

  std::string reference;
  std::vector<std::string> transcripts;
};

bool given(CLI::App* sub, const char* name) {
  const CLI::Option* o = sub->get_option_no_throw(name);
  return o && o->count() > 0;
}

void apply_flags(CLI::App* sub, const Flags& f, RunConfig& cfg) {
  if (given(sub, "--seed")) cfg.seed = f.seed;
  if (given(sub, "--jobs")) cfg.jobs = f.jobs;
  if (given(sub, "--out")) {
    cfg.out_dir = f.out;
  } else if (const char* env = std::getenv("LAYERPROBE_OUT"); env && *env) {
    cfg.out_dir = env;
  }
  if (given(sub, "--reg-epsilon")) cfg.cca.reg_epsilon = f.reg_epsilon;
  if (given(sub, "--folds")) cfg.cca.n_folds = f.n_folds;
  if (given(sub, "--test-folds")) cfg.cca.n_test_folds = f.n_test_folds;
  if (given(sub, "--per-phone-cap")) cfg.cca_phoneme.per_phone_cap = f.per_phone_cap;
  if (given(sub, "--per-class")) cfg.cca_paraling.per_class = f.per_class;
  if (given(sub, "--task")) cfg.cca_paraling.task = f.task;
  if (given(sub, "--lr")) cfg.probe.lr = f.lr;
  if (given(sub, "--epochs")) cfg.probe.epochs = f.epochs;
  if (given(sub, "--batch")) cfg.probe.batch = f.batch;
  if (given(sub, "--hidden")) cfg.probe.hidden = f.hidden;
  if (given(sub, "--mask-from")) cfg.probe.mask_from = f.mask_from;
  if (given(sub, "--best-k")) cfg.probe.best_k = f.best_k;
  if (given(sub, "--reference")) cfg.score.reference = f.reference;
  if (given(sub, "--hyp")) {
    cfg.score.systems.clear();
    for (const auto& h : f.transcripts) {
      const auto eq = h.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--hyp expects NAME=PATH, got '" + h + "'");
      cfg.score.systems.push_back({h.substr(0, eq), h.substr(eq + 1), {}});
    }
  }
  // Flag paths are relative to the working directory, config paths to the config file.
  if (given(sub, "--mask-from")) cfg.probe.mask_from = std::filesystem::absolute(cfg.probe.mask_from);
  if (given(sub, "--reference")) cfg.score.reference = std::filesystem::absolute(cfg.score.reference);
  if (given(sub, "--hyp")) {
    for (auto& s : cfg.score.systems) s.transcript = std::filesystem::absolute(s.transcript);
  }
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Layer-wise analysis of speech encoder representations"};
  app.name("layerprobe");
  app.require_subcommand(1);
  Flags f;

  const std::map<std::string, std::string> commands = {
      {"ingest", "Validate a corpus and summarize it"},
      {"pool", "Pool phoneme and window vectors from representation dumps"},
      {"cca-phoneme", "Layer-wise PWCCA against phoneme labels"},
      {"cca-paraling", "Layer-wise PWCCA against paralinguistic feature groups"},
      {"probe", "Train the weighted-average-layer probe"},
      {"score", "Phone error rates and the matched-pairs significance test"},
      {"report", "Collect command outputs into a Markdown report with figures"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("-c,--config", f.config, "TOML run configuration")->required();
    s->add_option("-o,--out", f.out, "Output directory (overrides LAYERPROBE_OUT and the config)");
    s->add_option("--seed", f.seed, "Global seed");
    s->add_option("-j,--jobs", f.jobs, "Worker threads")->check(CLI::PositiveNumber);
    subs[name] = s;
  }
  for (const char* name : {"cca-phoneme", "cca-paraling"}) {
    subs[name]->add_option("--reg-epsilon", f.reg_epsilon, "Relative ridge for the covariances");
    subs[name]->add_option("--folds", f.n_folds, "Number of folds");
    subs[name]->add_option("--test-folds", f.n_test_folds, "Number of folds scored");
  }
  subs["cca-phoneme"]->add_option("--per-phone-cap", f.per_phone_cap, "Samples kept per phone");
  subs["cca-paraling"]->add_option("--per-class", f.per_class, "Samples drawn per class");
  subs["cca-paraling"]->add_option("--task", f.task, "Task whose classes define the sample plan");
  subs["probe"]->add_option("--lr", f.lr, "Learning rate");
  subs["probe"]->add_option("--epochs", f.epochs, "Training epochs");
  subs["probe"]->add_option("--batch", f.batch, "Mini-batch size");
  subs["probe"]->add_option("--hidden", f.hidden, "Hidden units");
  subs["probe"]->add_option("--mask-from", f.mask_from, "layer_weights.csv of a prior run");
  subs["probe"]->add_option("--best-k", f.best_k, "Layers kept from --mask-from");
  subs["score"]->add_option("--reference", f.reference, "Reference transcript");
  subs["score"]->add_option("--hyp", f.transcripts, "Hypothesis transcript as NAME=PATH (up to two)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    RunConfig cfg = load_config(f.config);
    apply_flags(sub, f, cfg);
    cfg.validate();
    if (command == "ingest") cmd_ingest(cfg);
    else if (command == "pool") cmd_pool(cfg);
    else if (command == "cca-phoneme") cmd_cca_phoneme(cfg);
    else if (command == "cca-paraling") cmd_cca_paraling(cfg);
    else if (command == "probe") cmd_probe(cfg);
    else if (command == "score") cmd_score(cfg);
    else cmd_report(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}

}  // namespace layerprobe::cli
