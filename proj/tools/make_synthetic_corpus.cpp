#include <iostream>

#include "CLI11.hpp"

#include "support/synthetic_corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a small synthetic corpus with a config.toml for every layerprobe command"};
  std::string dir;
  layerprobe::testing::SyntheticSpec spec;
  bool no_audio = false;
  app.add_option("dir", dir, "Output directory")->required();
  app.add_option("--seed", spec.seed, "Generator seed");
  app.add_option("--utterances", spec.n_utterances, "Number of utterances");
  app.add_flag("--no-audio", no_audio, "Skip WAV synthesis");
  CLI11_PARSE(app, argc, argv);
  spec.audio = !no_audio;
  layerprobe::testing::write_synthetic_corpus(dir, spec);
  std::cout << "wrote " << dir << "/config.toml\n";
  return 0;
}
