#include "layerprobe/cli.hpp"

int main(int argc, char** argv) { return layerprobe::cli::run(argc, argv); }
