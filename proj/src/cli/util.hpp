#pragma once

#include <exception>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace layerprobe::cli {

namespace fs = std::filesystem;

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. If any call throws, the
/// exception of the lowest failing index is rethrown.
void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn);

/// Throws InputError naming every (what, path) pair whose path does not exist.
void require_files(const std::vector<std::pair<std::string, fs::path>>& inputs);

fs::path make_dir(const fs::path& dir);
void write_json(const fs::path& path, const nlohmann::ordered_json& j);

/// Two-decimal fixed notation for SVG coordinates.
std::string fixed2(double v);

struct Series {
  std::string name;
  std::vector<double> y;
};

/// Minimal line chart with x = 0..n-1 (layer index) and one polyline per series.
std::string svg_line_chart(const std::string& title, const std::string& y_label,
                           const std::vector<Series>& series);

/// Minimal bar chart with one bar per layer.
std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<double>& values);

}  // namespace layerprobe::cli
