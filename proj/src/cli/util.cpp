#include "util.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <sstream>
#include <thread>

#include "layerprobe/error.hpp"
#include "layerprobe/textio.hpp"

namespace layerprobe::cli {

void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  const auto workers = static_cast<std::size_t>(std::max(1u, jobs));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(workers, n); ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void require_files(const std::vector<std::pair<std::string, fs::path>>& inputs) {
  std::vector<std::string> missing;
  for (const auto& [what, path] : inputs) {
    if (path.empty()) {
      missing.push_back(what + ": not configured");
    } else if (!fs::exists(path)) {
      missing.push_back(what + ": " + path.string());
    }
  }
  if (missing.empty()) return;
  std::string msg = "missing inputs (" + std::to_string(missing.size()) + "):";
  for (const auto& m : missing) msg += "\n  " + m;
  throw InputError(msg);
}

fs::path make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  text::write_file(path, j.dump(2) + "\n");
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  std::string s = buf;
  return s == "-0.00" ? "0.00" : s;
}

namespace {

constexpr double kWidth = 640;
constexpr double kHeight = 400;
constexpr double kLeft = 60;
constexpr double kRight = 150;
constexpr double kTop = 40;
constexpr double kBottom = 50;

const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
                               "#e377c2", "#7f7f7f"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double y_min = 0.0;
  double y_max = 1.0;
  std::size_t n = 1;

  double px(double x) const {
    const double span = n > 1 ? static_cast<double>(n - 1) : 1.0;
    return kLeft + (kWidth - kLeft - kRight) * (x + (n > 1 ? 0.0 : 0.5)) / span;
  }
  double py(double y) const {
    return kTop + (kHeight - kTop - kBottom) * (1.0 - (y - y_min) / (y_max - y_min));
  }
};

void header(std::ostringstream& o, const std::string& title, const std::string& y_label) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << fixed2(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
    << escape(title) << "</text>\n";
  o << "<text x=\"16\" y=\"" << fixed2(kHeight / 2) << "\" transform=\"rotate(-90 16 "
    << fixed2(kHeight / 2) << ")\" text-anchor=\"middle\" font-size=\"12\">" << escape(y_label)
    << "</text>\n";
  o << "<text x=\"" << fixed2(kLeft + (kWidth - kLeft - kRight) / 2) << "\" y=\""
    << fixed2(kHeight - 12) << "\" text-anchor=\"middle\" font-size=\"12\">layer</text>\n";
}

void axes(std::ostringstream& o, const Frame& f, bool bars) {
  const double x0 = kLeft;
  const double x1 = kWidth - kRight;
  const double y0 = kHeight - kBottom;
  o << "<line x1=\"" << fixed2(x0) << "\" y1=\"" << fixed2(y0) << "\" x2=\"" << fixed2(x1)
    << "\" y2=\"" << fixed2(y0) << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << fixed2(x0) << "\" y1=\"" << fixed2(kTop) << "\" x2=\"" << fixed2(x0)
    << "\" y2=\"" << fixed2(y0) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = f.y_min + (f.y_max - f.y_min) * k / 4.0;
    o << "<text x=\"" << fixed2(x0 - 6) << "\" y=\"" << fixed2(f.py(v) + 4)
      << "\" text-anchor=\"end\" font-size=\"10\">" << fixed2(v) << "</text>\n";
  }
  for (std::size_t l = 0; l < f.n; ++l) {
    const double x = bars ? kLeft + (kWidth - kLeft - kRight) * (static_cast<double>(l) + 0.5) /
                                        static_cast<double>(f.n)
                          : f.px(static_cast<double>(l));
    o << "<text x=\"" << fixed2(x) << "\" y=\"" << fixed2(y0 + 16)
      << "\" text-anchor=\"middle\" font-size=\"10\">" << l << "</text>\n";
  }
}

Frame frame_for(const std::vector<double>& all, std::size_t n) {
  Frame f;
  f.n = std::max<std::size_t>(n, 1);
  double lo = 0.0;
  double hi = 1.0;
  for (double v : all) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  f.y_min = lo;
  f.y_max = hi > lo ? hi : lo + 1.0;
  return f;
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& y_label,
                           const std::vector<Series>& series) {
  std::size_t n = 0;
  std::vector<double> all;
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    all.insert(all.end(), s.y.begin(), s.y.end());
  }
  const Frame f = frame_for(all, n);
  std::ostringstream o;
  header(o, title, y_label);
  axes(o, f, false);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t l = 0; l < series[i].y.size(); ++l) {
      if (l) o << ' ';
      o << fixed2(f.px(static_cast<double>(l))) << ',' << fixed2(f.py(series[i].y[l]));
    }
    o << "\"/>\n";
    const double ly = kTop + 18.0 * static_cast<double>(i);
    o << "<line x1=\"" << fixed2(kWidth - kRight + 12) << "\" y1=\"" << fixed2(ly) << "\" x2=\""
      << fixed2(kWidth - kRight + 32) << "\" y2=\"" << fixed2(ly) << "\" stroke=\"" << color
      << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << fixed2(kWidth - kRight + 38) << "\" y=\"" << fixed2(ly + 4)
      << "\" font-size=\"11\">" << escape(series[i].name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<double>& values) {
  const Frame f = frame_for(values, values.size());
  std::ostringstream o;
  header(o, title, y_label);
  axes(o, f, true);
  const double slot = (kWidth - kLeft - kRight) / static_cast<double>(f.n);
  for (std::size_t l = 0; l < values.size(); ++l) {
    const double top = f.py(values[l]);
    const double base = f.py(0.0);
    o << "<rect x=\"" << fixed2(kLeft + slot * (static_cast<double>(l) + 0.15)) << "\" y=\""
      << fixed2(std::min(top, base)) << "\" width=\"" << fixed2(slot * 0.7) << "\" height=\""
      << fixed2(std::abs(base - top)) << "\" fill=\"" << kColors[0] << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace layerprobe::cli
