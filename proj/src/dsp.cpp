#include "layerprobe/dsp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <string>

#include <unsupported/Eigen/FFT>
#include <unsupported/Eigen/Polynomials>

#include "layerprobe/error.hpp"
#include "layerprobe/textio.hpp"

namespace layerprobe::dsp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kPi = std::numbers::pi;

std::uint32_t le32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
         static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

std::uint16_t le16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | b[at + 1] << 8);
}

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> windowed(std::span<const float> frame, bool preemphasize, double coef) {
  std::vector<double> x(frame.begin(), frame.end());
  if (preemphasize) {
    for (std::size_t n = x.size(); n-- > 1;) x[n] -= coef * x[n - 1];
  }
  const auto w = hamming(x.size());
  for (std::size_t n = 0; n < x.size(); ++n) x[n] *= w[n];
  return x;
}

double to_db(double power) { return 10.0 * std::log10(std::max(power, 1e-30)); }

// Least-squares slope of y against x.
double ls_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 2) return kNaN;
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : kNaN;
}

// Parabolic peak through (-1, a), (0, b), (1, c): offset and height.
std::pair<double, double> parabolic_peak(double a, double b, double c) {
  const double denom = a - 2.0 * b + c;
  if (denom >= 0.0) return {0.0, b};
  const double delta = 0.5 * (a - c) / denom;
  return {delta, b - 0.25 * (a - c) * delta};
}

}  // namespace

// ---------------------------------------------------------------------------
// WAV

AudioBuffer decode_wav(std::span<const std::uint8_t> b) {
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 || std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw InputError("not a RIFF/WAVE file");
  }
  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = le32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      if (size < 16 || body + size > b.size()) throw InputError("truncated WAV fmt chunk");
      format = le16(b, body);
      channels = le16(b, body + 2);
      rate = le32(b, body + 4);
      bits = le16(b, body + 14);
      if (format == 0xFFFE) {
        if (size < 26) throw InputError("truncated WAV extensible fmt chunk");
        format = le16(b, body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw InputError("WAV data chunk before fmt chunk");
      if (body + size > b.size()) throw InputError("truncated WAV data chunk");
      if (channels == 0 || rate == 0) throw InputError("WAV fmt chunk has zero channels or rate");
      const bool pcm16 = format == 1 && bits == 16;
      const bool f32 = format == 3 && bits == 32;
      if (!pcm16 && !f32) {
        throw InputError("unsupported WAV encoding (format " + std::to_string(format) + ", " +
                         std::to_string(bits) + " bits)");
      }
      const std::size_t width = bits / 8;
      const std::size_t n_frames = size / (width * channels);
      AudioBuffer out;
      out.sample_rate_hz = static_cast<int>(rate);
      out.samples.resize(n_frames);
      for (std::size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t at = body + (i * channels + c) * width;
          if (pcm16) {
            acc += static_cast<std::int16_t>(le16(b, at)) / 32768.0;
          } else {
            acc += std::bit_cast<float>(le32(b, at));
          }
        }
        out.samples[i] = static_cast<float>(acc / channels);
        if (!std::isfinite(out.samples[i])) throw InputError("non-finite WAV sample");
      }
      return out;
    }
    pos = body + size + (size & 1u);
  }
  throw InputError("WAV file has no data chunk");
}

AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_wav(const AudioBuffer& audio, WavEncoding enc, int channels) {
  const std::uint16_t bits = enc == WavEncoding::kPcm16 ? 16 : 32;
  const std::uint32_t width = bits / 8;
  const auto data_bytes = static_cast<std::uint32_t>(audio.samples.size() * width * channels);
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put32(out, 16);
  put16(out, enc == WavEncoding::kPcm16 ? 1 : 3);
  put16(out, static_cast<std::uint16_t>(channels));
  put32(out, static_cast<std::uint32_t>(audio.sample_rate_hz));
  put32(out, static_cast<std::uint32_t>(audio.sample_rate_hz) * width * channels);
  put16(out, static_cast<std::uint16_t>(width * channels));
  put16(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put32(out, data_bytes);
  for (float s : audio.samples) {
    for (int c = 0; c < channels; ++c) {
      if (enc == WavEncoding::kPcm16) {
        const double v = std::clamp(std::round(static_cast<double>(s) * 32768.0), -32768.0, 32767.0);
        put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
      } else {
        put32(out, std::bit_cast<std::uint32_t>(s));
      }
    }
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio, WavEncoding enc) {
  const auto bytes = encode_wav(audio, enc);
  text::write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

AudioBuffer slice(const AudioBuffer& audio, double start_s, double end_s) {
  const auto n = static_cast<long long>(audio.samples.size());
  const auto lo = std::clamp<long long>(std::llround(start_s * audio.sample_rate_hz), 0, n);
  const auto hi = std::clamp<long long>(std::llround(end_s * audio.sample_rate_hz), lo, n);
  AudioBuffer out;
  out.sample_rate_hz = audio.sample_rate_hz;
  out.samples.assign(audio.samples.begin() + lo, audio.samples.begin() + hi);
  return out;
}

// ---------------------------------------------------------------------------
// Frame-level primitives

void DspConfig::validate() const {
  if (!(pitch_win_s > 0.0) || !(spec_win_s > 0.0) || !(hop_s > 0.0)) {
    throw ConfigError("DSP window and hop lengths must be positive");
  }
  if (!(f0_min_hz > 0.0) || !(f0_max_hz > f0_min_hz)) throw ConfigError("invalid F0 search range");
  if (voicing_threshold <= 0.0 || voicing_threshold >= 1.0) {
    throw ConfigError("voicing_threshold must be in (0, 1)");
  }
  if (n_mel < 5) throw ConfigError("n_mel must be >= 5");
  if (lpc_order < 6) throw ConfigError("lpc_order must be >= 6");
  if (mfcc_fft_size < 64 || !std::has_single_bit(static_cast<unsigned>(mfcc_fft_size))) {
    throw ConfigError("mfcc_fft_size must be a power of two >= 64");
  }
  if (spectrum_fft_size < 256 || !std::has_single_bit(static_cast<unsigned>(spectrum_fft_size))) {
    throw ConfigError("spectrum_fft_size must be a power of two >= 256");
  }
}

std::vector<double> hamming(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n < 2) return w;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.54 - 0.46 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return w;
}

std::vector<double> power_spectrum(std::span<const double> frame, int n_fft) {
  if (static_cast<int>(frame.size()) > n_fft) throw InputError("frame longer than FFT size");
  std::vector<double> padded(static_cast<std::size_t>(n_fft), 0.0);
  std::copy(frame.begin(), frame.end(), padded.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, padded);
  std::vector<double> p(static_cast<std::size_t>(n_fft / 2 + 1));
  for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::norm(spec[k]);
  return p;
}

double normalized_autocorrelation(std::span<const float> frame, int lag) {
  const auto n = static_cast<int>(frame.size());
  if (lag <= 0 || lag >= n) return 0.0;
  double xy = 0.0;
  double xx = 0.0;
  double yy = 0.0;
  for (int i = 0; i + lag < n; ++i) {
    const double a = frame[static_cast<std::size_t>(i)];
    const double b = frame[static_cast<std::size_t>(i + lag)];
    xy += a * b;
    xx += a * a;
    yy += b * b;
  }
  if (xx <= 0.0 || yy <= 0.0) return 0.0;
  return xy / std::sqrt(xx * yy);
}

PitchEstimate estimate_f0(std::span<const float> frame, int fs, double fmin_hz, double fmax_hz,
                          double voicing_threshold) {
  PitchEstimate est;
  const int lag_lo = std::max(2, static_cast<int>(std::floor(fs / fmax_hz)));
  const int lag_hi = static_cast<int>(std::ceil(fs / fmin_hz));
  if (lag_hi + 2 >= static_cast<int>(frame.size())) return est;

  std::vector<double> r(static_cast<std::size_t>(lag_hi + 2), 0.0);
  for (int lag = lag_lo - 1; lag <= lag_hi + 1; ++lag) {
    r[static_cast<std::size_t>(lag)] = normalized_autocorrelation(frame, lag);
  }
  struct Peak {
    int lag;
    double offset;
    double height;
  };
  std::vector<Peak> peaks;
  for (int lag = lag_lo; lag <= lag_hi; ++lag) {
    const auto i = static_cast<std::size_t>(lag);
    if (r[i] > r[i - 1] && r[i] >= r[i + 1] && r[i] > 0.0) {
      auto [delta, height] = parabolic_peak(r[i - 1], r[i], r[i + 1]);
      peaks.push_back({lag, delta, std::min(height, 1.0)});
    }
  }
  if (peaks.empty()) return est;
  double best = 0.0;
  for (const auto& p : peaks) best = std::max(best, p.height);
  const Peak* chosen = nullptr;
  for (const auto& p : peaks) {
    if (p.height >= 0.9 * best) {
      chosen = &p;
      break;
    }
  }
  est.r_max = chosen->height;
  est.lag = chosen->lag + chosen->offset;
  est.voiced = est.r_max >= voicing_threshold;
  if (est.voiced) est.f0_hz = std::clamp(fs / est.lag, fmin_hz, fmax_hz);
  return est;
}

double hnr_from_correlation(double r) {
  if (r <= 0.0) return -20.0;
  if (r >= 1.0) return 60.0;
  return std::clamp(10.0 * std::log10(r / (1.0 - r)), -20.0, 60.0);
}

std::optional<double> compute_hnr(std::span<const float> /*frame*/, const PitchEstimate& pitch) {
  if (!pitch.voiced) return std::nullopt;
  return hnr_from_correlation(pitch.r_max);
}

std::array<double, 4> compute_mfcc(std::span<const float> frame, int fs, const DspConfig& cfg) {
  const auto x = windowed(frame, false, 0.0);
  const auto p = power_spectrum(x, cfg.mfcc_fft_size);
  const int m = cfg.n_mel;
  const double mel_lo = hz_to_mel(cfg.mel_lo_hz);
  const double mel_hi = hz_to_mel(std::min(cfg.mel_hi_hz, fs / 2.0));
  std::vector<double> edges(static_cast<std::size_t>(m + 2));
  for (int i = 0; i < m + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (m + 1));

  std::vector<double> log_e(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    const double lo = edges[static_cast<std::size_t>(j)];
    const double c = edges[static_cast<std::size_t>(j + 1)];
    const double hi = edges[static_cast<std::size_t>(j + 2)];
    double e = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double f = static_cast<double>(k) * fs / cfg.mfcc_fft_size;
      double w = 0.0;
      if (f > lo && f <= c) w = (f - lo) / (c - lo);
      else if (f > c && f < hi) w = (hi - f) / (hi - c);
      e += w * p[k];
    }
    log_e[static_cast<std::size_t>(j)] = std::log(std::max(e, 1e-10));
  }
  std::array<double, 4> out{};
  const double scale = std::sqrt(2.0 / m);
  for (int k = 1; k <= 4; ++k) {
    double s = 0.0;
    for (int j = 0; j < m; ++j) s += log_e[static_cast<std::size_t>(j)] * std::cos(kPi * k * (j + 0.5) / m);
    out[static_cast<std::size_t>(k - 1)] = scale * s;
  }
  return out;
}

std::optional<LpcResult> levinson_durbin(std::span<const double> r, int order) {
  if (static_cast<int>(r.size()) < order + 1 || !(r[0] > 0.0)) return std::nullopt;
  std::vector<double> a(static_cast<std::size_t>(order + 1), 0.0);
  std::vector<double> prev(a.size(), 0.0);
  a[0] = 1.0;
  double err = r[0];
  for (int i = 1; i <= order; ++i) {
    double acc = r[static_cast<std::size_t>(i)];
    for (int j = 1; j < i; ++j) acc += a[static_cast<std::size_t>(j)] * r[static_cast<std::size_t>(i - j)];
    const double k = -acc / err;
    if (!(std::abs(k) < 1.0)) return std::nullopt;
    prev = a;
    for (int j = 1; j < i; ++j) {
      a[static_cast<std::size_t>(j)] = prev[static_cast<std::size_t>(j)] + k * prev[static_cast<std::size_t>(i - j)];
    }
    a[static_cast<std::size_t>(i)] = k;
    err *= 1.0 - k * k;
    if (!(err > 0.0)) return std::nullopt;
  }
  return LpcResult{std::move(a), err};
}

std::optional<FormantSet> estimate_formants(std::span<const float> frame, int fs,
                                            const DspConfig& cfg) {
  const auto x = windowed(frame, true, cfg.preemphasis);
  const int p = cfg.lpc_order;
  if (static_cast<int>(x.size()) <= p) return std::nullopt;
  std::vector<double> r(static_cast<std::size_t>(p + 1), 0.0);
  for (int lag = 0; lag <= p; ++lag) {
    for (std::size_t n = static_cast<std::size_t>(lag); n < x.size(); ++n) {
      r[static_cast<std::size_t>(lag)] += x[n] * x[n - static_cast<std::size_t>(lag)];
    }
  }
  const auto lpc = levinson_durbin(r, p);
  // A relative residual this small means the frame is (numerically) a
  // deterministic low-order signal such as DC: the fit is ill-conditioned.
  if (!lpc || lpc->error <= 1e-9 * r[0]) return std::nullopt;

  // Roots of z^p + a1 z^(p-1) + ... + ap; Eigen wants increasing degree.
  Eigen::VectorXd poly(p + 1);
  for (int i = 0; i <= p; ++i) poly[i] = lpc->a[static_cast<std::size_t>(p - i)];
  Eigen::PolynomialSolver<double, Eigen::Dynamic> solver;
  solver.compute(poly);

  std::vector<Formant> cand;
  for (Eigen::Index i = 0; i < solver.roots().size(); ++i) {
    const auto z = solver.roots()[i];
    if (z.imag() <= 0.0) continue;
    const double mag = std::abs(z);
    if (!(mag > 0.0)) continue;
    const double freq = std::arg(z) * fs / (2.0 * kPi);
    const double bw = -(fs / kPi) * std::log(mag);
    if (freq >= cfg.formant_min_hz && freq <= cfg.formant_max_hz && bw > 0.0 &&
        bw < cfg.formant_max_bw_hz) {
      cand.push_back({freq, bw});
    }
  }
  if (cand.empty()) return std::nullopt;
  std::sort(cand.begin(), cand.end(), [](const Formant& a, const Formant& b) { return a.freq_hz < b.freq_hz; });
  FormantSet out;
  for (std::size_t i = 0; i < 3 && i < cand.size(); ++i) out[i] = cand[i];
  return out;
}

SpectralGroup compute_spectral_group(std::span<const float> frame, int fs,
                                     std::optional<double> f0_hz, const FormantSet& formants,
                                     const DspConfig& cfg, std::span<const float> previous_frame) {
  const int n_fft = cfg.spectrum_fft_size;
  const auto p = power_spectrum(windowed(frame, false, 0.0), n_fft);
  const double bin_hz = static_cast<double>(fs) / n_fft;
  auto freq = [bin_hz](std::size_t k) { return static_cast<double>(k) * bin_hz; };

  SpectralGroup g;
  double low = 0.0;
  double high = 0.0;
  double max_lo = 0.0;
  double max_hi = 0.0;
  std::vector<double> f_a, db_a, f_b, db_b;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double f = freq(k);
    if (f >= 50.0 && f < 1000.0) low += p[k];
    if (f >= 1000.0 && f < 5000.0) high += p[k];
    if (f <= 2000.0) max_lo = std::max(max_lo, p[k]);
    if (f > 2000.0 && f <= 5000.0) max_hi = std::max(max_hi, p[k]);
    if (f <= 500.0) {
      f_a.push_back(f);
      db_a.push_back(to_db(p[k]));
    }
    if (f >= 500.0 && f <= 1500.0) {
      f_b.push_back(f);
      db_b.push_back(to_db(p[k]));
    }
  }
  g.alpha_ratio_db = (low > 0.0 && high > 0.0) ? 10.0 * std::log10(low / high) : kNaN;
  g.hammarberg_db = (max_lo > 0.0 && max_hi > 0.0) ? 10.0 * std::log10(max_lo / max_hi) : kNaN;
  const bool silent = !(low + high > 0.0);
  g.slope_0_500 = silent ? kNaN : ls_slope(f_a, db_a);
  g.slope_500_1500 = silent ? kNaN : ls_slope(f_b, db_b);

  g.spectral_flux = kNaN;
  if (!previous_frame.empty()) {
    const auto q = power_spectrum(windowed(previous_frame, false, 0.0), n_fft);
    double sp = 0.0;
    double sq = 0.0;
    for (std::size_t k = 0; k < p.size() && freq(k) <= 5000.0; ++k) {
      sp += p[k];
      sq += q[k];
    }
    if (sp > 0.0 && sq > 0.0) {
      double flux = 0.0;
      for (std::size_t k = 0; k < p.size() && freq(k) <= 5000.0; ++k) {
        const double d = p[k] / sp - q[k] / sq;
        flux += d * d;
      }
      g.spectral_flux = flux;
    }
  }

  g.formant_rel_energy_db = {kNaN, kNaN, kNaN};
  g.h1_h2_db = kNaN;
  g.h1_a3_db = kNaN;
  if (!f0_hz || !(*f0_hz > 0.0) || silent) return g;

  const double f0 = *f0_hz;
  auto harmonic_db = [&](int h) {
    const double lo = h * f0 - 0.25 * f0;
    const double hi = h * f0 + 0.25 * f0;
    double best = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (freq(k) >= lo && freq(k) <= hi) best = std::max(best, p[k]);
    }
    return to_db(best);
  };
  const double h1 = harmonic_db(1);
  if (2.0 * f0 < fs / 2.0) g.h1_h2_db = h1 - harmonic_db(2);

  // Local maxima of the power spectrum, for formant peak lookup.
  std::vector<std::size_t> maxima;
  for (std::size_t k = 1; k + 1 < p.size(); ++k) {
    if (p[k] > p[k - 1] && p[k] >= p[k + 1]) maxima.push_back(k);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    if (!formants[i] || maxima.empty()) continue;
    const double target = formants[i]->freq_hz;
    std::size_t best = maxima.front();
    for (std::size_t k : maxima) {
      if (std::abs(freq(k) - target) < std::abs(freq(best) - target)) best = k;
    }
    g.formant_rel_energy_db[i] = to_db(p[best]) - h1;
  }

  if (formants[2]) {
    const double f3 = formants[2]->freq_hz;
    const double half_bw = 0.5 * formants[2]->bw_hz;
    double a3 = -std::numeric_limits<double>::infinity();
    int nearest = 1;
    for (int h = 1; h * f0 < fs / 2.0; ++h) {
      if (std::abs(h * f0 - f3) < std::abs(nearest * f0 - f3)) nearest = h;
      if (std::abs(h * f0 - f3) <= half_bw) a3 = std::max(a3, harmonic_db(h));
    }
    if (!std::isfinite(a3)) a3 = harmonic_db(nearest);
    g.h1_a3_db = h1 - a3;
  }
  return g;
}

double F0Track::at(double t_s) const {
  if (f0_hz.empty()) return 0.0;
  const double pos = (t_s - offset_s) / hop_s;
  const auto i = std::clamp<long long>(std::llround(pos), 0, static_cast<long long>(f0_hz.size()) - 1);
  return f0_hz[static_cast<std::size_t>(i)];
}

std::optional<Perturbation> compute_jitter_shimmer(std::span<const float> samples, int fs,
                                                   const F0Track& track) {
  const auto n = static_cast<long long>(samples.size());
  auto sample = [&](long long i) { return static_cast<double>(samples[static_cast<std::size_t>(i)]); };
  auto refine = [&](long long i) -> std::pair<double, double> {
    if (i <= 0 || i + 1 >= n) return {static_cast<double>(i), sample(i)};
    auto [delta, height] = parabolic_peak(sample(i - 1), sample(i), sample(i + 1));
    return {static_cast<double>(i) + delta, height};
  };
  auto argmax_in = [&](long long lo, long long hi) {
    long long best = lo;
    for (long long i = lo + 1; i < hi; ++i) {
      if (sample(i) > sample(best)) best = i;
    }
    return best;
  };

  const double f0_start = track.at(0.0);
  if (!(f0_start > 0.0)) return std::nullopt;
  const double period0 = fs / f0_start;
  if (period0 >= static_cast<double>(n)) return std::nullopt;

  std::vector<double> pos;
  std::vector<double> amp;
  long long cur = argmax_in(0, static_cast<long long>(std::ceil(period0)));
  auto [p0, a0] = refine(cur);
  pos.push_back(p0);
  amp.push_back(a0);
  while (true) {
    const double f0 = track.at(static_cast<double>(cur) / fs);
    if (!(f0 > 0.0)) break;
    const double period = fs / f0;
    const auto lo = static_cast<long long>(std::ceil(static_cast<double>(cur) + 0.8 * period));
    const auto hi = std::min(n, static_cast<long long>(std::floor(static_cast<double>(cur) + 1.2 * period)) + 1);
    if (lo >= hi) break;
    cur = argmax_in(lo, hi);
    if (cur == 0 || cur + 1 >= n || !(sample(cur) > sample(cur - 1) && sample(cur) >= sample(cur + 1))) break;
    auto [pk, ak] = refine(cur);
    pos.push_back(pk);
    amp.push_back(ak);
  }

  const std::size_t periods = pos.size() - 1;
  if (periods < 4) return std::nullopt;
  std::vector<double> t(periods);
  for (std::size_t i = 0; i < periods; ++i) t[i] = pos[i + 1] - pos[i];

  double mean_t = 0.0;
  for (double v : t) mean_t += v;
  mean_t /= static_cast<double>(periods);
  double dt = 0.0;
  for (std::size_t i = 1; i < periods; ++i) dt += std::abs(t[i] - t[i - 1]);
  dt /= static_cast<double>(periods - 1);

  double mean_a = 0.0;
  for (double v : amp) mean_a += std::abs(v);
  mean_a /= static_cast<double>(amp.size());
  double da = 0.0;
  for (std::size_t i = 1; i < amp.size(); ++i) da += std::abs(amp[i] - amp[i - 1]);
  da /= static_cast<double>(amp.size() - 1);

  Perturbation out;
  out.periods = periods;
  out.jitter_pct = 100.0 * dt / mean_t;
  out.shimmer_pct = mean_a > 0.0 ? 100.0 * da / mean_a : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Utterance-level extraction

const std::array<std::string_view, kNumLlds> kLldNames = {
    "loudness_db",      "hnr_db",          "mfcc1",          "mfcc2",
    "mfcc3",            "mfcc4",           "f0_hz",          "f1_freq_hz",
    "f1_bw_hz",         "f2_freq_hz",      "f2_bw_hz",       "f3_freq_hz",
    "f3_bw_hz",         "alpha_ratio_db",  "hammarberg_db",  "slope_0_500",
    "slope_500_1500",   "spectral_flux",   "f1_rel_energy_db", "f2_rel_energy_db",
    "f3_rel_energy_db", "h1_h2_db",        "h1_a3_db",       "shimmer_pct",
    "jitter_pct",
};

const std::array<std::string_view, kNumGroups> kGroupNames = {
    "energy", "mfcc", "pitch", "formant", "spectral", "voice_quality"};

bool is_voiced_only(Lld lld) {
  switch (lld) {
    case Lld::kHnr:
    case Lld::kF0:
    case Lld::kF1Freq:
    case Lld::kF1Bw:
    case Lld::kF2Freq:
    case Lld::kF2Bw:
    case Lld::kF3Freq:
    case Lld::kF3Bw:
    case Lld::kF1RelEnergy:
    case Lld::kF2RelEnergy:
    case Lld::kF3RelEnergy:
    case Lld::kH1H2:
    case Lld::kH1A3:
    case Lld::kShimmer:
    case Lld::kJitter:
      return true;
    default:
      return false;
  }
}

std::vector<LldFrame> extract_llds(const AudioBuffer& audio, const DspConfig& cfg) {
  cfg.validate();
  const int fs = audio.sample_rate_hz;
  const auto n = static_cast<long long>(audio.samples.size());
  const auto pitch_len = static_cast<long long>(std::llround(cfg.pitch_win_s * fs));
  const auto spec_len = static_cast<long long>(std::llround(cfg.spec_win_s * fs));
  const auto hop = static_cast<long long>(std::llround(cfg.hop_s * fs));
  const long long span = std::max(pitch_len, spec_len);
  std::vector<LldFrame> frames;
  if (n < span) return frames;

  const std::span<const float> all(audio.samples);
  std::span<const float> prev_spec;
  for (long long center = span / 2; center - span / 2 + span <= n; center += hop) {
    const auto pitch_seg = all.subspan(static_cast<std::size_t>(center - pitch_len / 2), static_cast<std::size_t>(pitch_len));
    const auto spec_seg = all.subspan(static_cast<std::size_t>(center - spec_len / 2), static_cast<std::size_t>(spec_len));

    LldFrame fr;
    fr.values.fill(kNaN);
    fr.t_s = static_cast<double>(center) / fs;

    double ss = 0.0;
    for (float v : spec_seg) ss += static_cast<double>(v) * v;
    fr[Lld::kLoudness] = 20.0 * std::log10(std::sqrt(ss / static_cast<double>(spec_seg.size())) + 1e-10);

    const auto pitch = estimate_f0(pitch_seg, fs, cfg.f0_min_hz, cfg.f0_max_hz, cfg.voicing_threshold);
    fr.voiced = pitch.voiced;
    if (auto hnr = compute_hnr(pitch_seg, pitch)) fr[Lld::kHnr] = *hnr;

    const auto mfcc = compute_mfcc(spec_seg, fs, cfg);
    for (std::size_t i = 0; i < 4; ++i) fr.values[static_cast<std::size_t>(Lld::kMfcc1) + i] = mfcc[i];

    FormantSet formants;
    if (pitch.voiced) {
      fr[Lld::kF0] = pitch.f0_hz;
      if (auto fm = estimate_formants(spec_seg, fs, cfg)) formants = *fm;
      for (std::size_t i = 0; i < 3; ++i) {
        if (!formants[i]) continue;
        fr.values[static_cast<std::size_t>(Lld::kF1Freq) + 2 * i] = formants[i]->freq_hz;
        fr.values[static_cast<std::size_t>(Lld::kF1Bw) + 2 * i] = formants[i]->bw_hz;
      }
      if (auto pert = compute_jitter_shimmer(pitch_seg, fs, F0Track::constant(pitch.f0_hz))) {
        fr[Lld::kJitter] = pert->jitter_pct;
        fr[Lld::kShimmer] = pert->shimmer_pct;
      }
    }

    const auto sg = compute_spectral_group(
        spec_seg, fs, pitch.voiced ? std::optional<double>(pitch.f0_hz) : std::nullopt, formants, cfg,
        prev_spec);
    fr[Lld::kAlphaRatio] = sg.alpha_ratio_db;
    fr[Lld::kHammarberg] = sg.hammarberg_db;
    fr[Lld::kSlope0To500] = sg.slope_0_500;
    fr[Lld::kSlope500To1500] = sg.slope_500_1500;
    fr[Lld::kSpectralFlux] = sg.spectral_flux;
    for (std::size_t i = 0; i < 3; ++i) {
      fr.values[static_cast<std::size_t>(Lld::kF1RelEnergy) + i] = sg.formant_rel_energy_db[i];
    }
    fr[Lld::kH1H2] = sg.h1_h2_db;
    fr[Lld::kH1A3] = sg.h1_a3_db;

    frames.push_back(fr);
    prev_spec = spec_seg;
  }
  return frames;
}

FeatureGroupVector utterance_functionals(const std::vector<LldFrame>& frames, const DspConfig& cfg) {
  if (frames.empty()) throw InputError("no LLD frames to pool");
  FeatureGroupVector out;
  out.no_voiced_frames = std::none_of(frames.begin(), frames.end(), [](const LldFrame& f) { return f.voiced; });
  for (std::size_t i = 0; i < kNumLlds; ++i) {
    const bool voiced_only = is_voiced_only(static_cast<Lld>(i));
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& f : frames) {
      if (voiced_only && !f.voiced) continue;
      if (std::isnan(f.values[i])) continue;
      sum += f.values[i];
      ++count;
    }
    if (count == 0) {
      out.values[i] = cfg.neutral_value;
      out.neutral[i] = true;
    } else {
      out.values[i] = sum / static_cast<double>(count);
    }
  }
  return out;
}

}  // namespace layerprobe::dsp
