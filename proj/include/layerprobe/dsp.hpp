#pragma once

// Paralinguistic low-level descriptors (25 streams in six groups) from raw
// audio, and their pooling to one vector per utterance or window.
//
// Undefined per-frame values (unvoiced pitch, missing formants, ...) are NaN
// and never enter the functionals.

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace layerprobe::dsp {

struct AudioBuffer {
  std::vector<float> samples;  // mono, nominally in [-1, 1]
  int sample_rate_hz = 16000;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate_hz);
  }
};

enum class WavEncoding { kPcm16, kFloat32 };

/// RIFF/WAVE, 16-bit PCM or 32-bit float; multi-channel input is averaged.
AudioBuffer read_wav(const std::filesystem::path& path);
AudioBuffer decode_wav(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_wav(const AudioBuffer& audio, WavEncoding enc = WavEncoding::kPcm16,
                                     int channels = 1);
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio,
               WavEncoding enc = WavEncoding::kPcm16);

/// Samples in [start_s, end_s), clamped to the buffer.
AudioBuffer slice(const AudioBuffer& audio, double start_s, double end_s);

struct DspConfig {
  double pitch_win_s = 0.060;  // pitch, HNR, jitter, shimmer
  double spec_win_s = 0.025;   // loudness, MFCC, formants, spectral group
  double hop_s = 0.010;
  double f0_min_hz = 55.0;
  double f0_max_hz = 1000.0;
  double voicing_threshold = 0.45;
  int mfcc_fft_size = 512;
  int n_mel = 26;
  double mel_lo_hz = 20.0;
  double mel_hi_hz = 8000.0;
  int lpc_order = 12;
  double preemphasis = 0.97;
  double formant_min_hz = 90.0;
  double formant_max_hz = 5500.0;
  double formant_max_bw_hz = 600.0;
  int spectrum_fft_size = 2048;  // zero-padded FFT for spectral and harmonic measures
  double neutral_value = 0.0;

  void validate() const;
};

std::vector<double> hamming(std::size_t n);

/// Power spectrum |X_k|^2, k = 0..n_fft/2, of the zero-padded frame.
std::vector<double> power_spectrum(std::span<const double> frame, int n_fft);

/// Normalized cross-correlation of frame[0..N-lag) with frame[lag..N).
double normalized_autocorrelation(std::span<const float> frame, int lag);

struct PitchEstimate {
  double f0_hz = 0.0;  // 0 when unvoiced
  bool voiced = false;
  double r_max = 0.0;  // peak normalized autocorrelation (interpolated)
  double lag = 0.0;    // fractional lag in samples, 0 when no peak
};

/// Autocorrelation peak search over lags [fs/fmax, fs/fmin]. The first local
/// maximum within 10% of the best peak wins, which avoids octave-down errors
/// on harmonic signals. Voiced iff r_max >= voicing_threshold.
PitchEstimate estimate_f0(std::span<const float> frame, int sample_rate_hz,
                          double fmin_hz = 55.0, double fmax_hz = 1000.0,
                          double voicing_threshold = 0.45);

/// 10 log10(r / (1 - r)) clamped to [-20, 60] dB.
double hnr_from_correlation(double r);

/// HNR from the normalized autocorrelation at the pitch lag; nullopt when the
/// frame is unvoiced.
std::optional<double> compute_hnr(std::span<const float> frame, const PitchEstimate& pitch);

/// MFCC 1..4 of a 25 ms frame: Hamming window, power spectrum, triangular
/// mel filters, log with floor 1e-10, orthonormal DCT-II.
std::array<double, 4> compute_mfcc(std::span<const float> frame, int sample_rate_hz,
                                   const DspConfig& cfg = {});

struct LpcResult {
  std::vector<double> a;  // a[0] = 1, A(z) = sum a_k z^-k
  double error = 0.0;     // final prediction error
};

/// Levinson-Durbin on autocorrelation r[0..order]; nullopt when the recursion
/// meets a non-positive error or a reflection coefficient with |k| >= 1.
std::optional<LpcResult> levinson_durbin(std::span<const double> r, int order);

struct Formant {
  double freq_hz = 0.0;
  double bw_hz = 0.0;
};

using FormantSet = std::array<std::optional<Formant>, 3>;

/// LPC-root formants of a pre-emphasized, Hamming-windowed frame. Returns
/// nullopt for an unstable or degenerate LPC fit, or when no root qualifies.
std::optional<FormantSet> estimate_formants(std::span<const float> frame, int sample_rate_hz,
                                            const DspConfig& cfg = {});

struct SpectralGroup {
  double alpha_ratio_db = 0.0;
  double hammarberg_db = 0.0;
  double slope_0_500 = 0.0;     // dB per Hz
  double slope_500_1500 = 0.0;  // dB per Hz
  double spectral_flux = 0.0;   // NaN without a previous frame
  std::array<double, 3> formant_rel_energy_db{};
  double h1_h2_db = 0.0;
  double h1_a3_db = 0.0;
};

/// Band, slope and harmonic measures of one frame. Harmonic entries are NaN
/// without f0; formant-relative entries are NaN for missing formants.
SpectralGroup compute_spectral_group(std::span<const float> frame, int sample_rate_hz,
                                     std::optional<double> f0_hz, const FormantSet& formants,
                                     const DspConfig& cfg = {},
                                     std::span<const float> previous_frame = {});

/// F0 contour sampled at offset_s + i * hop_s relative to the region start;
/// 0 means unvoiced.
struct F0Track {
  double hop_s = 0.01;
  double offset_s = 0.0;
  std::vector<double> f0_hz;

  static F0Track constant(double f0_hz) { return {1.0, 0.0, {f0_hz}}; }
  double at(double t_s) const;
};

struct Perturbation {
  double jitter_pct = 0.0;
  double shimmer_pct = 0.0;
  std::size_t periods = 0;
};

/// Period-to-period perturbation from f0-guided peak picking. Peaks are placed
/// with parabolic interpolation; tracking stops at the first search window
/// without a local maximum. nullopt with fewer than 4 periods.
std::optional<Perturbation> compute_jitter_shimmer(std::span<const float> samples,
                                                   int sample_rate_hz, const F0Track& track);

enum class Lld : std::size_t {
  kLoudness, kHnr,
  kMfcc1, kMfcc2, kMfcc3, kMfcc4,
  kF0,
  kF1Freq, kF1Bw, kF2Freq, kF2Bw, kF3Freq, kF3Bw,
  kAlphaRatio, kHammarberg, kSlope0To500, kSlope500To1500, kSpectralFlux,
  kF1RelEnergy, kF2RelEnergy, kF3RelEnergy, kH1H2, kH1A3,
  kShimmer, kJitter,
};

inline constexpr std::size_t kNumLlds = 25;

extern const std::array<std::string_view, kNumLlds> kLldNames;

/// True for descriptors averaged over voiced frames only.
bool is_voiced_only(Lld lld);

enum class FeatureGroup : std::size_t { kEnergy, kMfcc, kPitch, kFormant, kSpectral, kVoiceQuality };

inline constexpr std::size_t kNumGroups = 6;
inline constexpr std::array<std::size_t, kNumGroups> kGroupDims = {2, 4, 1, 6, 10, 2};
inline constexpr std::array<std::size_t, kNumGroups> kGroupOffsets = {0, 2, 6, 7, 13, 23};
extern const std::array<std::string_view, kNumGroups> kGroupNames;

struct LldFrame {
  double t_s = 0.0;
  bool voiced = false;
  std::array<double, kNumLlds> values{};

  double operator[](Lld l) const { return values[static_cast<std::size_t>(l)]; }
  double& operator[](Lld l) { return values[static_cast<std::size_t>(l)]; }
};

/// Frames every hop_s, centered so both analysis windows fit inside the audio.
std::vector<LldFrame> extract_llds(const AudioBuffer& audio, const DspConfig& cfg = {});

struct FeatureGroupVector {
  std::array<double, kNumLlds> values{};
  std::array<bool, kNumLlds> neutral{};  // true where the neutral value was substituted
  bool no_voiced_frames = false;

  std::span<const double> group(FeatureGroup g) const {
    const auto i = static_cast<std::size_t>(g);
    return {values.data() + kGroupOffsets[i], kGroupDims[i]};
  }
};

/// Arithmetic mean per descriptor; voiced-only descriptors over voiced frames.
/// Throws InputError on an empty frame list.
FeatureGroupVector utterance_functionals(const std::vector<LldFrame>& frames,
                                         const DspConfig& cfg = {});

}  // namespace layerprobe::dsp
