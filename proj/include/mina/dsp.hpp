#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mina::dsp {

/// Pass band in Hz. `low == 0` is a lowpass, `high == fs/2` a highpass.
struct BandSpec {
  double low = 0.0;
  double high = 0.0;

  /// "<0.5Hz", "10-50Hz", ">50Hz" style label (needs the sampling rate to
  /// recognise highpass bands).
  std::string label(double sampling_rate) const;
  bool operator==(const BandSpec&) const = default;
};

void validate_band(const BandSpec& band, double sampling_rate);

/// Linear-phase FIR filter. Taps are symmetric with an odd count, so the
/// group delay is exactly (taps - 1) / 2 samples.
class FirFilter {
 public:
  FirFilter(Eigen::VectorXd taps, BandSpec band);

  static FirFilter identity();

  const Eigen::VectorXd& taps() const { return taps_; }
  const BandSpec& band() const { return band_; }
  Eigen::Index group_delay() const { return (taps_.size() - 1) / 2; }

  /// Magnitude of the frequency response at `freq` Hz.
  double magnitude_at(double freq, double sampling_rate) const;

 private:
  Eigen::VectorXd taps_;
  BandSpec band_;
};

inline constexpr int kDefaultNumTaps = 251;

/// Hamming-windowed sinc design, normalised to unit gain at the band centre
/// (DC for lowpass, Nyquist for highpass).
FirFilter design_fir_bandpass(const BandSpec& band, double sampling_rate,
                              int num_taps = kDefaultNumTaps);

/// Zero-padded convolution shifted left by the group delay, so output sample
/// i lines up with input sample i. Output length equals input length.
Eigen::VectorXd apply_filter(const Eigen::Ref<const Eigen::VectorXd>& x, const FirFilter& filter);

/// F band-filtered copies of one signal; row i of `channels` is band i.
struct ChannelBank {
  Eigen::MatrixXd channels;
  std::vector<BandSpec> bands;
  std::string source_id;
  double sampling_rate = 300.0;

  Eigen::Index num_channels() const { return channels.rows(); }
  Eigen::Index length() const { return channels.cols(); }
};

/// Precomputed filters for a band list, reusable across records.
class FilterBank {
 public:
  FilterBank(std::vector<BandSpec> bands, double sampling_rate, int num_taps = kDefaultNumTaps);

  ChannelBank decompose(const Eigen::Ref<const Eigen::VectorXd>& x,
                        std::string source_id = {}) const;

  const std::vector<FirFilter>& filters() const { return filters_; }
  const std::vector<BandSpec>& bands() const { return bands_; }
  double sampling_rate() const { return sampling_rate_; }

 private:
  std::vector<BandSpec> bands_;
  std::vector<FirFilter> filters_;
  double sampling_rate_;
};

ChannelBank decompose(const Eigen::Ref<const Eigen::VectorXd>& x, std::span<const BandSpec> bands,
                      double sampling_rate, int num_taps = kDefaultNumTaps);

/// One-sided periodogram: bin k = |DFT(x)_k|^2 / (fs * len) for
/// k = 0..len/2, interior bins doubled. Sum(psd) * fs/len == mean(x^2).
Eigen::VectorXd periodogram_psd(const Eigen::Ref<const Eigen::VectorXd>& x, double sampling_rate);

/// x'_k = x_k + amp * sin((k + 1) * pi / n).
Eigen::VectorXd add_baseline_wander(const Eigen::Ref<const Eigen::VectorXd>& x, double amp);

/// x'_k = x_k + amp * g_k, g_k standard normal from a seeded PCG stream.
Eigen::VectorXd add_white_noise(const Eigen::Ref<const Eigen::VectorXd>& x, double amp,
                                std::uint64_t seed);

/// Channels drawn in the interpretation figures: <0.5, 0.5-50, 10-50, >50 Hz.
std::vector<BandSpec> default_bands(double sampling_rate = 300.0);

struct BandPreset {
  std::string name;
  BandSpec band;
};

/// The common ECG frequency components (baseline, respiration, P wave,
/// T wave, QRS, muscle, noise, raw).
std::vector<BandPreset> band_catalog(double sampling_rate = 300.0);

/// Parses `low_hz,high_hz` lines ('#' comments and blank lines ignored).
std::vector<BandSpec> parse_bands(std::string_view text);
std::vector<BandSpec> load_bands(const std::filesystem::path& path);
std::string format_bands(std::span<const BandSpec> bands);

}  // namespace mina::dsp
