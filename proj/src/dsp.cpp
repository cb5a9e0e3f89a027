#include "mina/dsp.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>

#include "mina/error.hpp"
#include "mina/rng.hpp"
#include "mina/text.hpp"

namespace mina::dsp {

namespace {

std::string hz(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

double sinc(double x) {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

// Ideal lowpass impulse response with cutoff `fc` (normalised to Nyquist = 1).
Eigen::VectorXd ideal_lowpass(double fc, int num_taps) {
  Eigen::VectorXd h(num_taps);
  const double mid = 0.5 * (num_taps - 1);
  for (int k = 0; k < num_taps; ++k) h[k] = fc * sinc(fc * (k - mid));
  return h;
}

}  // namespace

std::string BandSpec::label(double sampling_rate) const {
  const double nyquist = 0.5 * sampling_rate;
  if (low <= 0.0 && high >= nyquist) return "all";
  if (low <= 0.0) return "<" + hz(high) + "Hz";
  if (high >= nyquist) return ">" + hz(low) + "Hz";
  return hz(low) + "-" + hz(high) + "Hz";
}

void validate_band(const BandSpec& band, double sampling_rate) {
  if (!(sampling_rate > 0.0)) throw ConfigError("sampling rate must be positive");
  const double nyquist = 0.5 * sampling_rate;
  if (!(band.low >= 0.0) || !(band.high > band.low)) {
    throw ConfigError("band needs 0 <= low < high, got " + hz(band.low) + "-" + hz(band.high));
  }
  if (band.high > nyquist + 1e-9) {
    throw ConfigError("band edge " + hz(band.high) + " Hz exceeds Nyquist " + hz(nyquist) + " Hz");
  }
}

FirFilter::FirFilter(Eigen::VectorXd taps, BandSpec band) : taps_(std::move(taps)), band_(band) {
  if (taps_.size() < 1 || taps_.size() % 2 == 0) {
    throw ConfigError("FIR filter needs an odd number of taps");
  }
  if (!taps_.allFinite()) throw ConfigError("FIR taps must be finite");
}

FirFilter FirFilter::identity() {
  return FirFilter(Eigen::VectorXd::Ones(1), BandSpec{0.0, 0.0});
}

double FirFilter::magnitude_at(double freq, double sampling_rate) const {
  const double w = 2.0 * std::numbers::pi * freq / sampling_rate;
  std::complex<double> acc{0.0, 0.0};
  for (Eigen::Index k = 0; k < taps_.size(); ++k) {
    acc += taps_[k] * std::polar(1.0, -w * static_cast<double>(k));
  }
  return std::abs(acc);
}

FirFilter design_fir_bandpass(const BandSpec& band, double sampling_rate, int num_taps) {
  if (num_taps < 3 || num_taps % 2 == 0) {
    throw ConfigError("num_taps must be odd and >= 3, got " + std::to_string(num_taps));
  }
  validate_band(band, sampling_rate);
  const double nyquist = 0.5 * sampling_rate;
  const bool lowpass = band.low <= 0.0;
  const bool highpass = band.high >= nyquist;

  Eigen::VectorXd h = Eigen::VectorXd::Zero(num_taps);
  const int mid = (num_taps - 1) / 2;
  if (highpass) {
    h[mid] = 1.0;
  } else {
    h += ideal_lowpass(band.high / nyquist, num_taps);
  }
  if (!lowpass) h -= ideal_lowpass(band.low / nyquist, num_taps);

  for (int k = 0; k < num_taps; ++k) {
    h[k] *= 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * k / (num_taps - 1));
  }

  double scale_freq = 0.5 * (band.low + band.high);
  if (lowpass) {
    scale_freq = 0.0;
  } else if (highpass) {
    scale_freq = nyquist;
  }
  double response = 0.0;
  for (int k = 0; k < num_taps; ++k) {
    response += h[k] * std::cos(std::numbers::pi * scale_freq / nyquist * (k - mid));
  }
  h /= response;

  // Force exact symmetry; the two halves can differ in the last ulp.
  for (int k = 0; k < mid; ++k) {
    const double avg = 0.5 * (h[k] + h[num_taps - 1 - k]);
    h[k] = avg;
    h[num_taps - 1 - k] = avg;
  }
  return FirFilter(std::move(h), band);
}

Eigen::VectorXd apply_filter(const Eigen::Ref<const Eigen::VectorXd>& x, const FirFilter& filter) {
  const Eigen::Index len = x.size();
  const Eigen::Index delay = filter.group_delay();
  if (len <= delay) {
    throw ConfigError("apply_filter: input length " + std::to_string(len) +
                      " does not exceed group delay " + std::to_string(delay));
  }
  const auto& h = filter.taps();
  const Eigen::Index taps = h.size();
  Eigen::VectorXd y(len);
  // y[i] = sum_j h[j] x[i + delay - j]
  for (Eigen::Index i = 0; i < len; ++i) {
    const Eigen::Index j_lo = std::max<Eigen::Index>(0, i + delay - (len - 1));
    const Eigen::Index j_hi = std::min<Eigen::Index>(taps - 1, i + delay);
    double acc = 0.0;
    for (Eigen::Index j = j_lo; j <= j_hi; ++j) acc += h[j] * x[i + delay - j];
    y[i] = acc;
  }
  return y;
}

FilterBank::FilterBank(std::vector<BandSpec> bands, double sampling_rate, int num_taps)
    : bands_(std::move(bands)), sampling_rate_(sampling_rate) {
  if (bands_.empty()) throw ConfigError("filter bank needs at least one band");
  filters_.reserve(bands_.size());
  for (const auto& band : bands_) {
    filters_.push_back(design_fir_bandpass(band, sampling_rate, num_taps));
  }
}

ChannelBank FilterBank::decompose(const Eigen::Ref<const Eigen::VectorXd>& x,
                                  std::string source_id) const {
  ChannelBank bank;
  bank.channels.resize(static_cast<Eigen::Index>(filters_.size()), x.size());
  for (std::size_t i = 0; i < filters_.size(); ++i) {
    bank.channels.row(static_cast<Eigen::Index>(i)) = apply_filter(x, filters_[i]).transpose();
  }
  bank.bands = bands_;
  bank.source_id = std::move(source_id);
  bank.sampling_rate = sampling_rate_;
  return bank;
}

ChannelBank decompose(const Eigen::Ref<const Eigen::VectorXd>& x, std::span<const BandSpec> bands,
                      double sampling_rate, int num_taps) {
  return FilterBank({bands.begin(), bands.end()}, sampling_rate, num_taps).decompose(x);
}

Eigen::VectorXd periodogram_psd(const Eigen::Ref<const Eigen::VectorXd>& x, double sampling_rate) {
  const Eigen::Index len = x.size();
  if (len < 2) throw ConfigError("periodogram_psd: need at least 2 samples");
  if (!(sampling_rate > 0.0)) throw ConfigError("periodogram_psd: sampling rate must be positive");

  Eigen::FFT<double> fft;
  std::vector<double> in(x.data(), x.data() + len);
  std::vector<std::complex<double>> spectrum;
  fft.fwd(spectrum, in);

  const Eigen::Index bins = len / 2 + 1;
  const double norm = 1.0 / (sampling_rate * static_cast<double>(len));
  Eigen::VectorXd psd(bins);
  for (Eigen::Index k = 0; k < bins; ++k) {
    psd[k] = std::norm(spectrum[static_cast<std::size_t>(k)]) * norm;
    const bool nyquist_bin = (len % 2 == 0) && k == len / 2;
    if (k != 0 && !nyquist_bin) psd[k] *= 2.0;
  }
  return psd;
}

Eigen::VectorXd add_baseline_wander(const Eigen::Ref<const Eigen::VectorXd>& x, double amp) {
  if (amp < 0.0) throw ConfigError("interferer amplitude must be non-negative");
  Eigen::VectorXd out = x;
  if (amp == 0.0) return out;
  const auto n = static_cast<double>(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    out[k] += amp * std::sin(static_cast<double>(k + 1) * std::numbers::pi / n);
  }
  return out;
}

Eigen::VectorXd add_white_noise(const Eigen::Ref<const Eigen::VectorXd>& x, double amp,
                                std::uint64_t seed) {
  if (amp < 0.0) throw ConfigError("interferer amplitude must be non-negative");
  Eigen::VectorXd out = x;
  if (amp == 0.0) return out;
  Pcg32 rng(seed, 0x401deULL);
  for (Eigen::Index k = 0; k < x.size(); ++k) out[k] += amp * rng.normal();
  return out;
}

std::vector<BandSpec> default_bands(double sampling_rate) {
  return {{0.0, 0.5}, {0.5, 50.0}, {10.0, 50.0}, {50.0, 0.5 * sampling_rate}};
}

std::vector<BandPreset> band_catalog(double sampling_rate) {
  const double nyquist = 0.5 * sampling_rate;
  return {
      {"baseline", {0.0, 0.5}},    {"respiration", {0.12, 0.5}}, {"pqrst", {0.5, 50.0}},
      {"p_wave", {0.67, 5.0}},     {"t_wave", {1.0, 7.0}},       {"muscle", {5.0, 50.0}},
      {"qrs", {10.0, 50.0}},       {"noise", {50.0, nyquist}},   {"raw", {0.0, nyquist}},
  };
}

std::vector<BandSpec> parse_bands(std::string_view text) {
  std::vector<BandSpec> out;
  std::size_t entry = 0;
  for (auto line : split(text, '\n')) {
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    for (auto item : split(line, ';')) {
      item = trim(item);
      if (item.empty()) continue;
      ++entry;
      const auto parts = split(item, ',');
      std::optional<double> lo;
      std::optional<double> hi;
      if (parts.size() == 2) {
        lo = parse_double(parts[0]);
        hi = parse_double(parts[1]);
      }
      if (!lo || !hi) {
        throw ParseError("band entry " + std::to_string(entry) + ": expected 'low_hz,high_hz', got '" +
                         std::string(item) + "'");
      }
      out.push_back({*lo, *hi});
    }
  }
  if (out.empty()) throw ParseError("band list is empty");
  return out;
}

std::vector<BandSpec> load_bands(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open band file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_bands(ss.str());
}

std::string format_bands(std::span<const BandSpec> bands) {
  std::string out;
  for (std::size_t i = 0; i < bands.size(); ++i) {
    if (i) out += ';';
    out += format_double(bands[i].low) + "," + format_double(bands[i].high);
  }
  return out;
}

}  // namespace mina::dsp
