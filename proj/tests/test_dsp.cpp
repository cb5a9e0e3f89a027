#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mina/dsp.hpp"
#include "mina/error.hpp"
#include "mina/rng.hpp"
#include "oracles.hpp"

using namespace mina;
using namespace mina::dsp;

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::VectorXd sine(double freq, double fs, Eigen::Index n, double amp = 1.0, double phase = 0.0) {
  Eigen::VectorXd x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x[i] = amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / fs + phase);
  }
  return x;
}

Eigen::VectorXd gaussian(Eigen::Index n, std::uint64_t seed) {
  Pcg32 rng(seed, 3);
  Eigen::VectorXd x(n);
  for (auto& v : x) v = rng.normal();
  return x;
}

// Power of `x` in the periodogram bins within [lo, hi] Hz.
double band_power(const Eigen::VectorXd& x, double fs, double lo, double hi) {
  const auto psd = oracle::periodogram(x, fs);
  const double df = fs / static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < psd.size(); ++k) {
    const double f = static_cast<double>(k) * df;
    if (f >= lo && f <= hi) acc += psd[k] * df;
  }
  return acc;
}

}  // namespace

TEST(FirDesign, TapsAreSymmetricWithOddCount) {
  for (const auto& band : default_bands(300.0)) {
    const auto f = design_fir_bandpass(band, 300.0, 251);
    const auto& t = f.taps();
    ASSERT_EQ(t.size(), 251);
    EXPECT_EQ(f.group_delay(), 125);
    for (Eigen::Index i = 0; i < t.size(); ++i) EXPECT_NEAR(t[i], t[t.size() - 1 - i], 1e-12);
    EXPECT_TRUE(t.reverse().isApprox(t, 1e-12));
  }
}

TEST(FirDesign, RejectsBadArguments) {
  EXPECT_THROW(design_fir_bandpass({10, 50}, 300.0, 250), ConfigError);
  EXPECT_THROW(design_fir_bandpass({10, 50}, 300.0, 1), ConfigError);
  EXPECT_THROW(design_fir_bandpass({10, 160}, 300.0, 251), ConfigError);
  EXPECT_THROW(design_fir_bandpass({50, 10}, 300.0, 251), ConfigError);
  EXPECT_THROW(design_fir_bandpass({-1, 10}, 300.0, 251), ConfigError);
}

TEST(FirDesign, PassbandAndStopbandBySineRms) {
  const auto f = design_fir_bandpass({10, 50}, 300.0, 251);
  const Eigen::Index n = 3000;
  const auto pass = sine(25.0, 300.0, n);
  const auto stop = sine(1.0, 300.0, n);
  // Compare away from the zero-padded edges.
  const double pass_ratio = oracle::rms(apply_filter(pass, f), 300, n - 300) / oracle::rms(pass, 300, n - 300);
  const double stop_ratio = oracle::rms(apply_filter(stop, f), 300, n - 300) / oracle::rms(stop, 300, n - 300);
  EXPECT_GE(pass_ratio, 0.89);
  EXPECT_LE(pass_ratio, 1.12);
  EXPECT_LE(stop_ratio, 0.1);
}

TEST(FirDesign, MidbandGainWithinOneDecibel) {
  const std::vector<std::pair<BandSpec, double>> cases{
      {{10, 50}, 30.0}, {{0.5, 50}, 25.0}, {{0, 0.5}, 0.0}, {{50, 150}, 150.0}, {{5, 15}, 10.0}};
  for (const auto& [band, mid] : cases) {
    const auto f = design_fir_bandpass(band, 300.0, 251);
    EXPECT_LE(std::abs(20.0 * std::log10(f.magnitude_at(mid, 300.0))), 1.0) << band.label(300.0);
  }
}

// A Hamming window of N taps has a transition band about 3.3 fs / N wide
// (about 4 Hz here), so the octave rule is checked on edges whose octave
// lies outside that width.
TEST(FirDesign, OctaveOutsideCutoffAttenuatedTwentyDecibels) {
  const std::vector<std::pair<BandSpec, std::vector<double>>> cases{
      {{10, 50}, {5.0, 100.0}}, {{0.5, 50}, {100.0}}, {{50, 150}, {25.0}}, {{10, 40}, {5.0, 80.0}}};
  for (const auto& [band, outside] : cases) {
    const auto f = design_fir_bandpass(band, 300.0, 251);
    for (double o : outside) {
      EXPECT_LE(20.0 * std::log10(f.magnitude_at(o, 300.0)), -20.0)
          << band.label(300.0) << " at " << o << " Hz";
    }
  }
}

TEST(FirDesign, MagnitudeMatchesDirectFrequencyResponse) {
  const auto f = design_fir_bandpass({10, 50}, 300.0, 51);
  for (double freq : {0.0, 3.0, 25.0, 80.0, 150.0}) {
    std::complex<double> acc = 0.0;
    for (Eigen::Index k = 0; k < f.taps().size(); ++k) {
      acc += f.taps()[k] * std::polar(1.0, -2.0 * kPi * freq / 300.0 * static_cast<double>(k));
    }
    EXPECT_NEAR(f.magnitude_at(freq, 300.0), std::abs(acc), 1e-12);
  }
}

TEST(ApplyFilter, IdentityAndZero) {
  const auto x = gaussian(100, 1);
  EXPECT_EQ(apply_filter(x, FirFilter::identity()), x);
  const auto f = design_fir_bandpass({10, 50}, 300.0, 31);
  EXPECT_TRUE(apply_filter(Eigen::VectorXd::Zero(100), f).isZero(0.0));
}

TEST(ApplyFilter, MatchesNaiveShiftedConvolution) {
  const auto f = design_fir_bandpass({0.5, 50}, 300.0, 21);
  const auto x = gaussian(64, 2);
  const auto y = apply_filter(x, f);
  const auto& h = f.taps();
  const Eigen::Index d = f.group_delay();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < h.size(); ++k) {
      const Eigen::Index j = i + d - k;
      if (j >= 0 && j < x.size()) acc += h[k] * x[j];
    }
    EXPECT_NEAR(y[i], acc, 1e-12);
  }
}

TEST(ApplyFilter, IsLinear) {
  const auto f = design_fir_bandpass({10, 50}, 300.0, 251);
  const auto x = gaussian(600, 3);
  const auto y = gaussian(600, 4);
  const Eigen::VectorXd lhs = apply_filter(2.5 * x - 0.75 * y, f);
  const Eigen::VectorXd rhs = 2.5 * apply_filter(x, f) - 0.75 * apply_filter(y, f);
  EXPECT_LE((lhs - rhs).norm(), 1e-9 * rhs.norm());
}

TEST(ApplyFilter, GroupDelayCompensationAlignsPeak) {
  const auto f = design_fir_bandpass({10, 50}, 300.0, 251);
  const auto x = sine(25.0, 300.0, 3000) + 0.3 * gaussian(3000, 5);
  const auto y = apply_filter(x, f);
  Eigen::Index best = 0;
  double best_value = -1e300;
  for (Eigen::Index lag = -20; lag <= 20; ++lag) {
    double acc = 0.0;
    for (Eigen::Index i = 300; i < 2700; ++i) acc += y[i] * x[i - lag];
    if (acc > best_value) {
      best_value = acc;
      best = lag;
    }
  }
  EXPECT_LE(std::abs(best), 1);
}

TEST(ApplyFilter, RejectsShortInput) {
  const auto f = design_fir_bandpass({10, 50}, 300.0, 251);
  EXPECT_THROW(apply_filter(Eigen::VectorXd::Zero(125), f), ConfigError);
  EXPECT_NO_THROW(apply_filter(Eigen::VectorXd::Zero(126), f));
}

TEST(Decompose, DefaultBandsShape) {
  const auto bank = decompose(gaussian(3000, 6), default_bands(300.0), 300.0);
  EXPECT_EQ(bank.num_channels(), 4);
  EXPECT_EQ(bank.length(), 3000);
  EXPECT_EQ(bank.bands.size(), 4u);
}

TEST(Decompose, ChannelsMatchIndividualFilters) {
  const auto x = gaussian(800, 7);
  const auto bands = default_bands(300.0);
  const auto bank = decompose(x, bands, 300.0, 51);
  for (std::size_t i = 0; i < bands.size(); ++i) {
    const auto y = apply_filter(x, design_fir_bandpass(bands[i], 300.0, 51));
    EXPECT_EQ(Eigen::VectorXd(bank.channels.row(static_cast<Eigen::Index>(i)).transpose()), y);
  }
}

TEST(Decompose, SeparatesSlowAndQrsComponents) {
  const Eigen::Index n = 3000;
  const auto slow = sine(0.2, 300.0, n);
  const auto fast = sine(25.0, 300.0, n);
  const auto bank = decompose(slow + fast, default_bands(300.0), 300.0);
  const Eigen::VectorXd low = bank.channels.row(0).transpose();
  const Eigen::VectorXd mid = bank.channels.row(2).transpose();
  EXPECT_GE(band_power(low, 300.0, 0.0, 0.3), 0.9 * band_power(slow, 300.0, 0.0, 0.3));
  EXPECT_GE(band_power(mid, 300.0, 24.0, 26.0), 0.9 * band_power(fast, 300.0, 24.0, 26.0));
}

TEST(Decompose, ZeroSignalGivesZeroChannels) {
  const auto bank = decompose(Eigen::VectorXd::Zero(3000), default_bands(300.0), 300.0);
  EXPECT_TRUE(bank.channels.isZero(0.0));
}

TEST(Periodogram, MatchesDirectDft) {
  for (Eigen::Index n : {2, 3, 16, 17, 101}) {
    const auto x = gaussian(n, static_cast<std::uint64_t>(n));
    const auto psd = periodogram_psd(x, 300.0);
    const auto ref = oracle::periodogram(x, 300.0);
    ASSERT_EQ(psd.size(), static_cast<Eigen::Index>(ref.size()));
    for (std::size_t k = 0; k < ref.size(); ++k) {
      EXPECT_NEAR(psd[static_cast<Eigen::Index>(k)], ref[k], 1e-10 * (1.0 + ref[k]));
    }
  }
}

TEST(Periodogram, TonePeakAtExpectedBin) {
  const auto psd = periodogram_psd(sine(10.0, 300.0, 3000), 300.0);
  Eigen::Index arg = 0;
  psd.maxCoeff(&arg);
  EXPECT_EQ(arg, 100);
  const auto ref = oracle::periodogram(sine(10.0, 300.0, 3000), 300.0);
  EXPECT_EQ(std::max_element(ref.begin(), ref.end()) - ref.begin(), 100);
}

TEST(Periodogram, ParsevalOnRandomSignals) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Eigen::Index n = 50 + static_cast<Eigen::Index>(seed * 37 % 500);
    const auto x = gaussian(n, seed);
    const auto psd = periodogram_psd(x, 300.0);
    const double df = 300.0 / static_cast<double>(n);
    const double lhs = psd.sum() * df;
    const double rhs = x.squaredNorm() / static_cast<double>(n);
    EXPECT_NEAR(lhs, rhs, 1e-6 * rhs);
    EXPECT_GE(psd.minCoeff(), 0.0);
  }
}

TEST(Periodogram, ZeroAndShortInputs) {
  EXPECT_TRUE(periodogram_psd(Eigen::VectorXd::Zero(64), 300.0).isZero(0.0));
  EXPECT_THROW(periodogram_psd(Eigen::VectorXd::Zero(1), 300.0), ConfigError);
}

TEST(BaselineWander, FormulaValues) {
  const Eigen::VectorXd x = Eigen::VectorXd::Zero(2);
  const auto y = add_baseline_wander(x, 1.0);
  EXPECT_NEAR(y[0], 1.0, 1e-15);
  EXPECT_NEAR(y[1], 0.0, 1e-15);

  const auto z = gaussian(3000, 9);
  const auto w = add_baseline_wander(z, 0.7);
  EXPECT_NEAR(w[1499] - z[1499], 0.7, 1e-9);
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    EXPECT_NEAR(w[k] - z[k], 0.7 * std::sin(static_cast<double>(k + 1) * kPi / 3000.0), 1e-12);
  }
  EXPECT_LE((w - z).lpNorm<Eigen::Infinity>(), 0.7 + 1e-12);
}

TEST(BaselineWander, ZeroAmpIsBitExact) {
  const auto x = gaussian(500, 10);
  EXPECT_EQ(add_baseline_wander(x, 0.0), x);
  EXPECT_THROW(add_baseline_wander(x, -0.1), ConfigError);
}

TEST(WhiteNoise, StatisticsAndDeterminism) {
  const Eigen::VectorXd x = Eigen::VectorXd::Zero(10000);
  const auto y = add_white_noise(x, 1.0, 42);
  const double mean = y.mean();
  const double stdev = std::sqrt((y.array() - mean).square().sum() / (y.size() - 1.0));
  EXPECT_GT(mean, -0.05);
  EXPECT_LT(mean, 0.05);
  EXPECT_GT(stdev, 0.97);
  EXPECT_LT(stdev, 1.03);
  EXPECT_EQ(add_white_noise(x, 1.0, 42), y);
  EXPECT_NE(add_white_noise(x, 1.0, 43), y);
}

TEST(WhiteNoise, ZeroAmpIsBitExact) {
  const auto x = gaussian(500, 11);
  EXPECT_EQ(add_white_noise(x, 0.0, 5), x);
  EXPECT_THROW(add_white_noise(x, -1.0, 5), ConfigError);
}

TEST(Bands, LabelsAndCatalog) {
  const auto bands = default_bands(300.0);
  EXPECT_EQ(bands[0].label(300.0), "<0.5Hz");
  EXPECT_EQ(bands[1].label(300.0), "0.5-50Hz");
  EXPECT_EQ(bands[2].label(300.0), "10-50Hz");
  EXPECT_EQ(bands[3].label(300.0), ">50Hz");
  for (const auto& preset : band_catalog(300.0)) {
    EXPECT_NO_THROW(validate_band(preset.band, 300.0)) << preset.name;
  }
}

TEST(Bands, ParseFormatRoundTrip) {
  const auto bands = parse_bands("# presets\n0,0.5\n0.5, 50\n\n10,50  # qrs\n50,150\n");
  ASSERT_EQ(bands.size(), 4u);
  EXPECT_EQ(bands, default_bands(300.0));
  EXPECT_EQ(parse_bands(format_bands(bands)), bands);
  EXPECT_THROW(parse_bands("1,2,3\n"), Error);
  EXPECT_THROW(parse_bands("a,b\n"), Error);
  EXPECT_THROW(parse_bands(""), Error);
}
