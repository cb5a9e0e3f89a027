#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mina {

inline constexpr double kDefaultSamplingRate = 300.0;
inline constexpr Eigen::Index kDefaultLength = 3000;

/// One labelled single-lead trace, samples in millivolts.
struct EcgRecord {
  std::string id;
  Eigen::VectorXd samples;
  int label = 0;
  double sampling_rate = kDefaultSamplingRate;
};

struct SplitRatios {
  double train = 0.75;
  double validation = 0.10;
  double test = 0.15;
};

struct DatasetSplit {
  std::vector<EcgRecord> train;
  std::vector<EcgRecord> validation;
  std::vector<EcgRecord> test;
  std::uint64_t seed = 0;
};

struct ClassWeights {
  Eigen::VectorXd w;
};

/// Crops to the first `n` samples or zero-pads the tail up to `n`.
Eigen::VectorXd preprocess(std::span<const double> samples, Eigen::Index n);

/// Reads the record CSV (`id,label,s_0,s_1,...`, optional header line).
/// Every record is passed through preprocess().
std::vector<EcgRecord> load_dataset(const std::filesystem::path& path, Eigen::Index n,
                                    double sampling_rate = kDefaultSamplingRate);

/// Writes records in the same CSV format load_dataset() reads.
void save_dataset(const std::filesystem::path& path, std::span<const EcgRecord> records);

/// Deterministic stratified split. Split sizes follow largest-remainder
/// rounding of the ratios; per-class counts stay within one record of
/// proportional.
DatasetSplit split_dataset(std::span<const EcgRecord> records, const SplitRatios& ratios,
                           std::uint64_t seed);

/// Writes train_ids.txt, validation_ids.txt and test_ids.txt into `dir`.
void write_split_manifest(const std::filesystem::path& dir, const DatasetSplit& split);

/// Inverse-frequency weights: w_c = total / (C * count_c).
ClassWeights class_weights(std::span<const int> labels, int num_classes);

std::vector<int> labels_of(std::span<const EcgRecord> records);

/// Synthetic ECG-like trace. Class 0 is a regular sinus-like beat train with
/// P waves; class 1 has irregular RR intervals, no P waves and fibrillatory
/// ripple. Deterministic in (class_id, seed).
EcgRecord synth_ecg(int class_id, std::uint64_t seed, Eigen::Index n = kDefaultLength,
                    double sampling_rate = kDefaultSamplingRate);

/// `count` synthetic records, round(count * positive_fraction) of class 1,
/// interleaved so any prefix is roughly balanced.
std::vector<EcgRecord> synth_dataset(std::size_t count, double positive_fraction,
                                     std::uint64_t seed, Eigen::Index n = kDefaultLength,
                                     double sampling_rate = kDefaultSamplingRate);

}  // namespace mina
