#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "mina/dataset.hpp"
#include "mina/harness.hpp"
#include "mina/model.hpp"

namespace mina {

/// Everything a CLI run needs. Stored as a flat key-value file:
///
///   # comment
///   [data]
///   path = records.csv
///   [model]
///   variant = mina
///
/// Section headers prefix the keys that follow ("model.variant").
struct RunConfig {
  std::filesystem::path data_path;
  std::filesystem::path output_dir = "run";
  SplitRatios ratios;
  std::uint64_t split_seed = 7;
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;

  /// Applies one dotted key. Throws ConfigError naming the key when it is
  /// unknown or its value is invalid.
  void set(std::string_view key, std::string_view value);

  /// Value checks plus existence of the data file.
  void validate() const;

  KeyValues to_key_values() const;
  std::string serialize() const;
};

RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Splits "key=value" (used for --set overrides).
std::pair<std::string, std::string> split_assignment(std::string_view text);

std::string format_ratios(const SplitRatios& r);
SplitRatios parse_ratios(std::string_view text);

}  // namespace mina
