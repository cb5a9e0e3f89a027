#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mina/dataset.hpp"
#include "mina/metrics.hpp"
#include "mina/model.hpp"
#include "mina/nn.hpp"

namespace mina {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t max_epochs = 50;
  double lr = 0.003;
  std::size_t patience = 10;  // epochs without validation PR-AUC gain before stopping
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  void validate() const;
  KeyValues to_key_values() const;
  bool set(std::string_view key, std::string_view value);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  Metrics validation;
};

struct TrainResult {
  ModelParams best_params;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam on weighted cross entropy (weights from the train split),
/// selecting the epoch with the best validation PR-AUC. Fully determined by
/// `seed`.
TrainResult train(const DatasetSplit& split, const ModelConfig& model_config,
                  const TrainConfig& train_config, std::uint64_t seed,
                  const EpochCallback& on_epoch = {});

/// Same as train() on already prepared records.
TrainResult train_prepared(std::span<const PreparedRecord> train_set,
                           std::span<const PreparedRecord> validation_set,
                           const ModelConfig& model_config, const TrainConfig& train_config,
                           std::uint64_t seed, const EpochCallback& on_epoch = {});

/// Positive-class probabilities from inference-mode forward passes.
std::vector<double> positive_scores(const MinaModel& model, std::span<const PreparedRecord> records);

Metrics evaluate(const MinaModel& model, std::span<const PreparedRecord> records);
Metrics evaluate(const MinaModel& model, std::span<const EcgRecord> records);

/// Computes all three metrics from collected scores.
Metrics metrics_from_scores(std::span<const double> scores, std::span<const int> labels);

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

struct MetricSummary {
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation
};

struct ReportRow {
  std::string variant;
  MetricSummary roc_auc;
  MetricSummary pr_auc;
  MetricSummary f1;
  std::vector<Metrics> per_seed;
};

MetricSummary summarize(std::span<const double> values);

/// Trains and tests every config once per seed and aggregates test metrics.
std::vector<ReportRow> multi_seed_report(const DatasetSplit& split,
                                         std::span<const ModelConfig> configs,
                                         const TrainConfig& train_config,
                                         std::span<const std::uint64_t> seeds);

/// "variant  roc_auc  pr_auc  f1" table with mean +/- stdev entries.
std::string format_report(std::span<const ReportRow> rows);

// ---------------------------------------------------------------------------

struct ModelGradCheckOptions {
  std::uint64_t seed = 1;
  int label = 1;
  /// Adds this offset to one analytic gradient coordinate before comparing;
  /// a working checker must then fail.
  double corrupt = 0.0;
  nn::GradCheckOptions check;
};

/// Single-record (batch 1) gradient check of the full model in inference
/// mode against central differences of the weighted cross entropy.
nn::GradCheckReport model_gradcheck(const ModelConfig& config,
                                    const ModelGradCheckOptions& options = {});

std::string format_gradcheck(const nn::GradCheckReport& report);

// ---------------------------------------------------------------------------

enum class Interferer { Wander, Noise };

std::string to_string(Interferer kind);
Interferer parse_interferer(std::string_view name);

struct Perturbation {
  Interferer kind = Interferer::Wander;
  double amp = 0.0;
  std::uint64_t seed = 0;
};

Eigen::VectorXd perturb(const Eigen::Ref<const Eigen::VectorXd>& x, const Perturbation& p);

struct RobustnessCurve {
  Interferer kind = Interferer::Wander;
  std::vector<double> amplitudes;
  std::vector<double> pr_auc;
  std::vector<double> drop_percent;  // 100 * (pr_auc[0] - pr_auc[i]) / pr_auc[0]
};

/// Evaluates PR-AUC with every record perturbed at each amplitude. Noise at
/// amplitude i uses seed mix(seed, i) so different models see identical
/// noise.
RobustnessCurve robustness_sweep(const MinaModel& model, std::span<const EcgRecord> records,
                                 Interferer kind, std::span<const double> amplitudes,
                                 std::uint64_t seed);

void write_robustness_csv(const std::filesystem::path& path, const RobustnessCurve& curve);

/// Pooled standard deviation of all samples of all records.
double signal_stdev(std::span<const EcgRecord> records);

// ---------------------------------------------------------------------------

struct SampleRange {
  Eigen::Index start = 0;
  Eigen::Index end = 0;
  bool operator==(const SampleRange&) const = default;
};

/// Maps flattened beat attention position j (of M*N) to the input range
/// [floor(n j / (M N)), ceil(n (j + 1) / (M N))], clamped to [0, n].
std::vector<SampleRange> align_attention(Eigen::Index segments, Eigen::Index conv_length,
                                         Eigen::Index n);

/// JSON explanation of one record: raw and per-channel samples, aligned
/// alpha/beta, gamma per band and p. With a perturbation, the same fields
/// for the perturbed signal appear under "perturbed".
nlohmann::json export_explanation(const EcgRecord& record, const MinaModel& model,
                                  const std::optional<Perturbation>& perturbation = std::nullopt);

}  // namespace mina
