#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mina/config.hpp"
#include "mina/dataset.hpp"
#include "mina/error.hpp"
#include "mina/harness.hpp"
#include "mina/model.hpp"
#include "mina/nn.hpp"
#include "mina/text.hpp"

namespace fs = std::filesystem;
using namespace mina;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitContract = 1;
constexpr int kExitIo = 2;

struct Overrides {
  std::vector<std::string> assignments;

  void apply(RunConfig& cfg) const {
    for (const auto& a : assignments) {
      const auto [key, value] = split_assignment(a);
      cfg.set(key, value);
    }
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<double> parse_number_list(std::string_view text, const std::string& what) {
  std::vector<double> values;
  for (auto item : split(text, ',')) {
    const auto v = parse_double(item);
    if (!v) throw ConfigError(what + ": bad number '" + std::string(item) + "'");
    values.push_back(*v);
  }
  if (values.empty()) throw ConfigError(what + ": empty list");
  return values;
}

nlohmann::json metrics_json(const Metrics& m) {
  return {{"roc_auc", m.roc_auc}, {"pr_auc", m.pr_auc}, {"f1", m.f1}};
}

// Checkpoint plus the split recorded at training time.
struct LoadedModel {
  MinaModel model;
  SplitRatios ratios;
  std::uint64_t split_seed = 0;
};

LoadedModel load_model(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path.string());
  const auto ckpt = nn::load_checkpoint(path);
  auto [config, params] = from_checkpoint(ckpt);
  LoadedModel out{MinaModel(config, std::move(params)), {}, 7};
  for (const auto& [key, value] : ckpt.header) {
    if (key == "split.ratios") out.ratios = parse_ratios(value);
    if (key == "split.seed") {
      const auto v = parse_integer(value);
      if (!v || *v < 0) throw ParseError("checkpoint split.seed is not a non-negative integer");
      out.split_seed = static_cast<std::uint64_t>(*v);
    }
  }
  return out;
}

std::vector<EcgRecord> select_split(std::vector<EcgRecord> records, const std::string& name,
                                    const SplitRatios& ratios, std::uint64_t seed) {
  if (name == "all") return records;
  auto split = split_dataset(records, ratios, seed);
  if (name == "train") return std::move(split.train);
  if (name == "validation") return std::move(split.validation);
  if (name == "test") return std::move(split.test);
  throw ConfigError("--split: expected train, validation, test or all, got '" + name + "'");
}

struct DataSelection {
  fs::path data;
  std::string split = "test";
  std::optional<std::uint64_t> split_seed;
  std::optional<std::string> ratios;

  void add_options(CLI::App& cmd) {
    cmd.add_option("--data", data, "record CSV")->required();
    cmd.add_option("--split", split, "train, validation, test or all")->capture_default_str();
    cmd.add_option("--split-seed", split_seed, "override the split seed stored in the checkpoint");
    cmd.add_option("--ratios", ratios, "override split ratios, e.g. 0.8,0.1,0.1");
  }

  std::vector<EcgRecord> load(const LoadedModel& lm) const {
    if (!fs::exists(data)) throw IoError("data file not found: " + data.string());
    const auto& cfg = lm.model.config();
    auto records = load_dataset(data, cfg.n, cfg.sampling_rate);
    const SplitRatios r = ratios ? parse_ratios(*ratios) : lm.ratios;
    auto chosen = select_split(std::move(records), split, r, split_seed.value_or(lm.split_seed));
    if (chosen.empty()) throw ConfigError("split '" + split + "' has no records");
    return chosen;
  }
};

// ---------------------------------------------------------------------------

int cmd_synth(std::size_t count, double balance, std::uint64_t seed, Eigen::Index length,
              double fs_hz, const fs::path& out) {
  if (count == 0) throw ConfigError("--count must be positive");
  if (!(balance >= 0.0 && balance <= 1.0)) throw ConfigError("--balance must lie in [0, 1]");
  if (length < 1) throw ConfigError("--length must be positive");
  const auto records = synth_dataset(count, balance, seed, length, fs_hz);
  save_dataset(out, records);
  std::size_t positives = 0;
  for (const auto& r : records) positives += r.label == 1;
  std::cout << "wrote " << records.size() << " records (" << positives << " positive) to "
            << out.string() << '\n';
  return kExitOk;
}

int cmd_train(const fs::path& config_path, const Overrides& overrides) {
  RunConfig cfg = load_run_config(config_path);
  overrides.apply(cfg);
  cfg.validate();

  const auto records = load_dataset(cfg.data_path, cfg.model.n, cfg.model.sampling_rate);
  const auto split = split_dataset(records, cfg.ratios, cfg.split_seed);
  fs::create_directories(cfg.output_dir);
  write_split_manifest(cfg.output_dir, split);
  write_text(cfg.output_dir / "config.toml", cfg.serialize());

  std::cout << "train " << split.train.size() << ", validation " << split.validation.size()
            << ", test " << split.test.size() << " records; variant "
            << to_string(cfg.model.variant) << '\n';
  const auto result = train(split, cfg.model, cfg.train, cfg.seed, [](const EpochRecord& row) {
    std::cout << "epoch " << row.epoch << "  loss " << format_double(row.train_loss)
              << "  val_pr_auc " << format_double(row.validation.pr_auc) << '\n'
              << std::flush;
  });

  const KeyValues metadata{{"seed", std::to_string(cfg.seed)},
                           {"split.seed", std::to_string(cfg.split_seed)},
                           {"split.ratios", format_ratios(cfg.ratios)},
                           {"best_epoch", std::to_string(result.best_epoch)}};
  nn::save_checkpoint(cfg.output_dir / "model.ckpt",
                      to_checkpoint(cfg.model, result.best_params, metadata));
  write_history_csv(cfg.output_dir / "history.csv", result.history);

  std::cout << "best epoch " << result.best_epoch << "; checkpoint "
            << (cfg.output_dir / "model.ckpt").string() << '\n';
  if (!split.test.empty()) {
    const MinaModel best(cfg.model, result.best_params);
    const auto m = evaluate(best, std::span<const EcgRecord>(split.test));
    std::cout << "test " << metrics_json(m).dump() << '\n';
  }
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const DataSelection& sel,
             const std::optional<fs::path>& out) {
  const auto lm = load_model(checkpoint);
  const auto records = sel.load(lm);
  const Metrics m = evaluate(lm.model, std::span<const EcgRecord>(records));
  nlohmann::json report = metrics_json(m);
  report["split"] = sel.split;
  report["records"] = records.size();
  report["variant"] = to_string(lm.model.config().variant);
  const std::string text = report.dump(2) + "\n";
  if (out) write_text(*out, text);
  std::cout << text;
  return kExitOk;
}

int cmd_perturb(const fs::path& checkpoint, const DataSelection& sel, const std::string& kind,
                const std::optional<std::string>& amps, const std::optional<std::string>& sigma_amps,
                std::uint64_t seed, const fs::path& out) {
  if (amps.has_value() == sigma_amps.has_value()) {
    throw ConfigError("give exactly one of --amps and --sigma-amps");
  }
  const Interferer interferer = parse_interferer(kind);
  const auto lm = load_model(checkpoint);
  const auto records = sel.load(lm);
  std::vector<double> amplitudes;
  if (amps) {
    amplitudes = parse_number_list(*amps, "--amps");
  } else {
    const double sigma = signal_stdev(records);
    for (const double k : parse_number_list(*sigma_amps, "--sigma-amps")) {
      amplitudes.push_back(k * sigma);
    }
  }
  const auto curve = robustness_sweep(lm.model, records, interferer, amplitudes, seed);
  write_robustness_csv(out, curve);
  for (std::size_t i = 0; i < curve.amplitudes.size(); ++i) {
    std::cout << "amp " << format_double(curve.amplitudes[i]) << "  pr_auc "
              << format_double(curve.pr_auc[i]) << "  drop% "
              << format_double(curve.drop_percent[i]) << '\n';
  }
  return kExitOk;
}

int cmd_explain(const fs::path& checkpoint, const fs::path& data, const std::string& record_id,
                const std::optional<std::string>& kind, double amp, std::uint64_t seed,
                const std::optional<fs::path>& out) {
  const auto lm = load_model(checkpoint);
  if (!fs::exists(data)) throw IoError("data file not found: " + data.string());
  const auto& mc = lm.model.config();
  const auto records = load_dataset(data, mc.n, mc.sampling_rate);
  const EcgRecord* record = nullptr;
  for (const auto& r : records) {
    if (r.id == record_id) record = &r;
  }
  if (!record) throw ConfigError("--record: no record with id '" + record_id + "'");

  std::optional<Perturbation> perturbation;
  if (kind) perturbation = Perturbation{parse_interferer(*kind), amp, seed};
  const auto doc = export_explanation(*record, lm.model, perturbation);
  const std::string text = doc.dump() + "\n";
  if (out) {
    write_text(*out, text);
    std::cout << "wrote explanation of '" << record_id << "' (p = " << doc["p"].dump() << ") to "
              << out->string() << '\n';
  } else {
    std::cout << text;
  }
  return kExitOk;
}

int cmd_gradcheck(const std::optional<fs::path>& config_path, const Overrides& overrides,
                  std::uint64_t seed, int label, double corrupt, double tolerance) {
  ModelConfig model = tiny_config();
  if (config_path || !overrides.assignments.empty()) {
    RunConfig cfg;
    if (config_path) cfg = load_run_config(*config_path);
    else cfg.model = model;
    overrides.apply(cfg);
    model = cfg.model;
  }
  ModelGradCheckOptions opts;
  opts.seed = seed;
  opts.label = label;
  opts.corrupt = corrupt;
  opts.check.seed = seed;
  const auto report = model_gradcheck(model, opts);
  std::cout << "variant " << to_string(model.variant) << ", "
            << param_count(model, ModelParams::init(model, 0)) << " parameters\n"
            << format_gradcheck(report);
  const bool ok = report.max_rel_error <= tolerance;
  std::cout << (ok ? "PASS" : "FAIL") << " (tolerance " << format_double(tolerance) << ")\n";
  return ok ? kExitOk : kExitContract;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilevel knowledge-guided attention for single-lead ECG"};
  app.require_subcommand(1);
  int status = kExitOk;

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic record CSV");
  std::size_t count = 0;
  double balance = 0.5;
  std::uint64_t synth_seed = 1;
  Eigen::Index length = kDefaultLength;
  double fs_hz = kDefaultSamplingRate;
  fs::path synth_out;
  synth->add_option("--count", count, "number of records")->required();
  synth->add_option("--balance", balance, "fraction of class-1 records")->capture_default_str();
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--length", length, "samples per record")->capture_default_str();
  synth->add_option("--fs", fs_hz, "sampling rate in Hz")->capture_default_str();
  synth->add_option("--out", synth_out, "output CSV")->required();
  synth->callback(
      [&] { status = cmd_synth(count, balance, synth_seed, length, fs_hz, synth_out); });

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
  fs::path train_config;
  Overrides train_overrides;
  std::optional<std::string> out_dir;
  train_cmd->add_option("--config", train_config, "run config file")->required();
  train_cmd->add_option("--set", train_overrides.assignments, "override, e.g. train.max_epochs=5");
  train_cmd->add_option("--out-dir", out_dir, "same as --set output.dir=...");
  train_cmd->callback([&] {
    if (out_dir) train_overrides.assignments.push_back("output.dir=" + *out_dir);
    status = cmd_train(train_config, train_overrides);
  });

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "metrics of a checkpoint on a split");
  fs::path eval_ckpt;
  DataSelection eval_sel;
  std::optional<fs::path> eval_out;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_sel.add_options(*eval_cmd);
  eval_cmd->add_option("--out", eval_out, "also write the JSON report here");
  eval_cmd->callback([&] { status = cmd_eval(eval_ckpt, eval_sel, eval_out); });

  // perturb
  auto* perturb_cmd = app.add_subcommand("perturb", "PR-AUC under increasing interference");
  fs::path perturb_ckpt;
  DataSelection perturb_sel;
  std::string kind = "wander";
  std::optional<std::string> amps;
  std::optional<std::string> sigma_amps;
  std::uint64_t perturb_seed = 1;
  fs::path perturb_out;
  perturb_cmd->add_option("--checkpoint", perturb_ckpt)->required();
  perturb_sel.add_options(*perturb_cmd);
  perturb_cmd->add_option("--kind", kind, "wander or noise")->capture_default_str();
  perturb_cmd->add_option("--amps", amps, "absolute amplitudes, e.g. 0,0.1,0.5");
  perturb_cmd->add_option("--sigma-amps", sigma_amps,
                          "amplitudes as multiples of the signal stdev, e.g. 0,0.5,2");
  perturb_cmd->add_option("--seed", perturb_seed)->capture_default_str();
  perturb_cmd->add_option("--out", perturb_out, "robustness CSV")->required();
  perturb_cmd->callback([&] {
    status = cmd_perturb(perturb_ckpt, perturb_sel, kind, amps, sigma_amps, perturb_seed,
                         perturb_out);
  });

  // explain
  auto* explain_cmd = app.add_subcommand("explain", "attention weights of one record as JSON");
  fs::path explain_ckpt;
  fs::path explain_data;
  std::string record_id;
  std::optional<std::string> explain_kind;
  double explain_amp = 0.0;
  std::uint64_t explain_seed = 1;
  std::optional<fs::path> explain_out;
  explain_cmd->add_option("--checkpoint", explain_ckpt)->required();
  explain_cmd->add_option("--data", explain_data, "record CSV")->required();
  explain_cmd->add_option("--record", record_id, "record id")->required();
  explain_cmd->add_option("--kind", explain_kind, "optional interferer: wander or noise");
  explain_cmd->add_option("--amp", explain_amp, "interferer amplitude")->capture_default_str();
  explain_cmd->add_option("--seed", explain_seed, "noise seed")->capture_default_str();
  explain_cmd->add_option("--out", explain_out, "output JSON (stdout when omitted)");
  explain_cmd->callback([&] {
    status = cmd_explain(explain_ckpt, explain_data, record_id, explain_kind, explain_amp,
                         explain_seed, explain_out);
  });

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  std::optional<fs::path> gc_config;
  Overrides gc_overrides;
  std::uint64_t gc_seed = 1;
  int gc_label = 1;
  double corrupt = 0.0;
  double tolerance = 1e-4;
  gc_cmd->add_option("--config", gc_config, "run config (model section is used)");
  gc_cmd->add_option("--set", gc_overrides.assignments, "override, e.g. model.variant=cnn");
  gc_cmd->add_option("--seed", gc_seed)->capture_default_str();
  gc_cmd->add_option("--label", gc_label)->capture_default_str();
  gc_cmd->add_option("--tolerance", tolerance)->capture_default_str();
  gc_cmd->add_option("--debug-corrupt-gradient", corrupt,
                     "add this offset to one analytic gradient coordinate");
  gc_cmd->callback([&] {
    status = cmd_gradcheck(gc_config, gc_overrides, gc_seed, gc_label, corrupt, tolerance);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitContract;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitContract;
  }
  return status;
}
