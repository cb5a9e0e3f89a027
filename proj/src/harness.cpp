#include "mina/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "mina/dsp.hpp"
#include "mina/error.hpp"
#include "mina/nn.hpp"
#include "mina/rng.hpp"
#include "mina/text.hpp"

namespace mina {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (seeds.empty()) throw ConfigError("train.seeds must list at least one seed");
}

KeyValues TrainConfig::to_key_values() const {
  std::string seed_list;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) seed_list += ',';
    seed_list += std::to_string(seeds[i]);
  }
  return {{"batch_size", std::to_string(batch_size)},
          {"max_epochs", std::to_string(max_epochs)},
          {"lr", format_double(lr)},
          {"patience", std::to_string(patience)},
          {"seeds", seed_list}};
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
  auto count = [&](const char* field) {
    const auto v = parse_integer(value);
    if (!v || *v < 0) {
      throw ConfigError(std::string("train.") + field + ": expected a non-negative integer, got '" +
                        std::string(value) + "'");
    }
    return static_cast<std::size_t>(*v);
  };
  if (key == "batch_size") {
    batch_size = count("batch_size");
  } else if (key == "max_epochs") {
    max_epochs = count("max_epochs");
  } else if (key == "patience") {
    patience = count("patience");
  } else if (key == "lr") {
    const auto v = parse_double(value);
    if (!v) throw ConfigError("train.lr: expected a number, got '" + std::string(value) + "'");
    lr = *v;
  } else if (key == "seeds") {
    seeds.clear();
    for (auto item : split(value, ',')) {
      const auto v = parse_integer(item);
      if (!v || *v < 0) {
        throw ConfigError("train.seeds: bad seed '" + std::string(item) + "'");
      }
      seeds.push_back(static_cast<std::uint64_t>(*v));
    }
  } else {
    return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

Metrics metrics_from_scores(std::span<const double> scores, std::span<const int> labels) {
  return {roc_auc(scores, labels), pr_auc(scores, labels), f1_score(scores, labels)};
}

std::vector<double> positive_scores(const MinaModel& model, std::span<const PreparedRecord> records) {
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& rec : records) scores.push_back(model.predict(rec).p[1]);
  return scores;
}

namespace {

std::vector<int> labels_of_prepared(std::span<const PreparedRecord> records) {
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& rec : records) labels.push_back(rec.label);
  return labels;
}

}  // namespace

Metrics evaluate(const MinaModel& model, std::span<const PreparedRecord> records) {
  if (records.empty()) throw ConfigError("evaluate: no records");
  const auto scores = positive_scores(model, records);
  const auto labels = labels_of_prepared(records);
  return metrics_from_scores(scores, labels);
}

Metrics evaluate(const MinaModel& model, std::span<const EcgRecord> records) {
  const Preprocessor prep(model.config());
  const auto prepared = prep.prepare_all(records);
  return evaluate(model, std::span<const PreparedRecord>(prepared));
}

TrainResult train_prepared(std::span<const PreparedRecord> train_set,
                           std::span<const PreparedRecord> validation_set,
                           const ModelConfig& model_config, const TrainConfig& train_config,
                           std::uint64_t seed, const EpochCallback& on_epoch) {
  train_config.validate();
  model_config.validate();
  if (train_set.empty() || validation_set.empty()) {
    throw ConfigError("train: training and validation sets must be non-empty");
  }
  const auto train_labels = labels_of_prepared(train_set);
  const auto val_labels = labels_of_prepared(validation_set);
  const Eigen::VectorXd class_w = class_weights(train_labels, model_config.num_classes).w;

  MinaModel model(model_config, mix_seed(seed, 0x1417));
  ModelParams grads = ModelParams::zeros_like(model.params());
  const auto refs = param_refs(model_config, model.params(), grads);
  nn::AdamState adam;
  adam.lr = train_config.lr;

  TrainResult result;
  result.best_params = model.params();
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  ForwardTrace trace;
  for (std::size_t epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Pcg32 shuffle_rng(mix_seed(seed, epoch), 0x5417ULL);
    shuffle_rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += train_config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + train_config.batch_size);
      const double scale = 1.0 / static_cast<double>(stop - start);
      grads.set_zero();
      for (std::size_t b = start; b < stop; ++b) {
        const auto& rec = train_set[order[b]];
        ForwardOptions opts;
        opts.training = true;
        opts.dropout_seed = mix_seed(mix_seed(seed, epoch), order[b]);
        model.forward(rec, opts, &trace);
        loss_sum += model.backward(trace, rec.label, class_w, grads, scale);
      }
      nn::adam_step(refs, adam);
    }

    EpochRecord row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_set.size());
    const auto scores = positive_scores(model, validation_set);
    row.validation.pr_auc = pr_auc(scores, val_labels);
    row.validation.f1 = f1_score(scores, val_labels);
    const bool both = std::count(val_labels.begin(), val_labels.end(), 1) > 0 &&
                      std::count(val_labels.begin(), val_labels.end(), 0) > 0;
    row.validation.roc_auc =
        both ? roc_auc(scores, val_labels) : std::numeric_limits<double>::quiet_NaN();
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);

    if (row.validation.pr_auc > best_score) {
      best_score = row.validation.pr_auc;
      result.best_params = model.params();
      result.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= train_config.patience) break;
  }
  return result;
}

TrainResult train(const DatasetSplit& split, const ModelConfig& model_config,
                  const TrainConfig& train_config, std::uint64_t seed,
                  const EpochCallback& on_epoch) {
  const Preprocessor prep(model_config);
  const auto train_set = prep.prepare_all(split.train);
  const auto val_set = prep.prepare_all(split.validation);
  return train_prepared(train_set, val_set, model_config, train_config, seed, on_epoch);
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write history: " + path.string());
  out << "epoch,train_loss,val_roc_auc,val_pr_auc,val_f1\n";
  for (const auto& row : history) {
    out << row.epoch << ',' << format_double(row.train_loss) << ','
        << format_double(row.validation.roc_auc) << ',' << format_double(row.validation.pr_auc)
        << ',' << format_double(row.validation.f1) << '\n';
  }
}

MetricSummary summarize(std::span<const double> values) {
  if (values.empty()) throw ConfigError("summarize: no values");
  MetricSummary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*lo == *hi) {
    s.mean = *lo;
  } else if (values.size() > 1) {
    double ss = 0.0;
    for (const double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stdev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::vector<ReportRow> multi_seed_report(const DatasetSplit& split,
                                         std::span<const ModelConfig> configs,
                                         const TrainConfig& train_config,
                                         std::span<const std::uint64_t> seeds) {
  if (seeds.size() < 2) throw ConfigError("multi_seed_report: needs at least two seeds");
  std::vector<ReportRow> rows;
  for (const auto& cfg : configs) {
    const Preprocessor prep(cfg);
    const auto train_set = prep.prepare_all(split.train);
    const auto val_set = prep.prepare_all(split.validation);
    const auto test_set = prep.prepare_all(split.test);
    ReportRow row;
    row.variant = to_string(cfg.variant);
    std::vector<double> roc;
    std::vector<double> pr;
    std::vector<double> f1;
    for (const auto seed : seeds) {
      const auto result = train_prepared(train_set, val_set, cfg, train_config, seed);
      const MinaModel model(cfg, result.best_params);
      const auto m = evaluate(model, std::span<const PreparedRecord>(test_set));
      row.per_seed.push_back(m);
      roc.push_back(m.roc_auc);
      pr.push_back(m.pr_auc);
      f1.push_back(m.f1);
    }
    row.roc_auc = summarize(roc);
    row.pr_auc = summarize(pr);
    row.f1 = summarize(f1);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_report(std::span<const ReportRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "variant" << std::setw(20) << "ROC-AUC" << std::setw(20)
     << "PR-AUC" << "F1\n";
  auto cell = [](const MetricSummary& s) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(4) << s.mean << " +/- " << s.stdev;
    return c.str();
  };
  for (const auto& row : rows) {
    os << std::left << std::setw(8) << row.variant << std::setw(20) << cell(row.roc_auc)
       << std::setw(20) << cell(row.pr_auc) << cell(row.f1) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

nn::GradCheckReport model_gradcheck(const ModelConfig& config,
                                    const ModelGradCheckOptions& options) {
  config.validate();
  if (options.label < 0 || options.label >= config.num_classes) {
    throw ConfigError("gradcheck: label out of range");
  }
  const EcgRecord record = synth_ecg(options.label, options.seed, config.n, config.sampling_rate);
  const PreparedRecord prepared = Preprocessor(config).prepare(record);

  MinaModel model(config, mix_seed(options.seed, 0x9c));
  Eigen::VectorXd class_w = Eigen::VectorXd::LinSpaced(config.num_classes, 0.8, 1.6);
  ModelParams grads = ModelParams::zeros_like(model.params());
  ForwardTrace trace;
  model.forward(prepared, {}, &trace);
  model.backward(trace, prepared.label, class_w, grads);

  const auto refs = param_refs(config, model.params(), grads);
  if (options.corrupt != 0.0) refs.front().grad[0] += options.corrupt;
  return nn::finite_diff_check([&] { return model.loss(prepared, class_w); }, refs,
                               options.check);
}

std::string format_gradcheck(const nn::GradCheckReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "tensor" << std::setw(8) << "index" << std::setw(25)
     << "analytic" << std::setw(25) << "numeric" << "rel_error\n";
  auto line = [&](const nn::GradCheckEntry& e) {
    os << std::left << std::setw(18) << e.name << std::setw(8) << e.index << std::setw(25)
       << format_double(e.analytic) << std::setw(25) << format_double(e.numeric)
       << format_double(e.rel_error) << '\n';
  };
  for (const auto& e : report.per_param) line(e);
  os << "coordinates checked: " << report.coordinates << '\n';
  os << "max relative error: " << format_double(report.max_rel_error) << " at "
     << report.worst.name << '[' << report.worst.index << "]\n";
  return os.str();
}

// ---------------------------------------------------------------------------

std::string to_string(Interferer kind) { return kind == Interferer::Wander ? "wander" : "noise"; }

Interferer parse_interferer(std::string_view name) {
  const auto n = trim(name);
  if (n == "wander") return Interferer::Wander;
  if (n == "noise") return Interferer::Noise;
  throw ConfigError("unknown interferer '" + std::string(name) + "' (expected wander or noise)");
}

Eigen::VectorXd perturb(const Eigen::Ref<const Eigen::VectorXd>& x, const Perturbation& p) {
  return p.kind == Interferer::Wander ? dsp::add_baseline_wander(x, p.amp)
                                      : dsp::add_white_noise(x, p.amp, p.seed);
}

RobustnessCurve robustness_sweep(const MinaModel& model, std::span<const EcgRecord> records,
                                 Interferer kind, std::span<const double> amplitudes,
                                 std::uint64_t seed) {
  if (amplitudes.empty() || amplitudes[0] != 0.0) {
    throw ConfigError("robustness_sweep: the first amplitude must be 0");
  }
  for (std::size_t i = 1; i < amplitudes.size(); ++i) {
    if (amplitudes[i] < amplitudes[i - 1]) {
      throw ConfigError("robustness_sweep: amplitudes must be ascending");
    }
  }
  if (records.empty()) throw ConfigError("robustness_sweep: no records");

  const Preprocessor prep(model.config());
  const auto labels = labels_of(records);
  RobustnessCurve curve;
  curve.kind = kind;
  curve.amplitudes.assign(amplitudes.begin(), amplitudes.end());
  for (std::size_t a = 0; a < amplitudes.size(); ++a) {
    const std::uint64_t amp_seed = mix_seed(seed, a);
    std::vector<double> scores;
    scores.reserve(records.size());
    for (std::size_t r = 0; r < records.size(); ++r) {
      EcgRecord noisy = records[r];
      noisy.samples = perturb(records[r].samples, {kind, amplitudes[a], mix_seed(amp_seed, r)});
      scores.push_back(model.predict(prep.prepare(noisy)).p[1]);
    }
    curve.pr_auc.push_back(pr_auc(scores, labels));
  }
  for (const double v : curve.pr_auc) {
    curve.drop_percent.push_back(v == curve.pr_auc[0] ? 0.0
                                                      : 100.0 * (curve.pr_auc[0] - v) / curve.pr_auc[0]);
  }
  return curve;
}

void write_robustness_csv(const std::filesystem::path& path, const RobustnessCurve& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write robustness curve: " + path.string());
  out << "amp,pr_auc,drop_percent\n";
  for (std::size_t i = 0; i < curve.amplitudes.size(); ++i) {
    out << format_double(curve.amplitudes[i]) << ',' << format_double(curve.pr_auc[i]) << ','
        << format_double(curve.drop_percent[i]) << '\n';
  }
}

double signal_stdev(std::span<const EcgRecord> records) {
  double sum = 0.0;
  double sq = 0.0;
  double count = 0.0;
  for (const auto& rec : records) {
    sum += rec.samples.sum();
    sq += rec.samples.squaredNorm();
    count += static_cast<double>(rec.samples.size());
  }
  if (count < 2) throw ConfigError("signal_stdev: not enough samples");
  const double mean = sum / count;
  return std::sqrt(std::max(0.0, sq / count - mean * mean));
}

// ---------------------------------------------------------------------------

std::vector<SampleRange> align_attention(Eigen::Index segments, Eigen::Index conv_length,
                                         Eigen::Index n) {
  if (segments < 1 || conv_length < 1 || n < 1) {
    throw ConfigError("align_attention: dimensions must be >= 1");
  }
  const Eigen::Index total = segments * conv_length;
  std::vector<SampleRange> out;
  out.reserve(static_cast<std::size_t>(total));
  for (Eigen::Index j = 0; j < total; ++j) {
    const Eigen::Index start = n * j / total;
    const Eigen::Index end = (n * (j + 1) + total - 1) / total;
    out.push_back({std::clamp<Eigen::Index>(start, 0, n), std::clamp<Eigen::Index>(end, 0, n)});
  }
  return out;
}

namespace {

nlohmann::json vector_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

nlohmann::json explain_signal(const EcgRecord& record, const MinaModel& model) {
  const auto& cfg = model.config();
  const Preprocessor prep(cfg);
  const auto bank = prep.decompose(record);
  const auto [pred, att] = model.forward(prep.prepare(record));
  const Eigen::Index m = cfg.num_segments();
  const Eigen::Index n_conv = cfg.conv_length();
  const auto ranges = align_attention(m, n_conv, cfg.n);

  nlohmann::json doc;
  doc["samples"] = vector_json(record.samples);
  nlohmann::json channels = nlohmann::json::array();
  nlohmann::json gamma = nlohmann::json::array();
  for (Eigen::Index i = 0; i < cfg.num_channels(); ++i) {
    const auto& band = cfg.bands[static_cast<std::size_t>(i)];
    const std::string label = band.label(cfg.sampling_rate);
    nlohmann::json ch;
    ch["band"] = label;
    ch["band_hz"] = {band.low, band.high};
    ch["samples"] = vector_json(bank.channels.row(i).transpose());
    nlohmann::json alpha = nlohmann::json::array();
    const auto& a = att.alpha[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < m; ++k) {
      for (Eigen::Index j = 0; j < n_conv; ++j) {
        const auto& r = ranges[static_cast<std::size_t>(k * n_conv + j)];
        alpha.push_back({{"start", r.start}, {"end", r.end}, {"weight", a(k, j)}});
      }
    }
    ch["alpha"] = std::move(alpha);
    nlohmann::json beta = nlohmann::json::array();
    const auto& b = att.beta[static_cast<std::size_t>(i)];
    for (Eigen::Index k = 0; k < m; ++k) {
      beta.push_back({{"segment", k},
                      {"start", k * cfg.segment_length},
                      {"end", (k + 1) * cfg.segment_length},
                      {"weight", b[k]}});
    }
    ch["beta"] = std::move(beta);
    channels.push_back(std::move(ch));
    gamma.push_back({{"band", label}, {"weight", att.gamma[i]}});
  }
  doc["channels"] = std::move(channels);
  doc["gamma"] = std::move(gamma);
  doc["p"] = vector_json(pred.p);
  return doc;
}

}  // namespace

nlohmann::json export_explanation(const EcgRecord& record, const MinaModel& model,
                                  const std::optional<Perturbation>& perturbation) {
  nlohmann::json doc = explain_signal(record, model);
  doc["id"] = record.id;
  doc["label"] = record.label;
  doc["variant"] = to_string(model.config().variant);
  if (perturbation) {
    EcgRecord noisy = record;
    noisy.samples = perturb(record.samples, *perturbation);
    nlohmann::json primed = explain_signal(noisy, model);
    primed["interferer"] = to_string(perturbation->kind);
    primed["amp"] = perturbation->amp;
    primed["seed"] = perturbation->seed;
    doc["perturbed"] = std::move(primed);
  }
  return doc;
}

}  // namespace mina
