#include "mina/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mina/error.hpp"
#include "mina/rng.hpp"
#include "mina/text.hpp"

namespace mina {

Eigen::VectorXd preprocess(std::span<const double> samples, Eigen::Index n) {
  if (samples.empty()) throw ConfigError("preprocess: empty sample sequence");
  if (n < 1) throw ConfigError("preprocess: target length must be positive");
  for (const double v : samples) {
    if (!std::isfinite(v)) throw ConfigError("preprocess: samples must be finite");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  const auto keep = std::min<Eigen::Index>(n, static_cast<Eigen::Index>(samples.size()));
  for (Eigen::Index i = 0; i < keep; ++i) out[i] = samples[static_cast<std::size_t>(i)];
  return out;
}

std::vector<EcgRecord> load_dataset(const std::filesystem::path& path, Eigen::Index n,
                                    double sampling_rate) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open record file: " + path.string());

  std::vector<EcgRecord> records;
  std::string line;
  std::size_t line_no = 0;
  std::vector<double> samples;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line_no == 1 && line.starts_with("id,")) continue;

    const auto fields = split(line, ',');
    if (fields.size() < 3) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected id, label and at least one sample");
    }
    EcgRecord rec;
    rec.id = std::string(trim(fields[0]));
    rec.sampling_rate = sampling_rate;
    if (rec.id.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty id");
    const auto label = parse_int(fields[1]);
    if (!label || *label < 0) {
      throw ParseError("line " + std::to_string(line_no) + ": bad label '" +
                       std::string(fields[1]) + "'");
    }
    rec.label = *label;
    samples.clear();
    for (std::size_t f = 2; f < fields.size(); ++f) {
      const auto v = parse_double(fields[f]);
      if (!v || !std::isfinite(*v)) {
        throw ParseError("line " + std::to_string(line_no) + ": non-numeric sample at column " +
                         std::to_string(f) + " '" + std::string(fields[f]) + "'");
      }
      samples.push_back(*v);
    }
    rec.samples = preprocess(samples, n);
    records.push_back(std::move(rec));
  }
  if (records.empty()) throw ParseError("record file has no records: " + path.string());
  return records;
}

void save_dataset(const std::filesystem::path& path, std::span<const EcgRecord> records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write record file: " + path.string());
  out << "id,label,samples\n";
  for (const auto& rec : records) {
    out << rec.id << ',' << rec.label;
    for (const double s : rec.samples) out << ',' << format_double(s);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

// Largest-remainder apportionment of `total` over `ratios`.
std::array<std::size_t, 3> apportion(std::size_t total, const std::array<double, 3>& ratios) {
  std::array<std::size_t, 3> out{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double quota = static_cast<double>(total) * ratios[s];
    out[s] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    frac[s] = quota - static_cast<double>(out[s]);
    assigned += out[s];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[order[k % 3]];
  return out;
}

}  // namespace

DatasetSplit split_dataset(std::span<const EcgRecord> records, const SplitRatios& ratios,
                           std::uint64_t seed) {
  if (records.empty()) throw ConfigError("split_dataset: no records");
  const std::array<double, 3> r{ratios.train, ratios.validation, ratios.test};
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9 || *std::min_element(r.begin(), r.end()) < 0.0) {
    throw ConfigError("split_dataset: ratios must be non-negative and sum to 1");
  }

  int num_classes = 0;
  for (const auto& rec : records) num_classes = std::max(num_classes, rec.label + 1);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_class[static_cast<std::size_t>(records[i].label)].push_back(i);
  }

  const auto totals = apportion(records.size(), r);

  // Per-class floors, then hand out the leftover units so each split reaches
  // its total: rows with the most leftovers first, each to the splits with the
  // largest remaining demand.
  std::vector<std::array<std::size_t, 3>> alloc(by_class.size());
  std::vector<std::array<double, 3>> frac(by_class.size());
  std::array<long, 3> demand{};
  for (std::size_t s = 0; s < 3; ++s) demand[s] = static_cast<long>(totals[s]);
  std::vector<std::size_t> leftover(by_class.size());
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::size_t used = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      const double quota = static_cast<double>(by_class[c].size()) * r[s];
      alloc[c][s] = static_cast<std::size_t>(std::floor(quota + 1e-9));
      frac[c][s] = quota - static_cast<double>(alloc[c][s]);
      used += alloc[c][s];
      demand[s] -= static_cast<long>(alloc[c][s]);
    }
    leftover[c] = by_class[c].size() - used;
  }
  std::vector<std::size_t> class_order(by_class.size());
  std::iota(class_order.begin(), class_order.end(), 0);
  std::stable_sort(class_order.begin(), class_order.end(),
                   [&](std::size_t a, std::size_t b) { return leftover[a] > leftover[b]; });
  for (const std::size_t c : class_order) {
    std::array<std::size_t, 3> splits{0, 1, 2};
    std::stable_sort(splits.begin(), splits.end(), [&](std::size_t a, std::size_t b) {
      if (demand[a] != demand[b]) return demand[a] > demand[b];
      return frac[c][a] > frac[c][b];
    });
    for (std::size_t k = 0; k < leftover[c]; ++k) {
      const std::size_t s = splits[k % 3];
      ++alloc[c][s];
      --demand[s];
    }
  }

  Pcg32 rng(seed, 0x5eed5b1175ULL);
  DatasetSplit out;
  out.seed = seed;
  std::array<std::vector<EcgRecord>*, 3> dest{&out.train, &out.validation, &out.test};
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    rng.shuffle(std::span(idx));
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < alloc[c][s]; ++k) dest[s]->push_back(records[idx[pos++]]);
    }
  }
  for (auto* part : dest) rng.shuffle(std::span(*part));
  return out;
}

void write_split_manifest(const std::filesystem::path& dir, const DatasetSplit& split) {
  std::filesystem::create_directories(dir);
  const std::array<std::pair<const char*, const std::vector<EcgRecord>*>, 3> parts{
      {{"train_ids.txt", &split.train},
       {"validation_ids.txt", &split.validation},
       {"test_ids.txt", &split.test}}};
  for (const auto& [name, recs] : parts) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write split manifest in " + dir.string());
    for (const auto& rec : *recs) out << rec.id << '\n';
  }
}

ClassWeights class_weights(std::span<const int> labels, int num_classes) {
  if (num_classes < 1) throw ConfigError("class_weights: need at least one class");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ConfigError("class_weights: label " + std::to_string(y) + " out of range");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  ClassWeights cw;
  cw.w.resize(num_classes);
  const auto total = static_cast<double>(labels.size());
  for (int c = 0; c < num_classes; ++c) {
    const auto count = counts[static_cast<std::size_t>(c)];
    if (count == 0) throw ConfigError("class_weights: class " + std::to_string(c) + " is missing");
    cw.w[c] = total / (static_cast<double>(num_classes) * static_cast<double>(count));
  }
  return cw;
}

std::vector<int> labels_of(std::span<const EcgRecord> records) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& rec : records) out.push_back(rec.label);
  return out;
}

namespace {

double bump(double t, double centre, double width) {
  const double z = (t - centre) / width;
  return std::exp(-0.5 * z * z);
}

}  // namespace

EcgRecord synth_ecg(int class_id, std::uint64_t seed, Eigen::Index n, double sampling_rate) {
  if (class_id != 0 && class_id != 1) throw ConfigError("synth_ecg: class_id must be 0 or 1");
  if (n < 1 || sampling_rate <= 0.0) throw ConfigError("synth_ecg: bad length or rate");

  Pcg32 rng(mix_seed(seed, static_cast<std::uint64_t>(class_id)), 0xec6ULL);
  const bool irregular = class_id == 1;
  const double duration = static_cast<double>(n) / sampling_rate;

  const double amplitude = rng.uniform(0.8, 1.3);
  const double mean_rr = irregular ? rng.uniform(0.55, 0.9) : rng.uniform(0.7, 0.95);

  std::vector<double> beats;
  double t = rng.uniform(0.1, mean_rr);
  while (t < duration + 0.5) {
    beats.push_back(t);
    const double rr = irregular ? mean_rr * rng.uniform(0.5, 1.5)
                                : mean_rr * (1.0 + 0.015 * rng.normal());
    t += rr;
  }

  const double fib_freq = rng.uniform(5.0, 8.0);
  const double fib_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double resp_freq = rng.uniform(0.15, 0.4);
  const double resp_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  EcgRecord rec;
  rec.id = std::string(irregular ? "af" : "nsr") + "_" + std::to_string(seed);
  rec.label = class_id;
  rec.sampling_rate = sampling_rate;
  rec.samples.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double ti = static_cast<double>(i) / sampling_rate;
    double v = 0.0;
    for (const double b : beats) {
      if (std::abs(ti - b) > 0.6) continue;
      v += amplitude * (bump(ti, b, 0.010) - 0.12 * bump(ti, b - 0.025, 0.008) -
                        0.20 * bump(ti, b + 0.030, 0.010) + 0.30 * bump(ti, b + 0.25, 0.050));
      if (!irregular) v += amplitude * 0.15 * bump(ti, b - 0.17, 0.025);
    }
    if (irregular) v += 0.05 * std::sin(2.0 * std::numbers::pi * fib_freq * ti + fib_phase);
    v += 0.04 * std::sin(2.0 * std::numbers::pi * resp_freq * ti + resp_phase);
    v += 0.02 * rng.normal();
    rec.samples[i] = v;
  }
  return rec;
}

std::vector<EcgRecord> synth_dataset(std::size_t count, double positive_fraction,
                                     std::uint64_t seed, Eigen::Index n, double sampling_rate) {
  if (positive_fraction < 0.0 || positive_fraction > 1.0) {
    throw ConfigError("synth_dataset: positive fraction must lie in [0, 1]");
  }
  const auto positives =
      static_cast<std::size_t>(std::llround(static_cast<double>(count) * positive_fraction));
  std::vector<EcgRecord> out;
  out.reserve(count);
  std::size_t emitted_pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    // Bresenham-style interleave of the two classes.
    const auto want = (positives * (i + 1) + count / 2) / std::max<std::size_t>(count, 1);
    const int label = emitted_pos < want ? 1 : 0;
    if (label == 1) ++emitted_pos;
    auto rec = synth_ecg(label, mix_seed(seed, i), n, sampling_rate);
    rec.id = "rec" + std::to_string(i);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mina
