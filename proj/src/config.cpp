#include "mina/config.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "mina/error.hpp"
#include "mina/text.hpp"

namespace mina {

std::string format_ratios(const SplitRatios& r) {
  return format_double(r.train) + "," + format_double(r.validation) + "," + format_double(r.test);
}

SplitRatios parse_ratios(std::string_view text) {
  const auto parts = split(text, ',');
  if (parts.size() != 3) throw ConfigError("split.ratios: expected three comma-separated values");
  SplitRatios r;
  const auto a = parse_double(parts[0]);
  const auto b = parse_double(parts[1]);
  const auto c = parse_double(parts[2]);
  if (!a || !b || !c) throw ConfigError("split.ratios: values must be numbers");
  r.train = *a;
  r.validation = *b;
  r.test = *c;
  return r;
}

namespace {

std::uint64_t parse_seed(std::string_view key, std::string_view value) {
  const auto v = parse_integer(value);
  if (!v || *v < 0) {
    throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" +
                      std::string(value) + "'");
  }
  return static_cast<std::uint64_t>(*v);
}

std::string unquote(std::string_view v) {
  v = trim(v);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
  return std::string(v);
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view raw) {
  const std::string value = unquote(raw);
  if (key == "data.path") {
    data_path = value;
  } else if (key == "output.dir") {
    output_dir = value;
  } else if (key == "split.ratios") {
    ratios = parse_ratios(value);
  } else if (key == "split.seed") {
    split_seed = parse_seed(key, value);
  } else if (key == "seed") {
    seed = parse_seed(key, value);
  } else if (key == "model.bands_file") {
    try {
      model.bands = dsp::load_bands(value);
    } catch (const Error& e) {
      throw ConfigError(std::string("model.bands_file: ") + e.what());
    }
  } else if (key.starts_with("model.")) {
    if (!model.set(key.substr(6), value)) {
      throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
  } else if (key.starts_with("train.")) {
    if (!train.set(key.substr(6), value)) {
      throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
  } else {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
}

void RunConfig::validate() const {
  if (data_path.empty()) throw ConfigError("data.path: no record file given");
  if (!std::filesystem::exists(data_path)) {
    throw ConfigError("data.path: file not found: " + data_path.string());
  }
  const double sum = ratios.train + ratios.validation + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split.ratios: must sum to 1");
  model.validate();
  train.validate();
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv{{"seed", std::to_string(seed)},
               {"data.path", data_path.string()},
               {"split.ratios", format_ratios(ratios)},
               {"split.seed", std::to_string(split_seed)},
               {"output.dir", output_dir.string()}};
  for (const auto& [k, v] : model.to_key_values()) kv.emplace_back("model." + k, v);
  for (const auto& [k, v] : train.to_key_values()) kv.emplace_back("train." + k, v);
  return kv;
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, value] : to_key_values()) {
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (sec != section) {
      os << "\n[" << sec << "]\n";
      section = sec;
    }
    os << name << " = " << value << '\n';
  }
  return os.str();
}

std::pair<std::string, std::string> split_assignment(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected key = value, got '" + std::string(text) + "'");
  }
  return {std::string(trim(text.substr(0, eq))), std::string(trim(text.substr(eq + 1)))};
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig cfg;
  std::string section;
  std::size_t line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
      }
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    auto [key, value] = split_assignment(line);
    if (!section.empty()) key = section + "." + key;
    cfg.set(key, value);
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg = parse_run_config(ss.str());
  // Relative data paths are resolved against the config file's directory.
  if (!cfg.data_path.empty() && cfg.data_path.is_relative() &&
      !std::filesystem::exists(cfg.data_path)) {
    const auto candidate = path.parent_path() / cfg.data_path;
    if (std::filesystem::exists(candidate)) cfg.data_path = candidate;
  }
  return cfg;
}

}  // namespace mina
