#include "mina/nn.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mina/text.hpp"

namespace mina::nn {

void adam_step(std::span<const ParamRef> params, AdamState& state) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Eigen::MatrixXd::Zero(p.rows, p.cols));
      state.v.push_back(Eigen::MatrixXd::Zero(p.rows, p.cols));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.value == nullptr || p.grad == nullptr || state.m[i].rows() != p.rows ||
        state.m[i].cols() != p.cols) {
      throw ShapeError("adam_step: shape mismatch for " + p.name);
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].grad_map();
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();
    params[i].value_map().array() -=
        state.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.eps);
  }
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), floor);
}

GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  std::span<const ParamRef> params,
                                  const GradCheckOptions& options) {
  const double base = loss();
  const double again = loss();
  if (base != again) {
    throw ConfigError("finite_diff_check: forward pass is not deterministic");
  }

  // Flat list of (tensor, row-major index) coordinates.
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Eigen::Index k = 0; k < params[t].size(); ++k) coords.emplace_back(t, k);
  }
  if (coords.size() > options.max_coordinates) {
    Pcg32 rng(options.seed, 0x9c4ecULL);
    rng.shuffle(std::span(coords));
    coords.resize(std::max(options.max_coordinates, options.min_coordinates));
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  report.per_param.resize(params.size());
  for (std::size_t t = 0; t < params.size(); ++t) report.per_param[t].name = params[t].name;

  for (const auto& [t, k] : coords) {
    auto value = params[t].value_map();
    const Eigen::Index cols = params[t].cols;
    const Eigen::Index r = k / cols;
    const Eigen::Index c = k % cols;
    const double saved = value(r, c);
    value(r, c) = saved + options.eps;
    const double up = loss();
    value(r, c) = saved - options.eps;
    const double down = loss();
    value(r, c) = saved;

    const double numeric = (up - down) / (2.0 * options.eps);
    const double analytic = params[t].grad_map()(r, c);
    const double err = relative_error(analytic, numeric, options.denominator_floor);
    ++report.coordinates;
    auto& entry = report.per_param[t];
    if (err >= entry.rel_error) entry = {params[t].name, k, analytic, numeric, err};
    if (err >= report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = entry;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

const Eigen::MatrixXd& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw ParseError("checkpoint has no tensor '" + name + "'");
}

std::string Checkpoint::header_value(const std::string& key) const {
  for (const auto& [k, v] : header) {
    if (k == key) return v;
  }
  throw ParseError("checkpoint header has no key '" + key + "'");
}

namespace {
constexpr std::string_view kMagic = "mina-checkpoint 1";
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream os;
  os << kMagic << '\n';
  for (const auto& [k, v] : ckpt.header) os << "header " << k << " = " << v << '\n';
  for (const auto& t : ckpt.tensors) {
    os << "tensor " << t.name << ' ' << t.value.rows() << ' ' << t.value.cols() << '\n';
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
        if (c) os << ' ';
        os << format_double(t.value(r, c));
      }
      os << '\n';
    }
  }
  os << "end\n";
  return os.str();
}

Checkpoint parse_checkpoint(std::string_view text) {
  const auto lines = split(text, '\n');
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> ParseError {
    return ParseError("checkpoint line " + std::to_string(pos + 1) + ": " + msg);
  };
  if (lines.empty() || trim(lines[0]) != kMagic) throw ParseError("not a checkpoint file");
  Checkpoint ckpt;
  for (pos = 1; pos < lines.size(); ++pos) {
    const auto line = trim(lines[pos]);
    if (line.empty()) continue;
    if (line == "end") return ckpt;
    if (line.starts_with("header ")) {
      const auto body = line.substr(7);
      const auto eq = body.find(" = ");
      if (eq == std::string_view::npos) throw fail("malformed header");
      ckpt.header.emplace_back(std::string(body.substr(0, eq)), std::string(body.substr(eq + 3)));
      continue;
    }
    if (!line.starts_with("tensor ")) throw fail("unexpected content");
    const auto parts = split(line, ' ');
    if (parts.size() != 4) throw fail("malformed tensor header");
    const auto rows = parse_integer(parts[2]);
    const auto cols = parse_integer(parts[3]);
    if (!rows || !cols || *rows < 0 || *cols < 0) throw fail("bad tensor shape");
    NamedTensor t{std::string(parts[1]), Eigen::MatrixXd(*rows, *cols)};
    for (Eigen::Index r = 0; r < *rows; ++r) {
      ++pos;
      if (pos >= lines.size()) throw fail("truncated tensor " + t.name);
      const auto vals = split(trim(lines[pos]), ' ');
      if (static_cast<Eigen::Index>(vals.size()) != *cols && *cols > 0) {
        throw fail("row length mismatch in " + t.name);
      }
      for (Eigen::Index c = 0; c < *cols; ++c) {
        const auto v = parse_double(vals[static_cast<std::size_t>(c)]);
        if (!v) throw fail("bad number in " + t.name);
        t.value(r, c) = *v;
      }
    }
    ckpt.tensors.push_back(std::move(t));
  }
  throw ParseError("checkpoint is missing its end marker");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out << serialize_checkpoint(ckpt);
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace mina::nn
