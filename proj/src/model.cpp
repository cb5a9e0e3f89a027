#include "mina/model.hpp"

#include <cmath>
#include <limits>

#include "mina/error.hpp"
#include "mina/knowledge.hpp"
#include "mina/rng.hpp"
#include "mina/text.hpp"

namespace mina {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Mina: return "mina";
    case Variant::Acrnn: return "acrnn";
    case Variant::Crnn: return "crnn";
    case Variant::Cnn: return "cnn";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  std::string lower(trim(name));
  for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (lower == "mina") return Variant::Mina;
  if (lower == "acrnn") return Variant::Acrnn;
  if (lower == "crnn") return Variant::Crnn;
  if (lower == "cnn") return Variant::Cnn;
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// ModelConfig

Eigen::Index ModelConfig::conv_length() const {
  return nn::conv_output_length(segment_length, conv_size, conv_stride);
}

void ModelConfig::validate() const {
  auto positive = [](Eigen::Index v, const char* field) {
    if (v < 1) throw ConfigError(std::string("model.") + field + " must be >= 1");
  };
  positive(n, "n");
  positive(segment_length, "segment_length");
  positive(conv_filters, "conv_filters");
  positive(conv_size, "conv_size");
  positive(conv_stride, "conv_stride");
  positive(lstm_hidden, "lstm_hidden");
  positive(fusion_dim, "fusion_dim");
  positive(beat_att_dim, "beat_att_dim");
  positive(rhythm_att_dim, "rhythm_att_dim");
  positive(freq_att_dim, "freq_att_dim");
  if (n % segment_length != 0) {
    throw ConfigError("model.n must be a multiple of model.segment_length");
  }
  if (segment_length < conv_size) {
    throw ConfigError("model.segment_length must be >= model.conv_size");
  }
  if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
  if (!(sampling_rate > 0.0)) throw ConfigError("model.sampling_rate must be positive");
  if (num_taps < 3 || num_taps % 2 == 0) throw ConfigError("model.num_taps must be odd and >= 3");
  if (n <= (num_taps - 1) / 2) throw ConfigError("model.n must exceed the filter group delay");
  if (bands.empty()) throw ConfigError("model.bands must list at least one band");
  for (const auto& band : bands) {
    try {
      dsp::validate_band(band, sampling_rate);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("model.bands: ") + e.what());
    }
  }
}

namespace {

std::string bool_str(bool b) { return b ? "true" : "false"; }

bool parse_bool(std::string_view key, std::string_view value) {
  const auto v = trim(value);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("model." + std::string(key) + ": expected true/false, got '" +
                    std::string(value) + "'");
}

Eigen::Index parse_index(std::string_view key, std::string_view value) {
  const auto v = parse_integer(value);
  if (!v) {
    throw ConfigError("model." + std::string(key) + ": expected an integer, got '" +
                      std::string(value) + "'");
  }
  return static_cast<Eigen::Index>(*v);
}

double parse_real(std::string_view key, std::string_view value) {
  const auto v = parse_double(value);
  if (!v) {
    throw ConfigError("model." + std::string(key) + ": expected a number, got '" +
                      std::string(value) + "'");
  }
  return *v;
}

}  // namespace

KeyValues ModelConfig::to_key_values() const {
  return {
      {"variant", to_string(variant)},
      {"n", std::to_string(n)},
      {"segment_length", std::to_string(segment_length)},
      {"sampling_rate", format_double(sampling_rate)},
      {"bands", dsp::format_bands(bands)},
      {"num_taps", std::to_string(num_taps)},
      {"conv_filters", std::to_string(conv_filters)},
      {"conv_size", std::to_string(conv_size)},
      {"conv_stride", std::to_string(conv_stride)},
      {"lstm_hidden", std::to_string(lstm_hidden)},
      {"fusion_dim", std::to_string(fusion_dim)},
      {"beat_att_dim", std::to_string(beat_att_dim)},
      {"rhythm_att_dim", std::to_string(rhythm_att_dim)},
      {"freq_att_dim", std::to_string(freq_att_dim)},
      {"num_classes", std::to_string(num_classes)},
      {"dropout", format_double(dropout)},
      {"share_channel_params", bool_str(share_channel_params)},
      {"conv_relu", bool_str(conv_relu)},
      {"rhythm_use_sqrt", bool_str(rhythm_use_sqrt)},
      {"standardize_knowledge", bool_str(standardize_knowledge)},
  };
}

bool ModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "variant") {
    variant = parse_variant(value);
  } else if (key == "n") {
    n = parse_index(key, value);
  } else if (key == "segment_length") {
    segment_length = parse_index(key, value);
  } else if (key == "sampling_rate") {
    sampling_rate = parse_real(key, value);
  } else if (key == "bands") {
    try {
      bands = dsp::parse_bands(value);
    } catch (const Error& e) {
      throw ConfigError(std::string("model.bands: ") + e.what());
    }
  } else if (key == "num_taps") {
    num_taps = static_cast<int>(parse_index(key, value));
  } else if (key == "conv_filters") {
    conv_filters = parse_index(key, value);
  } else if (key == "conv_size") {
    conv_size = parse_index(key, value);
  } else if (key == "conv_stride") {
    conv_stride = parse_index(key, value);
  } else if (key == "lstm_hidden") {
    lstm_hidden = parse_index(key, value);
  } else if (key == "fusion_dim") {
    fusion_dim = parse_index(key, value);
  } else if (key == "beat_att_dim") {
    beat_att_dim = parse_index(key, value);
  } else if (key == "rhythm_att_dim") {
    rhythm_att_dim = parse_index(key, value);
  } else if (key == "freq_att_dim") {
    freq_att_dim = parse_index(key, value);
  } else if (key == "num_classes") {
    num_classes = static_cast<int>(parse_index(key, value));
  } else if (key == "dropout") {
    dropout = parse_real(key, value);
  } else if (key == "share_channel_params") {
    share_channel_params = parse_bool(key, value);
  } else if (key == "conv_relu") {
    conv_relu = parse_bool(key, value);
  } else if (key == "rhythm_use_sqrt") {
    rhythm_use_sqrt = parse_bool(key, value);
  } else if (key == "standardize_knowledge") {
    standardize_knowledge = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig cfg;
  for (const auto& [k, v] : kv) {
    if (!cfg.set(k, v)) throw ConfigError("unknown model key '" + k + "'");
  }
  return cfg;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n = 200;
  cfg.segment_length = 50;
  cfg.bands = {{0.5, 50.0}, {10.0, 50.0}};
  cfg.num_taps = 31;
  cfg.conv_filters = 4;
  cfg.lstm_hidden = 3;
  cfg.fusion_dim = 5;
  cfg.beat_att_dim = 3;
  cfg.rhythm_att_dim = 3;
  cfg.freq_att_dim = 3;
  cfg.dropout = 0.0;
  return cfg;
}

// ---------------------------------------------------------------------------
// ModelParams

namespace {

Eigen::MatrixXd uniform_matrix(Pcg32& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.uniform(-bound, bound);
  }
  return m;
}

Eigen::VectorXd uniform_vector(Pcg32& rng, Eigen::Index size, double bound) {
  return uniform_matrix(rng, size, 1, bound);
}

double inv_sqrt(Eigen::Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

AttentionParams init_attention(Pcg32& rng, Eigen::Index input, Eigen::Index hidden) {
  return {uniform_matrix(rng, input, hidden, inv_sqrt(input)), Eigen::VectorXd::Zero(hidden),
          uniform_vector(rng, hidden, inv_sqrt(hidden))};
}

nn::LstmWeights<double> init_lstm(Pcg32& rng, Eigen::Index input, Eigen::Index hidden) {
  const double bound = inv_sqrt(hidden);
  nn::LstmWeights<double> w;
  w.wx = uniform_matrix(rng, 4 * hidden, input, bound);
  w.wh = uniform_matrix(rng, 4 * hidden, hidden, bound);
  w.b = Eigen::VectorXd::Zero(4 * hidden);
  w.b.segment(hidden, hidden).setOnes();
  return w;
}

AttentionParams zeros_like(const AttentionParams& a) {
  return {Eigen::MatrixXd::Zero(a.w.rows(), a.w.cols()), Eigen::VectorXd::Zero(a.b.size()),
          Eigen::VectorXd::Zero(a.v.size())};
}

nn::LstmWeights<double> zeros_like(const nn::LstmWeights<double>& w) {
  return {Eigen::MatrixXd::Zero(w.wx.rows(), w.wx.cols()),
          Eigen::MatrixXd::Zero(w.wh.rows(), w.wh.cols()), Eigen::VectorXd::Zero(w.b.size())};
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Pcg32 rng(seed, 0x1a17ULL);
  const Eigen::Index k = config.conv_filters;
  const Eigen::Index size = config.conv_size;
  const Eigen::Index j = config.rhythm_dim();
  const Eigen::Index h = config.fusion_dim;
  const std::size_t param_channels =
      config.share_channel_params ? 1 : static_cast<std::size_t>(config.num_channels());

  ModelParams p;
  for (std::size_t c = 0; c < param_channels; ++c) {
    ChannelParams ch;
    ch.conv_w = uniform_matrix(rng, k, size, inv_sqrt(size));
    ch.conv_b = uniform_vector(rng, k, inv_sqrt(size));
    ch.conv_alpha = uniform_vector(rng, size, inv_sqrt(size));
    ch.lstm_fwd = init_lstm(rng, k, config.lstm_hidden);
    ch.lstm_bwd = init_lstm(rng, k, config.lstm_hidden);
    ch.beat = init_attention(rng, k + 1, config.beat_att_dim);
    ch.rhythm = init_attention(rng, j + 1, config.rhythm_att_dim);
    p.channels.push_back(std::move(ch));
  }
  const Eigen::Index summary = config.channel_summary_dim();
  p.fuse_w = uniform_matrix(rng, summary, h, inv_sqrt(summary));
  p.fuse_b = uniform_vector(rng, h, inv_sqrt(summary));
  p.freq = init_attention(rng, h + 1, config.freq_att_dim);
  p.out_w = uniform_matrix(rng, h, config.num_classes, inv_sqrt(h));
  p.out_b = uniform_vector(rng, config.num_classes, inv_sqrt(h));
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams p;
  for (const auto& ch : other.channels) {
    ChannelParams z;
    z.conv_w = Eigen::MatrixXd::Zero(ch.conv_w.rows(), ch.conv_w.cols());
    z.conv_b = Eigen::VectorXd::Zero(ch.conv_b.size());
    z.conv_alpha = Eigen::VectorXd::Zero(ch.conv_alpha.size());
    z.lstm_fwd = mina::zeros_like(ch.lstm_fwd);
    z.lstm_bwd = mina::zeros_like(ch.lstm_bwd);
    z.beat = mina::zeros_like(ch.beat);
    z.rhythm = mina::zeros_like(ch.rhythm);
    p.channels.push_back(std::move(z));
  }
  p.fuse_w = Eigen::MatrixXd::Zero(other.fuse_w.rows(), other.fuse_w.cols());
  p.fuse_b = Eigen::VectorXd::Zero(other.fuse_b.size());
  p.freq = mina::zeros_like(other.freq);
  p.out_w = Eigen::MatrixXd::Zero(other.out_w.rows(), other.out_w.cols());
  p.out_b = Eigen::VectorXd::Zero(other.out_b.size());
  return p;
}

namespace {

void zero(AttentionParams& a) {
  a.w.setZero();
  a.b.setZero();
  a.v.setZero();
}

void zero(nn::LstmWeights<double>& w) {
  w.wx.setZero();
  w.wh.setZero();
  w.b.setZero();
}

}  // namespace

void ModelParams::set_zero() {
  for (auto& ch : channels) {
    ch.conv_w.setZero();
    ch.conv_b.setZero();
    ch.conv_alpha.setZero();
    zero(ch.lstm_fwd);
    zero(ch.lstm_bwd);
    zero(ch.beat);
    zero(ch.rhythm);
  }
  fuse_w.setZero();
  fuse_b.setZero();
  zero(freq);
  out_w.setZero();
  out_b.setZero();
}

std::vector<nn::ParamRef> param_refs(const ModelConfig& config, ModelParams& params,
                                     ModelParams& grads) {
  std::vector<nn::ParamRef> refs;
  visit_params(config, params, grads, [&](const std::string& name, auto& value, auto& grad) {
    refs.push_back(nn::ParamRef::of(name, value, grad));
  });
  return refs;
}

std::size_t param_count(const ModelConfig& config, const ModelParams& params) {
  std::size_t total = 0;
  visit_params(config, params, params, [&](const std::string&, const auto& value, const auto&) {
    total += static_cast<std::size_t>(value.size());
  });
  return total;
}

nn::Checkpoint to_checkpoint(const ModelConfig& config, const ModelParams& params,
                             const KeyValues& metadata) {
  nn::Checkpoint ckpt;
  for (const auto& [k, v] : config.to_key_values()) ckpt.header.emplace_back("model." + k, v);
  for (const auto& [k, v] : metadata) {
    if (k.starts_with("model.")) throw ConfigError("checkpoint metadata key '" + k + "' is reserved");
    ckpt.header.emplace_back(k, v);
  }
  visit_params(config, params, params, [&](const std::string& name, const auto& value, const auto&) {
    ckpt.tensors.push_back({name, value});
  });
  return ckpt;
}

std::pair<ModelConfig, ModelParams> from_checkpoint(const nn::Checkpoint& ckpt) {
  KeyValues model_keys;
  for (const auto& [k, v] : ckpt.header) {
    if (k.starts_with("model.")) model_keys.emplace_back(k.substr(6), v);
  }
  if (model_keys.empty()) throw ParseError("checkpoint header has no model configuration");
  ModelConfig config = ModelConfig::from_key_values(model_keys);
  config.validate();
  ModelParams params = ModelParams::init(config, 0);
  std::size_t used = 0;
  visit_params(config, params, params, [&](const std::string& name, auto& value, auto&) {
    const auto& stored = ckpt.tensor(name);
    if (stored.rows() != value.rows() || stored.cols() != value.cols()) {
      throw ParseError("checkpoint tensor '" + name + "' has shape " +
                       std::to_string(stored.rows()) + "x" + std::to_string(stored.cols()) +
                       ", expected " + std::to_string(value.rows()) + "x" +
                       std::to_string(value.cols()));
    }
    value = stored;
    ++used;
  });
  if (used != ckpt.tensors.size()) throw ParseError("checkpoint has unexpected extra tensors");
  return {std::move(config), std::move(params)};
}

// ---------------------------------------------------------------------------
// Segmentation and attention

Eigen::MatrixXd segment(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index segment_length) {
  if (segment_length < 1) throw ConfigError("segment: length must be >= 1");
  if (x.size() < segment_length) {
    throw ConfigError("segment: signal of length " + std::to_string(x.size()) +
                      " is shorter than one segment");
  }
  const Eigen::Index m = x.size() / segment_length;
  Eigen::MatrixXd s(m, segment_length);
  for (Eigen::Index k = 0; k < m; ++k) {
    s.row(k) = x.segment(k * segment_length, segment_length).transpose();
  }
  return s;
}

GroupedAttention attend(const Eigen::MatrixXd& features, const Eigen::MatrixXd& knowledge,
                        Eigen::Index groups, const AttentionParams& params, Pooling pooling,
                        const std::vector<bool>* masked) {
  if (groups < 1 || features.cols() % groups != 0 || features.cols() == 0) {
    throw ShapeError("attention: feature columns must split evenly into groups");
  }
  const Eigen::Index len = features.cols() / groups;
  const Eigen::Index dim = features.rows();
  GroupedAttention out;
  out.pooling = pooling;
  out.weights.resize(len, groups);
  out.context.resize(dim, groups);

  if (pooling == Pooling::Uniform) {
    out.weights.setConstant(1.0 / static_cast<double>(len));
    for (Eigen::Index g = 0; g < groups; ++g) {
      out.context.col(g) = features.middleCols(g * len, len).rowwise().mean();
    }
    return out;
  }

  if (knowledge.cols() != features.cols()) {
    throw ShapeError("attention: knowledge columns (" + std::to_string(knowledge.cols()) +
                     ") differ from feature columns (" + std::to_string(features.cols()) + ")");
  }
  if (params.w.rows() != dim + knowledge.rows() || params.b.size() != params.w.cols() ||
      params.v.size() != params.w.cols()) {
    throw ShapeError("attention: parameter shapes do not match feature/knowledge dims");
  }
  if (masked && static_cast<Eigen::Index>(masked->size()) != len) {
    throw ShapeError("attention: mask length differs from group length");
  }

  out.stacked.resize(dim + knowledge.rows(), features.cols());
  out.stacked.topRows(dim) = features;
  out.stacked.bottomRows(knowledge.rows()) = knowledge;
  out.hidden = params.w.transpose() * out.stacked;
  out.hidden.colwise() += params.b;
  const Eigen::RowVectorXd scores = params.v.transpose() * out.hidden;

  for (Eigen::Index g = 0; g < groups; ++g) {
    Eigen::VectorXd s = scores.segment(g * len, len).transpose();
    if (masked) {
      bool any = false;
      for (Eigen::Index j = 0; j < len; ++j) {
        if ((*masked)[static_cast<std::size_t>(j)]) {
          s[j] = -std::numeric_limits<double>::infinity();
        } else {
          any = true;
        }
      }
      if (!any) throw ConfigError("attention: every position is masked");
    }
    Eigen::VectorXd w = nn::softmax<double>(s);
    if (masked) {
      for (Eigen::Index j = 0; j < len; ++j) {
        if ((*masked)[static_cast<std::size_t>(j)]) w[j] = 0.0;
      }
      w /= w.sum();
    }
    out.weights.col(g) = w;
    out.context.col(g) = features.middleCols(g * len, len) * out.weights.col(g);
  }
  return out;
}

AttentionGrad attend_backward(const Eigen::MatrixXd& features, const AttentionParams& params,
                              const GroupedAttention& fwd, const Eigen::MatrixXd& dcontext) {
  const Eigen::Index groups = fwd.weights.cols();
  const Eigen::Index len = fwd.weights.rows();
  const Eigen::Index dim = features.rows();
  if (dcontext.rows() != dim || dcontext.cols() != groups) {
    throw ShapeError("attention backward: context adjoint has the wrong shape");
  }
  AttentionGrad g;
  g.dfeatures.resize(dim, groups * len);
  if (fwd.pooling == Pooling::Uniform) {
    const double inv = 1.0 / static_cast<double>(len);
    for (Eigen::Index k = 0; k < groups; ++k) {
      g.dfeatures.middleCols(k * len, len) = (dcontext.col(k) * inv).replicate(1, len);
    }
    return g;
  }

  Eigen::RowVectorXd dscores(groups * len);
  for (Eigen::Index k = 0; k < groups; ++k) {
    const auto w = fwd.weights.col(k);
    const auto dc = dcontext.col(k);
    g.dfeatures.middleCols(k * len, len).noalias() = dc * w.transpose();
    const Eigen::VectorXd dw = features.middleCols(k * len, len).transpose() * dc;
    dscores.segment(k * len, len) = nn::softmax_backward<double>(w, dw).transpose();
  }
  g.dparams.v = fwd.hidden * dscores.transpose();
  const Eigen::MatrixXd dhidden = params.v * dscores;
  g.dparams.w = fwd.stacked * dhidden.transpose();
  g.dparams.b = dhidden.rowwise().sum();
  const Eigen::MatrixXd dstacked = params.w * dhidden;
  g.dfeatures += dstacked.topRows(dim);
  g.dknowledge = dstacked.bottomRows(dstacked.rows() - dim);
  return g;
}

AttentionResult knowledge_attention(const Eigen::MatrixXd& features,
                                    const Eigen::MatrixXd& knowledge,
                                    const AttentionParams& params) {
  auto att = attend(features, knowledge, 1, params);
  return {att.weights.col(0), att.context.col(0)};
}

// ---------------------------------------------------------------------------
// Preprocessing

Preprocessor::Preprocessor(const ModelConfig& config)
    : config_((config.validate(), config)),
      filters_(config.bands, config.sampling_rate, config.num_taps) {}

dsp::ChannelBank Preprocessor::decompose(const EcgRecord& record) const {
  if (record.samples.size() != config_.n) {
    throw ShapeError("record '" + record.id + "' has length " +
                     std::to_string(record.samples.size()) + ", model expects " +
                     std::to_string(config_.n));
  }
  if (!record.samples.allFinite()) throw ConfigError("record '" + record.id + "' is not finite");
  return filters_.decompose(record.samples, record.id);
}

PreparedRecord Preprocessor::prepare(const EcgRecord& record) const {
  const auto bank = decompose(record);
  PreparedRecord out;
  out.id = record.id;
  out.label = record.label;
  for (Eigen::Index i = 0; i < bank.num_channels(); ++i) {
    Eigen::MatrixXd seg = segment(bank.channels.row(i).transpose(), config_.segment_length);
    out.diff_segments.push_back(knowledge::first_difference_rows(seg));
    Eigen::RowVectorXd kb = knowledge::rhythm_knowledge(seg, config_.rhythm_use_sqrt);
    if (config_.standardize_knowledge) kb = knowledge::standardize(kb);
    out.k_beta.push_back(std::move(kb));
    out.segments.push_back(std::move(seg));
  }
  out.k_gamma = knowledge::freq_knowledge(bank);
  if (config_.standardize_knowledge) out.k_gamma = knowledge::standardize(out.k_gamma);
  return out;
}

std::vector<PreparedRecord> Preprocessor::prepare_all(std::span<const EcgRecord> records) const {
  std::vector<PreparedRecord> out;
  out.reserve(records.size());
  for (const auto& rec : records) out.push_back(prepare(rec));
  return out;
}

// ---------------------------------------------------------------------------
// Model

MinaModel::MinaModel(ModelConfig config, ModelParams params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const std::size_t expected =
      config_.share_channel_params ? 1 : static_cast<std::size_t>(config_.num_channels());
  if (params_.channels.size() != expected) {
    throw ShapeError("model parameters hold " + std::to_string(params_.channels.size()) +
                     " channel sets, config needs " + std::to_string(expected));
  }
}

MinaModel::MinaModel(ModelConfig config, std::uint64_t seed)
    : MinaModel(config, ModelParams::init(config, seed)) {}

const ChannelParams& MinaModel::channel_params(std::size_t channel) const {
  return params_.channels[config_.share_channel_params ? 0 : channel];
}

std::pair<Prediction, AttentionBundle> MinaModel::forward(const PreparedRecord& record,
                                                          const ForwardOptions& options,
                                                          ForwardTrace* trace) const {
  const auto f = static_cast<std::size_t>(config_.num_channels());
  if (record.segments.size() != f || record.diff_segments.size() != f ||
      record.k_beta.size() != f || record.k_gamma.size() != config_.num_channels()) {
    throw ShapeError("prepared record '" + record.id + "' does not match the channel count");
  }
  const Eigen::Index m = config_.num_segments();
  const Eigen::Index stride = config_.conv_stride;
  const Eigen::Index size = config_.conv_size;
  const Variant variant = config_.variant;
  const bool beat_attention = variant == Variant::Mina || variant == Variant::Acrnn;
  const bool knowledge_on = variant == Variant::Mina && !options.zero_knowledge;

  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  tr = ForwardTrace{};
  tr.channels.resize(f);
  tr.summary.resize(config_.channel_summary_dim(), static_cast<Eigen::Index>(f));

  AttentionBundle bundle;
  for (std::size_t c = 0; c < f; ++c) {
    const auto& cp = channel_params(c);
    auto& ct = tr.channels[c];
    if (record.segments[c].rows() != m || record.segments[c].cols() != config_.segment_length) {
      throw ShapeError("prepared record '" + record.id + "' has wrong segment shape");
    }
    ct.patches = nn::im2col<double>(record.segments[c], size, stride);
    ct.conv_out = nn::conv1d_segments<double>(ct.patches, cp.conv_w, cp.conv_b);
    if (config_.conv_relu) ct.conv_out = ct.conv_out.cwiseMax(0.0);

    if (knowledge_on) {
      ct.diff_patches = nn::im2col<double>(record.diff_segments[c], size, stride);
      ct.k_alpha = cp.conv_alpha.transpose() * ct.diff_patches;
    } else {
      ct.k_alpha = Eigen::MatrixXd::Zero(1, ct.conv_out.cols());
    }

    ct.beat = attend(ct.conv_out, ct.k_alpha, m, cp.beat,
                     beat_attention ? Pooling::Attention : Pooling::Uniform);
    bundle.alpha.push_back(ct.beat.weights.transpose());

    if (variant == Variant::Cnn) {
      ct.rhythm_features = ct.beat.context;
      ct.rhythm = attend(ct.rhythm_features, Eigen::MatrixXd(), 1, cp.rhythm, Pooling::Uniform);
    } else {
      ct.rhythm_features =
          nn::bilstm<double>(ct.beat.context, cp.lstm_fwd, cp.lstm_bwd, &ct.lstm_fwd, &ct.lstm_bwd);
      const Eigen::MatrixXd kb =
          knowledge_on ? Eigen::MatrixXd(record.k_beta[c]) : Eigen::MatrixXd::Zero(1, m);
      ct.rhythm = attend(ct.rhythm_features, kb, 1, cp.rhythm,
                         beat_attention ? Pooling::Attention : Pooling::Uniform);
    }
    bundle.beta.push_back(ct.rhythm.weights.col(0));
    tr.summary.col(static_cast<Eigen::Index>(c)) = ct.rhythm.context.col(0);
  }

  tr.fused = nn::dense<double>(tr.summary, params_.fuse_w, params_.fuse_b);
  const Eigen::MatrixXd kg = knowledge_on ? Eigen::MatrixXd(record.k_gamma)
                                          : Eigen::MatrixXd::Zero(1, config_.num_channels());
  const std::vector<bool>* mask =
      options.masked_channels.empty() ? nullptr : &options.masked_channels;
  if (beat_attention) {
    tr.freq = attend(tr.fused, kg, 1, params_.freq, Pooling::Attention, mask);
  } else {
    if (mask) throw ConfigError("channel masking needs a variant with frequency attention");
    tr.freq = attend(tr.fused, kg, 1, params_.freq, Pooling::Uniform);
  }
  bundle.gamma = tr.freq.weights.col(0);

  tr.dropout_mask = nn::dropout_mask<double>(config_.fusion_dim, config_.dropout, options.training,
                                             options.dropout_seed);
  tr.d = tr.freq.context.col(0).cwiseProduct(tr.dropout_mask);
  Eigen::VectorXd logits = params_.out_w.transpose() * tr.d + params_.out_b;
  tr.p = nn::softmax<double>(logits);
  tr.valid = true;
  return {Prediction{tr.p}, std::move(bundle)};
}

Prediction MinaModel::predict(const PreparedRecord& record) const {
  return forward(record).first;
}

double MinaModel::backward(const ForwardTrace& tr, int label, const Eigen::VectorXd& class_weights,
                           ModelParams& grads, double scale) const {
  if (!tr.valid) throw ConfigError("backward called before a forward pass");
  if (class_weights.size() != config_.num_classes) {
    throw ShapeError("class weight vector length differs from num_classes");
  }
  const Eigen::VectorXd z = nn::one_hot<double>(label, config_.num_classes);
  const double loss = nn::weighted_cross_entropy<double>(tr.p, z, class_weights);
  const Eigen::VectorXd dlogits =
      scale * nn::softmax_cross_entropy_backward<double>(tr.p, z, class_weights);

  grads.out_w.noalias() += tr.d * dlogits.transpose();
  grads.out_b += dlogits;
  const Eigen::VectorXd dd = (params_.out_w * dlogits).cwiseProduct(tr.dropout_mask);

  const auto freq_grad = attend_backward(tr.fused, params_.freq, tr.freq, dd);
  if (tr.freq.pooling == Pooling::Attention) {
    grads.freq.w += freq_grad.dparams.w;
    grads.freq.b += freq_grad.dparams.b;
    grads.freq.v += freq_grad.dparams.v;
  }
  const auto dense_grad = nn::dense_backward<double>(tr.summary, params_.fuse_w, freq_grad.dfeatures);
  grads.fuse_w += dense_grad.dw;
  grads.fuse_b += dense_grad.db;

  const bool knowledge_on = !tr.channels.empty() && tr.channels[0].diff_patches.size() > 0;
  for (std::size_t c = 0; c < tr.channels.size(); ++c) {
    const auto& cp = channel_params(c);
    auto& cg = grads.channels[config_.share_channel_params ? 0 : c];
    const auto& ct = tr.channels[c];
    const Eigen::MatrixXd dsummary = dense_grad.dx.col(static_cast<Eigen::Index>(c));

    const auto rhythm_grad = attend_backward(ct.rhythm_features, cp.rhythm, ct.rhythm, dsummary);
    Eigen::MatrixXd dbeat_context;
    if (config_.variant == Variant::Cnn) {
      dbeat_context = rhythm_grad.dfeatures;
    } else {
      if (ct.rhythm.pooling == Pooling::Attention) {
        cg.rhythm.w += rhythm_grad.dparams.w;
        cg.rhythm.b += rhythm_grad.dparams.b;
        cg.rhythm.v += rhythm_grad.dparams.v;
      }
      const Eigen::Index hidden = config_.lstm_hidden;
      const auto fwd = nn::lstm_backward<double>(ct.beat.context, cp.lstm_fwd, ct.lstm_fwd,
                                                 rhythm_grad.dfeatures.topRows(hidden));
      const auto bwd = nn::lstm_backward<double>(ct.beat.context, cp.lstm_bwd, ct.lstm_bwd,
                                                 rhythm_grad.dfeatures.bottomRows(hidden));
      cg.lstm_fwd.wx += fwd.dw.wx;
      cg.lstm_fwd.wh += fwd.dw.wh;
      cg.lstm_fwd.b += fwd.dw.b;
      cg.lstm_bwd.wx += bwd.dw.wx;
      cg.lstm_bwd.wh += bwd.dw.wh;
      cg.lstm_bwd.b += bwd.dw.b;
      dbeat_context = fwd.dx + bwd.dx;
    }

    const auto beat_grad = attend_backward(ct.conv_out, cp.beat, ct.beat, dbeat_context);
    if (ct.beat.pooling == Pooling::Attention) {
      cg.beat.w += beat_grad.dparams.w;
      cg.beat.b += beat_grad.dparams.b;
      cg.beat.v += beat_grad.dparams.v;
    }
    Eigen::MatrixXd dconv = beat_grad.dfeatures;
    if (config_.conv_relu) dconv = dconv.cwiseProduct((ct.conv_out.array() > 0.0).cast<double>().matrix());
    const auto conv_grad = nn::conv1d_segments_backward<double>(ct.patches, dconv);
    cg.conv_w += conv_grad.dfilters;
    cg.conv_b += conv_grad.dbias;
    if (knowledge_on && ct.beat.pooling == Pooling::Attention) {
      cg.conv_alpha.noalias() += ct.diff_patches * beat_grad.dknowledge.transpose();
    }
  }
  return loss;
}

double MinaModel::loss(const PreparedRecord& record, const Eigen::VectorXd& class_weights,
                       const ForwardOptions& options) const {
  const auto [pred, bundle] = forward(record, options);
  return nn::weighted_cross_entropy<double>(
      pred.p, nn::one_hot<double>(record.label, config_.num_classes), class_weights);
}

std::pair<Prediction, AttentionBundle> forward(const EcgRecord& record, const MinaModel& model,
                                               const ForwardOptions& options) {
  const Preprocessor prep(model.config());
  return model.forward(prep.prepare(record), options);
}

Prediction forward_variant(const EcgRecord& record, const MinaModel& model) {
  return forward(record, model).first;
}

}  // namespace mina
