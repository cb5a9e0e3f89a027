#pragma once

// Multilevel knowledge-guided attention network for single-lead ECG.
//
// Per frequency channel: segment -> shared 1-D conv -> beat attention ->
// BiLSTM -> rhythm attention. The per-channel rhythm contexts are projected
// by a shared dense layer, fused by frequency attention and classified.
// Each attention level scores [features; knowledge] columns with
// V^T (W^T [F; K] (+) b) and pools the features with the softmax weights.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mina/dataset.hpp"
#include "mina/dsp.hpp"
#include "mina/nn.hpp"

namespace mina {

enum class Variant { Mina, Acrnn, Crnn, Cnn };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct ModelConfig {
  Eigen::Index n = kDefaultLength;
  Eigen::Index segment_length = 50;  // T
  double sampling_rate = kDefaultSamplingRate;
  std::vector<dsp::BandSpec> bands = dsp::default_bands();
  int num_taps = dsp::kDefaultNumTaps;
  Eigen::Index conv_filters = 64;  // K
  Eigen::Index conv_size = 32;
  Eigen::Index conv_stride = 2;
  Eigen::Index lstm_hidden = 32;  // per direction, J = 2 * hidden
  Eigen::Index fusion_dim = 32;   // H
  Eigen::Index beat_att_dim = 8;
  Eigen::Index rhythm_att_dim = 8;
  Eigen::Index freq_att_dim = 8;
  int num_classes = 2;
  double dropout = 0.5;
  bool share_channel_params = false;
  bool conv_relu = true;
  bool rhythm_use_sqrt = false;
  bool standardize_knowledge = false;
  Variant variant = Variant::Mina;

  Eigen::Index num_segments() const { return n / segment_length; }  // M
  Eigen::Index conv_length() const;                                  // N
  Eigen::Index num_channels() const { return static_cast<Eigen::Index>(bands.size()); }
  Eigen::Index rhythm_dim() const { return 2 * lstm_hidden; }  // J
  /// Width of the per-channel summary fed to the fusion layer.
  Eigen::Index channel_summary_dim() const {
    return variant == Variant::Cnn ? conv_filters : rhythm_dim();
  }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  KeyValues to_key_values() const;
  /// Returns false for an unknown key; throws ConfigError for a bad value.
  bool set(std::string_view key, std::string_view value);
  static ModelConfig from_key_values(const KeyValues& kv);

  bool operator==(const ModelConfig&) const = default;
};

/// Small configuration used for gradient checks: n=200, T=50, F=2, K=4,
/// hidden=3, dropout off.
ModelConfig tiny_config();

// ---------------------------------------------------------------------------

/// First layer W ((D+E) x Da), bias b (Da), second layer V (Da).
struct AttentionParams {
  Eigen::MatrixXd w;
  Eigen::VectorXd b;
  Eigen::VectorXd v;
};

struct ChannelParams {
  Eigen::MatrixXd conv_w;      // K x size
  Eigen::VectorXd conv_b;      // K
  Eigen::VectorXd conv_alpha;  // size (knowledge filter)
  nn::LstmWeights<double> lstm_fwd;
  nn::LstmWeights<double> lstm_bwd;
  AttentionParams beat;
  AttentionParams rhythm;
};

struct ModelParams {
  std::vector<ChannelParams> channels;  // one entry when parameters are shared
  Eigen::MatrixXd fuse_w;               // summary_dim x H
  Eigen::VectorXd fuse_b;               // H
  AttentionParams freq;
  Eigen::MatrixXd out_w;  // H x C
  Eigen::VectorXd out_b;  // C

  /// Seeded initialisation; shapes follow the config and variant.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  static ModelParams zeros_like(const ModelParams& other);
  /// Zeroes every tensor in place; pointers into the buffers stay valid.
  void set_zero();
};

/// Visits every parameter the variant uses, in a fixed order, as
/// f(name, tensor_a, tensor_b). `a` and `b` must share a layout.
template <typename A, typename B, typename F>
void visit_params(const ModelConfig& config, A& a, B& b, F&& f) {
  const bool uses_lstm = config.variant != Variant::Cnn;
  const bool uses_attention = config.variant == Variant::Mina || config.variant == Variant::Acrnn;
  for (std::size_t i = 0; i < a.channels.size(); ++i) {
    const std::string pre = "ch" + std::to_string(i) + ".";
    auto& ca = a.channels[i];
    auto& cb = b.channels[i];
    f(pre + "conv_w", ca.conv_w, cb.conv_w);
    f(pre + "conv_b", ca.conv_b, cb.conv_b);
    if (config.variant == Variant::Mina) f(pre + "conv_alpha", ca.conv_alpha, cb.conv_alpha);
    if (uses_lstm) {
      f(pre + "lstm_fwd.wx", ca.lstm_fwd.wx, cb.lstm_fwd.wx);
      f(pre + "lstm_fwd.wh", ca.lstm_fwd.wh, cb.lstm_fwd.wh);
      f(pre + "lstm_fwd.b", ca.lstm_fwd.b, cb.lstm_fwd.b);
      f(pre + "lstm_bwd.wx", ca.lstm_bwd.wx, cb.lstm_bwd.wx);
      f(pre + "lstm_bwd.wh", ca.lstm_bwd.wh, cb.lstm_bwd.wh);
      f(pre + "lstm_bwd.b", ca.lstm_bwd.b, cb.lstm_bwd.b);
    }
    if (uses_attention) {
      f(pre + "beat_att.w", ca.beat.w, cb.beat.w);
      f(pre + "beat_att.b", ca.beat.b, cb.beat.b);
      f(pre + "beat_att.v", ca.beat.v, cb.beat.v);
      f(pre + "rhythm_att.w", ca.rhythm.w, cb.rhythm.w);
      f(pre + "rhythm_att.b", ca.rhythm.b, cb.rhythm.b);
      f(pre + "rhythm_att.v", ca.rhythm.v, cb.rhythm.v);
    }
  }
  f(std::string("fusion.w"), a.fuse_w, b.fuse_w);
  f(std::string("fusion.b"), a.fuse_b, b.fuse_b);
  if (uses_attention) {
    f(std::string("freq_att.w"), a.freq.w, b.freq.w);
    f(std::string("freq_att.b"), a.freq.b, b.freq.b);
    f(std::string("freq_att.v"), a.freq.v, b.freq.v);
  }
  f(std::string("out.w"), a.out_w, b.out_w);
  f(std::string("out.b"), a.out_b, b.out_b);
}

/// Parameter/gradient views in visit order, for the optimiser and checker.
std::vector<nn::ParamRef> param_refs(const ModelConfig& config, ModelParams& params,
                                     ModelParams& grads);
std::size_t param_count(const ModelConfig& config, const ModelParams& params);

/// Config header plus every tensor the variant uses.
/// Model keys are stored as "model.<key>"; `metadata` adds further header
/// lines (for example the split used in training).
nn::Checkpoint to_checkpoint(const ModelConfig& config, const ModelParams& params,
                             const KeyValues& metadata = {});
std::pair<ModelConfig, ModelParams> from_checkpoint(const nn::Checkpoint& ckpt);

// ---------------------------------------------------------------------------

/// Non-overlapping windows of length T as rows of an M x T matrix; the tail
/// shorter than T is dropped.
Eigen::MatrixXd segment(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::Index segment_length);

enum class Pooling { Attention, Uniform };

/// Attention over G groups of L columns each. `features` is D x (G*L),
/// `knowledge` E x (G*L). Column g of `weights` (L x G) is the softmax of
/// group g's scores; column g of `context` is the weighted feature sum.
struct GroupedAttention {
  Eigen::MatrixXd weights;
  Eigen::MatrixXd context;
  Eigen::MatrixXd stacked;  // [features; knowledge]
  Eigen::MatrixXd hidden;   // W^T stacked (+) b
  Pooling pooling = Pooling::Attention;
};

GroupedAttention attend(const Eigen::MatrixXd& features, const Eigen::MatrixXd& knowledge,
                        Eigen::Index groups, const AttentionParams& params,
                        Pooling pooling = Pooling::Attention,
                        const std::vector<bool>* masked = nullptr);

struct AttentionGrad {
  Eigen::MatrixXd dfeatures;
  Eigen::MatrixXd dknowledge;
  AttentionParams dparams;
};

AttentionGrad attend_backward(const Eigen::MatrixXd& features, const AttentionParams& params,
                              const GroupedAttention& fwd, const Eigen::MatrixXd& dcontext);

/// Single-group attention: weights over the `len` columns and the pooled
/// context vector.
struct AttentionResult {
  Eigen::VectorXd weights;
  Eigen::VectorXd context;
};

AttentionResult knowledge_attention(const Eigen::MatrixXd& features,
                                    const Eigen::MatrixXd& knowledge,
                                    const AttentionParams& params);

// ---------------------------------------------------------------------------

/// Parameter-independent inputs derived from one record: per-channel
/// segments, their first differences and the fixed knowledge rows.
struct PreparedRecord {
  std::string id;
  int label = 0;
  std::vector<Eigen::MatrixXd> segments;       // F of M x T
  std::vector<Eigen::MatrixXd> diff_segments;  // F of M x T
  std::vector<Eigen::RowVectorXd> k_beta;      // F of M
  Eigen::RowVectorXd k_gamma;                  // F
};

class Preprocessor {
 public:
  explicit Preprocessor(const ModelConfig& config);

  dsp::ChannelBank decompose(const EcgRecord& record) const;
  PreparedRecord prepare(const EcgRecord& record) const;
  std::vector<PreparedRecord> prepare_all(std::span<const EcgRecord> records) const;

  const ModelConfig& config() const { return config_; }

 private:
  ModelConfig config_;
  dsp::FilterBank filters_;
};

struct AttentionBundle {
  std::vector<Eigen::MatrixXd> alpha;  // per channel, M x N (row k = segment k)
  std::vector<Eigen::VectorXd> beta;   // per channel, length M
  Eigen::VectorXd gamma;               // length F
};

struct Prediction {
  Eigen::VectorXd p;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  /// Channels whose frequency weight is forced to zero.
  std::vector<bool> masked_channels;
  /// Replaces every knowledge input with zeros.
  bool zero_knowledge = false;
};

struct ChannelTrace {
  Eigen::MatrixXd patches;       // size x (M*N)
  Eigen::MatrixXd diff_patches;  // size x (M*N)
  Eigen::MatrixXd conv_out;      // K x (M*N), after activation
  Eigen::MatrixXd k_alpha;       // 1 x (M*N)
  GroupedAttention beat;         // context: K x M
  nn::LstmTrace<double> lstm_fwd;
  nn::LstmTrace<double> lstm_bwd;
  Eigen::MatrixXd rhythm_features;  // J x M
  GroupedAttention rhythm;          // context: J x 1
};

/// Everything backward() needs from one forward pass.
struct ForwardTrace {
  std::vector<ChannelTrace> channels;
  Eigen::MatrixXd summary;  // C matrix, summary_dim x F
  Eigen::MatrixXd fused;    // Q, H x F
  GroupedAttention freq;
  Eigen::VectorXd dropout_mask;
  Eigen::VectorXd d;
  Eigen::VectorXd p;
  bool valid = false;
};

class MinaModel {
 public:
  MinaModel(ModelConfig config, ModelParams params);
  MinaModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

  /// Runs the network on a prepared record. Fills `trace` when given.
  std::pair<Prediction, AttentionBundle> forward(const PreparedRecord& record,
                                                 const ForwardOptions& options = {},
                                                 ForwardTrace* trace = nullptr) const;

  Prediction predict(const PreparedRecord& record) const;

  /// Weighted cross entropy of the traced prediction for `label`; adds
  /// scale * dLoss/dParams into `grads` and returns the loss.
  double backward(const ForwardTrace& trace, int label, const Eigen::VectorXd& class_weights,
                  ModelParams& grads, double scale = 1.0) const;

  double loss(const PreparedRecord& record, const Eigen::VectorXd& class_weights,
              const ForwardOptions& options = {}) const;

 private:
  const ChannelParams& channel_params(std::size_t channel) const;

  ModelConfig config_;
  ModelParams params_;
};

/// Forward pass for a ready-made record using a per-call preprocessor.
std::pair<Prediction, AttentionBundle> forward(const EcgRecord& record, const MinaModel& model,
                                               const ForwardOptions& options = {});

/// Inference-mode prediction for any variant.
Prediction forward_variant(const EcgRecord& record, const MinaModel& model);

}  // namespace mina
