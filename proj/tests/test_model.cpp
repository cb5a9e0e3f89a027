#include <gtest/gtest.h>

#include <cmath>

#include "mina/dataset.hpp"
#include "mina/error.hpp"
#include "mina/harness.hpp"
#include "mina/model.hpp"
#include "mina/rng.hpp"

using namespace mina;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Pcg32& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

AttentionParams random_attention(Eigen::Index in, Eigen::Index hidden, Pcg32& rng) {
  return {random_matrix(in, hidden, rng), random_matrix(hidden, 1, rng), random_matrix(hidden, 1, rng)};
}

// Brute-force scores v . (W^T [f; k] + b) followed by an explicit softmax.
std::pair<Eigen::VectorXd, Eigen::VectorXd> brute_attention(const Eigen::MatrixXd& f,
                                                            const Eigen::MatrixXd& k,
                                                            const AttentionParams& p) {
  const Eigen::Index len = f.cols();
  std::vector<double> scores(static_cast<std::size_t>(len));
  for (Eigen::Index j = 0; j < len; ++j) {
    double s = 0.0;
    for (Eigen::Index h = 0; h < p.w.cols(); ++h) {
      double a = p.b[h];
      for (Eigen::Index r = 0; r < f.rows(); ++r) a += p.w(r, h) * f(r, j);
      for (Eigen::Index r = 0; r < k.rows(); ++r) a += p.w(f.rows() + r, h) * k(r, j);
      s += p.v[h] * a;
    }
    scores[static_cast<std::size_t>(j)] = s;
  }
  double top = scores[0];
  for (double s : scores) top = std::max(top, s);
  Eigen::VectorXd w(len);
  for (Eigen::Index j = 0; j < len; ++j) w[j] = std::exp(scores[static_cast<std::size_t>(j)] - top);
  w /= w.sum();
  Eigen::VectorXd ctx = Eigen::VectorXd::Zero(f.rows());
  for (Eigen::Index j = 0; j < len; ++j) ctx += w[j] * f.col(j);
  return {w, ctx};
}

ModelConfig small_config(Variant v = Variant::Mina) {
  ModelConfig cfg = tiny_config();
  cfg.variant = v;
  return cfg;
}

PreparedRecord prepared(const ModelConfig& cfg, int label, std::uint64_t seed) {
  return Preprocessor(cfg).prepare(synth_ecg(label, seed, cfg.n, cfg.sampling_rate));
}

void expect_probability(const Eigen::VectorXd& v, double tol = 1e-6) {
  EXPECT_GE(v.minCoeff(), 0.0);
  EXPECT_NEAR(v.sum(), 1.0, tol);
}

}  // namespace

// --- config --------------------------------------------------------------------

TEST(ModelConfig, DefaultsDeriveDimensions) {
  const ModelConfig cfg;
  EXPECT_EQ(cfg.num_segments(), 60);
  EXPECT_EQ(cfg.conv_length(), 10);
  EXPECT_EQ(cfg.rhythm_dim(), 64);
  EXPECT_EQ(cfg.num_channels(), 4);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(ModelConfig, KeyValueRoundTripAndErrors) {
  ModelConfig cfg;
  EXPECT_TRUE(cfg.set("variant", "crnn"));
  EXPECT_TRUE(cfg.set("lstm_hidden", "7"));
  EXPECT_TRUE(cfg.set("share_channel_params", "true"));
  EXPECT_TRUE(cfg.set("bands", "0.5,40;10,50"));
  EXPECT_FALSE(cfg.set("no_such_key", "1"));
  EXPECT_EQ(ModelConfig::from_key_values(cfg.to_key_values()), cfg);

  EXPECT_THROW(cfg.set("lstm_hidden", "seven"), ConfigError);
  EXPECT_THROW(cfg.set("variant", "transformer"), ConfigError);

  ModelConfig bad;
  bad.segment_length = 70;
  try {
    bad.validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("segment_length"), std::string::npos);
  }
  bad = ModelConfig{};
  bad.dropout = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig{};
  bad.conv_size = 60;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelConfig, VariantNames) {
  for (Variant v : {Variant::Mina, Variant::Acrnn, Variant::Crnn, Variant::Cnn}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_THROW(parse_variant("rnn"), ConfigError);
}

// --- segmentation ------------------------------------------------------------------

TEST(Segment, CountsAndRemainder) {
  EXPECT_EQ(segment(Eigen::VectorXd::Zero(3000), 50).rows(), 60);
  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(120, 0.0, 119.0);
  const auto s = segment(x, 50);
  ASSERT_EQ(s.rows(), 2);
  ASSERT_EQ(s.cols(), 50);
  Eigen::Index i = 0;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    for (Eigen::Index c = 0; c < s.cols(); ++c) EXPECT_EQ(s(r, c), x[i++]);
  }
  EXPECT_THROW(segment(Eigen::VectorXd::Zero(49), 50), ConfigError);
}

// --- attention ---------------------------------------------------------------------

TEST(KnowledgeAttention, SingletonAndZeroScoringVector) {
  Pcg32 rng(1, 1);
  const auto f1 = random_matrix(3, 1, rng);
  const auto r1 = knowledge_attention(f1, random_matrix(1, 1, rng), random_attention(4, 2, rng));
  EXPECT_EQ(r1.weights.size(), 1);
  EXPECT_EQ(r1.weights[0], 1.0);
  EXPECT_LE((r1.context - f1.col(0)).cwiseAbs().maxCoeff(), 1e-15);

  const auto f = random_matrix(3, 5, rng);
  auto p = random_attention(4, 2, rng);
  p.v.setZero();
  const auto r = knowledge_attention(f, random_matrix(1, 5, rng), p);
  for (Eigen::Index j = 0; j < 5; ++j) EXPECT_NEAR(r.weights[j], 0.2, 1e-15);
  EXPECT_LE((r.context - f.rowwise().mean()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(KnowledgeAttention, MatchesBruteForce) {
  Pcg32 rng(2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_matrix(4, 6, rng);
    const auto k = random_matrix(2, 6, rng);
    const auto p = random_attention(6, 3, rng);
    const auto r = knowledge_attention(f, k, p);
    const auto [w, ctx] = brute_attention(f, k, p);
    EXPECT_LE((r.weights - w).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((r.context - ctx).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(KnowledgeAttention, ColumnMismatchIsAnError) {
  Pcg32 rng(3, 3);
  EXPECT_THROW(knowledge_attention(random_matrix(3, 4, rng), random_matrix(1, 5, rng),
                                   random_attention(4, 2, rng)),
               ShapeError);
}

TEST(GroupedAttention, GroupsAreIndependentAttentions) {
  Pcg32 rng(4, 4);
  const auto f = random_matrix(3, 12, rng);
  const auto k = random_matrix(1, 12, rng);
  const auto p = random_attention(4, 2, rng);
  const auto g = attend(f, k, 3, p);
  ASSERT_EQ(g.weights.rows(), 4);
  ASSERT_EQ(g.weights.cols(), 3);
  for (Eigen::Index grp = 0; grp < 3; ++grp) {
    const auto [w, ctx] = brute_attention(f.middleCols(grp * 4, 4), k.middleCols(grp * 4, 4), p);
    EXPECT_LE((g.weights.col(grp) - w).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((g.context.col(grp) - ctx).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(GroupedAttention, MaskZeroesWeights) {
  Pcg32 rng(5, 5);
  const auto f = random_matrix(3, 4, rng);
  const std::vector<bool> mask{false, true, false, true};
  const auto g = attend(f, random_matrix(1, 4, rng), 1, random_attention(4, 2, rng),
                        Pooling::Attention, &mask);
  EXPECT_EQ(g.weights(1, 0), 0.0);
  EXPECT_EQ(g.weights(3, 0), 0.0);
  EXPECT_NEAR(g.weights.sum(), 1.0, 1e-12);
  const std::vector<bool> all{true, true, true, true};
  EXPECT_THROW(attend(f, random_matrix(1, 4, rng), 1, random_attention(4, 2, rng),
                      Pooling::Attention, &all),
               ConfigError);
}

TEST(GroupedAttention, BackwardMatchesFiniteDifferences) {
  Pcg32 rng(6, 6);
  Eigen::MatrixXd f = random_matrix(3, 8, rng);
  const auto k = random_matrix(2, 8, rng);
  AttentionParams p = random_attention(5, 3, rng);
  const auto r = random_matrix(3, 2, rng);
  auto loss = [&] { return attend(f, k, 2, p).context.cwiseProduct(r).sum(); };
  auto g = attend_backward(f, p, attend(f, k, 2, p), r);
  const std::vector<nn::ParamRef> refs{
      nn::ParamRef::of("f", f, g.dfeatures), nn::ParamRef::of("w", p.w, g.dparams.w),
      nn::ParamRef::of("b", p.b, g.dparams.b), nn::ParamRef::of("v", p.v, g.dparams.v)};
  EXPECT_LE(nn::finite_diff_check(loss, refs).max_rel_error, 1e-4);
}

// --- forward -----------------------------------------------------------------------

TEST(Forward, DefaultShapes) {
  const ModelConfig cfg;
  const MinaModel model(cfg, 3);
  const auto [pred, bundle] = forward(synth_ecg(1, 11), model);
  ASSERT_EQ(bundle.alpha.size(), 4u);
  ASSERT_EQ(bundle.beta.size(), 4u);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(bundle.alpha[c].rows(), 60);
    EXPECT_EQ(bundle.alpha[c].cols(), 10);
    EXPECT_EQ(bundle.beta[c].size(), 60);
    for (Eigen::Index k = 0; k < 60; ++k) expect_probability(bundle.alpha[c].row(k).transpose());
    expect_probability(bundle.beta[c]);
  }
  EXPECT_EQ(bundle.gamma.size(), 4);
  expect_probability(bundle.gamma);
  EXPECT_EQ(pred.p.size(), 2);
  expect_probability(pred.p, 1e-9);

  const auto rec = Preprocessor(cfg).prepare(synth_ecg(1, 11));
  ForwardTrace tr;
  model.forward(rec, {}, &tr);
  EXPECT_EQ(tr.channels[0].beat.context.rows(), 64);
  EXPECT_EQ(tr.channels[0].beat.context.cols(), 60);
  EXPECT_EQ(tr.channels[0].rhythm.context.rows(), 64);
  EXPECT_EQ(tr.fused.rows(), 32);
  EXPECT_EQ(tr.fused.cols(), 4);
  EXPECT_EQ(tr.d.size(), 32);
}

TEST(Forward, InferenceIsBitIdentical) {
  const auto cfg = small_config();
  const MinaModel model(cfg, 5);
  const auto rec = prepared(cfg, 0, 3);
  const auto [p1, b1] = model.forward(rec);
  const auto [p2, b2] = model.forward(rec);
  EXPECT_EQ(p1.p, p2.p);
  EXPECT_EQ(b1.gamma, b2.gamma);
  for (std::size_t c = 0; c < b1.alpha.size(); ++c) {
    EXPECT_EQ(b1.alpha[c], b2.alpha[c]);
    EXPECT_EQ(b1.beta[c], b2.beta[c]);
  }
}

TEST(Forward, TrainingDropoutIsSeedPinned) {
  ModelConfig cfg = small_config();
  cfg.dropout = 0.5;
  const MinaModel model(cfg, 5);
  const auto rec = prepared(cfg, 1, 3);
  ForwardOptions opts;
  opts.training = true;
  opts.dropout_seed = 9;
  ForwardTrace t1, t2;
  model.forward(rec, opts, &t1);
  model.forward(rec, opts, &t2);
  EXPECT_EQ(t1.p, t2.p);
  EXPECT_EQ(t1.dropout_mask, t2.dropout_mask);
  ForwardTrace inference;
  model.forward(rec, {}, &inference);
  EXPECT_TRUE((inference.dropout_mask.array() == 1.0).all());
}

TEST(Forward, DuplicateSegmentDuplicatesBeatContext) {
  const auto cfg = small_config();
  const MinaModel model(cfg, 7);
  auto rec = prepared(cfg, 1, 4);
  for (std::size_t c = 0; c < rec.segments.size(); ++c) {
    rec.segments[c].row(2) = rec.segments[c].row(0);
    rec.diff_segments[c].row(2) = rec.diff_segments[c].row(0);
  }
  ForwardTrace tr;
  model.forward(rec, {}, &tr);
  for (const auto& ct : tr.channels) {
    EXPECT_EQ(ct.beat.context.col(2), ct.beat.context.col(0));
    EXPECT_EQ(ct.beat.weights.col(2), ct.beat.weights.col(0));
  }
}

TEST(Forward, ContextsAreConvexCombinations) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto cfg = small_config();
    const MinaModel model(cfg, seed);
    ForwardTrace tr;
    model.forward(prepared(cfg, static_cast<int>(seed % 2), seed + 50), {}, &tr);
    const double slack = 1e-12;
    auto check = [&](const Eigen::MatrixXd& features, const Eigen::VectorXd& ctx) {
      const Eigen::VectorXd lo = features.rowwise().minCoeff();
      const Eigen::VectorXd hi = features.rowwise().maxCoeff();
      EXPECT_TRUE(((ctx - lo).array() >= -slack).all());
      EXPECT_TRUE(((hi - ctx).array() >= -slack).all());
    };
    const Eigen::Index n = cfg.conv_length();
    for (const auto& ct : tr.channels) {
      for (Eigen::Index k = 0; k < cfg.num_segments(); ++k) {
        check(ct.conv_out.middleCols(k * n, n), ct.beat.context.col(k));
      }
      check(ct.rhythm_features, ct.rhythm.context.col(0));
    }
    check(tr.fused, tr.freq.context.col(0));
  }
}

TEST(Forward, SingleChannelHasUnitGamma) {
  ModelConfig cfg = small_config();
  cfg.bands = {{0.5, 50.0}};
  const MinaModel model(cfg, 2);
  ForwardTrace tr;
  const auto [pred, bundle] = model.forward(prepared(cfg, 0, 1), {}, &tr);
  ASSERT_EQ(bundle.gamma.size(), 1);
  EXPECT_EQ(bundle.gamma[0], 1.0);
  EXPECT_EQ(Eigen::VectorXd(tr.freq.context.col(0)), Eigen::VectorXd(tr.fused.col(0)));
}

TEST(Forward, MaskedChannelContentIsIrrelevant) {
  const auto cfg = small_config();
  const MinaModel model(cfg, 8);
  const auto a = prepared(cfg, 0, 21);
  auto b = a;
  const auto other = prepared(cfg, 1, 99);
  b.segments[1] = other.segments[1];
  b.diff_segments[1] = other.diff_segments[1];
  b.k_beta[1] = other.k_beta[1];
  b.k_gamma[1] = other.k_gamma[1];

  ForwardOptions opts;
  opts.masked_channels = {false, true};
  const auto pa = model.forward(a, opts);
  const auto pb = model.forward(b, opts);
  EXPECT_EQ(pa.second.gamma[1], 0.0);
  EXPECT_LE((pa.first.p - pb.first.p).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NE(model.predict(a).p, model.predict(b).p);
}

TEST(Forward, WrongChannelCountIsAnError) {
  const auto cfg = small_config();
  const MinaModel model(cfg, 8);
  auto rec = prepared(cfg, 0, 1);
  rec.segments.pop_back();
  EXPECT_THROW(model.forward(rec), ShapeError);
  EXPECT_THROW(MinaModel(cfg, ModelParams{}), ShapeError);
}

// --- variants --------------------------------------------------------------------

TEST(Variants, AllProduceProbabilities) {
  for (Variant v : {Variant::Mina, Variant::Acrnn, Variant::Crnn, Variant::Cnn}) {
    const auto cfg = small_config(v);
    const MinaModel model(cfg, 4);
    const auto p = forward_variant(synth_ecg(1, 2, cfg.n), model).p;
    EXPECT_EQ(p.size(), 2) << to_string(v);
    expect_probability(p, 1e-9);
  }
}

TEST(Variants, AcrnnEqualsMinaWithZeroKnowledge) {
  const auto mina_cfg = small_config(Variant::Mina);
  const MinaModel mina_model(mina_cfg, 12);
  const MinaModel acrnn_model(small_config(Variant::Acrnn), mina_model.params());
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto rec = prepared(mina_cfg, static_cast<int>(seed % 2), seed);
    ForwardOptions zero;
    zero.zero_knowledge = true;
    const auto [pm, bm] = mina_model.forward(rec, zero);
    const auto [pa, ba] = acrnn_model.forward(rec);
    EXPECT_LE((pm.p - pa.p).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((bm.gamma - ba.gamma).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NE(mina_model.predict(rec).p, pa.p);
  }
}

TEST(Variants, UniformPoolingWeights) {
  for (Variant v : {Variant::Crnn, Variant::Cnn}) {
    const auto cfg = small_config(v);
    const MinaModel model(cfg, 4);
    const auto [pred, bundle] = model.forward(prepared(cfg, 1, 2));
    const double inv_n = 1.0 / static_cast<double>(cfg.conv_length());
    const double inv_m = 1.0 / static_cast<double>(cfg.num_segments());
    EXPECT_TRUE((bundle.alpha[0].array() == inv_n).all());
    EXPECT_TRUE((bundle.beta[0].array() == inv_m).all());
    EXPECT_TRUE((bundle.gamma.array() == 0.5).all());
  }
}

TEST(Variants, ParameterCountsDiffer) {
  std::size_t mina = 0, acrnn = 0, crnn = 0, cnn = 0;
  for (Variant v : {Variant::Mina, Variant::Acrnn, Variant::Crnn, Variant::Cnn}) {
    const auto cfg = small_config(v);
    const MinaModel model(cfg, 1);
    const auto count = param_count(cfg, model.params());
    (v == Variant::Mina ? mina : v == Variant::Acrnn ? acrnn : v == Variant::Crnn ? crnn : cnn) = count;
  }
  EXPECT_EQ(mina - acrnn, 2u * 32u);
  EXPECT_GT(acrnn, crnn);
  EXPECT_GT(crnn, cnn);
}

// --- gradients and checkpoints ------------------------------------------------------

TEST(Backward, BeforeForwardIsAnError) {
  const auto cfg = small_config();
  const MinaModel model(cfg, 1);
  auto grads = ModelParams::zeros_like(model.params());
  EXPECT_THROW(model.backward(ForwardTrace{}, 1, Eigen::Vector2d(1, 1), grads), ConfigError);
}

TEST(Backward, LossMatchesForwardCrossEntropy) {
  const auto cfg = small_config();
  const MinaModel model(cfg, 1);
  const auto rec = prepared(cfg, 1, 1);
  ForwardTrace tr;
  model.forward(rec, {}, &tr);
  auto grads = ModelParams::zeros_like(model.params());
  const Eigen::Vector2d w(0.8, 1.6);
  const double l = model.backward(tr, 1, w, grads);
  EXPECT_NEAR(l, -1.6 * std::log(tr.p[1]), 1e-12);
  EXPECT_NEAR(model.loss(rec, w), l, 1e-15);
}

TEST(Backward, GradientCheckEveryVariant) {
  for (Variant v : {Variant::Mina, Variant::Acrnn, Variant::Crnn, Variant::Cnn}) {
    for (int label : {0, 1}) {
      ModelGradCheckOptions opts;
      opts.label = label;
      const auto report = model_gradcheck(small_config(v), opts);
      EXPECT_LE(report.max_rel_error, 1e-4) << to_string(v) << " label " << label;
      EXPECT_GE(report.coordinates, 200u);
    }
  }
}

TEST(Backward, GradientCheckSharedParameters) {
  ModelConfig cfg = small_config();
  cfg.share_channel_params = true;
  EXPECT_LE(model_gradcheck(cfg).max_rel_error, 1e-4);
}

TEST(Backward, CorruptedGradientIsDetected) {
  ModelGradCheckOptions opts;
  opts.corrupt = 1e-2;
  EXPECT_GT(model_gradcheck(small_config(), opts).max_rel_error, 1e-4);
}

TEST(Checkpoint, ModelRoundTripPreservesPredictions) {
  const auto cfg = small_config(Variant::Acrnn);
  const MinaModel model(cfg, 31);
  const auto ckpt = to_checkpoint(cfg, model.params(), {{"seed", "31"}});
  const auto text = nn::serialize_checkpoint(ckpt);
  const auto [cfg2, params2] = from_checkpoint(nn::parse_checkpoint(text));
  EXPECT_EQ(cfg2, cfg);
  const MinaModel back(cfg2, params2);
  const auto rec = prepared(cfg, 1, 6);
  EXPECT_EQ(back.predict(rec).p, model.predict(rec).p);
  EXPECT_EQ(nn::serialize_checkpoint(to_checkpoint(cfg2, params2, {{"seed", "31"}})), text);
  EXPECT_THROW(to_checkpoint(cfg, model.params(), {{"model.n", "1"}}), ConfigError);
  EXPECT_THROW(from_checkpoint(nn::Checkpoint{}), ParseError);
}
