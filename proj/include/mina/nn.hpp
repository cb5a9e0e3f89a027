#pragma once

// Differentiable building blocks. Every forward kernel has a matching
// backward that returns adjoints for its parameters (and input where the
// input is itself a model activation). Kernels are templated on the scalar
// type; the model instantiates them with double.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mina/error.hpp"
#include "mina/rng.hpp"

namespace mina::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

inline void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

// ---------------------------------------------------------------------------
// Dense: Y = W^T X (+) b, bias broadcast over columns.

template <typename Scalar>
Matrix<Scalar> dense(const Matrix<Scalar>& x, const Matrix<Scalar>& w, const Vector<Scalar>& b) {
  require(w.rows() == x.rows(), "dense: W rows must equal input rows");
  require(b.size() == w.cols(), "dense: bias length must equal W columns");
  Matrix<Scalar> y = w.transpose() * x;
  y.colwise() += b;
  return y;
}

template <typename Scalar>
struct DenseGrad {
  Matrix<Scalar> dx;
  Matrix<Scalar> dw;
  Vector<Scalar> db;
};

template <typename Scalar>
DenseGrad<Scalar> dense_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& w,
                                 const Matrix<Scalar>& dy) {
  require(dy.rows() == w.cols() && dy.cols() == x.cols(), "dense_backward: bad output adjoint");
  return {w * dy, x * dy.transpose(), dy.rowwise().sum()};
}

// ---------------------------------------------------------------------------
// 1-D valid convolution (cross-correlation) with stride.

inline Eigen::Index conv_output_length(Eigen::Index length, Eigen::Index size, Eigen::Index stride) {
  if (size < 1 || stride < 1) throw ConfigError("conv: filter size and stride must be >= 1");
  if (length < size) {
    throw ShapeError("conv: input length " + std::to_string(length) + " shorter than filter size " +
                     std::to_string(size));
  }
  return (length - size) / stride + 1;
}

/// Gathers every window of every row of `segments` (M x T) into a
/// size x (M*N) patch matrix; column k*N + j is window j of segment k.
template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& segments, Eigen::Index size, Eigen::Index stride) {
  const Eigen::Index m = segments.rows();
  const Eigen::Index n = conv_output_length(segments.cols(), size, stride);
  Matrix<Scalar> patches(size, m * n);
  for (Eigen::Index k = 0; k < m; ++k) {
    for (Eigen::Index j = 0; j < n; ++j) {
      patches.col(k * n + j) = segments.row(k).segment(j * stride, size).transpose();
    }
  }
  return patches;
}

/// Applies K filters (K x size) to one segment. Output is K x N.
template <typename Scalar>
Matrix<Scalar> conv1d(const Vector<Scalar>& segment, const Matrix<Scalar>& filters,
                      const Vector<Scalar>& bias, Eigen::Index stride) {
  require(bias.size() == filters.rows(), "conv1d: bias length must equal filter count");
  Matrix<Scalar> seg = segment.transpose();
  Matrix<Scalar> out = filters * im2col<Scalar>(seg, filters.cols(), stride);
  out.colwise() += bias;
  return out;
}

/// Same filters over all M segments at once: K x (M*N).
template <typename Scalar>
Matrix<Scalar> conv1d_segments(const Matrix<Scalar>& patches, const Matrix<Scalar>& filters,
                               const Vector<Scalar>& bias) {
  require(patches.rows() == filters.cols(), "conv1d: patch height must equal filter size");
  require(bias.size() == filters.rows(), "conv1d: bias length must equal filter count");
  Matrix<Scalar> out = filters * patches;
  out.colwise() += bias;
  return out;
}

template <typename Scalar>
struct ConvGrad {
  Matrix<Scalar> dfilters;
  Vector<Scalar> dbias;
};

template <typename Scalar>
ConvGrad<Scalar> conv1d_segments_backward(const Matrix<Scalar>& patches, const Matrix<Scalar>& dy) {
  return {dy * patches.transpose(), dy.rowwise().sum()};
}

// ---------------------------------------------------------------------------
// LSTM. Gate blocks are stacked [input; forget; candidate; output].

template <typename Scalar>
struct LstmWeights {
  Matrix<Scalar> wx;  // 4H x input
  Matrix<Scalar> wh;  // 4H x H
  Vector<Scalar> b;   // 4H

  Eigen::Index hidden() const { return wh.cols(); }
  Eigen::Index input() const { return wx.cols(); }

  static LstmWeights zeros(Eigen::Index input, Eigen::Index hidden) {
    return {Matrix<Scalar>::Zero(4 * hidden, input), Matrix<Scalar>::Zero(4 * hidden, hidden),
            Vector<Scalar>::Zero(4 * hidden)};
  }
};

template <typename Scalar>
struct LstmTrace {
  Matrix<Scalar> gates;  // activated gates, 4H x M
  Matrix<Scalar> cells;  // H x M
  Matrix<Scalar> hidden; // H x M
  bool reverse = false;
};

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  return Scalar(1) / (Scalar(1) + std::exp(-z));
}

/// Runs one direction over the columns of `x` (input x M). Output column t
/// is the hidden state after consuming column t.
template <typename Scalar>
Matrix<Scalar> lstm_forward(const Matrix<Scalar>& x, const LstmWeights<Scalar>& p, bool reverse,
                            LstmTrace<Scalar>* trace = nullptr) {
  require(p.wx.cols() == x.rows(), "lstm: input dimension mismatch");
  const Eigen::Index h = p.hidden();
  const Eigen::Index m = x.cols();
  Matrix<Scalar> pre = p.wx * x;
  pre.colwise() += p.b;

  Matrix<Scalar> gates(4 * h, m);
  Matrix<Scalar> cells(h, m);
  Matrix<Scalar> hidden(h, m);
  Vector<Scalar> h_prev = Vector<Scalar>::Zero(h);
  Vector<Scalar> c_prev = Vector<Scalar>::Zero(h);
  for (Eigen::Index step = 0; step < m; ++step) {
    const Eigen::Index t = reverse ? m - 1 - step : step;
    Vector<Scalar> z = pre.col(t);
    z.noalias() += p.wh * h_prev;
    for (Eigen::Index r = 0; r < 4 * h; ++r) {
      z[r] = (r >= 2 * h && r < 3 * h) ? std::tanh(z[r]) : sigmoid(z[r]);
    }
    const auto i = z.segment(0, h);
    const auto f = z.segment(h, h);
    const auto g = z.segment(2 * h, h);
    const auto o = z.segment(3 * h, h);
    c_prev = f.cwiseProduct(c_prev) + i.cwiseProduct(g);
    h_prev = o.cwiseProduct(c_prev.array().tanh().matrix());
    gates.col(t) = z;
    cells.col(t) = c_prev;
    hidden.col(t) = h_prev;
  }
  if (trace) *trace = {gates, cells, hidden, reverse};
  return hidden;
}

template <typename Scalar>
struct LstmGrad {
  Matrix<Scalar> dx;
  LstmWeights<Scalar> dw;
};

/// Backpropagation through time given the adjoint of every output column.
template <typename Scalar>
LstmGrad<Scalar> lstm_backward(const Matrix<Scalar>& x, const LstmWeights<Scalar>& p,
                               const LstmTrace<Scalar>& tr, const Matrix<Scalar>& dhidden) {
  const Eigen::Index h = p.hidden();
  const Eigen::Index m = x.cols();
  require(dhidden.rows() == h && dhidden.cols() == m, "lstm_backward: bad output adjoint");

  Matrix<Scalar> dz(4 * h, m);
  Matrix<Scalar> h_shift(h, m);  // h_{t-1} in processing order, per column
  Vector<Scalar> dh_next = Vector<Scalar>::Zero(h);
  Vector<Scalar> dc_next = Vector<Scalar>::Zero(h);
  for (Eigen::Index step = m - 1; step >= 0; --step) {
    const Eigen::Index t = tr.reverse ? m - 1 - step : step;
    const Eigen::Index prev = tr.reverse ? t + 1 : t - 1;
    const bool first = step == 0;
    const auto gate = tr.gates.col(t);
    const auto i = gate.segment(0, h).array();
    const auto f = gate.segment(h, h).array();
    const auto g = gate.segment(2 * h, h).array();
    const auto o = gate.segment(3 * h, h).array();
    const Vector<Scalar> c_prev = first ? Vector<Scalar>::Zero(h) : Vector<Scalar>(tr.cells.col(prev));
    h_shift.col(t) = first ? Vector<Scalar>::Zero(h) : Vector<Scalar>(tr.hidden.col(prev));

    const Vector<Scalar> dh = dhidden.col(t) + dh_next;
    const auto tc = tr.cells.col(t).array().tanh();
    const Vector<Scalar> dc = dc_next.array() + dh.array() * o * (Scalar(1) - tc * tc);

    dz.col(t).segment(0, h) = (dc.array() * g * i * (Scalar(1) - i)).matrix();
    dz.col(t).segment(h, h) = (dc.array() * c_prev.array() * f * (Scalar(1) - f)).matrix();
    dz.col(t).segment(2 * h, h) = (dc.array() * i * (Scalar(1) - g * g)).matrix();
    dz.col(t).segment(3 * h, h) = (dh.array() * tc * o * (Scalar(1) - o)).matrix();

    dc_next = dc.array() * f;
    dh_next.noalias() = p.wh.transpose() * dz.col(t);
  }
  LstmGrad<Scalar> out;
  out.dx = p.wx.transpose() * dz;
  out.dw.wx = dz * x.transpose();
  out.dw.wh = dz * h_shift.transpose();
  out.dw.b = dz.rowwise().sum();
  return out;
}

/// Bidirectional LSTM: column k of the output is [forward h_k; backward h_k].
template <typename Scalar>
Matrix<Scalar> bilstm(const Matrix<Scalar>& x, const LstmWeights<Scalar>& fwd,
                      const LstmWeights<Scalar>& bwd, LstmTrace<Scalar>* fwd_trace = nullptr,
                      LstmTrace<Scalar>* bwd_trace = nullptr) {
  require(fwd.hidden() == bwd.hidden(), "bilstm: direction hidden sizes differ");
  Matrix<Scalar> out(2 * fwd.hidden(), x.cols());
  out.topRows(fwd.hidden()) = lstm_forward(x, fwd, false, fwd_trace);
  out.bottomRows(bwd.hidden()) = lstm_forward(x, bwd, true, bwd_trace);
  return out;
}

// ---------------------------------------------------------------------------
// Softmax, weighted cross entropy, dropout.

template <typename Scalar>
Vector<Scalar> softmax(const Vector<Scalar>& v) {
  require(v.size() > 0, "softmax: empty input");
  Vector<Scalar> e = (v.array() - v.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// Adjoint of the logits given the adjoint of the probabilities.
template <typename Scalar>
Vector<Scalar> softmax_backward(const Vector<Scalar>& p, const Vector<Scalar>& dp) {
  return p.cwiseProduct((dp.array() - p.dot(dp)).matrix());
}

inline constexpr double kLogClamp = 1e-12;

/// -sum_c [z_c = 1] w_c log p_c with p clamped at 1e-12.
template <typename Scalar>
Scalar weighted_cross_entropy(const Vector<Scalar>& p, const Vector<Scalar>& z,
                              const Vector<Scalar>& w) {
  require(p.size() == z.size() && z.size() == w.size(), "weighted_cross_entropy: length mismatch");
  int hot = 0;
  for (Eigen::Index c = 0; c < z.size(); ++c) {
    if (z[c] == Scalar(1)) {
      ++hot;
    } else if (z[c] != Scalar(0)) {
      hot = -1;
      break;
    }
  }
  if (hot != 1) throw ConfigError("weighted_cross_entropy: label vector is not one-hot");
  Scalar loss(0);
  for (Eigen::Index c = 0; c < z.size(); ++c) {
    if (z[c] == Scalar(1)) loss -= w[c] * std::log(std::max(p[c], Scalar(kLogClamp)));
  }
  return loss;
}

template <typename Scalar>
Vector<Scalar> one_hot(int label, Eigen::Index classes) {
  if (label < 0 || label >= classes) throw ConfigError("label out of range");
  Vector<Scalar> z = Vector<Scalar>::Zero(classes);
  z[label] = Scalar(1);
  return z;
}

/// Adjoint of softmax logits for weighted CE: w_y (p - z).
template <typename Scalar>
Vector<Scalar> softmax_cross_entropy_backward(const Vector<Scalar>& p, const Vector<Scalar>& z,
                                              const Vector<Scalar>& w) {
  const Scalar wy = w.dot(z);
  return wy * (p - z);
}

/// Inverted-dropout mask: entries are 0 or 1/(1 - rate). All ones when not
/// training or when rate == 0.
template <typename Scalar>
Vector<Scalar> dropout_mask(Eigen::Index length, double rate, bool training, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  Vector<Scalar> mask = Vector<Scalar>::Ones(length);
  if (!training || rate == 0.0) return mask;
  Pcg32 rng(seed, 0xd709ULL);
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < length; ++i) mask[i] = rng.uniform() < rate ? Scalar(0) : keep_scale;
  return mask;
}

template <typename Scalar>
Vector<Scalar> dropout(const Vector<Scalar>& v, double rate, bool training, std::uint64_t seed) {
  return v.cwiseProduct(dropout_mask<Scalar>(v.size(), rate, training, seed));
}

// ---------------------------------------------------------------------------
// Parameter views, optimisation and verification.

/// A named, mutable view of one parameter tensor and its gradient
/// (column-major storage, as Eigen keeps it).
struct ParamRef {
  std::string name;
  double* value = nullptr;
  double* grad = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  template <typename A, typename B>
  static ParamRef of(std::string name, Eigen::PlainObjectBase<A>& value,
                     Eigen::PlainObjectBase<B>& grad) {
    if (value.rows() != grad.rows() || value.cols() != grad.cols()) {
      throw ShapeError("gradient shape differs from parameter " + name);
    }
    return {std::move(name), value.data(), grad.data(), value.rows(), value.cols()};
  }

  Eigen::Map<Eigen::MatrixXd> value_map() const { return {value, rows, cols}; }
  Eigen::Map<Eigen::MatrixXd> grad_map() const { return {grad, rows, cols}; }
  Eigen::Index size() const { return rows * cols; }
};

struct AdamState {
  double lr = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
};

/// Bias-corrected Adam update of every parameter from its gradient.
void adam_step(std::span<const ParamRef> params, AdamState& state);

struct GradCheckEntry {
  std::string name;
  Eigen::Index index = 0;  // row-major flat index of the worst coordinate
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> per_param;  // worst coordinate of each tensor
};

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t max_coordinates = 4000;  // sampled when the model is larger
  std::size_t min_coordinates = 200;
  std::uint64_t seed = 0;
  double denominator_floor = 1e-6;
};

/// |a - b| / max(|a| + |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares the gradients already stored in `params` against central
/// differences of `loss`. Parameter values are restored on return.
GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  std::span<const ParamRef> params,
                                  const GradCheckOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoint container: a text header block plus named row-major tensors.
// Numbers use the shortest round-trip decimal form, so save -> load -> save
// reproduces the file byte for byte.

struct NamedTensor {
  std::string name;
  Eigen::MatrixXd value;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<NamedTensor> tensors;

  const Eigen::MatrixXd& tensor(const std::string& name) const;
  std::string header_value(const std::string& key) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view text);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mina::nn
