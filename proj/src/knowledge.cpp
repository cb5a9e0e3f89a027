#include "mina/knowledge.hpp"

#include "mina/error.hpp"
#include "mina/nn.hpp"

namespace mina::knowledge {

Eigen::VectorXd first_difference(const Eigen::Ref<const Eigen::VectorXd>& s) {
  if (s.size() == 0) throw ConfigError("first_difference: empty input");
  Eigen::VectorXd d(s.size());
  d[0] = s[0];
  d.tail(s.size() - 1) = s.tail(s.size() - 1) - s.head(s.size() - 1);
  return d;
}

Eigen::MatrixXd first_difference_rows(const Eigen::MatrixXd& segments) {
  if (segments.cols() == 0) throw ConfigError("first_difference: empty segments");
  Eigen::MatrixXd d(segments.rows(), segments.cols());
  d.col(0) = segments.col(0);
  const auto t = segments.cols();
  d.rightCols(t - 1) = segments.rightCols(t - 1) - segments.leftCols(t - 1);
  return d;
}

Eigen::RowVectorXd beat_knowledge(const Eigen::Ref<const Eigen::VectorXd>& segment,
                                  const Eigen::Ref<const Eigen::VectorXd>& filter,
                                  Eigen::Index stride) {
  const Eigen::MatrixXd diff = first_difference(segment).transpose();
  const Eigen::MatrixXd patches = nn::im2col<double>(diff, filter.size(), stride);
  return filter.transpose() * patches;
}

Eigen::RowVectorXd rhythm_knowledge(const Eigen::MatrixXd& segments, bool use_sqrt) {
  if (segments.cols() == 0) throw ConfigError("rhythm_knowledge: empty segments");
  const Eigen::VectorXd mean = segments.rowwise().mean();
  Eigen::RowVectorXd out =
      (segments.colwise() - mean).rowwise().squaredNorm().transpose() /
      static_cast<double>(segments.cols());
  if (use_sqrt) out = out.cwiseSqrt();
  return out;
}

Eigen::RowVectorXd freq_knowledge(const Eigen::MatrixXd& channels, double sampling_rate) {
  Eigen::RowVectorXd out(channels.rows());
  for (Eigen::Index i = 0; i < channels.rows(); ++i) {
    out[i] = dsp::periodogram_psd(channels.row(i).transpose(), sampling_rate).mean();
  }
  return out;
}

Eigen::RowVectorXd freq_knowledge(const dsp::ChannelBank& bank) {
  return freq_knowledge(bank.channels, bank.sampling_rate);
}

Eigen::RowVectorXd standardize(const Eigen::RowVectorXd& row) {
  if (row.size() == 0) return row;
  const double mean = row.mean();
  const double var = (row.array() - mean).square().mean();
  if (var <= 0.0) return Eigen::RowVectorXd::Zero(row.size());
  return (row.array() - mean) / std::sqrt(var);
}

}  // namespace mina::knowledge
