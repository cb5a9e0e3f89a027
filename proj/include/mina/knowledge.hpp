#pragma once

#include <Eigen/Dense>

#include <vector>

#include "mina/dsp.hpp"

namespace mina::knowledge {

/// Domain features guiding the three attention levels of one record.
/// Each level uses a single feature row (E = 1).
struct KnowledgeFeatures {
  std::vector<Eigen::MatrixXd> k_alpha;  // per channel, M x N (row k belongs to segment k)
  std::vector<Eigen::RowVectorXd> k_beta;  // per channel, length M
  Eigen::RowVectorXd k_gamma;              // length F
};

/// d_0 = s_0, d_i = s_i - s_{i-1}.
Eigen::VectorXd first_difference(const Eigen::Ref<const Eigen::VectorXd>& s);

/// First difference of every row of an M x T segment matrix.
Eigen::MatrixXd first_difference_rows(const Eigen::MatrixXd& segments);

/// Beat-level feature: valid strided convolution of first_difference(s)
/// with the (learned) single filter. Length (T - size) / stride + 1.
Eigen::RowVectorXd beat_knowledge(const Eigen::Ref<const Eigen::VectorXd>& segment,
                                  const Eigen::Ref<const Eigen::VectorXd>& filter,
                                  Eigen::Index stride = 2);

/// Rhythm-level feature: (1/T) sum (s_i - mean)^2 per segment row, i.e. the
/// population variance. The usual "standard deviation" reading (square root)
/// is available through `use_sqrt`.
Eigen::RowVectorXd rhythm_knowledge(const Eigen::MatrixXd& segments, bool use_sqrt = false);

/// Frequency-level feature: mean periodogram power of each channel.
Eigen::RowVectorXd freq_knowledge(const dsp::ChannelBank& bank);

/// Same as freq_knowledge for a raw F x n channel matrix.
Eigen::RowVectorXd freq_knowledge(const Eigen::MatrixXd& channels, double sampling_rate);

/// Shifts and scales `row` to zero mean, unit population variance. Constant
/// rows become zero.
Eigen::RowVectorXd standardize(const Eigen::RowVectorXd& row);

}  // namespace mina::knowledge
