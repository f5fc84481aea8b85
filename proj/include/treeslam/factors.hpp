#pragma once

#include <functional>
#include <vector>

#include <Eigen/Core>

#include "treeslam/factor.hpp"
#include "treeslam/manifold.hpp"

namespace treeslam
{

/// Whitened residual and one Jacobian block per constrained state block, in order.
struct Residual
{
  Eigen::VectorXd r;
  std::vector<Eigen::MatrixXd> J;
};

/// Upper-triangular U with UᵀU = Q⁻¹. Throws a decomposition error unless Q is SPD.
Eigen::MatrixXd whiten(const Eigen::MatrixXd & Q);

/// Blocks: xi.p, xi.o, xj.p, xj.o, c.
Residual residual_motion(const Pose2 & xi, const Pose2 & xj, const Eigen::VectorXd & c, const Factor & f);

/// Blocks: x.p, x.o, ext.p, ext.o, l. Measurement z = (range, bearing).
Residual residual_range_bearing(
  const Pose2 & x, const Pose2 & ext, const Eigen::Vector2d & l, const Factor & f);

/// PriorPose takes the p and o blocks; PriorBlock takes exactly one block.
Residual residual_prior(const std::vector<const StateBlock *> & x_blocks, const Factor & f);

/// Blocks: xi.p, xi.o, xj.p, xj.o. Measurement z is xj expressed in xi.
Residual residual_relative_pose(const Pose2 & xi, const Pose2 & xj, const Factor & f);

/// Predicted (range, bearing) of landmark l from robot pose x through extrinsic ext.
Eigen::Vector2d predict_range_bearing(const Pose2 & x, const Pose2 & ext, const Eigen::Vector2d & l);

/// Evaluate any factor kind given its constrained blocks in order.
Residual evaluate(const Factor & f, const std::vector<const StateBlock *> & blocks);

struct HuberWeight
{
  double rho;
  double weight;
};

/// Huber cost rho(s) of a squared norm s and the IRLS weight rho'(s).
HuberWeight huber(const HuberLoss & loss, double squared_norm);

using ResidualFunction = std::function<Eigen::VectorXd(const std::vector<StateBlock> &)>;

/// Central differences on every tangent coordinate, stepping blocks through block_plus.
std::vector<Eigen::MatrixXd> numeric_jacobian(
  const ResidualFunction & fn, const std::vector<StateBlock> & blocks, double step = 1e-6);

}  // namespace treeslam
