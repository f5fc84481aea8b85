#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "treeslam/manifold.hpp"

namespace treeslam
{

enum class FactorKind
{
  Motion,
  RangeBearing,
  PriorPose,
  PriorBlock,
  RelativePose,
};

inline const char * to_string(FactorKind kind)
{
  switch (kind) {
    case FactorKind::Motion: return "Motion";
    case FactorKind::RangeBearing: return "RangeBearing";
    case FactorKind::PriorPose: return "PriorPose";
    case FactorKind::PriorBlock: return "PriorBlock";
    case FactorKind::RelativePose: return "RelativePose";
  }
  return "?";
}

/// A reference to one named state block of a tree node.
struct BlockRef
{
  std::uint64_t node{0};
  std::string name;

  auto operator<=>(const BlockRef &) const = default;
};

struct HuberLoss
{
  double k{1.0};
};

/// Frozen pre-integration results carried by a motion factor.
struct MotionAux
{
  Delta2 delta_bar;
  Eigen::Matrix3d Q_delta{Eigen::Matrix3d::Zero()};
  Eigen::MatrixXd J_delta_c;
  Eigen::VectorXd c_bar;
};

/**
 * Residual definition.
 *
 * Block order in `constrained` per kind:
 *   Motion        xi.p, xi.o, xj.p, xj.o, c
 *   RangeBearing  x.p, x.o, ext.p, ext.o, landmark.p
 *   PriorPose     x.p, x.o
 *   PriorBlock    block
 *   RelativePose  xi.p, xi.o, xj.p, xj.o
 */
struct Factor
{
  FactorKind kind{FactorKind::PriorBlock};
  Eigen::VectorXd z;
  Eigen::MatrixXd sqrt_info;
  std::optional<HuberLoss> loss;
  std::vector<BlockRef> constrained;
  std::optional<MotionAux> motion;
};

}  // namespace treeslam
