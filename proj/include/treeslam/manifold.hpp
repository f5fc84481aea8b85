#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "treeslam/error.hpp"

namespace treeslam
{

using Tangent2 = Eigen::Vector3d;

/// Wrap an angle into (-pi, pi].
inline double normalize_angle(double a)
{
  if (!std::isfinite(a)) {
    throw Error(ErrorKind::InvalidValue, "normalize_angle: non-finite angle");
  }
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::remainder(a, two_pi);
  if (r <= -std::numbers::pi) {
    r += two_pi;
  }
  return r;
}

inline Eigen::Matrix2d rotation(double theta)
{
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix2d R;
  R << c, -s, s, c;
  return R;
}

/// d R(theta) / d theta
inline Eigen::Matrix2d rotation_derivative(double theta)
{
  const double c = std::cos(theta), s = std::sin(theta);
  Eigen::Matrix2d dR;
  dR << -s, -c, c, -s;
  return dR;
}

// ---------------------------------------------------------------------------
// State blocks
// ---------------------------------------------------------------------------

enum class BlockKind
{
  Euclidean,
  Angle,
};

/**
 * Minimal estimable unit of the problem state.
 *
 * Euclidean(n) blocks hold n finite values and are stepped additively.
 * Angle blocks hold one value in (-pi, pi] and are stepped with wrap-around.
 */
class StateBlock
{
public:
  static StateBlock euclidean(const Eigen::VectorXd & values, bool fixed = false)
  {
    StateBlock b;
    b.kind_ = BlockKind::Euclidean;
    b.fixed_ = fixed;
    b.set_values(values);
    return b;
  }

  static StateBlock angle(double value, bool fixed = false)
  {
    StateBlock b;
    b.kind_ = BlockKind::Angle;
    b.fixed_ = fixed;
    b.set_values(Eigen::VectorXd::Constant(1, value));
    return b;
  }

  BlockKind kind() const { return kind_; }
  bool fixed() const { return fixed_; }
  void set_fixed(bool fixed) { fixed_ = fixed; }

  const Eigen::VectorXd & values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  Eigen::Index tangent_dim() const { return values_.size(); }

  /// Angle values are normalized on the way in.
  void set_values(const Eigen::VectorXd & values)
  {
    if (!values.allFinite()) {
      throw Error(ErrorKind::InvalidValue, "state block values must be finite");
    }
    if (kind_ == BlockKind::Angle) {
      if (values.size() != 1) {
        throw Error(ErrorKind::Contract, "angle block holds exactly one value");
      }
      values_ = Eigen::VectorXd::Constant(1, normalize_angle(values(0)));
    } else {
      values_ = values;
    }
  }

  std::string kind_name() const
  {
    return kind_ == BlockKind::Angle ? "Angle" : "Euclidean(" + std::to_string(size()) + ")";
  }

private:
  StateBlock() = default;

  BlockKind kind_{BlockKind::Euclidean};
  bool fixed_{false};
  Eigen::VectorXd values_;
};

/// Values of `b` stepped by the tangent increment `dx`.
inline Eigen::VectorXd block_plus(const StateBlock & b, const Eigen::Ref<const Eigen::VectorXd> & dx)
{
  if (dx.size() != b.tangent_dim()) {
    throw Error(
      ErrorKind::Contract, "block_plus: step of dimension " + std::to_string(dx.size()) +
      " for block of tangent dimension " + std::to_string(b.tangent_dim()));
  }
  if (b.kind() == BlockKind::Angle) {
    return Eigen::VectorXd::Constant(1, normalize_angle(b.values()(0) + dx(0)));
  }
  return b.values() + dx;
}

// ---------------------------------------------------------------------------
// 2D poses and motion deltas
// ---------------------------------------------------------------------------

struct Pose2
{
  Eigen::Vector2d p{Eigen::Vector2d::Zero()};
  double theta{0.0};

  Pose2() = default;
  Pose2(const Eigen::Vector2d & p_, double theta_)
  : p(p_), theta(normalize_angle(theta_)) {}
  Pose2(double x, double y, double theta_)
  : p(x, y), theta(normalize_angle(theta_)) {}

  Eigen::Vector3d vector() const { return {p.x(), p.y(), theta}; }
  static Pose2 from_vector(const Eigen::Vector3d & v) { return {v(0), v(1), v(2)}; }
};

struct Delta2
{
  Eigen::Vector2d dp{Eigen::Vector2d::Zero()};
  double dtheta{0.0};

  Delta2() = default;
  Delta2(const Eigen::Vector2d & dp_, double dtheta_)
  : dp(dp_), dtheta(normalize_angle(dtheta_)) {}
  Delta2(double x, double y, double dtheta_)
  : dp(x, y), dtheta(normalize_angle(dtheta_)) {}

  static Delta2 identity() { return {}; }

  Eigen::Vector3d vector() const { return {dp.x(), dp.y(), dtheta}; }
  static Delta2 from_vector(const Eigen::Vector3d & v) { return {v(0), v(1), v(2)}; }
};

inline Delta2 as_delta(const Pose2 & x) { return {x.p, x.theta}; }
inline Pose2 as_pose(const Delta2 & d) { return {d.dp, d.dtheta}; }

/// Result of a binary group operation with the Jacobians w.r.t. both operands.
template<typename T>
struct WithJacobians
{
  T value;
  Eigen::Matrix3d J_first;
  Eigen::Matrix3d J_second;
};

namespace detail
{

inline WithJacobians<Pose2> compose(
  const Eigen::Vector2d & ap, double atheta, const Eigen::Vector2d & bp, double btheta)
{
  const Eigen::Matrix2d R = rotation(atheta);
  WithJacobians<Pose2> out;
  out.value = Pose2(ap + R * bp, atheta + btheta);
  out.J_first.setIdentity();
  out.J_first.topRightCorner<2, 1>() = rotation_derivative(atheta) * bp;
  out.J_second.setIdentity();
  out.J_second.topLeftCorner<2, 2>() = R;
  return out;
}

}  // namespace detail

/// State-with-delta composition a ⊞ b.
inline WithJacobians<Pose2> pose_compose(const Pose2 & a, const Delta2 & b)
{
  return detail::compose(a.p, a.theta, b.dp, b.dtheta);
}

/// Delta composition a ∘ b. Same formula as pose_compose.
inline WithJacobians<Delta2> delta_compose(const Delta2 & a, const Delta2 & b)
{
  auto r = detail::compose(a.dp, a.dtheta, b.dp, b.dtheta);
  return {as_delta(r.value), r.J_first, r.J_second};
}

/// xj ⊟ xi: the delta taking xi to xj, expressed in the frame of xi.
inline WithJacobians<Delta2> pose_between(const Pose2 & xi, const Pose2 & xj)
{
  const Eigen::Matrix2d Rt = rotation(xi.theta).transpose();
  const Eigen::Vector2d d = xj.p - xi.p;
  WithJacobians<Delta2> out;
  out.value = Delta2(Rt * d, xj.theta - xi.theta);
  out.J_first.setZero();
  out.J_first.topLeftCorner<2, 2>() = -Rt;
  out.J_first.topRightCorner<2, 1>() = rotation_derivative(xi.theta).transpose() * d;
  out.J_first(2, 2) = -1.0;
  out.J_second.setIdentity();
  out.J_second.topLeftCorner<2, 2>() = Rt;
  return out;
}

inline Pose2 pose_inverse(const Pose2 & x)
{
  return {-(rotation(x.theta).transpose() * x.p), -x.theta};
}

/// d ⊕ t
inline Delta2 delta_plus(const Delta2 & d, const Tangent2 & t)
{
  return {d.dp + t.head<2>(), d.dtheta + t(2)};
}

/// d2 ⊖ d1
inline Tangent2 delta_minus(const Delta2 & d2, const Delta2 & d1)
{
  const Eigen::Vector2d dp = d2.dp - d1.dp;
  return {dp.x(), dp.y(), normalize_angle(d2.dtheta - d1.dtheta)};
}

}  // namespace treeslam
