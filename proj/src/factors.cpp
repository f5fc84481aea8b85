#include "treeslam/factors.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>

#include "treeslam/preint.hpp"

namespace treeslam
{

Eigen::MatrixXd whiten(const Eigen::MatrixXd & Q)
{
  if (Q.rows() != Q.cols() || Q.rows() == 0) {
    throw Error(ErrorKind::Decomposition, "covariance must be square and non-empty");
  }
  if (!Q.allFinite()) {
    throw Error(ErrorKind::Decomposition, "covariance has non-finite entries");
  }
  const double scale = std::max(Q.cwiseAbs().maxCoeff(), 1e-300);
  if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
    throw Error(ErrorKind::Decomposition, "covariance is not symmetric");
  }
  const Eigen::MatrixXd Qs = 0.5 * (Q + Q.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt(Qs);
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 0.0) {
    throw Error(ErrorKind::Decomposition, "covariance is not positive definite");
  }
  const Eigen::MatrixXd info = llt.solve(Eigen::MatrixXd::Identity(Q.rows(), Q.cols()));
  Eigen::LLT<Eigen::MatrixXd> llt_info(0.5 * (info + info.transpose()));
  if (llt_info.info() != Eigen::Success || !info.allFinite()) {
    throw Error(ErrorKind::Decomposition, "information matrix is not positive definite");
  }
  Eigen::MatrixXd U = llt_info.matrixU();
  if (!U.allFinite()) {
    throw Error(ErrorKind::Decomposition, "covariance is numerically singular");
  }
  return U;
}

namespace
{

void require_kind(const Factor & f, FactorKind kind)
{
  if (f.kind != kind) {
    throw Error(
      ErrorKind::Contract, std::string("expected ") + to_string(kind) + " factor, got " +
      to_string(f.kind));
  }
}

/// Split the columns of a 3-column pose Jacobian into its p (2) and o (1) blocks.
void push_pose_blocks(Residual & res, const Eigen::MatrixXd & J)
{
  res.J.push_back(J.leftCols<2>());
  res.J.push_back(J.rightCols<1>());
}

}  // namespace

Residual residual_motion(const Pose2 & xi, const Pose2 & xj, const Eigen::VectorXd & c, const Factor & f)
{
  require_kind(f, FactorKind::Motion);
  if (!f.motion) {
    throw Error(ErrorKind::Contract, "motion factor without pre-integration data");
  }
  const MotionAux & aux = *f.motion;
  const Eigen::MatrixXd U = f.sqrt_info.size() ? f.sqrt_info : whiten(aux.Q_delta);

  const Eigen::Matrix3d Jc = aux.J_delta_c;
  const Delta2 corrected = correct_delta<DiffDriveModel>(aux.delta_bar, Jc, c, aux.c_bar);
  const auto between = pose_between(xi, xj);

  Residual res;
  res.r = U * delta_minus(corrected, between.value);
  push_pose_blocks(res, -U * between.J_first);
  push_pose_blocks(res, -U * between.J_second);
  res.J.push_back(U * aux.J_delta_c);
  return res;
}

Eigen::Vector2d predict_range_bearing(const Pose2 & x, const Pose2 & ext, const Eigen::Vector2d & l)
{
  const Pose2 s = pose_compose(x, as_delta(ext)).value;
  const Eigen::Vector2d ls = rotation(s.theta).transpose() * (l - s.p);
  return {ls.norm(), std::atan2(ls.y(), ls.x())};
}

Residual residual_range_bearing(
  const Pose2 & x, const Pose2 & ext, const Eigen::Vector2d & l, const Factor & f)
{
  require_kind(f, FactorKind::RangeBearing);

  const auto sc = pose_compose(x, as_delta(ext));
  const Pose2 & s = sc.value;
  const Eigen::Matrix2d Rt = rotation(s.theta).transpose();
  const Eigen::Vector2d diff = l - s.p;
  const Eigen::Vector2d ls = Rt * diff;
  const double rho2 = ls.squaredNorm();
  const double rho = std::sqrt(rho2);
  if (rho < 1e-9) {
    throw Error(ErrorKind::SingularObservation, "landmark coincides with the sensor origin");
  }

  const Eigen::Vector2d h(rho, std::atan2(ls.y(), ls.x()));
  Eigen::Vector2d e = f.z - h;
  e(1) = normalize_angle(e(1));

  // dh / d ls
  Eigen::Matrix2d H_ls;
  H_ls << ls.x() / rho, ls.y() / rho,
    -ls.y() / rho2, ls.x() / rho2;
  // d ls / d (s.p, s.theta)
  Eigen::Matrix<double, 2, 3> L_s;
  L_s.leftCols<2>() = -Rt;
  L_s.col(2) = rotation_derivative(s.theta).transpose() * diff;

  const Eigen::MatrixXd & U = f.sqrt_info;
  const Eigen::Matrix<double, 2, 3> H_s = H_ls * L_s;
  Residual res;
  res.r = U * e;
  push_pose_blocks(res, -U * H_s * sc.J_first);
  push_pose_blocks(res, -U * H_s * sc.J_second);
  res.J.push_back(-U * H_ls * Rt);
  return res;
}

Residual residual_prior(const std::vector<const StateBlock *> & x_blocks, const Factor & f)
{
  Residual res;
  if (f.kind == FactorKind::PriorPose) {
    if (x_blocks.size() != 2 || x_blocks[0]->size() != 2 || x_blocks[1]->kind() != BlockKind::Angle) {
      throw Error(ErrorKind::Contract, "pose prior expects p (2) and o (angle) blocks");
    }
    const Pose2 x(Eigen::Vector2d(x_blocks[0]->values()), x_blocks[1]->values()(0));
    const Pose2 z = Pose2::from_vector(f.z);
    const auto b = pose_between(z, x);
    res.r = f.sqrt_info * b.value.vector();
    push_pose_blocks(res, f.sqrt_info * b.J_second);
    return res;
  }
  require_kind(f, FactorKind::PriorBlock);
  if (x_blocks.size() != 1 || x_blocks[0]->size() != f.z.size()) {
    throw Error(ErrorKind::Contract, "block prior dimension mismatch");
  }
  const StateBlock & x = *x_blocks[0];
  Eigen::VectorXd e = x.values() - f.z;
  if (x.kind() == BlockKind::Angle) {
    e(0) = normalize_angle(e(0));
  }
  res.r = f.sqrt_info * e;
  res.J.push_back(f.sqrt_info);
  return res;
}

Residual residual_relative_pose(const Pose2 & xi, const Pose2 & xj, const Factor & f)
{
  require_kind(f, FactorKind::RelativePose);
  const auto b = pose_between(xi, xj);
  const Eigen::MatrixXd & U = f.sqrt_info;
  Residual res;
  res.r = U * delta_minus(Delta2::from_vector(f.z), b.value);
  push_pose_blocks(res, -U * b.J_first);
  push_pose_blocks(res, -U * b.J_second);
  return res;
}

namespace
{

Pose2 pose_of(const StateBlock * p, const StateBlock * o)
{
  return {Eigen::Vector2d(p->values()), o->values()(0)};
}

void require_count(const std::vector<const StateBlock *> & blocks, std::size_t n, FactorKind kind)
{
  if (blocks.size() != n) {
    throw Error(
      ErrorKind::Contract, std::string(to_string(kind)) + " factor expects " + std::to_string(n) +
      " blocks, got " + std::to_string(blocks.size()));
  }
}

}  // namespace

Residual evaluate(const Factor & f, const std::vector<const StateBlock *> & b)
{
  switch (f.kind) {
    case FactorKind::Motion:
      require_count(b, 5, f.kind);
      return residual_motion(pose_of(b[0], b[1]), pose_of(b[2], b[3]), b[4]->values(), f);
    case FactorKind::RangeBearing:
      require_count(b, 5, f.kind);
      return residual_range_bearing(
        pose_of(b[0], b[1]), pose_of(b[2], b[3]), Eigen::Vector2d(b[4]->values()), f);
    case FactorKind::PriorPose:
    case FactorKind::PriorBlock:
      return residual_prior(b, f);
    case FactorKind::RelativePose:
      require_count(b, 4, f.kind);
      return residual_relative_pose(pose_of(b[0], b[1]), pose_of(b[2], b[3]), f);
  }
  throw Error(ErrorKind::Contract, "unknown factor kind");
}

HuberWeight huber(const HuberLoss & loss, double s)
{
  const double k = loss.k;
  if (s <= k * k) {
    return {s, 1.0};
  }
  const double root = std::sqrt(s);
  return {2.0 * k * root - k * k, k / root};
}

std::vector<Eigen::MatrixXd> numeric_jacobian(
  const ResidualFunction & fn, const std::vector<StateBlock> & blocks, double step)
{
  std::vector<Eigen::MatrixXd> out;
  std::vector<StateBlock> work = blocks;
  const Eigen::Index m = fn(work).size();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Eigen::Index n = blocks[i].tangent_dim();
    Eigen::MatrixXd J(m, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::VectorXd dx = Eigen::VectorXd::Zero(n);
      dx(k) = step;
      work[i].set_values(block_plus(blocks[i], dx));
      const Eigen::VectorXd rp = fn(work);
      work[i].set_values(block_plus(blocks[i], -dx));
      const Eigen::VectorXd rm = fn(work);
      J.col(k) = (rp - rm) / (2.0 * step);
    }
    work[i] = blocks[i];
    out.push_back(std::move(J));
  }
  return out;
}

}  // namespace treeslam
