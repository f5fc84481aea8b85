#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "treeslam/error.hpp"
#include "treeslam/manifold.hpp"

namespace treeslam
{

/**
 * Generic motion pre-integration.
 *
 * A motion model supplies four things and nothing else:
 *   precalibrate   v = f(u, c) with J_v_u and J_v_c
 *   compute_delta  delta = g(v) with J_delta_v
 *   compose        Delta ∘ delta with J w.r.t. both operands
 *   plus           x ⊞ Delta
 * plus `delta_plus` (⊕) for the calibration correction. Everything else in
 * this header is model-agnostic.
 */
template<typename Model>
struct MotionTraits
{
  static constexpr int raw_dim = Model::raw_dim;
  static constexpr int calib_dim = Model::calib_dim;
  static constexpr int v_dim = Model::v_dim;
  static constexpr int delta_dim = Model::delta_dim;

  using Raw = Eigen::Matrix<double, raw_dim, 1>;
  using RawCov = Eigen::Matrix<double, raw_dim, raw_dim>;
  using Calib = Eigen::Matrix<double, calib_dim, 1>;
  using V = Eigen::Matrix<double, v_dim, 1>;
  using DeltaCov = Eigen::Matrix<double, delta_dim, delta_dim>;
  using DeltaCalibJac = Eigen::Matrix<double, delta_dim, calib_dim>;
};

template<typename Model>
struct RawMotion
{
  using Tr = MotionTraits<Model>;
  double t{0.0};
  typename Tr::Raw u{Tr::Raw::Zero()};
  typename Tr::RawCov Q_u{Tr::RawCov::Zero()};
};

template<typename Model>
struct PreintEntry
{
  using Tr = MotionTraits<Model>;
  double t{0.0};
  typename Tr::Raw u;
  typename Tr::RawCov Q_u;
  typename Tr::V v;
  typename Model::Delta delta;
  typename Model::Delta delta_bar;
  typename Tr::DeltaCov Q_delta;
  typename Tr::DeltaCalibJac J_delta_c;
};

/// Pre-integration working set between the origin keyframe and the newest sample.
template<typename Model>
class PreintBuffer
{
public:
  using Tr = MotionTraits<Model>;
  using Entry = PreintEntry<Model>;
  using Delta = typename Model::Delta;

  PreintBuffer() = default;
  PreintBuffer(std::uint64_t origin_frame, double origin_t, const typename Tr::Calib & c_bar)
  : origin_frame_(origin_frame), origin_t_(origin_t), c_bar_(c_bar)
  {}

  std::uint64_t origin_frame() const { return origin_frame_; }
  double origin_t() const { return origin_t_; }
  const typename Tr::Calib & c_bar() const { return c_bar_; }
  const std::vector<Entry> & entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  double last_t() const { return entries_.empty() ? origin_t_ : entries_.back().t; }

  Delta delta_bar() const { return entries_.empty() ? Model::identity() : entries_.back().delta_bar; }
  typename Tr::DeltaCov Q_delta() const
  {
    return entries_.empty() ? Tr::DeltaCov::Zero().eval() : entries_.back().Q_delta;
  }
  typename Tr::DeltaCalibJac J_delta_c() const
  {
    return entries_.empty() ? Tr::DeltaCalibJac::Zero().eval() : entries_.back().J_delta_c;
  }

  /// Run one sample through the pipeline and append the resulting entry.
  const Entry & integrate_step(const RawMotion<Model> & m)
  {
    if (!(m.t > last_t())) {
      throw Error(
        ErrorKind::Ordering, "motion sample at t=" + std::to_string(m.t) +
        " not after t=" + std::to_string(last_t()));
    }
    const auto pre = Model::precalibrate(m.u, c_bar_);
    const auto dv = Model::compute_delta(pre.v);
    const auto comp = Model::compose(delta_bar(), dv.delta);

    const typename Tr::DeltaCov Q = Q_delta();
    const typename Tr::DeltaCalibJac Jc = J_delta_c();
    const auto J_delta_v = (comp.J_second * dv.J_delta_v).eval();
    const auto J_u = (J_delta_v * pre.J_v_u).eval();

    Entry e;
    e.t = m.t;
    e.u = m.u;
    e.Q_u = m.Q_u;
    e.v = pre.v;
    e.delta = dv.delta;
    e.delta_bar = comp.value;
    e.Q_delta = comp.J_first * Q * comp.J_first.transpose() + J_u * m.Q_u * J_u.transpose();
    e.J_delta_c = comp.J_first * Jc + J_delta_v * pre.J_v_c;
    entries_.push_back(e);
    return entries_.back();
  }

private:
  std::uint64_t origin_frame_{0};
  double origin_t_{0.0};
  typename Tr::Calib c_bar_{Tr::Calib::Zero()};
  std::vector<Entry> entries_;
};

/// First-order correction of the pre-integrated delta for calibration c != c_bar.
template<typename Model>
typename Model::Delta correct_delta(
  const typename Model::Delta & delta_bar,
  const typename MotionTraits<Model>::DeltaCalibJac & J_delta_c,
  const Eigen::VectorXd & c, const Eigen::VectorXd & c_bar)
{
  constexpr int n = MotionTraits<Model>::calib_dim;
  if (c.size() != n || c_bar.size() != n) {
    throw Error(ErrorKind::Contract, "correct_delta: calibration dimension mismatch");
  }
  return Model::delta_plus(delta_bar, J_delta_c * (c - c_bar));
}

template<typename Model>
typename Model::Delta correct_delta(
  const PreintEntry<Model> & tail, const Eigen::VectorXd & c, const Eigen::VectorXd & c_bar)
{
  return correct_delta<Model>(tail.delta_bar, tail.J_delta_c, c, c_bar);
}

/// x_t = x_origin ⊞ Delta_bar(origin..t), holding the last entry at or before t.
template<typename Model>
typename Model::State state_at_high_rate(
  const PreintBuffer<Model> & buf, const typename Model::State & x_origin, double t)
{
  if (t < buf.origin_t()) {
    throw Error(
      ErrorKind::Range, "high-rate query at t=" + std::to_string(t) + " before origin t=" +
      std::to_string(buf.origin_t()));
  }
  const auto & es = buf.entries();
  auto it = std::upper_bound(
    es.begin(), es.end(), t, [](double q, const PreintEntry<Model> & e) { return q < e.t; });
  if (it == es.begin()) {
    return x_origin;
  }
  return Model::plus(x_origin, std::prev(it)->delta_bar);
}

/**
 * Split at the entry nearest to t_split (ties to the earlier one) among those
 * within tol. The origin itself counts as a candidate, giving an empty first
 * part. The second part re-integrates the remaining raw samples from t_split.
 */
template<typename Model>
std::pair<PreintBuffer<Model>, PreintBuffer<Model>> split_buffer(
  const PreintBuffer<Model> & buf, double t_split, double tol, std::uint64_t second_origin_frame = 0)
{
  const auto & es = buf.entries();
  std::optional<std::size_t> best;  // number of entries in the first part
  double best_gap = tol;
  auto consider = [&](std::size_t k, double t) {
      const double gap = std::abs(t - t_split);
      if (gap <= tol && (!best || gap < best_gap)) {
        best = k;
        best_gap = gap;
      }
    };
  consider(0, buf.origin_t());
  for (std::size_t i = 0; i < es.size(); ++i) {
    consider(i + 1, es[i].t);
  }
  if (!best) {
    throw Error(
      ErrorKind::JoinTolerance, "no motion sample within " + std::to_string(tol) + " s of t=" +
      std::to_string(t_split));
  }

  PreintBuffer<Model> first(buf.origin_frame(), buf.origin_t(), buf.c_bar());
  for (std::size_t i = 0; i < *best; ++i) {
    first.integrate_step({es[i].t, es[i].u, es[i].Q_u});
  }
  // The nearest-entry choice guarantees every remaining sample lies after t_split.
  PreintBuffer<Model> second(second_origin_frame, t_split, buf.c_bar());
  for (std::size_t i = *best; i < es.size(); ++i) {
    second.integrate_step({es[i].t, es[i].u, es[i].Q_u});
  }
  return {std::move(first), std::move(second)};
}

// ---------------------------------------------------------------------------
// Differential drive on SE(2)
// ---------------------------------------------------------------------------

/**
 * Raw data u = (dphi_l, dphi_r) wheel angle increments [rad].
 * Calibration c = (r_l, r_r, d): wheel radii and separation [m].
 * Calibrated data v = (arc length, heading change); g uses the midpoint chord.
 */
struct DiffDriveModel
{
  static constexpr int raw_dim = 2;
  static constexpr int calib_dim = 3;
  static constexpr int v_dim = 2;
  static constexpr int delta_dim = 3;

  using Delta = Delta2;
  using State = Pose2;

  struct Precalibrated
  {
    Eigen::Vector2d v;
    Eigen::Matrix2d J_v_u;
    Eigen::Matrix<double, 2, 3> J_v_c;
  };

  struct DeltaOfV
  {
    Delta2 delta;
    Eigen::Matrix<double, 3, 2> J_delta_v;
  };

  static Delta2 identity() { return Delta2::identity(); }

  static Precalibrated precalibrate(const Eigen::Vector2d & u, const Eigen::Vector3d & c)
  {
    const double rl = c(0), rr = c(1), d = c(2);
    if (!(rl > 0.0 && rr > 0.0 && d > 0.0)) {
      throw Error(ErrorKind::InvalidCalibration, "wheel radii and separation must be positive");
    }
    const double pl = u(0), pr = u(1);
    const double turn = rr * pr - rl * pl;
    Precalibrated out;
    out.v << (rl * pl + rr * pr) / 2.0, turn / d;
    out.J_v_u << rl / 2.0, rr / 2.0,
      -rl / d, rr / d;
    out.J_v_c << pl / 2.0, pr / 2.0, 0.0,
      -pl / d, pr / d, -turn / (d * d);
    return out;
  }

  static DeltaOfV compute_delta(const Eigen::Vector2d & v)
  {
    const double s = v(0), w = v(1);
    const double c = std::cos(w / 2.0), sn = std::sin(w / 2.0);
    DeltaOfV out;
    out.delta = Delta2(s * c, s * sn, w);
    out.J_delta_v << c, -0.5 * s * sn,
      sn, 0.5 * s * c,
      0.0, 1.0;
    return out;
  }

  static WithJacobians<Delta2> compose(const Delta2 & a, const Delta2 & b)
  {
    return delta_compose(a, b);
  }

  static Pose2 plus(const Pose2 & x, const Delta2 & d) { return pose_compose(x, d).value; }

  static Delta2 delta_plus(const Delta2 & d, const Eigen::Vector3d & t)
  {
    return treeslam::delta_plus(d, t);
  }
};

using DiffDriveBuffer = PreintBuffer<DiffDriveModel>;
using DiffDriveMotion = RawMotion<DiffDriveModel>;
using DiffDriveEntry = PreintEntry<DiffDriveModel>;

}  // namespace treeslam
