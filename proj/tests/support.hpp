#pragma once

// Test oracles and fixtures shared by the unit tests and the acceptance binary.
// The finite-difference oracle here is deliberately independent of the
// library's numeric_jacobian.

#include <cmath>
#include <functional>
#include <numbers>
#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "treeslam/manifold.hpp"
#include "treeslam/preint.hpp"
#include "treeslam/tree.hpp"

namespace testing_support
{

using treeslam::Delta2;
using treeslam::Pose2;

inline double wrap(double a)
{
  return std::atan2(std::sin(a), std::cos(a));
}

class Rng
{
public:
  explicit Rng(std::uint64_t seed = 7) : gen_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  double normal(double sigma) { return std::normal_distribution<double>(0.0, sigma)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  double angle() { return uniform(-std::numbers::pi + 1e-9, std::numbers::pi); }

  Pose2 pose(double extent = 10.0) { return {uniform(-extent, extent), uniform(-extent, extent), angle()}; }
  Delta2 delta(double extent = 10.0) { return {uniform(-extent, extent), uniform(-extent, extent), angle()}; }

  std::mt19937_64 & engine() { return gen_; }

private:
  std::mt19937_64 gen_;
};

/**
 * Central differences of f at x (step h). Output rows listed in `angle_rows`
 * are differenced with wrap-around.
 */
inline Eigen::MatrixXd central_diff(
  const std::function<Eigen::VectorXd(const Eigen::VectorXd &)> & f, const Eigen::VectorXd & x,
  const std::vector<int> & angle_rows = {}, double h = 1e-6)
{
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd J(f0.size(), x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    Eigen::VectorXd d = f(xp) - f(xm);
    for (int r : angle_rows) {
      d(r) = wrap(d(r));
    }
    J.col(i) = d / (2.0 * h);
  }
  return J;
}

inline double max_abs(const Eigen::MatrixXd & m)
{
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

// Differential-drive oracle

/// Independent re-implementation of the one-step motion: wheel increments to pose delta.
inline Eigen::Vector3d chord_step(const Eigen::Vector2d & u, const Eigen::Vector3d & c)
{
  const double s = 0.5 * (c(0) * u(0) + c(1) * u(1));
  const double w = (c(1) * u(1) - c(0) * u(0)) / c(2);
  return {s * std::cos(w / 2), s * std::sin(w / 2), w};
}

/// Plain pose chaining of chord steps; the oracle for the buffer's delta.
inline Eigen::Vector3d chain(const std::vector<Eigen::Vector2d> & us, const Eigen::Vector3d & c)
{
  Eigen::Vector3d x = Eigen::Vector3d::Zero();
  for (const auto & u : us) {
    const Eigen::Vector3d d = chord_step(u, c);
    const double ct = std::cos(x(2)), st = std::sin(x(2));
    x = Eigen::Vector3d(x(0) + ct * d(0) - st * d(1), x(1) + st * d(0) + ct * d(1), x(2) + d(2));
  }
  x(2) = wrap(x(2));
  return x;
}

inline std::vector<Eigen::Vector2d> random_wheels(Rng & rng, int n)
{
  std::vector<Eigen::Vector2d> us;
  for (int i = 0; i < n; ++i) {
    us.emplace_back(rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
  }
  return us;
}

inline treeslam::DiffDriveBuffer integrate(
  const std::vector<Eigen::Vector2d> & us, const Eigen::Vector3d & c, const Eigen::Matrix2d & Q = Eigen::Matrix2d::Zero())
{
  treeslam::DiffDriveBuffer buf(0, 0.0, c);
  for (std::size_t i = 0; i < us.size(); ++i) {
    buf.integrate_step({0.02 * static_cast<double>(i + 1), us[i], Q});
  }
  return buf;
}

/// Minimal tree: one sensor, frames at the requested times.
struct SmallTree
{
  treeslam::Tree tree;
  treeslam::NodeId sensor;

  SmallTree()
  {
    using namespace treeslam;
    sensor = tree.emplace(
      NodeKind::Sensor, tree.hardware(),
      {.payload = SensorInfo{"s0", "range_bearing_2d", {}},
       .blocks = {{"p", StateBlock::euclidean(Eigen::Vector2d::Zero(), true)}, {"o", StateBlock::angle(0.0, true)}}});
  }

  treeslam::NodeId frame(double t, const Pose2 & x = {})
  {
    using namespace treeslam;
    return tree.emplace(
      NodeKind::Frame, tree.trajectory(),
      {.timestamp = t, .blocks = {{"p", StateBlock::euclidean(x.p)}, {"o", StateBlock::angle(x.theta)}}});
  }

  treeslam::NodeId landmark(const Eigen::Vector2d & p, int id = 0)
  {
    using namespace treeslam;
    return tree.emplace(
      NodeKind::Landmark, tree.map(),
      {.payload = LandmarkInfo{id, std::nullopt}, .blocks = {{"p", StateBlock::euclidean(p)}}});
  }

  /// Capture -> Feature -> Factor under `frame`.
  treeslam::NodeId factor(treeslam::NodeId frame, const treeslam::Factor & f)
  {
    using namespace treeslam;
    const double t = *tree.node(frame).timestamp;
    NodeId cap = tree.emplace(
      NodeKind::Capture, frame, {.timestamp = t, .payload = CaptureInfo{"test"}, .sensor = sensor});
    NodeId feat = tree.emplace(NodeKind::Feature, cap, {.payload = FeatureInfo{f.z, std::nullopt}});
    return tree.emplace(NodeKind::Factor, feat, {.payload = f});
  }
};

inline treeslam::Factor block_prior(std::uint64_t node, const std::string & name, const Eigen::VectorXd & z, double w = 1.0)
{
  treeslam::Factor f;
  f.kind = treeslam::FactorKind::PriorBlock;
  f.z = z;
  f.sqrt_info = Eigen::MatrixXd::Identity(z.size(), z.size()) * w;
  f.constrained = {{node, name}};
  return f;
}

}  // namespace testing_support

namespace testing_support
{

/// Live blocks and factors as a notification consumer would see them.
struct Mirror
{
  std::set<std::pair<std::uint64_t, std::string>> blocks;
  std::set<std::uint64_t> factors;

  void apply(const std::vector<treeslam::Notification> & ns)
  {
    using treeslam::NotificationAction;
    for (const auto & n : ns) {
      switch (n.action) {
        case NotificationAction::AddBlock: blocks.insert({n.node.index, n.block}); break;
        case NotificationAction::RemoveBlock: blocks.erase({n.node.index, n.block}); break;
        case NotificationAction::AddFactor: factors.insert(n.node.index); break;
        case NotificationAction::RemoveFactor: factors.erase(n.node.index); break;
      }
    }
  }

  static Mirror of(const treeslam::Tree & tree)
  {
    using namespace treeslam;
    Mirror m;
    for (NodeKind k : {NodeKind::Sensor, NodeKind::Frame, NodeKind::Landmark}) {
      for (NodeId id : tree.nodes_of_kind(k)) {
        for (const auto & nb : tree.node(id).blocks) {
          m.blocks.insert({id.index, nb.name});
        }
      }
    }
    for (NodeId id : tree.nodes_of_kind(NodeKind::Factor)) {
      m.factors.insert(id.index);
    }
    return m;
  }

  bool operator==(const Mirror &) const = default;
};

struct FuzzOutcome
{
  std::size_t steps{0};
  std::size_t violations{0};
  std::size_t dangling_refs{0};
  bool conserved{true};
  std::string first_violation;
};

/// Every cross reference must point at a live node and be mirrored on the other end.
inline std::size_t count_dangling(const treeslam::Tree & tree)
{
  using namespace treeslam;
  std::size_t bad = 0;
  for (NodeKind k : {NodeKind::Capture, NodeKind::Factor}) {
    for (NodeId id : tree.nodes_of_kind(k)) {
      for (const auto & r : tree.node(id).refs_out) {
        if (!tree.contains(r.to)) {
          ++bad;
          continue;
        }
        const auto & in = tree.node(r.to).refs_in;
        if (std::find(in.begin(), in.end(), r) == in.end()) {
          ++bad;
        }
      }
    }
  }
  return bad;
}

/**
 * Random emplace / add-block / remove sequence. The tree is checked after
 * every step; notifications are drained at random points into a mirror.
 */
inline FuzzOutcome fuzz_tree(std::size_t steps, std::uint64_t seed)
{
  using namespace treeslam;
  Rng rng(seed);
  SmallTree st;
  Tree & tree = st.tree;
  Mirror mirror;
  FuzzOutcome out;
  double t = 0.0;
  int extra_block = 0;

  auto pick = [&](const std::vector<NodeId> & v) { return v[static_cast<std::size_t>(rng.integer(0, static_cast<int>(v.size()) - 1))]; };

  for (std::size_t s = 0; s < steps; ++s) {
    const auto frames = tree.nodes_of_kind(NodeKind::Frame);
    const auto landmarks = tree.nodes_of_kind(NodeKind::Landmark);
    const int op = rng.integer(0, 9);
    if (op <= 2 || frames.empty()) {
      t += rng.uniform(0.1, 1.0);
      st.frame(t, rng.pose());
    } else if (op == 3) {
      st.landmark(Eigen::Vector2d(rng.uniform(-5, 5), rng.uniform(-5, 5)));
    } else if (op == 4) {
      tree.add_block_to_frame(pick(frames), "x" + std::to_string(extra_block++), StateBlock::euclidean(Eigen::Vector2d::Zero()));
    } else if (op <= 6) {
      // Factor between a frame and either another frame or a landmark.
      const NodeId f = pick(frames);
      Factor fac;
      if (!landmarks.empty() && rng.integer(0, 1) == 0) {
        const NodeId l = pick(landmarks);
        fac.kind = FactorKind::RangeBearing;
        fac.z = Eigen::Vector2d(1.0, 0.0);
        fac.sqrt_info = Eigen::Matrix2d::Identity();
        fac.constrained = {{f.index, "p"}, {f.index, "o"}, {st.sensor.index, "p"}, {st.sensor.index, "o"}, {l.index, "p"}};
      } else {
        const NodeId g = pick(frames);
        fac.kind = FactorKind::RelativePose;
        fac.z = Eigen::Vector3d::Zero();
        fac.sqrt_info = Eigen::Matrix3d::Identity();
        fac.constrained = {{f.index, "p"}, {f.index, "o"}, {g.index, "p"}, {g.index, "o"}};
      }
      st.factor(f, fac);
    } else if (op == 7 && !landmarks.empty()) {
      tree.remove_node(pick(landmarks));
    } else if (op == 8) {
      tree.remove_node(pick(frames));
    } else {
      const auto caps = tree.nodes_of_kind(NodeKind::Capture);
      const auto facs = tree.nodes_of_kind(NodeKind::Factor);
      if (!facs.empty() && rng.integer(0, 1) == 0) {
        tree.remove_node(pick(facs));
      } else if (!caps.empty()) {
        tree.remove_node(pick(caps));
      }
    }

    const auto v = tree.check_consistency();
    if (!v.empty() && out.first_violation.empty()) {
      out.first_violation = v.front();
    }
    out.violations += v.size();
    out.dangling_refs += count_dangling(tree);
    if (rng.integer(0, 3) == 0) {
      mirror.apply(tree.drain_notifications());
      if (!(mirror == Mirror::of(tree))) {
        out.conserved = false;
      }
    }
    ++out.steps;
  }
  mirror.apply(tree.drain_notifications());
  if (!(mirror == Mirror::of(tree))) {
    out.conserved = false;
  }
  return out;
}

}  // namespace testing_support

#include "treeslam/factors.hpp"
#include "treeslam/preint.hpp"

namespace testing_support
{

/// Largest deviation between the analytic factor Jacobians and central differences.
inline double factor_jacobian_error(const treeslam::Factor & f, const std::vector<treeslam::StateBlock> & blocks, double h = 1e-6)
{
  using namespace treeslam;
  auto eval = [&f](const std::vector<StateBlock> & bs) {
      std::vector<const StateBlock *> ptrs;
      for (const auto & b : bs) {
        ptrs.push_back(&b);
      }
      return evaluate(f, ptrs);
    };
  const Residual analytic = eval(blocks);
  double worst = 0.0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (Eigen::Index k = 0; k < blocks[i].tangent_dim(); ++k) {
      std::vector<StateBlock> plus = blocks, minus = blocks;
      Eigen::VectorXd dx = Eigen::VectorXd::Zero(blocks[i].tangent_dim());
      dx(k) = h;
      plus[i].set_values(block_plus(blocks[i], dx));
      minus[i].set_values(block_plus(blocks[i], -dx));
      const Eigen::VectorXd col = (eval(plus).r - eval(minus).r) / (2.0 * h);
      worst = std::max(worst, max_abs(col - analytic.J[i].col(k)));
    }
  }
  return worst;
}

inline std::vector<treeslam::StateBlock> pose_blocks(const Pose2 & x)
{
  return {treeslam::StateBlock::euclidean(x.p), treeslam::StateBlock::angle(x.theta)};
}

/// Random upper-triangular square-root information with a healthy diagonal.
inline Eigen::MatrixXd random_sqrt_info(Rng & rng, int n)
{
  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    U(i, i) = rng.uniform(0.5, 3.0);
    for (int j = i + 1; j < n; ++j) {
      U(i, j) = rng.uniform(-0.5, 0.5);
    }
  }
  return U;
}

struct FactorInstance
{
  treeslam::Factor factor;
  std::vector<treeslam::StateBlock> blocks;
};

/// Motion factor from a random wheel sequence; states near consistency, calibration perturbed.
inline FactorInstance random_motion_instance(Rng & rng, bool consistent = false)
{
  using namespace treeslam;
  const Eigen::Vector3d c_bar(rng.uniform(0.08, 0.12), rng.uniform(0.08, 0.12), rng.uniform(0.4, 0.6));
  DiffDriveBuffer buf(0, 0.0, c_bar);
  const int n = rng.integer(1, 30);
  const Eigen::Matrix2d Q = Eigen::Matrix2d::Identity() * 1e-4;
  for (int i = 0; i < n; ++i) {
    buf.integrate_step({0.02 * (i + 1), Eigen::Vector2d(rng.uniform(-1, 1), rng.uniform(-1, 1)), Q});
  }
  Factor f;
  f.kind = FactorKind::Motion;
  f.motion = MotionAux{buf.delta_bar(), buf.Q_delta(), buf.J_delta_c(), c_bar};
  // Short buffers have a near-singular Q_delta; any well-conditioned U exercises the same Jacobians.
  f.sqrt_info = random_sqrt_info(rng, 3);
  f.z = buf.delta_bar().vector();
  const Pose2 xi = rng.pose();
  Eigen::Vector3d c = c_bar;
  Delta2 d = buf.delta_bar();
  if (!consistent) {
    c += Eigen::Vector3d(rng.normal(0.005), rng.normal(0.005), rng.normal(0.01));
    d = delta_plus(d, Tangent2(rng.normal(0.05), rng.normal(0.05), rng.normal(0.05)));
  }
  const Pose2 xj = pose_compose(xi, d).value;
  auto blocks = pose_blocks(xi);
  auto bj = pose_blocks(xj);
  blocks.insert(blocks.end(), bj.begin(), bj.end());
  blocks.push_back(StateBlock::euclidean(c));
  return {f, blocks};
}

inline FactorInstance random_range_bearing_instance(Rng & rng, bool consistent = false)
{
  using namespace treeslam;
  const Pose2 x = rng.pose();
  const Pose2 ext(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.angle());
  const Pose2 s = pose_compose(x, as_delta(ext)).value;
  const double r = rng.uniform(0.5, 8.0), b = rng.angle();
  const Eigen::Vector2d l = s.p + r * Eigen::Vector2d(std::cos(s.theta + b), std::sin(s.theta + b));
  Factor f;
  f.kind = FactorKind::RangeBearing;
  f.z = consistent ? Eigen::Vector2d(r, b) : Eigen::Vector2d(r + rng.normal(0.1), normalize_angle(b + rng.normal(0.1)));
  f.sqrt_info = random_sqrt_info(rng, 2);
  auto blocks = pose_blocks(x);
  auto be = pose_blocks(ext);
  blocks.insert(blocks.end(), be.begin(), be.end());
  blocks.push_back(StateBlock::euclidean(l));
  return {f, blocks};
}

inline FactorInstance random_relative_instance(Rng & rng, bool consistent = false)
{
  using namespace treeslam;
  const Pose2 xi = rng.pose();
  const Delta2 z = rng.delta(3.0);
  const Delta2 d = consistent ? z : delta_plus(z, Tangent2(rng.normal(0.1), rng.normal(0.1), rng.normal(0.1)));
  Factor f;
  f.kind = FactorKind::RelativePose;
  f.z = z.vector();
  f.sqrt_info = random_sqrt_info(rng, 3);
  auto blocks = pose_blocks(xi);
  auto bj = pose_blocks(pose_compose(xi, d).value);
  blocks.insert(blocks.end(), bj.begin(), bj.end());
  return {f, blocks};
}

inline FactorInstance random_pose_prior_instance(Rng & rng, bool consistent = false)
{
  using namespace treeslam;
  const Pose2 z = rng.pose();
  const Pose2 x = consistent ? z : pose_compose(z, Delta2(rng.normal(0.1), rng.normal(0.1), rng.normal(0.1))).value;
  Factor f;
  f.kind = FactorKind::PriorPose;
  f.z = z.vector();
  f.sqrt_info = random_sqrt_info(rng, 3);
  return {f, pose_blocks(x)};
}

inline FactorInstance random_block_prior_instance(Rng & rng, bool consistent = false)
{
  using namespace treeslam;
  Factor f;
  f.kind = FactorKind::PriorBlock;
  std::vector<StateBlock> blocks;
  if (rng.integer(0, 1) == 0) {
    const double z = rng.angle();
    f.z = Eigen::VectorXd::Constant(1, z);
    blocks.push_back(StateBlock::angle(consistent ? z : z + rng.normal(0.2)));
    f.sqrt_info = random_sqrt_info(rng, 1);
  } else {
    const Eigen::Vector3d z(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    f.z = z;
    blocks.push_back(StateBlock::euclidean(consistent ? z : Eigen::Vector3d(z + Eigen::Vector3d(rng.normal(1.0), rng.normal(1.0), rng.normal(1.0)))));
    f.sqrt_info = random_sqrt_info(rng, 3);
  }
  return {f, blocks};
}

}  // namespace testing_support
