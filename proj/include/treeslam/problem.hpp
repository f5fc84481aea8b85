#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "treeslam/processors.hpp"
#include "treeslam/solver.hpp"
#include "treeslam/tree.hpp"

namespace treeslam
{

struct SensorSpec
{
  std::string name;
  std::string type;
  Pose2 extrinsic;
  bool fix_extrinsic{true};
  Eigen::VectorXd intrinsic;  // may be empty
  bool fix_intrinsic{true};
  std::map<std::string, double> noise;
};

struct JoinLogEntry
{
  std::string processor;
  NodeId frame;
  JoinResult result;
};

/**
 * Owns the tree, the installed processors and the solver mirror, and routes
 * captures and keyframe broadcasts between them.
 */
class Problem : public ProcessingContext
{
public:
  explicit Problem(SolverOptions options = {});

  Tree & tree() override { return tree_; }
  const Tree & tree() const { return tree_; }
  Pose2 predict_pose(double t) const override;

  NodeId add_sensor(const SensorSpec & spec);
  NodeId sensor(const std::string & name) const;
  bool has_sensor(const std::string & name) const { return sensors_.count(name) > 0; }

  /// Install a processor; the order of installation is the broadcast order.
  Processor & add_processor(std::unique_ptr<Processor> p);
  Processor * processor(const std::string & name) const;
  const std::vector<std::unique_ptr<Processor>> & processors() const { return processors_; }

  /// Emplace the first frame with a pose prior and announce it to every processor.
  NodeId init_first_frame(double t, const Pose2 & x0, const Eigen::Matrix3d & sqrt_info);

  /// Hand a capture to every processor bound to `sensor_name`. Returns the keyframes created.
  std::vector<KeyframeEvent> process(const std::string & sensor_name, const SensorData & data);

  /// Offer a keyframe to every processor except its creator, in installation order.
  void broadcast(const KeyframeEvent & ev, const Processor * origin);

  void set_window(std::optional<WindowPolicy> w) { window_ = std::move(w); }
  const std::optional<WindowPolicy> & window() const { return window_; }
  /// Apply the window policy, if any, and tell processors about removed frames.
  void manage_window();

  SolverProblem & solver() { return solver_; }
  const SolverProblem & solver() const { return solver_; }
  /// Mirror pending tree changes and run LM. The lock is held only around tree access.
  SolveReport solve();

  std::mutex & mutex() { return mutex_; }
  const std::vector<JoinLogEntry> & join_log() const { return join_log_; }

private:
  Tree tree_;
  SolverProblem solver_;
  std::vector<std::unique_ptr<Processor>> processors_;
  std::map<std::string, NodeId> sensors_;
  std::optional<WindowPolicy> window_;
  std::vector<JoinLogEntry> join_log_;
  std::mutex mutex_;
};

}  // namespace treeslam
