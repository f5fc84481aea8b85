#include "treeslam/problem.hpp"

#include "treeslam/error.hpp"

namespace treeslam
{

Problem::Problem(SolverOptions options)
: solver_(options)
{}

Pose2 Problem::predict_pose(double t) const
{
  for (const auto & p : processors_) {
    if (auto x = p->high_rate_pose(tree_, t)) {
      return *x;
    }
  }
  const auto frames = tree_.frames();
  if (frames.empty()) {
    throw Error(ErrorKind::NotReady, "no frame to predict from");
  }
  NodeId best = frames.front();
  for (NodeId f : frames) {
    if (*tree_.node(f).timestamp <= t) {
      best = f;
    }
  }
  return tree_.frame_pose(best);
}

NodeId Problem::add_sensor(const SensorSpec & spec)
{
  if (spec.name.empty()) {
    throw Error(ErrorKind::InvalidValue, "sensor name must not be empty");
  }
  if (sensors_.count(spec.name)) {
    throw Error(ErrorKind::Conflict, "sensor '" + spec.name + "' already exists");
  }
  NodeSpec ns;
  ns.payload = SensorInfo{spec.name, spec.type, spec.noise};
  ns.blocks.push_back({"p", StateBlock::euclidean(spec.extrinsic.p, spec.fix_extrinsic)});
  ns.blocks.push_back({"o", StateBlock::angle(spec.extrinsic.theta, spec.fix_extrinsic)});
  if (spec.intrinsic.size() > 0) {
    ns.blocks.push_back({"intr", StateBlock::euclidean(spec.intrinsic, spec.fix_intrinsic)});
  }
  const NodeId id = tree_.emplace(NodeKind::Sensor, tree_.hardware(), std::move(ns));
  sensors_.emplace(spec.name, id);
  return id;
}

NodeId Problem::sensor(const std::string & name) const
{
  auto it = sensors_.find(name);
  if (it == sensors_.end()) {
    throw Error(ErrorKind::Binding, "no sensor named '" + name + "'");
  }
  return it->second;
}

Processor & Problem::add_processor(std::unique_ptr<Processor> p)
{
  if (!p) {
    throw Error(ErrorKind::Contract, "null processor");
  }
  if (processor(p->name())) {
    throw Error(ErrorKind::Conflict, "processor '" + p->name() + "' already exists");
  }
  if (!tree_.contains(p->sensor()) || p->sensor().kind != NodeKind::Sensor) {
    throw Error(ErrorKind::Binding, "processor '" + p->name() + "' is bound to no live sensor");
  }
  NodeSpec ns;
  ns.payload = ProcessorInfo{p->name(), p->type()};
  tree_.emplace(NodeKind::Processor, tree_.hardware(), std::move(ns));
  processors_.push_back(std::move(p));
  return *processors_.back();
}

Processor * Problem::processor(const std::string & name) const
{
  for (const auto & p : processors_) {
    if (p->name() == name) {
      return p.get();
    }
  }
  return nullptr;
}

NodeId Problem::init_first_frame(double t, const Pose2 & x0, const Eigen::Matrix3d & sqrt_info)
{
  if (sensors_.empty()) {
    throw Error(ErrorKind::Contract, "the first frame's prior needs a sensor");
  }
  std::lock_guard<std::mutex> guard(mutex_);
  NodeSpec ns;
  ns.timestamp = t;
  ns.payload = FrameInfo{};
  ns.blocks.push_back({"p", StateBlock::euclidean(x0.p)});
  ns.blocks.push_back({"o", StateBlock::angle(x0.theta)});
  const NodeId frame = tree_.emplace(NodeKind::Frame, tree_.trajectory(), std::move(ns));
  // Prior captures hang off the first declared sensor.
  emplace_pose_prior(tree_, frame, tree_.nodes_of_kind(NodeKind::Sensor).front(), x0, sqrt_info);
  broadcast({frame, t}, nullptr);
  return frame;
}

std::vector<KeyframeEvent> Problem::process(const std::string & sensor_name, const SensorData & data)
{
  std::lock_guard<std::mutex> guard(mutex_);
  const NodeId s = sensor(sensor_name);
  std::vector<KeyframeEvent> events;
  for (const auto & p : processors_) {
    if (p->sensor() != s) {
      continue;
    }
    if (auto ev = p->process(*this, data)) {
      events.push_back(*ev);
      broadcast(*ev, p.get());
    }
  }
  return events;
}

void Problem::broadcast(const KeyframeEvent & ev, const Processor * origin)
{
  for (const auto & p : processors_) {
    if (p.get() == origin) {
      continue;
    }
    join_log_.push_back({p->name(), ev.frame, p->on_keyframe(*this, ev.frame, ev.t)});
  }
}

void Problem::manage_window()
{
  std::lock_guard<std::mutex> guard(mutex_);
  if (!window_) {
    return;
  }
  enforce_window(tree_, *window_);
  for (const auto & p : processors_) {
    p->on_frames_removed(tree_);
  }
}

SolveReport Problem::solve()
{
  {
    std::lock_guard<std::mutex> guard(mutex_);
    solver_.sync(tree_);
  }
  return lm_solve(solver_, tree_, &mutex_);
}

}  // namespace treeslam
