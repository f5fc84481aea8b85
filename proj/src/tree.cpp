#include "treeslam/tree.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <set>

namespace treeslam
{

const char * to_string(NodeKind kind)
{
  switch (kind) {
    case NodeKind::Problem: return "Problem";
    case NodeKind::Hardware: return "Hardware";
    case NodeKind::Trajectory: return "Trajectory";
    case NodeKind::Map: return "Map";
    case NodeKind::Sensor: return "Sensor";
    case NodeKind::Processor: return "Processor";
    case NodeKind::Frame: return "Frame";
    case NodeKind::Capture: return "Capture";
    case NodeKind::Feature: return "Feature";
    case NodeKind::Factor: return "Factor";
    case NodeKind::Landmark: return "Landmark";
  }
  return "?";
}

std::string to_string(NodeId id)
{
  return std::string(to_string(id.kind)) + " " + std::to_string(id.index);
}

const StateBlock * TreeNode::find_block(const std::string & name) const
{
  for (const auto & nb : blocks) {
    if (nb.name == name) {
      return &nb.block;
    }
  }
  return nullptr;
}

StateBlock * TreeNode::find_block(const std::string & name)
{
  for (auto & nb : blocks) {
    if (nb.name == name) {
      return &nb.block;
    }
  }
  return nullptr;
}

namespace
{

bool is_branch_root(NodeKind kind)
{
  return kind == NodeKind::Problem || kind == NodeKind::Hardware ||
         kind == NodeKind::Trajectory || kind == NodeKind::Map;
}

std::optional<NodeKind> required_parent(NodeKind kind)
{
  switch (kind) {
    case NodeKind::Sensor:
    case NodeKind::Processor: return NodeKind::Hardware;
    case NodeKind::Frame: return NodeKind::Trajectory;
    case NodeKind::Capture: return NodeKind::Frame;
    case NodeKind::Feature: return NodeKind::Capture;
    case NodeKind::Factor: return NodeKind::Feature;
    case NodeKind::Landmark: return NodeKind::Map;
    default: return std::nullopt;
  }
}

bool same_target(const Notification & a, const Notification & b)
{
  return a.node == b.node && a.block == b.block;
}

bool cancels(const Notification & add, const Notification & remove)
{
  const bool block_pair = add.action == NotificationAction::AddBlock &&
    remove.action == NotificationAction::RemoveBlock;
  const bool factor_pair = add.action == NotificationAction::AddFactor &&
    remove.action == NotificationAction::RemoveFactor;
  return (block_pair || factor_pair) && same_target(add, remove);
}

}  // namespace

Tree::Tree()
{
  const NodeKind roots[] = {NodeKind::Problem, NodeKind::Hardware, NodeKind::Trajectory, NodeKind::Map};
  for (NodeKind kind : roots) {
    TreeNode n;
    n.id = {kind, next_index_++};
    if (kind != NodeKind::Problem) {
      n.parent = 0;
      nodes_.at(0).children.push_back(n.id.index);
    }
    nodes_.emplace(n.id.index, std::move(n));
  }
}

bool Tree::contains(NodeId id) const
{
  auto it = nodes_.find(id.index);
  return it != nodes_.end() && it->second.id.kind == id.kind;
}

const TreeNode & Tree::node(NodeId id) const
{
  auto it = nodes_.find(id.index);
  if (it == nodes_.end() || it->second.id.kind != id.kind) {
    throw Error(ErrorKind::NotFound, "no node " + to_string(id));
  }
  return it->second;
}

TreeNode & Tree::mutable_node(NodeId id)
{
  return const_cast<TreeNode &>(std::as_const(*this).node(id));
}

void Tree::check_legal_parent(NodeKind kind, const TreeNode & parent) const
{
  auto req = required_parent(kind);
  if (!req || *req != parent.id.kind) {
    throw Error(
      ErrorKind::Structure, std::string("cannot place ") + to_string(kind) + " under " +
      to_string(parent.id));
  }
}

void Tree::link_ref(const CrossRef & ref)
{
  nodes_.at(ref.from.index).refs_out.push_back(ref);
  nodes_.at(ref.to.index).refs_in.push_back(ref);
}

NodeId Tree::emplace(NodeKind kind, NodeId parent, NodeSpec spec)
{
  if (!contains(parent)) {
    throw Error(ErrorKind::NotFound, "parent " + to_string(parent) + " does not exist");
  }
  check_legal_parent(kind, nodes_.at(parent.index));

  if ((kind == NodeKind::Frame || kind == NodeKind::Capture) && !spec.timestamp) {
    throw Error(ErrorKind::Contract, std::string(to_string(kind)) + " requires a timestamp");
  }

  std::vector<CrossRef> refs;
  const NodeId id{kind, next_index_};

  if (kind == NodeKind::Capture) {
    if (!spec.sensor || !contains(*spec.sensor) || spec.sensor->kind != NodeKind::Sensor) {
      throw Error(ErrorKind::Reference, "capture must reference a live sensor");
    }
    refs.push_back({id, *spec.sensor, RefRole::CaptureSensor});
  } else if (spec.sensor) {
    throw Error(ErrorKind::Reference, "only captures reference a sensor");
  }

  if (kind == NodeKind::Factor) {
    const auto * f = std::get_if<Factor>(&spec.payload);
    if (f == nullptr) {
      throw Error(ErrorKind::Contract, "factor node requires a Factor payload");
    }
    std::set<std::uint64_t> targets;
    for (const auto & br : f->constrained) {
      auto it = nodes_.find(br.node);
      if (it == nodes_.end()) {
        throw Error(ErrorKind::Reference, "factor references missing node " + std::to_string(br.node));
      }
      if (it->second.blocks.empty()) {
        throw Error(ErrorKind::Reference, "factor references block-less " + to_string(it->second.id));
      }
      if (it->second.find_block(br.name) == nullptr) {
        throw Error(
          ErrorKind::Reference, "factor references missing block '" + br.name + "' of " +
          to_string(it->second.id));
      }
      if (targets.insert(br.node).second) {
        refs.push_back({id, it->second.id, RefRole::FactorConstrains});
      }
    }
    if (f->constrained.empty()) {
      throw Error(ErrorKind::Reference, "factor constrains no blocks");
    }
  } else if (std::holds_alternative<Factor>(spec.payload)) {
    throw Error(ErrorKind::Contract, "Factor payload on non-factor node");
  }

  {
    std::set<std::string> names;
    for (const auto & nb : spec.blocks) {
      if (!names.insert(nb.name).second) {
        throw Error(ErrorKind::Conflict, "duplicate block name '" + nb.name + "'");
      }
    }
  }

  TreeNode n;
  n.id = id;
  n.parent = parent.index;
  n.timestamp = spec.timestamp;
  n.blocks = std::move(spec.blocks);
  n.payload = std::move(spec.payload);
  if (kind == NodeKind::Frame) {
    n.payload = FrameInfo{next_frame_ordinal_++};
  }
  ++next_index_;

  for (const auto & nb : n.blocks) {
    queue_.push_back({NotificationAction::AddBlock, id, nb.name});
  }
  if (kind == NodeKind::Factor) {
    queue_.push_back({NotificationAction::AddFactor, id, {}});
  }

  nodes_.emplace(id.index, std::move(n));
  nodes_.at(parent.index).children.push_back(id.index);
  for (const auto & r : refs) {
    link_ref(r);
  }
  return id;
}

void Tree::add_block_to_frame(NodeId frame, const std::string & name, StateBlock block)
{
  if (frame.kind != NodeKind::Frame) {
    throw Error(ErrorKind::Structure, "add_block_to_frame on " + to_string(frame));
  }
  TreeNode & n = mutable_node(frame);
  if (n.find_block(name) != nullptr) {
    throw Error(ErrorKind::Conflict, to_string(frame) + " already has block '" + name + "'");
  }
  n.blocks.push_back({name, std::move(block)});
  queue_.push_back({NotificationAction::AddBlock, frame, name});
}

void Tree::remove_node(NodeId id)
{
  if (is_branch_root(id.kind)) {
    throw Error(ErrorKind::Structure, "cannot remove branch root " + to_string(id));
  }
  if (!contains(id)) {
    throw Error(ErrorKind::NotFound, "no node " + to_string(id));
  }

  // Collect the subtree plus every node elsewhere whose cross-reference would dangle.
  std::set<std::uint64_t> doomed;
  std::vector<std::uint64_t> order;
  std::deque<std::uint64_t> work{id.index};
  while (!work.empty()) {
    const std::uint64_t root = work.front();
    work.pop_front();
    if (doomed.count(root)) {
      continue;
    }
    std::vector<std::uint64_t> stack{root};
    while (!stack.empty()) {
      const std::uint64_t cur = stack.back();
      stack.pop_back();
      if (!doomed.insert(cur).second) {
        continue;
      }
      order.push_back(cur);
      const TreeNode & n = nodes_.at(cur);
      for (auto it = n.children.rbegin(); it != n.children.rend(); ++it) {
        stack.push_back(*it);
      }
      for (const auto & r : n.refs_in) {
        work.push_back(r.from.index);
      }
    }
  }

  for (std::uint64_t idx : order) {
    const TreeNode & n = nodes_.at(idx);
    if (n.id.kind == NodeKind::Factor) {
      queue_.push_back({NotificationAction::RemoveFactor, n.id, {}});
    }
    for (const auto & nb : n.blocks) {
      queue_.push_back({NotificationAction::RemoveBlock, n.id, nb.name});
    }
  }

  for (std::uint64_t idx : order) {
    const TreeNode & n = nodes_.at(idx);
    for (const auto & r : n.refs_out) {
      if (!doomed.count(r.to.index)) {
        auto & in = nodes_.at(r.to.index).refs_in;
        in.erase(std::remove(in.begin(), in.end(), r), in.end());
      }
    }
    if (n.parent && !doomed.count(*n.parent)) {
      auto & ch = nodes_.at(*n.parent).children;
      ch.erase(std::remove(ch.begin(), ch.end(), idx), ch.end());
    }
  }
  for (std::uint64_t idx : order) {
    nodes_.erase(idx);
  }
}

bool Tree::has_block(const BlockRef & ref) const
{
  auto it = nodes_.find(ref.node);
  return it != nodes_.end() && it->second.find_block(ref.name) != nullptr;
}

const StateBlock & Tree::block(const BlockRef & ref) const
{
  auto it = nodes_.find(ref.node);
  if (it == nodes_.end()) {
    throw Error(ErrorKind::NotFound, "no node with index " + std::to_string(ref.node));
  }
  const StateBlock * b = it->second.find_block(ref.name);
  if (b == nullptr) {
    throw Error(
      ErrorKind::NotFound, "no block '" + ref.name + "' on " + to_string(it->second.id));
  }
  return *b;
}

void Tree::set_block_values(const BlockRef & ref, const Eigen::VectorXd & values)
{
  const_cast<StateBlock &>(block(ref)).set_values(values);
}

void Tree::set_block_fixed(const BlockRef & ref, bool fixed)
{
  const_cast<StateBlock &>(block(ref)).set_fixed(fixed);
}

std::vector<NodeId> Tree::frames() const
{
  std::vector<NodeId> out;
  for (std::uint64_t idx : nodes_.at(trajectory().index).children) {
    out.push_back(nodes_.at(idx).id);
  }
  std::stable_sort(out.begin(), out.end(), [this](NodeId a, NodeId b) {
    return *nodes_.at(a.index).timestamp < *nodes_.at(b.index).timestamp;
  });
  return out;
}

NodeId Tree::frame_at(std::optional<double> t) const
{
  const auto fs = frames();
  if (fs.empty()) {
    throw Error(ErrorKind::NotFound, "tree has no frames");
  }
  if (!t) {
    return fs.back();
  }
  std::optional<NodeId> best;
  for (NodeId f : fs) {
    if (*nodes_.at(f.index).timestamp <= *t) {
      best = f;
    }
  }
  if (!best) {
    throw Error(ErrorKind::NotFound, "no frame at or before t=" + std::to_string(*t));
  }
  return *best;
}

std::map<std::string, Eigen::VectorXd> Tree::state_at(std::optional<double> t) const
{
  std::map<std::string, Eigen::VectorXd> out;
  for (const auto & nb : node(frame_at(t)).blocks) {
    out.emplace(nb.name, nb.block.values());
  }
  return out;
}

Pose2 Tree::frame_pose(NodeId frame) const
{
  const TreeNode & n = node(frame);
  const StateBlock * p = n.find_block("p");
  const StateBlock * o = n.find_block("o");
  if (p == nullptr || o == nullptr) {
    throw Error(ErrorKind::NotFound, to_string(frame) + " lacks p/o blocks");
  }
  return {Eigen::Vector2d(p->values()), o->values()(0)};
}

std::vector<NodeId> Tree::nodes_of_kind(NodeKind kind) const
{
  std::vector<NodeId> out;
  for (const auto & [idx, n] : nodes_) {
    if (n.id.kind == kind) {
      out.push_back(n.id);
    }
  }
  return out;
}

std::vector<NodeId> Tree::children(NodeId id) const
{
  std::vector<NodeId> out;
  for (std::uint64_t c : node(id).children) {
    out.push_back(nodes_.at(c).id);
  }
  return out;
}

const Factor & Tree::factor(NodeId id) const
{
  const auto * f = std::get_if<Factor>(&node(id).payload);
  if (f == nullptr) {
    throw Error(ErrorKind::NotFound, to_string(id) + " carries no factor");
  }
  return *f;
}

std::vector<Notification> Tree::drain_notifications()
{
  std::vector<Notification> out;
  out.reserve(queue_.size());
  for (auto & n : queue_) {
    const bool is_remove = n.action == NotificationAction::RemoveBlock ||
      n.action == NotificationAction::RemoveFactor;
    if (is_remove) {
      auto it = std::find_if(out.rbegin(), out.rend(), [&](const Notification & a) {
        return cancels(a, n);
      });
      if (it != out.rend()) {
        out.erase(std::next(it).base());
        continue;
      }
    }
    out.push_back(std::move(n));
  }
  queue_.clear();
  return out;
}

std::vector<std::string> Tree::check_consistency() const
{
  std::vector<std::string> v;
  std::set<std::uint64_t> seen;

  for (const auto & [idx, n] : nodes_) {
    if (n.id.index != idx) {
      v.push_back(to_string(n.id) + " stored under index " + std::to_string(idx));
    }
    if (!seen.insert(n.id.index).second) {
      v.push_back("duplicate id " + to_string(n.id));
    }

    // (i) mutual parent/child links
    std::set<std::uint64_t> listed;
    for (std::uint64_t c : n.children) {
      if (!listed.insert(c).second) {
        v.push_back(to_string(n.id) + " lists child " + std::to_string(c) + " twice");
      }
      auto it = nodes_.find(c);
      if (it == nodes_.end()) {
        v.push_back(to_string(n.id) + " lists missing child " + std::to_string(c));
      } else if (it->second.parent != idx) {
        v.push_back(to_string(n.id) + " lists child " + to_string(it->second.id) + " whose parent differs");
      }
    }
    if (n.parent) {
      auto it = nodes_.find(*n.parent);
      if (it == nodes_.end()) {
        v.push_back(to_string(n.id) + " has missing parent " + std::to_string(*n.parent));
      } else {
        const auto & ch = it->second.children;
        if (std::find(ch.begin(), ch.end(), idx) == ch.end()) {
          v.push_back(
            "parent " + to_string(it->second.id) + " does not list child " + to_string(n.id));
        }
        auto req = required_parent(n.id.kind);
        if (req && *req != it->second.id.kind) {
          v.push_back(to_string(n.id) + " placed under " + to_string(it->second.id));
        }
      }
    } else if (n.id.kind != NodeKind::Problem) {
      v.push_back(to_string(n.id) + " has no parent");
    }

    // cross references resolve on both ends
    for (const auto & r : n.refs_out) {
      auto it = nodes_.find(r.to.index);
      if (it == nodes_.end() || it->second.id != r.to) {
        v.push_back(to_string(n.id) + " references missing " + to_string(r.to));
        continue;
      }
      const auto & in = it->second.refs_in;
      if (std::find(in.begin(), in.end(), r) == in.end()) {
        v.push_back(to_string(r.to) + " lacks back-reference from " + to_string(n.id));
      }
      if (r.role == RefRole::CaptureSensor &&
        (n.id.kind != NodeKind::Capture || r.to.kind != NodeKind::Sensor))
      {
        v.push_back("illegal capture_sensor reference " + to_string(n.id) + " -> " + to_string(r.to));
      }
      if (r.role == RefRole::FactorConstrains &&
        (n.id.kind != NodeKind::Factor || it->second.blocks.empty()))
      {
        v.push_back("illegal factor reference " + to_string(n.id) + " -> " + to_string(r.to));
      }
    }
    for (const auto & r : n.refs_in) {
      auto it = nodes_.find(r.from.index);
      if (it == nodes_.end() ||
        std::find(it->second.refs_out.begin(), it->second.refs_out.end(), r) ==
        it->second.refs_out.end())
      {
        v.push_back(to_string(n.id) + " holds stale back-reference from " + to_string(r.from));
      }
    }

    // (ii) captures know their sensor
    if (n.id.kind == NodeKind::Capture) {
      const bool has = std::any_of(n.refs_out.begin(), n.refs_out.end(), [](const CrossRef & r) {
        return r.role == RefRole::CaptureSensor;
      });
      if (!has) {
        v.push_back(to_string(n.id) + " has no sensor reference");
      }
    }

    // (iii) factor block references live
    if (n.id.kind == NodeKind::Factor) {
      const auto * f = std::get_if<Factor>(&n.payload);
      if (f == nullptr) {
        v.push_back(to_string(n.id) + " has no factor payload");
      } else {
        for (const auto & br : f->constrained) {
          // A missing node is already reported through the dangling reference.
          if (nodes_.count(br.node) && !has_block(br)) {
            v.push_back(
              to_string(n.id) + " constrains missing block " + std::to_string(br.node) + "." + br.name);
          }
        }
      }
    }
  }
  return v;
}

namespace
{

std::string format_time(double t)
{
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", t);
  return buf;
}

}  // namespace

void Tree::print_node(std::string & out, std::uint64_t index, int depth) const
{
  const TreeNode & n = nodes_.at(index);
  std::string line(static_cast<std::size_t>(depth) * 2, ' ');
  line += to_string(n.id);

  std::visit(
    [&line](const auto & p) {
      using T = std::decay_t<decltype(p)>;
      if constexpr (std::is_same_v<T, SensorInfo>|| std::is_same_v<T, ProcessorInfo>) {
        line += " " + p.name + " (" + p.type + ")";
      } else if constexpr (std::is_same_v<T, CaptureInfo>) {
        line += " (" + p.type + ")";
      } else if constexpr (std::is_same_v<T, Factor>) {
        line += std::string(" ") + to_string(p.kind);
      } else if constexpr (std::is_same_v<T, LandmarkInfo>) {
        line += " id=" + std::to_string(p.id);
        if (p.external_id) {
          line += " ext=" + std::to_string(*p.external_id);
        }
      } else if constexpr (std::is_same_v<T, FeatureInfo>) {
        if (p.external_id) {
          line += " ext=" + std::to_string(*p.external_id);
        }
      }
    },
    n.payload);

  if (n.timestamp) {
    line += " t=" + format_time(*n.timestamp);
  }
  if (!n.blocks.empty()) {
    line += " blocks:";
    for (const auto & nb : n.blocks) {
      line += " " + nb.name;
      if (nb.block.fixed()) {
        line += "[fixed]";
      }
    }
  }
  for (const auto & r : n.refs_out) {
    line += r.role == RefRole::CaptureSensor ? " sensor->" : " constrains->";
    line += to_string(r.to);
  }
  out += line;
  out += '\n';
  for (std::uint64_t c : n.children) {
    print_node(out, c, depth + 1);
  }
}

std::string Tree::print() const
{
  std::string out;
  print_node(out, problem().index, 0);
  return out;
}

std::string print_tree(const Tree & tree)
{
  return tree.print();
}

void TreeTestHook::sever_child_link(Tree & tree, NodeId parent, NodeId child)
{
  auto & ch = tree.nodes_.at(parent.index).children;
  ch.erase(std::remove(ch.begin(), ch.end(), child.index), ch.end());
}

void TreeTestHook::erase_without_cascade(Tree & tree, NodeId id)
{
  const TreeNode & n = tree.nodes_.at(id.index);
  if (n.parent) {
    auto & ch = tree.nodes_.at(*n.parent).children;
    ch.erase(std::remove(ch.begin(), ch.end(), id.index), ch.end());
  }
  tree.nodes_.erase(id.index);
}

// ---------------------------------------------------------------------------
// Tree manager
// ---------------------------------------------------------------------------

NodeId emplace_pose_prior(
  Tree & tree, NodeId frame, NodeId sensor, const Pose2 & z, const Eigen::Matrix3d & sqrt_info)
{
  const double t = *tree.node(frame).timestamp;
  NodeId cap = tree.emplace(
    NodeKind::Capture, frame, {.timestamp = t, .payload = CaptureInfo{"prior"}, .sensor = sensor});
  NodeId feat = tree.emplace(
    NodeKind::Feature, cap, {.payload = FeatureInfo{z.vector(), std::nullopt}});
  Factor f;
  f.kind = FactorKind::PriorPose;
  f.z = z.vector();
  f.sqrt_info = sqrt_info;
  f.constrained = {{frame.index, "p"}, {frame.index, "o"}};
  return tree.emplace(NodeKind::Factor, feat, {.payload = std::move(f)});
}

NodeId emplace_block_prior(
  Tree & tree, NodeId frame, NodeId sensor, const BlockRef & block, const Eigen::VectorXd & z,
  const Eigen::MatrixXd & sqrt_info)
{
  const double t = *tree.node(frame).timestamp;
  NodeId cap = tree.emplace(
    NodeKind::Capture, frame, {.timestamp = t, .payload = CaptureInfo{"prior"}, .sensor = sensor});
  NodeId feat = tree.emplace(NodeKind::Feature, cap, {.payload = FeatureInfo{z, std::nullopt}});
  Factor f;
  f.kind = FactorKind::PriorBlock;
  f.z = z;
  f.sqrt_info = sqrt_info;
  f.constrained = {block};
  return tree.emplace(NodeKind::Factor, feat, {.payload = std::move(f)});
}

std::optional<NodeId> find_pose_prior(const Tree & tree, NodeId frame)
{
  for (const auto & r : tree.node(frame).refs_in) {
    if (r.role != RefRole::FactorConstrains) {
      continue;
    }
    const Factor & f = tree.factor(r.from);
    if (f.kind == FactorKind::PriorPose) {
      return r.from;
    }
  }
  return std::nullopt;
}

namespace
{

NodeId sensor_of_factor(const Tree & tree, NodeId factor)
{
  const TreeNode & fac = tree.node(factor);
  const TreeNode & feat = tree.node({NodeKind::Feature, *fac.parent});
  const TreeNode & cap = tree.node({NodeKind::Capture, *feat.parent});
  for (const auto & r : cap.refs_out) {
    if (r.role == RefRole::CaptureSensor) {
      return r.to;
    }
  }
  throw Error(ErrorKind::Reference, "prior capture without sensor");
}

}  // namespace

void enforce_window(Tree & tree, const WindowPolicy & policy)
{
  if (policy.n_frames < 2) {
    throw Error(ErrorKind::Contract, "window must hold at least 2 frames");
  }
  const auto frames = tree.frames();
  if (frames.size() <= policy.n_frames) {
    return;
  }
  const std::size_t n_old = frames.size() - policy.n_frames;

  if (policy.variant == WindowPolicy::Variant::FixOldest) {
    for (std::size_t i = 0; i < n_old; ++i) {
      for (const auto & nb : tree.node(frames[i]).blocks) {
        tree.set_block_fixed({frames[i].index, nb.name}, true);
      }
    }
    return;
  }

  const NodeId survivor = frames[n_old];
  if (!find_pose_prior(tree, survivor)) {
    Eigen::Matrix3d sqrt_info = policy.default_sqrt_info;
    std::optional<NodeId> sensor;
    for (std::size_t i = n_old; i-- > 0;) {
      if (auto prior = find_pose_prior(tree, frames[i])) {
        sqrt_info = tree.factor(*prior).sqrt_info;
        sensor = sensor_of_factor(tree, *prior);
        break;
      }
    }
    if (!sensor) {
      auto sensors = tree.nodes_of_kind(NodeKind::Sensor);
      if (sensors.empty()) {
        throw Error(ErrorKind::Structure, "window prior needs a sensor to attach its capture to");
      }
      sensor = sensors.front();
    }
    emplace_pose_prior(tree, survivor, *sensor, tree.frame_pose(survivor), sqrt_info);
  }
  for (std::size_t i = 0; i < n_old; ++i) {
    tree.remove_node(frames[i]);
  }
}

}  // namespace treeslam
