#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "treeslam/factor.hpp"
#include "treeslam/manifold.hpp"

namespace treeslam
{

enum class NodeKind
{
  Problem,
  Hardware,
  Trajectory,
  Map,
  Sensor,
  Processor,
  Frame,
  Capture,
  Feature,
  Factor,
  Landmark,
};

const char * to_string(NodeKind kind);

struct NodeId
{
  NodeKind kind{NodeKind::Problem};
  std::uint64_t index{0};

  auto operator<=>(const NodeId &) const = default;
};

std::string to_string(NodeId id);

enum class RefRole
{
  CaptureSensor,
  FactorConstrains,
};

struct CrossRef
{
  NodeId from;
  NodeId to;
  RefRole role{RefRole::CaptureSensor};

  bool operator==(const CrossRef &) const = default;
};

// Kind-specific payloads.
struct SensorInfo
{
  std::string name;
  std::string type;
  std::map<std::string, double> noise;
};

struct ProcessorInfo
{
  std::string name;
  std::string type;
};

struct FrameInfo
{
  std::size_t ordinal{0};  // creation order among frames, assigned by the tree
};

struct CaptureInfo
{
  std::string type;
};

struct FeatureInfo
{
  Eigen::VectorXd measurement;
  std::optional<int> external_id;
};

struct LandmarkInfo
{
  int id{0};
  std::optional<int> external_id;
};

using Payload = std::variant<
  std::monostate, SensorInfo, ProcessorInfo, FrameInfo, CaptureInfo, FeatureInfo, Factor,
  LandmarkInfo>;

struct NamedBlock
{
  std::string name;
  StateBlock block;
};

struct TreeNode
{
  NodeId id;
  std::optional<std::uint64_t> parent;
  std::vector<std::uint64_t> children;
  std::vector<NamedBlock> blocks;
  std::optional<double> timestamp;
  Payload payload;
  std::vector<CrossRef> refs_out;
  std::vector<CrossRef> refs_in;

  const StateBlock * find_block(const std::string & name) const;
  StateBlock * find_block(const std::string & name);
};

/// Arguments of Tree::emplace beyond kind and parent.
struct NodeSpec
{
  std::optional<double> timestamp;
  Payload payload;
  std::vector<NamedBlock> blocks;
  /// Capture nodes: the sensor that produced them.
  std::optional<NodeId> sensor;
};

enum class NotificationAction
{
  AddBlock,
  RemoveBlock,
  AddFactor,
  RemoveFactor,
};

struct Notification
{
  NotificationAction action{NotificationAction::AddBlock};
  NodeId node;
  std::string block;  // empty for factor notifications

  bool operator==(const Notification &) const = default;
};

/**
 * The problem tree.
 *
 * Nodes live in an index-ordered map; indices are handed out monotonically and
 * never reused. Every parent/child link and every cross-branch reference is
 * stored on both ends. Structural changes to blocks and factors are queued as
 * notifications for the solver bridge.
 */
class Tree
{
public:
  Tree();

  NodeId problem() const { return {NodeKind::Problem, 0}; }
  NodeId hardware() const { return {NodeKind::Hardware, 1}; }
  NodeId trajectory() const { return {NodeKind::Trajectory, 2}; }
  NodeId map() const { return {NodeKind::Map, 3}; }

  NodeId emplace(NodeKind kind, NodeId parent, NodeSpec spec = {});
  void add_block_to_frame(NodeId frame, const std::string & name, StateBlock block);
  void remove_node(NodeId id);

  bool contains(NodeId id) const;
  const TreeNode & node(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  const StateBlock & block(const BlockRef & ref) const;
  void set_block_values(const BlockRef & ref, const Eigen::VectorXd & values);
  void set_block_fixed(const BlockRef & ref, bool fixed);
  bool has_block(const BlockRef & ref) const;

  /// Frame with the largest timestamp <= t, or the last frame when t is omitted.
  NodeId frame_at(std::optional<double> t = std::nullopt) const;
  std::map<std::string, Eigen::VectorXd> state_at(std::optional<double> t = std::nullopt) const;
  Pose2 frame_pose(NodeId frame) const;

  /// Live frames ordered by (timestamp, index).
  std::vector<NodeId> frames() const;
  std::vector<NodeId> nodes_of_kind(NodeKind kind) const;
  std::vector<NodeId> children(NodeId id) const;
  const Factor & factor(NodeId id) const;

  std::vector<Notification> drain_notifications();
  std::size_t pending_notifications() const { return queue_.size(); }

  std::vector<std::string> check_consistency() const;
  std::string print() const;

private:
  friend struct TreeTestHook;

  TreeNode & mutable_node(NodeId id);
  void check_legal_parent(NodeKind kind, const TreeNode & parent) const;
  void link_ref(const CrossRef & ref);
  void print_node(std::string & out, std::uint64_t index, int depth) const;

  std::map<std::uint64_t, TreeNode> nodes_;
  std::uint64_t next_index_{0};
  std::size_t next_frame_ordinal_{0};
  std::vector<Notification> queue_;
};

std::string print_tree(const Tree & tree);

/// Fault injection for consistency tests. Not for production use.
struct TreeTestHook
{
  static void sever_child_link(Tree & tree, NodeId parent, NodeId child);
  static void erase_without_cascade(Tree & tree, NodeId id);
};

// ---------------------------------------------------------------------------
// Tree manager
// ---------------------------------------------------------------------------

struct WindowPolicy
{
  enum class Variant
  {
    FixOldest,
    RemoveOldestWithPrior,
  };

  Variant variant{Variant::FixOldest};
  std::size_t n_frames{10};
  /// Used by RemoveOldestWithPrior when no existing prior provides one.
  Eigen::Matrix3d default_sqrt_info{Eigen::Matrix3d::Identity()};
};

/// Apply the sliding-window policy. Call after each keyframe emplacement.
void enforce_window(Tree & tree, const WindowPolicy & policy);

/// Capture/Feature/Factor chain holding a PriorPose factor on `frame`'s p,o blocks.
NodeId emplace_pose_prior(
  Tree & tree, NodeId frame, NodeId sensor, const Pose2 & z, const Eigen::Matrix3d & sqrt_info);

/// PriorBlock factor on any block, carried by a capture on `frame` from `sensor`.
NodeId emplace_block_prior(
  Tree & tree, NodeId frame, NodeId sensor, const BlockRef & block, const Eigen::VectorXd & z,
  const Eigen::MatrixXd & sqrt_info);

/// PriorPose factor constraining `frame`, if any.
std::optional<NodeId> find_pose_prior(const Tree & tree, NodeId frame);

}  // namespace treeslam
