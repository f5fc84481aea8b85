#pragma once

#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "treeslam/factor.hpp"
#include "treeslam/manifold.hpp"
#include "treeslam/preint.hpp"
#include "treeslam/tree.hpp"

namespace treeslam
{

// ---------------------------------------------------------------------------
// Sensor data entering the processors
// ---------------------------------------------------------------------------

struct OdomSample
{
  double t{0.0};
  Eigen::Vector2d u{Eigen::Vector2d::Zero()};  // wheel angle increments (left, right) [rad]
};

struct RangeBearingObs
{
  std::optional<int> id;
  double range{0.0};
  double bearing{0.0};
};

struct Scan
{
  double t{0.0};
  std::vector<RangeBearingObs> obs;
};

using SensorData = std::variant<OdomSample, Scan>;

inline double timestamp_of(const SensorData & d)
{
  return std::visit([](const auto & x) { return x.t; }, d);
}

// ---------------------------------------------------------------------------
// Policies and protocol results
// ---------------------------------------------------------------------------

/// Any subset of the thresholds may be enabled; a keyframe is voted on the first strict exceedance.
struct KeyframePolicy
{
  std::optional<double> max_dist;
  std::optional<double> max_angle;
  std::optional<double> max_time;
  std::optional<int> min_tracks;
};

struct LoopPolicy
{
  double radius{1.0};
  std::size_t min_frame_gap{10};
  std::size_t min_shared_landmarks{3};
  double sigma_p{0.05};
  double sigma_o{0.02};
};

struct KeyframeEvent
{
  NodeId frame;
  double t{0.0};
};

enum class JoinStatus
{
  Joined,
  Declined,
  /// No capture at or after the keyframe time yet; retried as captures arrive.
  Deferred,
};

struct JoinResult
{
  JoinStatus status{JoinStatus::Declined};
  double gap{std::numeric_limits<double>::infinity()};
};

struct RequiredBlock
{
  std::string name;
  BlockKind kind{BlockKind::Euclidean};
  Eigen::Index size{2};
};

/// Services a processor needs from its owner.
class ProcessingContext
{
public:
  virtual ~ProcessingContext() = default;
  virtual Tree & tree() = 0;
  /// Best available robot pose at t (high-rate motion state, else last frame).
  virtual Pose2 predict_pose(double t) const = 0;
};

// ---------------------------------------------------------------------------
// Processor base
// ---------------------------------------------------------------------------

class Processor
{
public:
  Processor(std::string name, std::string type, NodeId sensor, double time_tolerance);
  virtual ~Processor() = default;

  Processor(const Processor &) = delete;
  Processor & operator=(const Processor &) = delete;

  const std::string & name() const { return name_; }
  const std::string & type() const { return type_; }
  NodeId sensor() const { return sensor_; }
  double time_tolerance() const { return tolerance_; }
  const KeyframePolicy & keyframe_policy() const { return policy_; }
  void set_keyframe_policy(const KeyframePolicy & p) { policy_ = p; }

  /// Blocks this processor needs on every frame it creates or joins.
  const std::vector<RequiredBlock> & required_blocks() const { return required_; }
  void add_required_block(RequiredBlock b) { required_.push_back(std::move(b)); }

  virtual std::optional<KeyframeEvent> process(ProcessingContext & ctx, const SensorData & data) = 0;
  virtual JoinResult on_keyframe(ProcessingContext & ctx, NodeId kf, double t_kf) = 0;
  /// High-rate state, when this processor integrates motion.
  virtual std::optional<Pose2> high_rate_pose(const Tree &, double) const { return std::nullopt; }
  /// Frames removed by the tree manager, for processors that hold references to them.
  virtual void on_frames_removed(const Tree &) {}

protected:
  /// Add missing required blocks to kf. Pose blocks are seeded from `seed`.
  void ensure_blocks(Tree & tree, NodeId kf, const Pose2 & seed) const;
  /// Nearest frame whose timestamp lies within tolerance of t.
  std::optional<NodeId> coincident_frame(const Tree & tree, double t) const;
  Pose2 sensor_pose(const Tree & tree) const;

  std::string name_;
  std::string type_;
  NodeId sensor_;
  double tolerance_;
  KeyframePolicy policy_;
  std::vector<RequiredBlock> required_;
};

// ---------------------------------------------------------------------------
// Differential-drive motion processor
// ---------------------------------------------------------------------------

class MotionProcessor : public Processor
{
public:
  /// Q_u is the per-sample covariance of the wheel increments.
  MotionProcessor(std::string name, NodeId sensor, double time_tolerance, const Eigen::Matrix2d & Q_u);

  std::optional<KeyframeEvent> process(ProcessingContext & ctx, const SensorData & data) override;
  JoinResult on_keyframe(ProcessingContext & ctx, NodeId kf, double t_kf) override;
  std::optional<Pose2> high_rate_pose(const Tree & tree, double t) const override;

  const std::optional<DiffDriveBuffer> & buffer() const { return buffer_; }

private:
  bool policy_votes(const DiffDriveBuffer & buf, double t) const;
  Eigen::Vector3d current_calibration(const Tree & tree) const;
  /// Capture, feature and motion factor from the buffer's origin frame to kf.
  void emplace_motion_factor(Tree & tree, NodeId kf, const DiffDriveBuffer & segment) const;

  Eigen::Matrix2d Q_u_;
  std::optional<DiffDriveBuffer> buffer_;
};

// ---------------------------------------------------------------------------
// Scan-driven processors: buffer captures and keyframes for the join protocol
// ---------------------------------------------------------------------------

class ScanProcessor : public Processor
{
public:
  using Processor::Processor;

  JoinResult on_keyframe(ProcessingContext & ctx, NodeId kf, double t_kf) override;

protected:
  /// Attach scan data to a keyframe (creating features and factors).
  virtual void attach(ProcessingContext & ctx, const Scan & scan, NodeId kf) = 0;
  /// Join a deferred keyframe with this scan if they coincide. True when attached.
  bool try_pending(ProcessingContext & ctx, const Scan & scan);
  void buffer_scan(const Scan & scan);

  std::deque<Scan> scans_;
  std::vector<KeyframeEvent> pending_;
  double last_scan_t_{-std::numeric_limits<double>::infinity()};
};

enum class Association
{
  ById,
  ByGate,
};

struct TrackerParams
{
  double gate{0.5};
  Association association{Association::ById};
  /// Only landmarks seen within this many keyframes are associated. 0 disables the limit.
  std::size_t window_frames{0};
  std::optional<HuberLoss> loss;
};

class LandmarkTracker : public ScanProcessor
{
public:
  LandmarkTracker(
    std::string name, NodeId sensor, double time_tolerance, const TrackerParams & params,
    const Eigen::Matrix2d & sqrt_info);

  std::optional<KeyframeEvent> process(ProcessingContext & ctx, const SensorData & data) override;

  /// Register landmarks already in the map (e.g. loaded from configuration).
  void adopt_map(const Tree & tree);

  /// Landmark the observation associates to from robot pose x, if any. Never mutates.
  std::optional<NodeId> associate(
    const Tree & tree, const Pose2 & x, const RangeBearingObs & obs, std::size_t current_ordinal) const;
  /// World position of an observation taken from robot pose x.
  Eigen::Vector2d invert(const Tree & tree, const Pose2 & x, const RangeBearingObs & obs) const;

  std::size_t track_count() const { return tracks_.size(); }

protected:
  void attach(ProcessingContext & ctx, const Scan & scan, NodeId kf) override;

private:
  struct Track
  {
    NodeId landmark;
    std::optional<int> external_id;
    std::size_t last_seen{0};
    bool from_map{false};
  };

  bool eligible(const Tree & tree, const Track & tr, std::size_t current_ordinal) const;
  std::size_t latest_ordinal(const Tree & tree) const;

  TrackerParams params_;
  Eigen::Matrix2d sqrt_info_;
  std::map<int, Track> tracks_;  // keyed by landmark id
  int next_id_{0};
  double last_kf_t_{-std::numeric_limits<double>::infinity()};
};

/// Rigid transform T minimizing sum |a_i - T(b_i)|^2. Throws an alignment error when degenerate.
Pose2 align_point_sets(const std::vector<Eigen::Vector2d> & a, const std::vector<Eigen::Vector2d> & b);

class LoopCloser : public ScanProcessor
{
public:
  LoopCloser(std::string name, NodeId sensor, double time_tolerance, const LoopPolicy & policy);

  std::optional<KeyframeEvent> process(ProcessingContext & ctx, const SensorData & data) override;
  void on_frames_removed(const Tree & tree) override;

  /// Search past keyframes for a loop with `current` and emplace a relative-pose factor.
  std::optional<NodeId> detect_and_close_loop(Tree & tree, NodeId current);

  std::size_t closures() const { return closures_; }

protected:
  void attach(ProcessingContext & ctx, const Scan & scan, NodeId kf) override;

private:
  struct Record
  {
    NodeId frame;
    std::size_t seq{0};
    Scan scan;
  };

  LoopPolicy loop_;
  std::vector<Record> records_;
  std::size_t next_seq_{0};
  std::size_t closures_{0};
};

}  // namespace treeslam
