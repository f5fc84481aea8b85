#include "treeslam/processors.hpp"

#include <algorithm>
#include <cmath>

#include "treeslam/error.hpp"
#include "treeslam/factors.hpp"

namespace treeslam
{

namespace
{

constexpr std::size_t kMaxBufferedScans = 256;

std::vector<NamedBlock> pose_blocks(const Pose2 & x)
{
  std::vector<NamedBlock> blocks;
  blocks.push_back({"p", StateBlock::euclidean(x.p)});
  blocks.push_back({"o", StateBlock::angle(x.theta)});
  return blocks;
}

double frame_time(const Tree & tree, NodeId frame)
{
  return tree.node(frame).timestamp.value();
}

std::size_t frame_ordinal(const Tree & tree, NodeId frame)
{
  return std::get<FrameInfo>(tree.node(frame).payload).ordinal;
}

}  // namespace

// ---------------------------------------------------------------------------

Processor::Processor(std::string name, std::string type, NodeId sensor, double time_tolerance)
: name_(std::move(name)), type_(std::move(type)), sensor_(sensor), tolerance_(time_tolerance)
{
  if (!(time_tolerance >= 0.0)) {
    throw Error(ErrorKind::InvalidValue, "processor " + name_ + ": time tolerance must be >= 0");
  }
}

void Processor::ensure_blocks(Tree & tree, NodeId kf, const Pose2 & seed) const
{
  const TreeNode & n = tree.node(kf);
  if (!n.find_block("p")) {
    tree.add_block_to_frame(kf, "p", StateBlock::euclidean(seed.p));
  }
  if (!tree.node(kf).find_block("o")) {
    tree.add_block_to_frame(kf, "o", StateBlock::angle(seed.theta));
  }
  for (const auto & rb : required_) {
    if (tree.node(kf).find_block(rb.name)) {
      continue;
    }
    tree.add_block_to_frame(
      kf, rb.name, rb.kind == BlockKind::Angle ? StateBlock::angle(0.0) :
      StateBlock::euclidean(Eigen::VectorXd::Zero(rb.size)));
  }
}

std::optional<NodeId> Processor::coincident_frame(const Tree & tree, double t) const
{
  std::optional<NodeId> best;
  double best_gap = tolerance_;
  for (NodeId f : tree.frames()) {
    const double gap = std::abs(frame_time(tree, f) - t);
    if (gap <= best_gap && (!best || gap < best_gap)) {
      best = f;
      best_gap = gap;
    }
  }
  return best;
}

Pose2 Processor::sensor_pose(const Tree & tree) const
{
  const auto & p = tree.block({sensor_.index, "p"}).values();
  const auto & o = tree.block({sensor_.index, "o"}).values();
  return {Eigen::Vector2d(p), o(0)};
}

// ---------------------------------------------------------------------------
// MotionProcessor
// ---------------------------------------------------------------------------

MotionProcessor::MotionProcessor(
  std::string name, NodeId sensor, double time_tolerance, const Eigen::Matrix2d & Q_u)
: Processor(std::move(name), "diff_drive", sensor, time_tolerance), Q_u_(Q_u)
{}

bool MotionProcessor::policy_votes(const DiffDriveBuffer & buf, double t) const
{
  const Delta2 d = buf.delta_bar();
  if (policy_.max_dist && d.dp.norm() > *policy_.max_dist) {
    return true;
  }
  if (policy_.max_angle && std::abs(d.dtheta) > *policy_.max_angle) {
    return true;
  }
  return policy_.max_time && t - buf.origin_t() > *policy_.max_time;
}

Eigen::Vector3d MotionProcessor::current_calibration(const Tree & tree) const
{
  const Eigen::VectorXd & c = tree.block({sensor_.index, "intr"}).values();
  if (c.size() != 3) {
    throw Error(ErrorKind::Contract, "differential drive needs a 3-vector intrinsic block");
  }
  if (buffer_ && !(c.minCoeff() > 0.0)) {
    // Keep integrating with the last physical calibration.
    return buffer_->c_bar();
  }
  return c;
}

std::optional<Pose2> MotionProcessor::high_rate_pose(const Tree & tree, double t) const
{
  if (!buffer_) {
    return std::nullopt;
  }
  const NodeId origin{NodeKind::Frame, buffer_->origin_frame()};
  if (!tree.contains(origin) || t < buffer_->origin_t()) {
    return std::nullopt;
  }
  return state_at_high_rate(*buffer_, tree.frame_pose(origin), t);
}

void MotionProcessor::emplace_motion_factor(Tree & tree, NodeId kf, const DiffDriveBuffer & segment) const
{
  const NodeId origin{NodeKind::Frame, segment.origin_frame()};
  if (segment.empty() || !tree.contains(origin) || origin == kf) {
    return;
  }
  Eigen::Matrix3d Q = segment.Q_delta();
  Eigen::MatrixXd U;
  try {
    U = whiten(Q);
  } catch (const Error &) {
    // A single sample gives a rank-2 covariance; floor it.
    Q += 1e-10 * Eigen::Matrix3d::Identity();
    U = whiten(Q);
  }
  const Delta2 d = segment.delta_bar();

  NodeSpec cap;
  cap.timestamp = frame_time(tree, kf);
  cap.payload = CaptureInfo{"motion"};
  cap.sensor = sensor_;
  const NodeId capture = tree.emplace(NodeKind::Capture, kf, std::move(cap));

  NodeSpec feat;
  feat.payload = FeatureInfo{d.vector(), std::nullopt};
  const NodeId feature = tree.emplace(NodeKind::Feature, capture, std::move(feat));

  Factor f;
  f.kind = FactorKind::Motion;
  f.z = d.vector();
  f.sqrt_info = U;
  f.constrained = {
    {origin.index, "p"}, {origin.index, "o"}, {kf.index, "p"}, {kf.index, "o"}, {sensor_.index, "intr"}};
  f.motion = MotionAux{d, Q, segment.J_delta_c(), segment.c_bar()};
  NodeSpec fac;
  fac.payload = std::move(f);
  tree.emplace(NodeKind::Factor, feature, std::move(fac));
}

std::optional<KeyframeEvent> MotionProcessor::process(ProcessingContext & ctx, const SensorData & data)
{
  const auto * sample = std::get_if<OdomSample>(&data);
  if (!sample) {
    throw Error(ErrorKind::Contract, "processor " + name_ + " expects odometry samples");
  }
  if (!buffer_) {
    throw Error(ErrorKind::NotReady, "processor " + name_ + " has no origin keyframe");
  }
  buffer_->integrate_step({sample->t, sample->u, Q_u_});
  if (!policy_votes(*buffer_, sample->t)) {
    return std::nullopt;
  }

  Tree & tree = ctx.tree();
  if (auto f = coincident_frame(tree, sample->t); f && frame_time(tree, *f) > buffer_->origin_t()) {
    // Another processor already created a keyframe here; join it instead of voting twice.
    on_keyframe(ctx, *f, frame_time(tree, *f));
    return std::nullopt;
  }

  const Pose2 seed = high_rate_pose(tree, sample->t).value_or(Pose2{});
  NodeSpec spec;
  spec.timestamp = sample->t;
  spec.payload = FrameInfo{};
  spec.blocks = pose_blocks(seed);
  const NodeId kf = tree.emplace(NodeKind::Frame, tree.trajectory(), std::move(spec));
  ensure_blocks(tree, kf, seed);
  emplace_motion_factor(tree, kf, *buffer_);
  buffer_ = DiffDriveBuffer(kf.index, sample->t, current_calibration(tree));
  return KeyframeEvent{kf, sample->t};
}

JoinResult MotionProcessor::on_keyframe(ProcessingContext & ctx, NodeId kf, double t_kf)
{
  Tree & tree = ctx.tree();
  if (!buffer_) {
    ensure_blocks(tree, kf, tree.frame_pose(kf));
    buffer_ = DiffDriveBuffer(kf.index, t_kf, current_calibration(tree));
    return {JoinStatus::Joined, 0.0};
  }
  if (kf.index == buffer_->origin_frame()) {
    return {JoinStatus::Joined, 0.0};
  }
  if (!(t_kf > buffer_->origin_t())) {
    return {JoinStatus::Declined, buffer_->origin_t() - t_kf};
  }

  double gap = std::abs(buffer_->origin_t() - t_kf);
  for (const auto & e : buffer_->entries()) {
    gap = std::min(gap, std::abs(e.t - t_kf));
  }
  if (gap > tolerance_) {
    return {JoinStatus::Declined, gap};
  }

  const Pose2 seed = high_rate_pose(tree, t_kf).value_or(tree.frame_pose(kf));
  auto [first, second] = split_buffer(*buffer_, t_kf, tolerance_, kf.index);
  ensure_blocks(tree, kf, seed);
  emplace_motion_factor(tree, kf, first);

  // The new segment linearizes around the current calibration estimate.
  DiffDriveBuffer fresh(kf.index, t_kf, current_calibration(tree));
  for (const auto & e : second.entries()) {
    fresh.integrate_step({e.t, e.u, e.Q_u});
  }
  buffer_ = std::move(fresh);
  return {JoinStatus::Joined, gap};
}

// ---------------------------------------------------------------------------
// ScanProcessor
// ---------------------------------------------------------------------------

JoinResult ScanProcessor::on_keyframe(ProcessingContext & ctx, NodeId kf, double t_kf)
{
  auto best = scans_.end();
  double gap = std::numeric_limits<double>::infinity();
  for (auto it = scans_.begin(); it != scans_.end(); ++it) {
    const double g = std::abs(it->t - t_kf);
    if (g < gap) {
      gap = g;
      best = it;
    }
  }
  if (best != scans_.end() && gap <= tolerance_) {
    const Scan scan = *best;
    scans_.erase(scans_.begin(), std::next(best));
    attach(ctx, scan, kf);
    return {JoinStatus::Joined, gap};
  }
  if (last_scan_t_ < t_kf + tolerance_) {
    // A matching capture may still arrive.
    pending_.push_back({kf, t_kf});
    return {JoinStatus::Deferred, gap};
  }
  return {JoinStatus::Declined, gap};
}

bool ScanProcessor::try_pending(ProcessingContext & ctx, const Scan & scan)
{
  const Tree & tree = ctx.tree();
  std::erase_if(pending_, [&](const KeyframeEvent & e) {
      return !tree.contains(e.frame) || e.t < scan.t - tolerance_;
    });
  auto best = pending_.end();
  double gap = tolerance_;
  for (auto it = pending_.begin(); it != pending_.end(); ++it) {
    const double g = std::abs(it->t - scan.t);
    if (g <= gap && (best == pending_.end() || g < gap)) {
      best = it;
      gap = g;
    }
  }
  if (best == pending_.end()) {
    return false;
  }
  const NodeId kf = best->frame;
  pending_.erase(best);
  attach(ctx, scan, kf);
  return true;
}

void ScanProcessor::buffer_scan(const Scan & scan)
{
  scans_.push_back(scan);
  while (scans_.size() > kMaxBufferedScans) {
    scans_.pop_front();
  }
}

// ---------------------------------------------------------------------------
// LandmarkTracker
// ---------------------------------------------------------------------------

LandmarkTracker::LandmarkTracker(
  std::string name, NodeId sensor, double time_tolerance, const TrackerParams & params,
  const Eigen::Matrix2d & sqrt_info)
: ScanProcessor(std::move(name), "landmark_tracker", sensor, time_tolerance),
  params_(params), sqrt_info_(sqrt_info)
{
  if (!(params.gate > 0.0)) {
    throw Error(ErrorKind::InvalidValue, "association gate must be positive");
  }
}

void LandmarkTracker::adopt_map(const Tree & tree)
{
  for (NodeId id : tree.nodes_of_kind(NodeKind::Landmark)) {
    const auto & info = std::get<LandmarkInfo>(tree.node(id).payload);
    tracks_[info.id] = {id, info.external_id, 0, true};
    next_id_ = std::max(next_id_, info.id + 1);
  }
}

std::size_t LandmarkTracker::latest_ordinal(const Tree & tree) const
{
  const auto frames = tree.frames();
  std::size_t best = 0;
  for (NodeId f : frames) {
    best = std::max(best, frame_ordinal(tree, f));
  }
  return best;
}

bool LandmarkTracker::eligible(const Tree & tree, const Track & tr, std::size_t current_ordinal) const
{
  if (!tree.contains(tr.landmark)) {
    return false;
  }
  return tr.from_map || params_.window_frames == 0 || current_ordinal <= tr.last_seen + params_.window_frames;
}

Eigen::Vector2d LandmarkTracker::invert(const Tree & tree, const Pose2 & x, const RangeBearingObs & obs) const
{
  const Pose2 s = pose_compose(x, as_delta(sensor_pose(tree))).value;
  const Eigen::Vector2d local(obs.range * std::cos(obs.bearing), obs.range * std::sin(obs.bearing));
  return s.p + rotation(s.theta) * local;
}

std::optional<NodeId> LandmarkTracker::associate(
  const Tree & tree, const Pose2 & x, const RangeBearingObs & obs, std::size_t current_ordinal) const
{
  if (params_.association == Association::ById && obs.id) {
    for (const auto & [id, tr] : tracks_) {
      if (tr.external_id == obs.id && eligible(tree, tr, current_ordinal)) {
        return tr.landmark;
      }
    }
    return std::nullopt;
  }
  const Eigen::Vector2d p = invert(tree, x, obs);
  std::optional<NodeId> best;
  double best_d = params_.gate;
  for (const auto & [id, tr] : tracks_) {
    if (!eligible(tree, tr, current_ordinal)) {
      continue;
    }
    const double d = (Eigen::Vector2d(tree.block({tr.landmark.index, "p"}).values()) - p).norm();
    if (d <= best_d && (!best || d < best_d)) {
      best = tr.landmark;
      best_d = d;
    }
  }
  return best;
}

std::optional<KeyframeEvent> LandmarkTracker::process(ProcessingContext & ctx, const SensorData & data)
{
  const auto * scan = std::get_if<Scan>(&data);
  if (!scan) {
    throw Error(ErrorKind::Contract, "processor " + name_ + " expects range-bearing scans");
  }
  last_scan_t_ = scan->t;
  if (try_pending(ctx, *scan)) {
    return std::nullopt;
  }

  Tree & tree = ctx.tree();
  const Pose2 x = ctx.predict_pose(scan->t);
  const std::size_t current = latest_ordinal(tree);
  int matched = 0;
  for (const auto & obs : scan->obs) {
    if (associate(tree, x, obs, current)) {
      ++matched;
    }
  }
  const bool vote =
    (policy_.min_tracks && matched < *policy_.min_tracks) ||
    (policy_.max_time && scan->t - last_kf_t_ > *policy_.max_time);
  if (!vote) {
    buffer_scan(*scan);
    return std::nullopt;
  }

  NodeSpec spec;
  spec.timestamp = scan->t;
  spec.payload = FrameInfo{};
  spec.blocks = pose_blocks(x);
  const NodeId kf = tree.emplace(NodeKind::Frame, tree.trajectory(), std::move(spec));
  attach(ctx, *scan, kf);
  return KeyframeEvent{kf, scan->t};
}

void LandmarkTracker::attach(ProcessingContext & ctx, const Scan & scan, NodeId kf)
{
  Tree & tree = ctx.tree();
  ensure_blocks(tree, kf, ctx.predict_pose(frame_time(tree, kf)));
  last_kf_t_ = std::max(last_kf_t_, frame_time(tree, kf));
  const Pose2 x = tree.frame_pose(kf);
  const std::size_t current = frame_ordinal(tree, kf);

  NodeSpec cap;
  cap.timestamp = scan.t;
  cap.payload = CaptureInfo{"range_bearing"};
  cap.sensor = sensor_;
  const NodeId capture = tree.emplace(NodeKind::Capture, kf, std::move(cap));

  for (const auto & obs : scan.obs) {
    if (!(obs.range > 1e-6) || !std::isfinite(obs.bearing)) {
      continue;
    }
    std::optional<NodeId> lm = associate(tree, x, obs, current);
    if (!lm) {
      const int id = next_id_++;
      NodeSpec ls;
      ls.payload = LandmarkInfo{id, obs.id};
      ls.blocks.push_back({"p", StateBlock::euclidean(invert(tree, x, obs))});
      lm = tree.emplace(NodeKind::Landmark, tree.map(), std::move(ls));
      tracks_[id] = {*lm, obs.id, current, false};
    } else {
      const int id = std::get<LandmarkInfo>(tree.node(*lm).payload).id;
      auto & tr = tracks_.at(id);
      tr.last_seen = std::max(tr.last_seen, current);
    }

    const Eigen::Vector2d z(obs.range, obs.bearing);
    NodeSpec fs;
    fs.payload = FeatureInfo{z, obs.id};
    const NodeId feature = tree.emplace(NodeKind::Feature, capture, std::move(fs));

    Factor f;
    f.kind = FactorKind::RangeBearing;
    f.z = z;
    f.sqrt_info = sqrt_info_;
    f.loss = params_.loss;
    f.constrained = {
      {kf.index, "p"}, {kf.index, "o"}, {sensor_.index, "p"}, {sensor_.index, "o"}, {lm->index, "p"}};
    NodeSpec fac;
    fac.payload = std::move(f);
    tree.emplace(NodeKind::Factor, feature, std::move(fac));
  }
}

// ---------------------------------------------------------------------------
// Loop closure
// ---------------------------------------------------------------------------

Pose2 align_point_sets(const std::vector<Eigen::Vector2d> & a, const std::vector<Eigen::Vector2d> & b)
{
  if (a.size() != b.size() || a.size() < 2) {
    throw Error(ErrorKind::Alignment, "alignment needs two equally sized sets of at least 2 points");
  }
  Eigen::Vector2d ca = Eigen::Vector2d::Zero(), cb = Eigen::Vector2d::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca += a[i];
    cb += b[i];
  }
  ca /= static_cast<double>(a.size());
  cb /= static_cast<double>(b.size());

  double cross = 0.0, dot = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Eigen::Vector2d pa = a[i] - ca, pb = b[i] - cb;
    cross += pb.x() * pa.y() - pb.y() * pa.x();
    dot += pb.dot(pa);
    spread += pb.squaredNorm();
  }
  if (!(spread > 1e-12) || std::hypot(cross, dot) < 1e-12) {
    throw Error(ErrorKind::Alignment, "point sets are degenerate (coincident points)");
  }
  const double theta = std::atan2(cross, dot);
  return {ca - rotation(theta) * cb, theta};
}

LoopCloser::LoopCloser(std::string name, NodeId sensor, double time_tolerance, const LoopPolicy & policy)
: ScanProcessor(std::move(name), "loop_closer", sensor, time_tolerance), loop_(policy)
{
  if (!(policy.sigma_p > 0.0 && policy.sigma_o > 0.0 && policy.radius > 0.0)) {
    throw Error(ErrorKind::InvalidValue, "loop closure radius and sigmas must be positive");
  }
}

std::optional<KeyframeEvent> LoopCloser::process(ProcessingContext & ctx, const SensorData & data)
{
  const auto * scan = std::get_if<Scan>(&data);
  if (!scan) {
    throw Error(ErrorKind::Contract, "processor " + name_ + " expects range-bearing scans");
  }
  last_scan_t_ = scan->t;
  if (!try_pending(ctx, *scan)) {
    buffer_scan(*scan);
  }
  return std::nullopt;
}

void LoopCloser::on_frames_removed(const Tree & tree)
{
  std::erase_if(records_, [&](const Record & r) { return !tree.contains(r.frame); });
}

void LoopCloser::attach(ProcessingContext & ctx, const Scan & scan, NodeId kf)
{
  records_.push_back({kf, next_seq_++, scan});
  try {
    detect_and_close_loop(ctx.tree(), kf);
  } catch (const Error & e) {
    if (e.kind() != ErrorKind::Alignment) {
      throw;
    }
  }
}

namespace
{

std::map<int, Eigen::Vector2d> points_by_id(const Scan & scan)
{
  std::map<int, Eigen::Vector2d> out;
  for (const auto & o : scan.obs) {
    if (o.id) {
      out.emplace(*o.id, Eigen::Vector2d(o.range * std::cos(o.bearing), o.range * std::sin(o.bearing)));
    }
  }
  return out;
}

}  // namespace

std::optional<NodeId> LoopCloser::detect_and_close_loop(Tree & tree, NodeId current)
{
  auto cur = std::find_if(records_.rbegin(), records_.rend(), [&](const Record & r) { return r.frame == current; });
  if (cur == records_.rend()) {
    return std::nullopt;
  }
  const Pose2 x_cur = tree.frame_pose(current);
  const auto cur_pts = points_by_id(cur->scan);

  const Record * best = nullptr;
  std::size_t best_shared = 0;
  double best_dist = 0.0;
  for (const Record & r : records_) {
    if (r.frame == current || !tree.contains(r.frame) || r.seq + loop_.min_frame_gap > cur->seq) {
      continue;
    }
    const double dist = (tree.frame_pose(r.frame).p - x_cur.p).norm();
    if (dist > loop_.radius) {
      continue;
    }
    std::size_t shared = 0;
    for (const auto & [id, p] : points_by_id(r.scan)) {
      shared += cur_pts.count(id);
    }
    if (!best || shared > best_shared || (shared == best_shared && dist < best_dist)) {
      best = &r;
      best_shared = shared;
      best_dist = dist;
    }
  }
  if (!best || best_shared < loop_.min_shared_landmarks) {
    return std::nullopt;
  }

  std::vector<Eigen::Vector2d> a, b;
  for (const auto & [id, p] : points_by_id(best->scan)) {
    if (auto it = cur_pts.find(id); it != cur_pts.end()) {
      a.push_back(p);
      b.push_back(it->second);
    }
  }
  // Sensor-frame transform, mapped to robot frames through the extrinsic.
  const Pose2 T = align_point_sets(a, b);
  const Pose2 ext = sensor_pose(tree);
  const Pose2 z = pose_compose(pose_compose(ext, as_delta(T)).value, as_delta(pose_inverse(ext))).value;

  const NodeId past = best->frame;
  NodeSpec cap;
  cap.timestamp = frame_time(tree, current);
  cap.payload = CaptureInfo{"loop"};
  cap.sensor = sensor_;
  const NodeId capture = tree.emplace(NodeKind::Capture, current, std::move(cap));
  NodeSpec fs;
  fs.payload = FeatureInfo{z.vector(), std::nullopt};
  const NodeId feature = tree.emplace(NodeKind::Feature, capture, std::move(fs));

  Factor f;
  f.kind = FactorKind::RelativePose;
  f.z = z.vector();
  f.sqrt_info = Eigen::Vector3d(1.0 / loop_.sigma_p, 1.0 / loop_.sigma_p, 1.0 / loop_.sigma_o).asDiagonal();
  f.constrained = {{past.index, "p"}, {past.index, "o"}, {current.index, "p"}, {current.index, "o"}};
  NodeSpec fac;
  fac.payload = std::move(f);
  const NodeId factor = tree.emplace(NodeKind::Factor, feature, std::move(fac));
  ++closures_;
  return factor;
}

}  // namespace treeslam
