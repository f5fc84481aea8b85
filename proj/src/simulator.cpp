#include "treeslam/simulator.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "treeslam/error.hpp"
#include "treeslam/preint.hpp"

namespace treeslam
{

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

std::string to_jsonl(const std::vector<CaptureRecord> & records)
{
  std::string out;
  for (const auto & r : records) {
    nlohmann::ordered_json j;
    j["t"] = r.t;
    j["sensor"] = r.sensor;
    j["data"] = r.data;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<CaptureRecord> parse_jsonl(const std::string & text)
{
  std::vector<CaptureRecord> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("t").get<double>(), j.at("sensor").get<std::string>(), j.at("data")});
    } catch (const nlohmann::json::exception & e) {
      throw Error(ErrorKind::Parse, "log line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<CaptureRecord> read_jsonl(const std::string & path)
{
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorKind::Parse, "cannot open log '" + path + "'");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_jsonl(ss.str());
}

void write_text(const std::string & path, const std::string & text)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error(ErrorKind::InvalidValue, "cannot write '" + path + "'");
  }
  out << text;
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

SimScenario scenario_from(const ParameterServer & server)
{
  const ParamView v(server);
  SimScenario s;
  s.seed = static_cast<std::uint64_t>(v.integer("seed", 0));
  s.duration = v.number("duration", s.duration);
  s.odom_rate = v.number("rates.odom", s.odom_rate);
  s.range_bearing_rate = v.number("rates.range_bearing", s.range_bearing_rate);
  s.odom_sensor = v.string("sensors.odom", s.odom_sensor);
  s.range_bearing_sensor = v.string("sensors.range_bearing", s.range_bearing_sensor);
  if (v.has("calibration")) {
    s.c_true = v.vector("calibration", 3);
  }
  if (v.has("extrinsic")) {
    const Eigen::VectorXd e = v.vector("extrinsic", 3);
    s.extrinsic = Pose2(e(0), e(1), e(2));
  }
  if (v.has("start")) {
    const Eigen::VectorXd e = v.vector("start", 3);
    s.start = Pose2(e(0), e(1), e(2));
  }
  s.landmark_count = static_cast<std::size_t>(v.integer("landmarks.count", static_cast<std::int64_t>(s.landmark_count)));
  if (v.has("landmarks.area")) {
    s.area = v.vector("landmarks.area", 4);
  }
  s.min_separation = v.number("landmarks.min_separation", s.min_separation);
  for (const ParamView & p : v.items("landmarks.points")) {
    s.landmarks.push_back(p.vector("p", 2));
  }
  const auto segs = v.items("controls");
  if (!segs.empty()) {
    s.controls.clear();
    for (const ParamView & c : segs) {
      s.controls.push_back({c.number("duration"), c.number("v"), c.number("w")});
    }
  }
  s.tick_std = v.number("noise.tick_std", s.tick_std);
  s.range_std = v.number("noise.range_std", s.range_std);
  s.bearing_std = v.number("noise.bearing_std", s.bearing_std);
  s.max_range = v.number("max_range", s.max_range);
  s.fov = v.number("fov", s.fov);
  s.include_ids = v.boolean("include_ids", s.include_ids);

  if (!(s.odom_rate > 0.0 && s.range_bearing_rate > 0.0)) {
    throw Error(ErrorKind::Config, "sensor rates must be positive");
  }
  if (s.tick_std < 0.0 || s.range_std < 0.0 || s.bearing_std < 0.0) {
    throw Error(ErrorKind::Config, "noise levels must be non-negative");
  }
  if (!(s.c_true.minCoeff() > 0.0)) {
    throw Error(ErrorKind::Config, "calibration must be positive");
  }
  for (const auto & c : s.controls) {
    if (!(c.duration > 0.0)) {
      throw Error(ErrorKind::Config, "control segment durations must be positive");
    }
  }
  return s;
}

SimScenario load_scenario(const std::string & path)
{
  return scenario_from(load_config(path));
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

namespace
{

ControlSegment control_at(const std::vector<ControlSegment> & controls, double t)
{
  double period = 0.0;
  for (const auto & c : controls) {
    period += c.duration;
  }
  double tau = std::fmod(t, period);
  for (const auto & c : controls) {
    if (tau < c.duration) {
      return c;
    }
    tau -= c.duration;
  }
  return controls.back();
}

/// Exact motion under the chord model for arc length s and heading change w.
Pose2 advance(const Pose2 & x, double s, double w)
{
  return DiffDriveModel::plus(x, DiffDriveModel::compute_delta(Eigen::Vector2d(s, w)).delta);
}

std::vector<Eigen::Vector2d> place_landmarks(const SimScenario & sc, std::mt19937_64 & rng)
{
  if (!sc.landmarks.empty()) {
    return sc.landmarks;
  }
  std::uniform_real_distribution<double> ux(sc.area(0), sc.area(1)), uy(sc.area(2), sc.area(3));
  std::vector<Eigen::Vector2d> out;
  std::size_t attempts = 0;
  while (out.size() < sc.landmark_count) {
    if (++attempts > 100000) {
      throw Error(ErrorKind::Config, "cannot place landmarks with the requested separation");
    }
    const Eigen::Vector2d p(ux(rng), uy(rng));
    bool ok = true;
    for (const auto & q : out) {
      ok = ok && (p - q).norm() >= sc.min_separation;
    }
    if (ok) {
      out.push_back(p);
    }
  }
  return out;
}

}  // namespace

SimOutput simulate(const SimScenario & sc)
{
  std::mt19937_64 rng(sc.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto noise = [&](double sigma) { return sigma > 0.0 ? sigma * gauss(rng) : 0.0; };

  SimOutput out;
  out.landmarks = place_landmarks(sc, rng);

  const double rl = sc.c_true(0), rr = sc.c_true(1), d = sc.c_true(2);
  out.truth.push_back({0.0, kTruthCalibration, {rl, rr, d}});
  for (std::size_t i = 0; i < out.landmarks.size(); ++i) {
    out.truth.push_back({0.0, kTruthLandmark, {static_cast<int>(i), out.landmarks[i].x(), out.landmarks[i].y()}});
  }

  const auto n_odom = static_cast<std::size_t>(std::floor(sc.duration * sc.odom_rate + 1e-9));
  const auto n_scan = static_cast<std::size_t>(std::floor(sc.duration * sc.range_bearing_rate + 1e-9));

  Pose2 x = sc.start;
  double t_x = 0.0;  // time of x
  out.truth.push_back({0.0, kTruthPose, {x.p.x(), x.p.y(), x.theta}});

  auto observe = [&](double t, const Pose2 & pose) {
      const Pose2 s = pose_compose(pose, as_delta(sc.extrinsic)).value;
      nlohmann::json obs = nlohmann::json::array();
      for (std::size_t i = 0; i < out.landmarks.size(); ++i) {
        const Eigen::Vector2d l = rotation(s.theta).transpose() * (out.landmarks[i] - s.p);
        const double r = l.norm();
        const double b = std::atan2(l.y(), l.x());
        if (r > sc.max_range || r < 1e-6 || std::abs(b) > sc.fov / 2.0) {
          continue;
        }
        const double rn = r + noise(sc.range_std);
        const double bn = normalize_angle(b + noise(sc.bearing_std));
        if (sc.include_ids) {
          obs.push_back({static_cast<int>(i), rn, bn});
        } else {
          obs.push_back({rn, bn});
        }
      }
      out.log.push_back({t, sc.range_bearing_sensor, obs});
    };

  std::size_t k = 1, j = 0;
  while (k <= n_odom || j <= n_scan) {
    const double t_odom = k <= n_odom ? static_cast<double>(k) / sc.odom_rate : INFINITY;
    const double t_scan = j <= n_scan ? static_cast<double>(j) / sc.range_bearing_rate : INFINITY;
    if (t_odom <= t_scan) {
      // Integrate the control held since the previous tick.
      const double dt = t_odom - t_x;
      const ControlSegment c = control_at(sc.controls, t_x);
      const double s = c.v * dt, w = c.w * dt;
      x = advance(x, s, w);
      t_x = t_odom;
      const double dl = (s - d * w / 2.0) / rl + noise(sc.tick_std);
      const double dr = (s + d * w / 2.0) / rr + noise(sc.tick_std);
      out.log.push_back({t_odom, sc.odom_sensor, {dl, dr}});
      out.truth.push_back({t_odom, kTruthPose, {x.p.x(), x.p.y(), x.theta}});
      ++k;
    } else {
      Pose2 pose = x;
      if (t_scan > t_x) {
        const ControlSegment c = control_at(sc.controls, t_x);
        pose = advance(x, c.v * (t_scan - t_x), c.w * (t_scan - t_x));
        out.truth.push_back({t_scan, kTruthPose, {pose.p.x(), pose.p.y(), pose.theta}});
      }
      observe(t_scan, pose);
      ++j;
    }
  }
  return out;
}

}  // namespace treeslam
