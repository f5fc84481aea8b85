#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "treeslam/config.hpp"
#include "treeslam/manifold.hpp"

namespace treeslam
{

/// One line of a capture, truth or estimate log.
struct CaptureRecord
{
  double t{0.0};
  std::string sensor;
  nlohmann::json data;
};

std::string to_jsonl(const std::vector<CaptureRecord> & records);
std::vector<CaptureRecord> parse_jsonl(const std::string & text);
std::vector<CaptureRecord> read_jsonl(const std::string & path);
void write_text(const std::string & path, const std::string & text);

/// Constant twist held for `duration` seconds.
struct ControlSegment
{
  double duration{1.0};
  double v{0.0};
  double w{0.0};
};

struct SimScenario
{
  std::uint64_t seed{0};
  double duration{10.0};
  double odom_rate{50.0};
  double range_bearing_rate{10.0};
  std::string odom_sensor{"odom"};
  std::string range_bearing_sensor{"rb"};

  Eigen::Vector3d c_true{0.1, 0.1, 0.5};  // r_l, r_r, d
  Pose2 extrinsic{0.1, 0.0, 0.0};         // range-bearing sensor in the robot frame
  Pose2 start;

  std::size_t landmark_count{20};
  Eigen::Vector4d area{-5.0, 5.0, -5.0, 5.0};  // x_min, x_max, y_min, y_max
  double min_separation{0.5};
  /// Explicit landmark positions; when non-empty they replace the random field.
  std::vector<Eigen::Vector2d> landmarks;

  /// Played in a loop until `duration` is reached.
  std::vector<ControlSegment> controls{{1.0, 0.0, 0.0}};

  double tick_std{0.0};
  double range_std{0.0};
  double bearing_std{0.0};
  double max_range{5.0};
  double fov{6.283185307179586};
  bool include_ids{true};
};

SimScenario scenario_from(const ParameterServer & server);
SimScenario load_scenario(const std::string & path);

struct SimOutput
{
  std::vector<CaptureRecord> log;
  /// Poses at t = 0 and at every odometry tick, plus calibration and landmark records.
  std::vector<CaptureRecord> truth;
  std::vector<Eigen::Vector2d> landmarks;
};

/// Deterministic given the scenario (including its seed).
SimOutput simulate(const SimScenario & scenario);

/// Truth sensor names used in the truth log.
inline constexpr const char * kTruthPose = "truth";
inline constexpr const char * kTruthCalibration = "truth.calibration";
inline constexpr const char * kTruthLandmark = "truth.landmark";

}  // namespace treeslam
