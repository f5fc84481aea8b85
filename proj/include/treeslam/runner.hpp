#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "treeslam/config.hpp"
#include "treeslam/metrics.hpp"
#include "treeslam/problem.hpp"
#include "treeslam/simulator.hpp"

namespace treeslam
{

struct RunOptions
{
  /// Run each solve on a second thread under the problem lock.
  bool background_solve{false};
};

struct FrameEstimate
{
  double t{0.0};
  Pose2 x;
};

struct RunResult
{
  std::unique_ptr<Problem> problem;
  std::vector<std::string> warnings;
  /// Every keyframe ever created, including those a window removed (last estimate kept).
  std::vector<FrameEstimate> frames;
  std::size_t solves{0};
  std::size_t skipped_solves{0};
  double final_cost{0.0};
  double wall_time{0.0};
  std::optional<MetricsReport> metrics;
};

/// Convert a log record's data for a sensor of the given type.
SensorData decode_capture(const CaptureRecord & rec, const std::string & sensor_type);

/**
 * Set up from config, replay the log in order and solve after every keyframe.
 * Metrics are computed when truth is given.
 */
RunResult run(
  const ParameterServer & config, const std::vector<CaptureRecord> & log, const RunOptions & options = {},
  const std::vector<CaptureRecord> * truth = nullptr);

/// One JSON object per line: frames, then landmarks, then sensor calibrations.
std::string estimate_jsonl(const RunResult & result);

}  // namespace treeslam
