#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "treeslam/simulator.hpp"

namespace treeslam
{

struct TimedPosition
{
  double t{0.0};
  Eigen::Vector2d p{Eigen::Vector2d::Zero()};
};

/// Root-mean-square position error over keyframes, matched to truth within 1e-6 s.
double compute_ate(const std::vector<TimedPosition> & estimate, const std::vector<CaptureRecord> & truth);

struct CalibrationError
{
  Eigen::VectorXd absolute;
  Eigen::VectorXd relative;
};

CalibrationError compute_calib_error(const Eigen::VectorXd & estimate, const Eigen::VectorXd & truth);

struct MetricsReport
{
  double ate_rmse{0.0};
  std::optional<CalibrationError> calibration;
  double final_cost{0.0};
  std::size_t keyframes{0};
  double wall_time{0.0};
  std::size_t solves{0};
  std::size_t skipped_solves{0};
  std::size_t loop_closures{0};

  nlohmann::ordered_json to_json() const;
};

}  // namespace treeslam
