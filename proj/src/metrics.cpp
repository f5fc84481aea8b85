#include "treeslam/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "treeslam/error.hpp"

namespace treeslam
{

double compute_ate(const std::vector<TimedPosition> & estimate, const std::vector<CaptureRecord> & truth)
{
  std::vector<TimedPosition> gt;
  for (const auto & r : truth) {
    if (r.sensor == kTruthPose) {
      gt.push_back({r.t, Eigen::Vector2d(r.data.at(0).get<double>(), r.data.at(1).get<double>())});
    }
  }
  std::sort(gt.begin(), gt.end(), [](const auto & a, const auto & b) { return a.t < b.t; });
  if (estimate.empty()) {
    return 0.0;
  }

  double sum = 0.0;
  for (const auto & e : estimate) {
    auto it = std::lower_bound(
      gt.begin(), gt.end(), e.t - 1e-6, [](const TimedPosition & g, double t) { return g.t < t; });
    if (it == gt.end() || std::abs(it->t - e.t) > 1e-6) {
      throw Error(ErrorKind::Association, "no ground truth within 1e-6 s of t=" + std::to_string(e.t));
    }
    sum += (e.p - it->p).squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(estimate.size()));
}

CalibrationError compute_calib_error(const Eigen::VectorXd & estimate, const Eigen::VectorXd & truth)
{
  if (estimate.size() != truth.size()) {
    throw Error(
      ErrorKind::Contract, "calibration dimension mismatch: " + std::to_string(estimate.size()) + " vs " +
      std::to_string(truth.size()));
  }
  CalibrationError out;
  out.absolute = (estimate - truth).cwiseAbs();
  out.relative = out.absolute.cwiseQuotient(truth.cwiseAbs());
  return out;
}

nlohmann::ordered_json MetricsReport::to_json() const
{
  nlohmann::ordered_json j;
  j["ate_rmse"] = ate_rmse;
  if (calibration) {
    j["calibration_abs_error"] = std::vector<double>(calibration->absolute.begin(), calibration->absolute.end());
    j["calibration_rel_error"] = std::vector<double>(calibration->relative.begin(), calibration->relative.end());
  }
  j["final_cost"] = final_cost;
  j["keyframes"] = keyframes;
  j["wall_time"] = wall_time;
  j["solves"] = solves;
  j["skipped_solves"] = skipped_solves;
  j["loop_closures"] = loop_closures;
  return j;
}

}  // namespace treeslam
