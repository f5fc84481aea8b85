#include "treeslam/runner.hpp"

#include <chrono>
#include <exception>
#include <map>
#include <thread>

#include "treeslam/error.hpp"

namespace treeslam
{

SensorData decode_capture(const CaptureRecord & rec, const std::string & sensor_type)
{
  try {
    if (sensor_type == "diff_drive") {
      if (!rec.data.is_array() || rec.data.size() != 2) {
        throw Error(ErrorKind::Parse, "odometry record needs [dphi_l, dphi_r]");
      }
      return OdomSample{rec.t, Eigen::Vector2d(rec.data[0].get<double>(), rec.data[1].get<double>())};
    }
    if (sensor_type == "range_bearing_2d") {
      if (!rec.data.is_array()) {
        throw Error(ErrorKind::Parse, "range-bearing record needs a list of observations");
      }
      Scan scan{rec.t, {}};
      for (const auto & o : rec.data) {
        RangeBearingObs obs;
        if (o.is_array() && o.size() == 3) {
          if (!o[0].is_number_integer()) {
            throw Error(ErrorKind::Parse, "observation id must be an integer");
          }
          obs.id = o[0].get<int>();
          obs.range = o[1].get<double>();
          obs.bearing = o[2].get<double>();
        } else if (o.is_array() && o.size() == 2) {
          obs.range = o[0].get<double>();
          obs.bearing = o[1].get<double>();
        } else {
          throw Error(ErrorKind::Parse, "observation must be [id, range, bearing] or [range, bearing]");
        }
        scan.obs.push_back(obs);
      }
      return scan;
    }
  } catch (const nlohmann::json::exception & e) {
    throw Error(ErrorKind::Parse, "record at t=" + std::to_string(rec.t) + ": " + e.what());
  }
  throw Error(ErrorKind::UnknownType, "no decoder for sensor type '" + sensor_type + "'");
}

namespace
{

void record_frames(const Problem & problem, std::map<std::uint64_t, FrameEstimate> & archive)
{
  const Tree & tree = problem.tree();
  for (NodeId f : tree.frames()) {
    archive[f.index] = {*tree.node(f).timestamp, tree.frame_pose(f)};
  }
}

std::optional<Eigen::VectorXd> truth_calibration(const std::vector<CaptureRecord> & truth)
{
  for (const auto & r : truth) {
    if (r.sensor == kTruthCalibration) {
      Eigen::VectorXd c(static_cast<Eigen::Index>(r.data.size()));
      for (std::size_t i = 0; i < r.data.size(); ++i) {
        c(static_cast<Eigen::Index>(i)) = r.data[i].get<double>();
      }
      return c;
    }
  }
  return std::nullopt;
}

}  // namespace

RunResult run(
  const ParameterServer & config, const std::vector<CaptureRecord> & log, const RunOptions & options,
  const std::vector<CaptureRecord> * truth)
{
  const auto start = std::chrono::steady_clock::now();
  RunResult result;
  SetupResult setup = auto_setup(config);
  result.problem = std::move(setup.problem);
  result.warnings = std::move(setup.warnings);
  Problem & problem = *result.problem;

  std::map<std::string, std::string> sensor_types;
  for (NodeId s : problem.tree().nodes_of_kind(NodeKind::Sensor)) {
    const auto & info = std::get<SensorInfo>(problem.tree().node(s).payload);
    sensor_types[info.name] = info.type;
  }

  std::map<std::uint64_t, FrameEstimate> archive;
  record_frames(problem, archive);

  auto solve_once = [&]() {
      try {
        if (options.background_solve) {
          std::exception_ptr failure;
          SolveReport report;
          std::thread worker([&]() {
              try {
                report = problem.solve();
              } catch (...) {
                failure = std::current_exception();
              }
            });
          worker.join();
          if (failure) {
            std::rethrow_exception(failure);
          }
          result.final_cost = report.final_cost;
        } else {
          result.final_cost = problem.solve().final_cost;
        }
        ++result.solves;
      } catch (const Error & e) {
        // Early on some blocks (typically the calibration) are not yet observable.
        if (e.kind() != ErrorKind::SingularSystem) {
          throw;
        }
        ++result.skipped_solves;
      }
    };

  double last_t = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < log.size(); ++i) {
    const CaptureRecord & rec = log[i];
    if (rec.t < last_t) {
      throw Error(
        ErrorKind::Ordering, "log record " + std::to_string(i + 1) + " at t=" + std::to_string(rec.t) +
        " precedes t=" + std::to_string(last_t));
    }
    last_t = rec.t;
    auto type = sensor_types.find(rec.sensor);
    if (type == sensor_types.end()) {
      throw Error(ErrorKind::Binding, "log references unknown sensor '" + rec.sensor + "'");
    }
    const auto events = problem.process(rec.sensor, decode_capture(rec, type->second));
    if (events.empty()) {
      continue;
    }
    record_frames(problem, archive);
    problem.manage_window();
    solve_once();
    record_frames(problem, archive);
  }

  for (const auto & [idx, fe] : archive) {
    result.frames.push_back(fe);
  }
  std::stable_sort(
    result.frames.begin(), result.frames.end(), [](const auto & a, const auto & b) { return a.t < b.t; });
  result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (truth) {
    MetricsReport m;
    std::vector<TimedPosition> est;
    for (const auto & f : result.frames) {
      est.push_back({f.t, f.x.p});
    }
    m.ate_rmse = compute_ate(est, *truth);
    if (auto c_true = truth_calibration(*truth)) {
      for (NodeId s : problem.tree().nodes_of_kind(NodeKind::Sensor)) {
        const auto & info = std::get<SensorInfo>(problem.tree().node(s).payload);
        if (info.type == "diff_drive") {
          m.calibration = compute_calib_error(problem.tree().block({s.index, "intr"}).values(), *c_true);
          break;
        }
      }
    }
    m.final_cost = result.final_cost;
    m.keyframes = result.frames.size();
    m.wall_time = result.wall_time;
    m.solves = result.solves;
    m.skipped_solves = result.skipped_solves;
    for (const auto & p : problem.processors()) {
      if (const auto * lc = dynamic_cast<const LoopCloser *>(p.get())) {
        m.loop_closures += lc->closures();
      }
    }
    result.metrics = m;
  }
  return result;
}

std::string estimate_jsonl(const RunResult & result)
{
  std::string out;
  auto emit = [&out](const nlohmann::ordered_json & j) {
      out += j.dump();
      out += '\n';
    };
  for (const auto & f : result.frames) {
    nlohmann::ordered_json j;
    j["type"] = "frame";
    j["t"] = f.t;
    j["p"] = {f.x.p.x(), f.x.p.y()};
    j["o"] = f.x.theta;
    emit(j);
  }
  const Tree & tree = result.problem->tree();
  for (NodeId l : tree.nodes_of_kind(NodeKind::Landmark)) {
    const auto & info = std::get<LandmarkInfo>(tree.node(l).payload);
    const Eigen::VectorXd & p = tree.block({l.index, "p"}).values();
    nlohmann::ordered_json j;
    j["type"] = "landmark";
    j["id"] = info.id;
    if (info.external_id) {
      j["external_id"] = *info.external_id;
    }
    j["p"] = {p(0), p(1)};
    emit(j);
  }
  for (NodeId s : tree.nodes_of_kind(NodeKind::Sensor)) {
    const TreeNode & n = tree.node(s);
    const auto & info = std::get<SensorInfo>(n.payload);
    nlohmann::ordered_json j;
    j["type"] = "calibration";
    j["sensor"] = info.name;
    const Pose2 ext(Eigen::Vector2d(n.find_block("p")->values()), n.find_block("o")->values()(0));
    j["extrinsic"] = {ext.p.x(), ext.p.y(), ext.theta};
    if (const StateBlock * c = n.find_block("intr")) {
      j["intrinsic"] = std::vector<double>(c->values().begin(), c->values().end());
    }
    emit(j);
  }
  return out;
}

}  // namespace treeslam
