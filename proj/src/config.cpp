#include "treeslam/config.hpp"

#include <fstream>
#include <regex>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace treeslam
{

namespace
{

std::string join_key(const std::string & prefix, const std::string & k)
{
  return prefix.empty() ? k : prefix + "." + k;
}

bool is_numeric(const ParamScalar & s)
{
  return std::holds_alternative<std::int64_t>(s) || std::holds_alternative<double>(s);
}

double as_number(const ParamScalar & s)
{
  if (const auto * i = std::get_if<std::int64_t>(&s)) {
    return static_cast<double>(*i);
  }
  return std::get<double>(s);
}

std::string scalar_text(const ParamScalar & s)
{
  return std::visit(
    [](const auto & v) -> std::string {
      using T = std::decay_t<decltype(v)>;
      if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
      } else if constexpr (std::is_same_v<T, std::string>) {
        return "\"" + v + "\"";
      } else {
        std::ostringstream os;
        os << v;
        return os.str();
      }
    }, s);
}

ParamScalar type_scalar(const YAML::Node & node)
{
  const std::string & s = node.Scalar();
  if (node.Tag() == "!") {
    return s;  // quoted
  }
  static const std::regex int_re(R"([-+]?[0-9]+)");
  static const std::regex float_re(R"([-+]?(\.[0-9]+|[0-9]+(\.[0-9]*)?)([eE][-+]?[0-9]+)?)");
  static const std::regex inf_re(R"([-+]?\.(inf|Inf|INF))");
  static const std::regex nan_re(R"(\.(nan|NaN|NAN))");
  if (s == "true" || s == "True" || s == "TRUE") {
    return true;
  }
  if (s == "false" || s == "False" || s == "FALSE") {
    return false;
  }
  if (std::regex_match(s, int_re)) {
    try {
      return static_cast<std::int64_t>(std::stoll(s));
    } catch (const std::out_of_range &) {
      return std::stod(s);
    }
  }
  if (std::regex_match(s, float_re)) {
    return std::stod(s);
  }
  if (std::regex_match(s, inf_re)) {
    return s[0] == '-' ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
  }
  if (std::regex_match(s, nan_re)) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

ParamValue widen(const ParamScalar & s)
{
  return std::visit([](const auto & v) -> ParamValue { return v; }, s);
}

void flatten(const YAML::Node & node, const std::string & prefix, ParameterServer & out)
{
  const int line = node.Mark().line + 1;
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      std::set<std::string> seen;
      for (const auto & kv : node) {
        const std::string k = kv.first.Scalar();
        if (!seen.insert(k).second) {
          throw Error(
            ErrorKind::Conflict, "duplicate key '" + join_key(prefix, k) + "' at line " +
            std::to_string(kv.first.Mark().line + 1));
        }
        flatten(kv.second, join_key(prefix, k), out);
      }
      break;
    }
    case YAML::NodeType::Sequence: {
      bool scalars_only = true;
      for (const auto & item : node) {
        scalars_only = scalars_only && item.IsScalar();
      }
      if (scalars_only) {
        ParamList list;
        for (const auto & item : node) {
          list.push_back(type_scalar(item));
        }
        out.set(prefix, std::move(list), line);
      } else {
        std::size_t i = 0;
        for (const auto & item : node) {
          flatten(item, join_key(prefix, std::to_string(i++)), out);
        }
      }
      break;
    }
    case YAML::NodeType::Scalar:
      out.set(prefix, widen(type_scalar(node)), line);
      break;
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      if (!prefix.empty()) {
        out.set(prefix, std::string{}, line);
      }
      break;
  }
}

}  // namespace

std::string describe(const ParamValue & v)
{
  if (const auto * l = std::get_if<ParamList>(&v)) {
    std::string out = "[";
    for (std::size_t i = 0; i < l->size(); ++i) {
      out += (i ? ", " : "") + scalar_text((*l)[i]);
    }
    return out + "]";
  }
  return std::visit(
    [](const auto & x) -> std::string {
      if constexpr (std::is_same_v<std::decay_t<decltype(x)>, ParamList>) {
        return {};
      } else {
        return scalar_text(ParamScalar(x));
      }
    }, v);
}

// ---------------------------------------------------------------------------
// ParameterServer
// ---------------------------------------------------------------------------

void ParameterServer::set(const std::string & key, ParamValue value, int line)
{
  if (key.empty()) {
    throw Error(ErrorKind::Config, "empty configuration key");
  }
  if (values_.count(key)) {
    throw Error(
      ErrorKind::Conflict, "duplicate key '" + key + "'" + (line ? " at line " + std::to_string(line) : ""));
  }
  values_.emplace(key, std::move(value));
  lines_[key] = line;
}

bool ParameterServer::has_subtree(const std::string & prefix) const
{
  if (values_.count(prefix)) {
    return true;
  }
  const std::string p = prefix + ".";
  auto it = values_.lower_bound(p);
  return it != values_.end() && it->first.compare(0, p.size(), p) == 0;
}

const ParamValue & ParameterServer::at(const std::string & key) const
{
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw Error(ErrorKind::Config, "missing required key '" + key + "'");
  }
  return it->second;
}

std::optional<int> ParameterServer::line(const std::string & key) const
{
  auto it = lines_.find(key);
  if (it == lines_.end()) {
    return std::nullopt;
  }
  return it->second;
}

ParameterServer parse_config(const std::string & yaml_text)
{
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::ParserException & e) {
    throw Error(ErrorKind::Parse, "line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  ParameterServer out;
  if (root.IsNull()) {
    return out;
  }
  if (!root.IsMap()) {
    throw Error(ErrorKind::Parse, "line " + std::to_string(root.Mark().line + 1) + ": top level must be a map");
  }
  flatten(root, "", out);
  return out;
}

ParameterServer load_config(const std::string & path)
{
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorKind::Config, "cannot open configuration file '" + path + "'");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// ParamView
// ---------------------------------------------------------------------------

ParamView::ParamView(const ParameterServer & server)
: ParamView(&server, "", std::make_shared<std::set<std::string>>())
{}

ParamView::ParamView(
  const ParameterServer * s, std::string prefix, std::shared_ptr<std::set<std::string>> used)
: server_(s), prefix_(std::move(prefix)), used_(std::move(used))
{}

std::string ParamView::key(const std::string & k) const { return join_key(prefix_, k); }

bool ParamView::has(const std::string & k) const { return server_->has_subtree(key(k)); }

ParamView ParamView::sub(const std::string & k) const { return ParamView(server_, key(k), used_); }

std::vector<ParamView> ParamView::items(const std::string & k) const
{
  std::vector<ParamView> out;
  for (std::size_t i = 0;; ++i) {
    const std::string ik = join_key(k, std::to_string(i));
    if (!has(ik)) {
      break;
    }
    out.push_back(sub(ik));
  }
  return out;
}

const ParamValue & ParamView::require(const std::string & k) const
{
  const std::string full = key(k);
  const ParamValue & v = server_->at(full);
  used_->insert(full);
  return v;
}

double ParamView::number(const std::string & k) const
{
  const ParamValue & v = require(k);
  if (const auto * i = std::get_if<std::int64_t>(&v)) {
    return static_cast<double>(*i);
  }
  if (const auto * d = std::get_if<double>(&v)) {
    return *d;
  }
  throw Error(ErrorKind::Config, "key '" + key(k) + "' must be a number, got " + describe(v));
}

double ParamView::number(const std::string & k, double fallback) const
{
  return server_->has(key(k)) ? number(k) : fallback;
}

std::int64_t ParamView::integer(const std::string & k) const
{
  const ParamValue & v = require(k);
  if (const auto * i = std::get_if<std::int64_t>(&v)) {
    return *i;
  }
  throw Error(ErrorKind::Config, "key '" + key(k) + "' must be an integer, got " + describe(v));
}

std::int64_t ParamView::integer(const std::string & k, std::int64_t fallback) const
{
  return server_->has(key(k)) ? integer(k) : fallback;
}

bool ParamView::boolean(const std::string & k, bool fallback) const
{
  if (!server_->has(key(k))) {
    return fallback;
  }
  const ParamValue & v = require(k);
  if (const auto * b = std::get_if<bool>(&v)) {
    return *b;
  }
  throw Error(ErrorKind::Config, "key '" + key(k) + "' must be a boolean, got " + describe(v));
}

std::string ParamView::string(const std::string & k) const
{
  const ParamValue & v = require(k);
  if (const auto * s = std::get_if<std::string>(&v)) {
    return *s;
  }
  throw Error(ErrorKind::Config, "key '" + key(k) + "' must be a string, got " + describe(v));
}

std::string ParamView::string(const std::string & k, const std::string & fallback) const
{
  return server_->has(key(k)) ? string(k) : fallback;
}

Eigen::VectorXd ParamView::vector(const std::string & k, Eigen::Index size) const
{
  const ParamValue & v = require(k);
  const auto * l = std::get_if<ParamList>(&v);
  if (!l || !std::all_of(l->begin(), l->end(), is_numeric)) {
    throw Error(ErrorKind::Config, "key '" + key(k) + "' must be a list of numbers, got " + describe(v));
  }
  if (size >= 0 && static_cast<Eigen::Index>(l->size()) != size) {
    throw Error(
      ErrorKind::Config, "key '" + key(k) + "' must have " + std::to_string(size) + " elements, got " +
      std::to_string(l->size()));
  }
  Eigen::VectorXd out(static_cast<Eigen::Index>(l->size()));
  for (std::size_t i = 0; i < l->size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = as_number((*l)[i]);
  }
  return out;
}

std::map<std::string, double> ParamView::number_map(const std::string & k) const
{
  std::map<std::string, double> out;
  const std::string p = key(k) + ".";
  for (auto it = server_->values().lower_bound(p);
    it != server_->values().end() && it->first.compare(0, p.size(), p) == 0; ++it)
  {
    const std::string leaf = it->first.substr(p.size());
    if (leaf.find('.') != std::string::npos) {
      continue;
    }
    out[leaf] = sub(k).number(leaf);
  }
  return out;
}

std::vector<std::string> ParamView::unused_keys() const
{
  std::vector<std::string> out;
  for (const auto & [k, v] : server_->values()) {
    if (!used_->count(k)) {
      out.push_back(k);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Built-in creators
// ---------------------------------------------------------------------------

namespace
{

double positive(const ParamView & v, const std::string & k)
{
  const double x = v.number(k);
  if (!(x > 0.0)) {
    throw Error(ErrorKind::Config, "key '" + v.key(k) + "' must be positive");
  }
  return x;
}

double positive(const ParamView & v, const std::string & k, double fallback)
{
  return v.has(k) ? positive(v, k) : fallback;
}

std::size_t count(const ParamView & v, const std::string & k, std::size_t fallback)
{
  const std::int64_t n = v.integer(k, static_cast<std::int64_t>(fallback));
  if (n < 0) {
    throw Error(ErrorKind::Config, "key '" + v.key(k) + "' must be non-negative");
  }
  return static_cast<std::size_t>(n);
}

SensorSpec sensor_common(const ParamView & v)
{
  SensorSpec s;
  s.name = v.string("name");
  s.type = v.string("type");
  if (v.has("extrinsic")) {
    const Eigen::VectorXd e = v.vector("extrinsic.state", 3);
    s.extrinsic = Pose2(e(0), e(1), e(2));
    s.fix_extrinsic = v.boolean("extrinsic.fixed", true);
  }
  s.noise = v.number_map("noise");
  return s;
}

double noise_of(const Problem & problem, NodeId sensor, const std::string & key)
{
  const auto & info = std::get<SensorInfo>(problem.tree().node(sensor).payload);
  auto it = info.noise.find(key);
  if (it == info.noise.end()) {
    throw Error(ErrorKind::Config, "sensor '" + info.name + "' needs noise." + key);
  }
  if (!(it->second > 0.0)) {
    throw Error(ErrorKind::Config, "sensor '" + info.name + "' noise." + key + " must be positive");
  }
  return it->second;
}

KeyframePolicy keyframe_policy(const ParamView & v)
{
  KeyframePolicy p;
  const ParamView kf = v.sub("keyframe");
  if (kf.has("max_dist")) {
    p.max_dist = positive(kf, "max_dist");
  }
  if (kf.has("max_angle")) {
    p.max_angle = positive(kf, "max_angle");
  }
  if (kf.has("max_time")) {
    p.max_time = positive(kf, "max_time");
  }
  if (kf.has("min_tracks")) {
    p.min_tracks = static_cast<int>(count(kf, "min_tracks", 0));
  }
  return p;
}

double tolerance(const ParamView & v)
{
  const double tol = v.number("time_tolerance", 0.005);
  if (!(tol >= 0.0)) {
    throw Error(ErrorKind::Config, "key '" + v.key("time_tolerance") + "' must be non-negative");
  }
  return tol;
}

void register_builtins(CreatorRegistry & r)
{
  r.sensors.add("diff_drive", [](Problem & problem, const ParamView & v) {
      SensorSpec s = sensor_common(v);
      s.intrinsic = v.vector("intrinsic.state", 3);
      s.fix_intrinsic = v.boolean("intrinsic.fixed", true);
      if (!(s.intrinsic.minCoeff() > 0.0)) {
        throw Error(ErrorKind::Config, "key '" + v.key("intrinsic.state") + "' must be positive");
      }
      return problem.add_sensor(s);
    });
  r.sensors.add("range_bearing_2d", [](Problem & problem, const ParamView & v) {
      SensorSpec s = sensor_common(v);
      if (v.has("intrinsic")) {
        s.intrinsic = v.vector("intrinsic.state");
        s.fix_intrinsic = v.boolean("intrinsic.fixed", true);
      }
      return problem.add_sensor(s);
    });

  r.processors.add("motion_diff_drive", [](Problem & problem, const ParamView & v, const CreatorRegistry &) {
      const NodeId sensor = problem.sensor(v.string("sensor"));
      const double sigma = noise_of(problem, sensor, "tick_std");
      auto p = std::make_unique<MotionProcessor>(
        v.string("name"), sensor, tolerance(v), Eigen::Matrix2d::Identity() * sigma * sigma);
      p->set_keyframe_policy(keyframe_policy(v));
      return std::unique_ptr<Processor>(std::move(p));
    });

  r.processors.add("tracker_landmark_2d", [](Problem & problem, const ParamView & v, const CreatorRegistry & r) {
      const NodeId sensor = problem.sensor(v.string("sensor"));
      TrackerParams params;
      params.gate = positive(v, "gate", 0.5);
      const std::string assoc = v.string("association", "id");
      if (assoc == "id") {
        params.association = Association::ById;
      } else if (assoc == "gate") {
        params.association = Association::ByGate;
      } else {
        throw Error(ErrorKind::Config, "key '" + v.key("association") + "' must be \"id\" or \"gate\"");
      }
      params.window_frames = count(v, "window_frames", 0);
      params.loss = r.losses.get(v.string("loss.type", "none"))(v.sub("loss"));
      const Eigen::Vector2d w(
        1.0 / noise_of(problem, sensor, "range_std"), 1.0 / noise_of(problem, sensor, "bearing_std"));
      auto p = std::make_unique<LandmarkTracker>(
        v.string("name"), sensor, tolerance(v), params, Eigen::Matrix2d(w.asDiagonal()));
      p->set_keyframe_policy(keyframe_policy(v));
      p->adopt_map(problem.tree());
      return std::unique_ptr<Processor>(std::move(p));
    });

  r.processors.add("loop_closure_2d", [](Problem & problem, const ParamView & v, const CreatorRegistry &) {
      const NodeId sensor = problem.sensor(v.string("sensor"));
      const ParamView l = v.sub("loop");
      LoopPolicy lp;
      lp.radius = positive(l, "radius", lp.radius);
      lp.min_frame_gap = count(l, "min_frame_gap", lp.min_frame_gap);
      lp.min_shared_landmarks = count(l, "min_shared_landmarks", lp.min_shared_landmarks);
      lp.sigma_p = positive(l, "sigma_p", lp.sigma_p);
      lp.sigma_o = positive(l, "sigma_o", lp.sigma_o);
      return std::unique_ptr<Processor>(
        std::make_unique<LoopCloser>(v.string("name"), sensor, tolerance(v), lp));
    });

  r.tree_managers.add("none", [](const ParamView &) { return std::optional<WindowPolicy>(); });
  auto window = [](WindowPolicy::Variant variant) {
      return [variant](const ParamView & v) {
               WindowPolicy w;
               w.variant = variant;
               w.n_frames = count(v, "n_frames", 0);
               if (w.n_frames < 2) {
                 throw Error(ErrorKind::Config, "key '" + v.key("n_frames") + "' must be at least 2");
               }
               if (v.has("sigma_p") || v.has("sigma_o")) {
                 const double sp = positive(v, "sigma_p"), so = positive(v, "sigma_o");
                 w.default_sqrt_info = Eigen::Vector3d(1.0 / sp, 1.0 / sp, 1.0 / so).asDiagonal();
               }
               return std::optional<WindowPolicy>(w);
             };
    };
  r.tree_managers.add("fix_oldest", window(WindowPolicy::Variant::FixOldest));
  r.tree_managers.add("remove_with_prior", window(WindowPolicy::Variant::RemoveOldestWithPrior));

  r.losses.add("none", [](const ParamView &) { return std::optional<HuberLoss>(); });
  r.losses.add("huber", [](const ParamView & v) { return std::optional<HuberLoss>(HuberLoss{positive(v, "k")}); });
}

}  // namespace

CreatorRegistry default_registry()
{
  CreatorRegistry r;
  register_builtins(r);
  return r;
}

// ---------------------------------------------------------------------------
// auto_setup
// ---------------------------------------------------------------------------

SetupResult auto_setup(const ParameterServer & server, const CreatorRegistry & registry)
{
  const ParamView root(server);
  for (const char * section : {"problem", "solver", "sensors", "processors"}) {
    if (!root.has(section)) {
      throw Error(ErrorKind::Config, std::string("missing required key '") + section + "'");
    }
  }
  if (root.integer("problem.dimension") != 2) {
    throw Error(ErrorKind::Config, "key 'problem.dimension' must be 2");
  }

  SolverOptions opt;
  const ParamView sv = root.sub("solver");
  opt.max_iterations = static_cast<int>(sv.integer("max_iterations"));
  opt.lambda_init = positive(sv, "lambda_init");
  opt.tol_dx = sv.number("tol_dx");
  opt.tol_grad = sv.number("tol_grad");
  opt.lambda_up = positive(sv, "lambda_up", opt.lambda_up);
  opt.lambda_down = positive(sv, "lambda_down", opt.lambda_down);
  opt.lambda_max = positive(sv, "lambda_max", opt.lambda_max);
  if (opt.max_iterations < 1) {
    throw Error(ErrorKind::Config, "key 'solver.max_iterations' must be at least 1");
  }

  SetupResult result;
  result.problem = std::make_unique<Problem>(opt);
  Problem & problem = *result.problem;

  const auto sensors = root.items("sensors");
  if (sensors.empty()) {
    throw Error(ErrorKind::Config, "missing required key 'sensors.0'");
  }
  for (const ParamView & s : sensors) {
    registry.sensors.get(s.string("type"))(problem, s);
  }

  std::set<std::int64_t> ids;
  for (const ParamView & l : root.items("map.landmarks")) {
    const std::int64_t id = l.integer("id");
    if (!ids.insert(id).second) {
      throw Error(ErrorKind::Conflict, "duplicate map landmark id " + std::to_string(id));
    }
    NodeSpec ns;
    ns.payload = LandmarkInfo{static_cast<int>(id), static_cast<int>(id)};
    ns.blocks.push_back({"p", StateBlock::euclidean(l.vector("p", 2), l.boolean("fixed", false))});
    problem.tree().emplace(NodeKind::Landmark, problem.tree().map(), std::move(ns));
  }

  const auto processors = root.items("processors");
  if (processors.empty()) {
    throw Error(ErrorKind::Config, "missing required key 'processors.0'");
  }
  for (const ParamView & p : processors) {
    const std::string sensor = p.string("sensor");
    if (!problem.has_sensor(sensor)) {
      throw Error(
        ErrorKind::Binding, "processor '" + p.string("name") + "' references unknown sensor '" + sensor + "'");
    }
    problem.add_processor(registry.processors.get(p.string("type"))(problem, p, registry));
  }

  const ParamView ff = root.sub("problem.first_frame");
  const Eigen::VectorXd p0 = ff.vector("p", 2);
  const Pose2 x0(p0(0), p0(1), ff.number("o"));
  const double sp = positive(ff, "sigma_p"), so = positive(ff, "sigma_o");
  const Eigen::Matrix3d prior_info = Eigen::Vector3d(1.0 / sp, 1.0 / sp, 1.0 / so).asDiagonal();

  const ParamView tm = root.sub("problem.tree_manager");
  auto window = registry.tree_managers.get(tm.string("type", "none"))(tm);
  if (window && !tm.has("sigma_p") && !tm.has("sigma_o")) {
    window->default_sqrt_info = prior_info;
  }
  problem.set_window(window);

  const NodeId first = problem.init_first_frame(ff.number("t", 0.0), x0, prior_info);

  // Optional priors on intrinsic parameters, carried by the first frame.
  for (const ParamView & s : sensors) {
    if (!s.has("intrinsic.sigma")) {
      continue;
    }
    const NodeId sensor = problem.sensor(s.string("name"));
    const BlockRef ref{sensor.index, "intr"};
    if (!problem.tree().has_block(ref)) {
      throw Error(ErrorKind::Config, "key '" + s.key("intrinsic.sigma") + "' given for a sensor without intrinsics");
    }
    const Eigen::VectorXd z = problem.tree().block(ref).values();
    const Eigen::VectorXd sigma = s.vector("intrinsic.sigma", z.size());
    if (!(sigma.minCoeff() > 0.0)) {
      throw Error(ErrorKind::Config, "key '" + s.key("intrinsic.sigma") + "' must be positive");
    }
    emplace_block_prior(
      problem.tree(), first, sensor, ref, z, Eigen::MatrixXd(sigma.cwiseInverse().asDiagonal()));
  }

  const auto issues = problem.tree().check_consistency();
  if (!issues.empty()) {
    throw Error(ErrorKind::Consistency, "setup produced an inconsistent tree: " + issues.front());
  }
  for (const auto & k : root.unused_keys()) {
    result.warnings.push_back("unused configuration key '" + k + "'");
  }
  return result;
}

}  // namespace treeslam
