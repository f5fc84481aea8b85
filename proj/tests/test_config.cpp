#include <gtest/gtest.h>

#include <fstream>
#include <iomanip>
#include <sstream>

#include "support.hpp"
#include "treeslam/config.hpp"
#include "treeslam/error.hpp"

using namespace treeslam;
using namespace testing_support;

namespace
{

std::string read_file(const std::string & path)
{
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kConfigDir = TREESLAM_CONFIG_DIR;

std::string demo_text() { return read_file(kConfigDir + "/demo.yaml"); }

/// Copy of `s` without `key`, optionally with extra entries.
ParameterServer edited(
  const ParameterServer & s, const std::string & drop, const std::vector<std::pair<std::string, ParamValue>> & add = {})
{
  ParameterServer out;
  for (const auto & [k, v] : s.values()) {
    bool replaced = k == drop;
    for (const auto & [ak, av] : add) {
      replaced = replaced || ak == k;
    }
    if (!replaced) {
      out.set(k, v);
    }
  }
  for (const auto & [k, v] : add) {
    out.set(k, v);
  }
  return out;
}

template<typename F>
Error expect_error(F && f)
{
  try {
    f();
  } catch (const Error & e) {
    return e;
  }
  ADD_FAILURE() << "no error thrown";
  return Error(ErrorKind::InvalidValue, "none");
}

bool contains(const std::string & hay, const std::string & needle) { return hay.find(needle) != std::string::npos; }

// ---------------------------------------------------------------------------
// Test-side emitter: flat server back to block-style YAML.
// ---------------------------------------------------------------------------

struct Nested
{
  std::map<std::string, Nested> children;
  std::optional<ParamValue> leaf;
};

bool is_index(const std::string & s)
{
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::string emit_scalar(const ParamScalar & v)
{
  std::ostringstream os;
  if (const auto * b = std::get_if<bool>(&v)) {
    os << (*b ? "true" : "false");
  } else if (const auto * i = std::get_if<std::int64_t>(&v)) {
    os << *i;
  } else if (const auto * d = std::get_if<double>(&v)) {
    if (std::isinf(*d)) {
      os << (*d < 0 ? "-.inf" : ".inf");
    } else {
      os << std::setprecision(17) << *d;
      const std::string t = os.str();
      if (t.find_first_of(".e") == std::string::npos) {
        os << ".0";
      }
    }
  } else {
    os << '"';
    for (char c : std::get<std::string>(v)) {
      if (c == '"' || c == '\\') {
        os << '\\';
      }
      os << c;
    }
    os << '"';
  }
  return os.str();
}

std::string emit_value(const ParamValue & v)
{
  if (const auto * l = std::get_if<ParamList>(&v)) {
    std::string out = "[";
    for (std::size_t i = 0; i < l->size(); ++i) {
      out += (i ? ", " : "") + emit_scalar((*l)[i]);
    }
    return out + "]";
  }
  return std::visit(
    [](const auto & x) -> std::string {
      if constexpr (std::is_same_v<std::decay_t<decltype(x)>, ParamList>) {
        return {};
      } else {
        return emit_scalar(ParamScalar(x));
      }
    }, v);
}

void emit_node(const Nested & n, int indent, std::string & out)
{
  const std::string pad(static_cast<std::size_t>(indent), ' ');
  const bool sequence = !n.children.empty() && is_index(n.children.begin()->first);
  std::vector<std::pair<std::size_t, const Nested *>> items;
  for (const auto & [k, c] : n.children) {
    items.push_back({sequence ? std::stoul(k) : 0, &c});
  }
  if (sequence) {
    std::sort(items.begin(), items.end(), [](const auto & a, const auto & b) { return a.first < b.first; });
    for (const auto & [i, c] : items) {
      if (c->leaf) {
        out += pad + "- " + emit_value(*c->leaf) + "\n";
      } else {
        out += pad + "-\n";
        emit_node(*c, indent + 2, out);
      }
    }
    return;
  }
  for (const auto & [k, c] : n.children) {
    if (c.leaf) {
      out += pad + k + ": " + emit_value(*c.leaf) + "\n";
    } else {
      out += pad + k + ":\n";
      emit_node(c, indent + 2, out);
    }
  }
}

std::string emit(const ParameterServer & s)
{
  Nested root;
  for (const auto & [k, v] : s.values()) {
    Nested * n = &root;
    std::stringstream ks(k);
    std::string seg;
    while (std::getline(ks, seg, '.')) {
      n = &n->children[seg];
    }
    n->leaf = v;
  }
  std::string out;
  emit_node(root, 0, out);
  return out;
}

/// Random nested server: maps with letter keys, sequences of maps, scalar and list leaves.
ParameterServer random_server(Rng & rng)
{
  ParameterServer s;
  const auto word = [&rng] {
      std::string w;
      const int n = rng.integer(1, 6);
      for (int i = 0; i < n; ++i) {
        w += static_cast<char>('a' + rng.integer(0, 25));
      }
      return w;
    };
  const auto scalar = [&]() -> ParamScalar {
      switch (rng.integer(0, 3)) {
        case 0: return rng.integer(0, 1) == 1;
        case 1: return static_cast<std::int64_t>(rng.integer(-1000, 1000));
        case 2: return rng.normal(1.0) * std::pow(10.0, rng.integer(-8, 8));
        default: return word() + " " + word();
      }
    };
  std::function<void(const std::string &, int)> fill = [&](const std::string & prefix, int depth) {
      const int n = rng.integer(1, 4);
      for (int i = 0; i < n; ++i) {
        const std::string k = prefix + (prefix.empty() ? "" : ".") + word();
        if (s.has_subtree(k)) {
          continue;
        }
        const int choice = depth > 2 ? rng.integer(0, 1) : rng.integer(0, 3);
        if (choice == 0) {
          s.set(k, std::visit([](const auto & x) -> ParamValue { return x; }, scalar()));
        } else if (choice == 1) {
          ParamList l;
          const int m = rng.integer(0, 4);
          for (int j = 0; j < m; ++j) {
            l.push_back(scalar());
          }
          s.set(k, l);
        } else if (choice == 2) {
          fill(k, depth + 1);
        } else {
          const int m = rng.integer(1, 3);
          for (int j = 0; j < m; ++j) {
            fill(k + "." + std::to_string(j), depth + 1);
          }
        }
      }
    };
  fill("", 0);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

TEST(ParseConfig, FlattensNestedMaps)
{
  const ParameterServer s = parse_config("solver: {max_iterations: 20}");
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s.at("solver.max_iterations"), ParamValue(std::int64_t{20}));
}

TEST(ParseConfig, SequenceIndicesArePathSegments)
{
  const ParameterServer s = parse_config("sensors: [{name: odom0}, {name: rb, rate: 10.5}]");
  EXPECT_EQ(s.at("sensors.0.name"), ParamValue(std::string("odom0")));
  EXPECT_EQ(s.at("sensors.1.name"), ParamValue(std::string("rb")));
  EXPECT_EQ(s.at("sensors.1.rate"), ParamValue(10.5));
  EXPECT_EQ(s.size(), 3u);
}

TEST(ParseConfig, ScalarsAreTyped)
{
  const ParameterServer s = parse_config("a: 3\nb: 3.0\nc: true\nd: hello\ne: \"7\"\nf: [1, 2.5, x]\ng: 1.0e-4\n");
  EXPECT_TRUE(std::holds_alternative<std::int64_t>(s.at("a")));
  EXPECT_TRUE(std::holds_alternative<double>(s.at("b")));
  EXPECT_EQ(s.at("c"), ParamValue(true));
  EXPECT_EQ(s.at("d"), ParamValue(std::string("hello")));
  EXPECT_EQ(s.at("e"), ParamValue(std::string("7")));
  EXPECT_EQ(s.at("f"), ParamValue(ParamList{std::int64_t{1}, 2.5, std::string("x")}));
  EXPECT_EQ(s.at("g"), ParamValue(1e-4));
}

TEST(ParseConfig, MalformedIndentationNamesLine)
{
  const Error e = expect_error([] { parse_config("solver:\n  max_iterations: 20\n tol_dx: 1\n"); });
  EXPECT_EQ(e.kind(), ErrorKind::Parse);
  EXPECT_TRUE(contains(e.what(), "line 3")) << e.what();
}

TEST(ParseConfig, DuplicateKeyIsConflict)
{
  const Error e = expect_error([] { parse_config("solver:\n  max_iterations: 20\n  max_iterations: 30\n"); });
  EXPECT_EQ(e.kind(), ErrorKind::Conflict);
  EXPECT_TRUE(contains(e.what(), "solver.max_iterations")) << e.what();
}

TEST(ParseConfig, RoundTripThroughEmitter)
{
  for (const char * file : {"demo.yaml", "calibration.yaml", "loop.yaml", "scenarios/demo.yaml"}) {
    const ParameterServer s = parse_config(read_file(kConfigDir + "/" + file));
    ASSERT_GT(s.size(), 0u) << file;
    EXPECT_EQ(parse_config(emit(s)), s) << file;
  }
  Rng rng(71);
  for (int i = 0; i < 300; ++i) {
    const ParameterServer s = random_server(rng);
    const std::string text = emit(s);
    ASSERT_EQ(parse_config(text), s) << text;
  }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

TEST(Registry, UnknownTypeListsRegisteredNames)
{
  const CreatorRegistry r = default_registry();
  const Error e = expect_error([&] { r.processors.get("no_such"); });
  EXPECT_EQ(e.kind(), ErrorKind::UnknownType);
  for (const auto & name : r.processors.names()) {
    EXPECT_TRUE(contains(e.what(), name)) << e.what();
  }
  EXPECT_TRUE(contains(e.what(), "no_such"));
  EXPECT_EQ(r.processors.names().size(), 3u);
}

TEST(Registry, DuplicateRegistrationIsConflict)
{
  CreatorRegistry r = default_registry();
  const Error e = expect_error([&] { r.sensors.add("diff_drive", r.sensors.get("diff_drive")); });
  EXPECT_EQ(e.kind(), ErrorKind::Conflict);
}

TEST(Registry, CustomCreatorIsUsedBySetup)
{
  CreatorRegistry r = default_registry();
  int calls = 0;
  r.sensors.add("diff_drive_v2", [&calls, base = r.sensors.get("diff_drive")](Problem & p, const ParamView & v) {
      ++calls;
      return base(p, v);
    });
  const ParameterServer s =
    edited(parse_config(demo_text()), "sensors.0.type", {{"sensors.0.type", std::string("diff_drive_v2")}});
  auto setup = auto_setup(s, r);
  EXPECT_EQ(calls, 1);
}

TEST(Registry, DiffDriveSensorCarriesConfiguredCalibration)
{
  const ParameterServer s = parse_config(demo_text());
  const auto setup = auto_setup(s);
  const NodeId odom = setup.problem->sensor("odom");
  EXPECT_EQ(setup.problem->tree().block({odom.index, "intr"}).values(), Eigen::Vector3d(0.1, 0.1, 0.5));
}

// ---------------------------------------------------------------------------
// auto_setup
// ---------------------------------------------------------------------------

TEST(AutoSetup, DemoBuildsExpectedTree)
{
  const auto setup = auto_setup(parse_config(demo_text()));
  const Tree & tree = setup.problem->tree();
  EXPECT_EQ(tree.nodes_of_kind(NodeKind::Sensor).size(), 2u);
  EXPECT_EQ(tree.nodes_of_kind(NodeKind::Processor).size(), 2u);
  EXPECT_EQ(setup.problem->processors().size(), 2u);
  EXPECT_EQ(tree.frames().size(), 1u);
  const auto factors = tree.nodes_of_kind(NodeKind::Factor);
  ASSERT_EQ(factors.size(), 1u);
  EXPECT_EQ(tree.factor(factors[0]).kind, FactorKind::PriorPose);
  EXPECT_TRUE(tree.check_consistency().empty());
  EXPECT_TRUE(setup.warnings.empty());
  EXPECT_EQ(setup.problem->solver().options.max_iterations, 20);
}

TEST(AutoSetup, FirstFramePriorUsesInverseSigmas)
{
  const auto setup = auto_setup(parse_config(demo_text()));
  const Tree & tree = setup.problem->tree();
  const auto prior = find_pose_prior(tree, tree.frames().front());
  ASSERT_TRUE(prior.has_value());
  const Eigen::MatrixXd expected = Eigen::Vector3d(1000, 1000, 1000).asDiagonal();
  EXPECT_LT(max_abs(tree.factor(*prior).sqrt_info - expected), 1e-9);
}

TEST(AutoSetup, MissingMandatoryKeyIsNamed)
{
  const ParameterServer demo = parse_config(demo_text());
  for (const char * key : {
      "solver.max_iterations", "solver.lambda_init", "solver.tol_dx", "solver.tol_grad", "problem.dimension",
      "problem.first_frame.p", "problem.first_frame.o", "problem.first_frame.sigma_p", "sensors.0.type",
      "sensors.1.name", "sensors.0.intrinsic.state", "processors.0.type", "processors.1.sensor"})
  {
    const Error e = expect_error([&] { auto_setup(edited(demo, key)); });
    EXPECT_EQ(e.kind(), ErrorKind::Config) << key;
    EXPECT_TRUE(contains(e.what(), std::string("'") + key + "'")) << key << ": " << e.what();
  }
}

TEST(AutoSetup, UnknownTypeIsNamed)
{
  const ParameterServer s =
    edited(parse_config(demo_text()), "processors.1.type", {{"processors.1.type", std::string("no_such")}});
  const Error e = expect_error([&] { auto_setup(s); });
  EXPECT_EQ(e.kind(), ErrorKind::UnknownType);
  EXPECT_TRUE(contains(e.what(), "no_such"));
  EXPECT_TRUE(contains(e.what(), "tracker_landmark_2d"));
}

TEST(AutoSetup, UnknownSensorReferenceIsBindingError)
{
  const ParameterServer s =
    edited(parse_config(demo_text()), "processors.0.sensor", {{"processors.0.sensor", std::string("ghost")}});
  const Error e = expect_error([&] { auto_setup(s); });
  EXPECT_EQ(e.kind(), ErrorKind::Binding);
  EXPECT_TRUE(contains(e.what(), "ghost"));
}

TEST(AutoSetup, FixedMapLandmarks)
{
  const std::string text = demo_text() +
    "map:\n  landmarks:\n"
    "    - {id: 4, p: [1.0, 2.0], fixed: true}\n"
    "    - {id: 7, p: [-1.0, 0.5], fixed: true}\n"
    "    - {id: 9, p: [3.0, -2.0], fixed: true}\n";
  const auto setup = auto_setup(parse_config(text));
  const Tree & tree = setup.problem->tree();
  const auto lms = tree.nodes_of_kind(NodeKind::Landmark);
  ASSERT_EQ(lms.size(), 3u);
  for (NodeId l : lms) {
    EXPECT_TRUE(tree.block({l.index, "p"}).fixed());
  }
  EXPECT_EQ(tree.block({lms[1].index, "p"}).values(), Eigen::Vector2d(-1.0, 0.5));
  EXPECT_EQ(std::get<LandmarkInfo>(tree.node(lms[2]).payload).external_id, 9);
  EXPECT_TRUE(tree.check_consistency().empty());
}

TEST(AutoSetup, DuplicateMapIdIsConflict)
{
  const std::string text = demo_text() + "map:\n  landmarks:\n    - {id: 4, p: [1.0, 2.0]}\n    - {id: 4, p: [0.0, 0.0]}\n";
  EXPECT_EQ(expect_error([&] { auto_setup(parse_config(text)); }).kind(), ErrorKind::Conflict);
}

TEST(AutoSetup, FixedFlagsFollowConfiguration)
{
  const ParameterServer demo = parse_config(demo_text());
  for (bool ext : {false, true}) {
    for (bool intr : {false, true}) {
      const ParameterServer s = edited(
        demo, "", {{"sensors.0.extrinsic.fixed", ext}, {"sensors.0.intrinsic.fixed", intr},
          {"sensors.1.extrinsic.fixed", !ext}});
      const auto setup = auto_setup(s);
      const Tree & tree = setup.problem->tree();
      const NodeId odom = setup.problem->sensor("odom"), rb = setup.problem->sensor("rb");
      EXPECT_EQ(tree.block({odom.index, "p"}).fixed(), ext);
      EXPECT_EQ(tree.block({odom.index, "o"}).fixed(), ext);
      EXPECT_EQ(tree.block({odom.index, "intr"}).fixed(), intr);
      EXPECT_EQ(tree.block({rb.index, "p"}).fixed(), !ext);
      EXPECT_EQ(tree.block({rb.index, "o"}).fixed(), !ext);
    }
  }
}

TEST(AutoSetup, IsAPureFunctionOfTheServer)
{
  for (const char * file : {"demo.yaml", "calibration.yaml", "loop.yaml"}) {
    const ParameterServer s = parse_config(read_file(kConfigDir + "/" + file));
    EXPECT_EQ(print_tree(auto_setup(s).problem->tree()), print_tree(auto_setup(s).problem->tree())) << file;
  }
}

TEST(AutoSetup, UnusedKeysAreWarnings)
{
  const ParameterServer s = edited(parse_config(demo_text()), "", {{"solver.colour", std::string("blue")}});
  const auto setup = auto_setup(s);
  ASSERT_EQ(setup.warnings.size(), 1u);
  EXPECT_TRUE(contains(setup.warnings[0], "solver.colour"));
}

TEST(AutoSetup, TreeManagerAndIntrinsicPrior)
{
  const auto loop = auto_setup(parse_config(read_file(kConfigDir + "/loop.yaml")));
  EXPECT_FALSE(loop.problem->window().has_value());
  EXPECT_EQ(loop.problem->processors().size(), 3u);

  const ParameterServer s = edited(
    parse_config(read_file(kConfigDir + "/calibration.yaml")), "problem.tree_manager.type",
    {{"problem.tree_manager.type", std::string("fix_oldest")}, {"problem.tree_manager.n_frames", std::int64_t{5}}});
  const auto setup = auto_setup(s);
  ASSERT_TRUE(setup.problem->window().has_value());
  EXPECT_EQ(setup.problem->window()->variant, WindowPolicy::Variant::FixOldest);
  EXPECT_EQ(setup.problem->window()->n_frames, 5u);
  const Tree & tree = setup.problem->tree();
  std::size_t block_priors = 0;
  for (NodeId f : tree.nodes_of_kind(NodeKind::Factor)) {
    if (tree.factor(f).kind == FactorKind::PriorBlock) {
      ++block_priors;
      EXPECT_LT(max_abs(tree.factor(f).sqrt_info.diagonal() - Eigen::Vector3d(50, 50, 10)), 1e-9);
    }
  }
  EXPECT_EQ(block_priors, 1u);
}
