#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "treeslam/error.hpp"
#include "treeslam/factor.hpp"
#include "treeslam/problem.hpp"

namespace treeslam
{

using ParamScalar = std::variant<bool, std::int64_t, double, std::string>;
using ParamList = std::vector<ParamScalar>;
using ParamValue = std::variant<bool, std::int64_t, double, std::string, ParamList>;

std::string describe(const ParamValue & v);

/// Flat map from dotted key path to typed value. Sequence indices are path segments.
class ParameterServer
{
public:
  /// Throws a conflict error if the key is already present.
  void set(const std::string & key, ParamValue value, int line = 0);
  bool has(const std::string & key) const { return values_.count(key) > 0; }
  /// True if `prefix` names a key or the parent of any key.
  bool has_subtree(const std::string & prefix) const;
  const ParamValue & at(const std::string & key) const;
  std::optional<int> line(const std::string & key) const;
  const std::map<std::string, ParamValue> & values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  bool operator==(const ParameterServer & o) const { return values_ == o.values_; }

private:
  std::map<std::string, ParamValue> values_;
  std::map<std::string, int> lines_;
};

/// Parse YAML text. Throws parse errors (with line) and conflict errors on duplicate keys.
ParameterServer parse_config(const std::string & yaml_text);
ParameterServer load_config(const std::string & path);

/**
 * Typed, prefix-scoped read access to a parameter server. Every key read is
 * recorded so that leftovers can be reported as warnings.
 */
class ParamView
{
public:
  explicit ParamView(const ParameterServer & server);

  std::string key(const std::string & k) const;
  bool has(const std::string & k) const;
  ParamView sub(const std::string & k) const;
  /// Views on "k.0", "k.1", ... for a sequence of maps.
  std::vector<ParamView> items(const std::string & k) const;

  double number(const std::string & k) const;
  double number(const std::string & k, double fallback) const;
  std::int64_t integer(const std::string & k) const;
  std::int64_t integer(const std::string & k, std::int64_t fallback) const;
  bool boolean(const std::string & k, bool fallback) const;
  std::string string(const std::string & k) const;
  std::string string(const std::string & k, const std::string & fallback) const;
  /// Numeric list; `size` < 0 accepts any length.
  Eigen::VectorXd vector(const std::string & k, Eigen::Index size = -1) const;
  std::map<std::string, double> number_map(const std::string & k) const;

  /// Keys present in the server that were never read.
  std::vector<std::string> unused_keys() const;

private:
  ParamView(const ParameterServer * s, std::string prefix, std::shared_ptr<std::set<std::string>> used);
  const ParamValue & require(const std::string & k) const;

  const ParameterServer * server_;
  std::string prefix_;
  std::shared_ptr<std::set<std::string>> used_;
};

// ---------------------------------------------------------------------------
// Creator registry
// ---------------------------------------------------------------------------

template<typename Creator>
class Factory
{
public:
  explicit Factory(std::string category) : category_(std::move(category)) {}

  void add(const std::string & type, Creator c)
  {
    if (creators_.count(type)) {
      throw Error(ErrorKind::Conflict, category_ + " type '" + type + "' is already registered");
    }
    creators_.emplace(type, std::move(c));
  }

  const Creator & get(const std::string & type) const
  {
    auto it = creators_.find(type);
    if (it == creators_.end()) {
      std::string names;
      for (const auto & [n, c] : creators_) {
        names += (names.empty() ? "" : ", ") + n;
      }
      throw Error(
        ErrorKind::UnknownType,
        "unknown " + category_ + " type '" + type + "' (registered: " + names + ")");
    }
    return it->second;
  }

  std::vector<std::string> names() const
  {
    std::vector<std::string> out;
    for (const auto & [n, c] : creators_) {
      out.push_back(n);
    }
    return out;
  }

private:
  std::string category_;
  std::map<std::string, Creator> creators_;
};

struct CreatorRegistry
{
  using SensorCreator = std::function<NodeId(Problem &, const ParamView &)>;
  /// Processor creators may consult the registry (e.g. for loss types).
  using ProcessorCreator =
    std::function<std::unique_ptr<Processor>(Problem &, const ParamView &, const CreatorRegistry &)>;
  using TreeManagerCreator = std::function<std::optional<WindowPolicy>(const ParamView &)>;
  using LossCreator = std::function<std::optional<HuberLoss>(const ParamView &)>;

  Factory<SensorCreator> sensors{"sensor"};
  Factory<ProcessorCreator> processors{"processor"};
  Factory<TreeManagerCreator> tree_managers{"tree_manager"};
  Factory<LossCreator> losses{"loss"};
};

/// Registry populated with the built-in sensor, processor, tree-manager and loss types.
CreatorRegistry default_registry();

struct SetupResult
{
  std::unique_ptr<Problem> problem;
  std::vector<std::string> warnings;
};

/// Build a ready-to-run problem from configuration.
SetupResult auto_setup(const ParameterServer & server, const CreatorRegistry & registry = default_registry());

}  // namespace treeslam
