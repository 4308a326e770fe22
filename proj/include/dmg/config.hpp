#pragma once

// Flat key=value run configuration. One entry per line, '#' starts a comment.
// Every key is declared in a schema with a type and a default; unknown keys,
// duplicates and unparsable values are rejected with the key named.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dmg {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class ValueType { boolean, integer, real, text, size_list, real_list };

struct ConfigKey {
  const char* name;
  ValueType type;
  const char* default_value;  ///< "" means no default (the key is optional or required per command)
  const char* help;
};

// clang-format off
inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      // environment
      {"env", ValueType::text, "", "chain | gridworld | pointmass"},
      {"gamma", ValueType::real, "0.9", "discount, shared by environment and agent"},
      {"horizon", ValueType::integer, "0", "episode length (0 = environment default)"},
      {"grid_width", ValueType::integer, "3", "gridworld width"},
      {"grid_height", ValueType::integer, "3", "gridworld height"},
      {"grid_goals", ValueType::text, "2:2", "goal cells x:y separated by ';'"},
      {"grid_obstacles", ValueType::text, "", "obstacle cells x:y separated by ';'"},
      {"goal_reward", ValueType::real, "1", "gridworld reward for entering a goal"},
      {"step_reward", ValueType::real, "0", "gridworld reward for every other step"},
      {"sparse_reward", ValueType::boolean, "false", "gridworld: -1 per step until the goal"},
      {"pm_goal", ValueType::real_list, "0.5,0.5", "point-mass goal"},
      {"pm_dt", ValueType::real, "0.1", "point-mass time step"},
      {"pm_a_max", ValueType::real, "1", "point-mass action bound"},
      {"pm_expert_gain", ValueType::real, "1", "point-mass expert gain"},
      // dataset
      {"behavior", ValueType::text, "expert", "random | mediocre | expert | mixture | fixed"},
      {"behavior_p", ValueType::real, "0.5", "mediocre: probability of the expert action"},
      {"expert_fraction", ValueType::real, "0.5", "mixture: fraction of expert trajectories"},
      {"expert_noise", ValueType::real, "0", "std of noise on continuous expert actions"},
      {"fixed_action", ValueType::integer, "0", "fixed: action id"},
      {"n", ValueType::integer, "", "number of transitions to generate"},
      {"data_seed", ValueType::integer, "0", "dataset generator seed"},
      {"reward_shift", ValueType::boolean, "false", "subtract 1 from every reward"},
      {"normalize_states", ValueType::boolean, "true", "z-score continuous states"},
      // agent
      {"lambda", ValueType::real, "0.25", "mixture coefficient"},
      {"nu", ValueType::real, "0.1", "penalty coefficient"},
      {"alpha_temp", ValueType::real, "3", "inverse temperature"},
      {"tau", ValueType::real, "0.7", "expectile"},
      {"xi", ValueType::real, "0.005", "target update rate"},
      {"lr", ValueType::real, "0.0003", "critic and value learning rate"},
      {"actor_lr", ValueType::real, "0.0003", "actor learning rate"},
      {"actor_cosine", ValueType::boolean, "true", "cosine-anneal the actor learning rate offline"},
      {"batch", ValueType::integer, "256", "minibatch size"},
      {"iterations", ValueType::integer, "1000000", "offline gradient steps"},
      {"advantage_clip", ValueType::real, "10", "cap on alpha * advantage"},
      {"policy_kind", ValueType::text, "deterministic", "deterministic | gaussian"},
      {"policy_std", ValueType::real, "0.2", "gaussian policy standard deviation"},
      {"hidden", ValueType::size_list, "256,256", "hidden layer sizes"},
      {"activation", ValueType::text, "relu", "relu | softplus"},
      {"seed", ValueType::integer, "0", "agent seed"},
      {"oracle_generalization", ValueType::boolean, "false", "tabular: exact widened-support critic data and maximizer"},
      {"eps_a", ValueType::real, "1", "tabular oracle: action-distance radius"},
      // loop
      {"eval_every", ValueType::integer, "0", "evaluation period in gradient steps (0 = end only)"},
      {"eval_episodes", ValueType::integer, "10", "evaluation episodes"},
      {"eval_seed", ValueType::integer, "12345", "evaluation seed"},
      {"log_every", ValueType::integer, "1000", "metrics row period"},
      {"checkpoint_every", ValueType::integer, "0", "checkpoint period (0 = end only)"},
      {"score_reference", ValueType::text, "", "score reference JSON for normalized scores"},
      // fine-tuning
      {"finetune_steps", ValueType::integer, "50000", "online environment steps"},
      {"utd", ValueType::integer, "1", "gradient steps per environment step"},
      {"explore_noise", ValueType::real, "0.1", "exploration noise as a fraction of the action bound"},
      {"env_seed", ValueType::integer, "1", "online environment seed"},
      {"lambda_start", ValueType::real, "0.25", "schedule: initial lambda"},
      {"lambda_end", ValueType::real, "0.5", "schedule: limit of lambda"},
      {"nu_start", ValueType::real, "", "schedule: initial nu (default: nu)"},
      {"nu_floor", ValueType::real, "", "schedule: floor of nu (default: 1% of nu_start)"},
      {"schedule_rate", ValueType::real, "0.99", "schedule: decay per event"},
      {"schedule_period", ValueType::integer, "1000", "schedule: gradient steps per event"},
  };
  return keys;
}
// clang-format on

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : config_schema())
    if (name == k.name) return &k;
  return nullptr;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

inline bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1") return out = true, true;
  if (v == "false" || v == "0") return out = false, true;
  return false;
}

template <class T>
bool parse_number(const std::string& v, T& out) {
  if (v.empty()) return false;
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  return ec == std::errc() && p == end;
}

inline void check_value(const ConfigKey& k, const std::string& v) {
  auto bad = [&](const char* expected) {
    return ConfigError(k.name, "config key " + std::string(k.name) + ": expected " + expected + ", got \"" + v + "\"");
  };
  switch (k.type) {
    case ValueType::boolean: {
      bool b;
      if (!parse_bool(v, b)) throw bad("true or false");
      break;
    }
    case ValueType::integer: {
      std::int64_t i;
      if (!parse_number(v, i)) throw bad("an integer");
      break;
    }
    case ValueType::real: {
      double d;
      if (!parse_number(v, d)) throw bad("a number");
      break;
    }
    case ValueType::text:
      break;
    case ValueType::size_list:
      for (const auto& item : split(v, ',')) {
        std::uint64_t u;
        if (!parse_number(item, u)) throw bad("a comma-separated list of non-negative integers");
      }
      break;
    case ValueType::real_list:
      for (const auto& item : split(v, ',')) {
        double d;
        if (!parse_number(item, d)) throw bad("a comma-separated list of numbers");
      }
      break;
  }
}

}  // namespace detail

class RunConfig {
 public:
  static RunConfig parse(const std::string& text, const std::string& source = "config") {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      const std::string where = source + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError("", where + ": expected key=value, got \"" + t + "\"");
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
      if (c.has(key)) throw ConfigError(key, where + ": duplicate key " + key);
      try {
        c.set(key, value);
      } catch (const ConfigError& e) {
        throw ConfigError(key, where + ": " + e.what());
      }
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  /// Explicitly set keys in schema order.
  std::string render() const {
    std::string out;
    for (const auto& k : config_schema()) {
      auto it = values_.find(k.name);
      if (it != values_.end()) out += std::string(k.name) + "=" + it->second + "\n";
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) {
    const ConfigKey* k = find_config_key(key);
    if (!k) throw ConfigError(key, "unknown config key " + key);
    detail::check_value(*k, value);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  void require(const std::vector<std::string>& keys) const {
    for (const auto& key : keys)
      if (!has(key)) throw ConfigError(key, "missing required config key " + key);
  }

  /// Explicit value, else the schema default; throws when neither exists.
  std::string raw(const std::string& key) const {
    const ConfigKey* k = find_config_key(key);
    if (!k) throw ConfigError(key, "unknown config key " + key);
    auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    if (std::string_view(k->default_value).empty()) throw ConfigError(key, "missing required config key " + key);
    return k->default_value;
  }

  std::string text(const std::string& key) const { return raw(key); }
  bool boolean(const std::string& key) const {
    bool b = false;
    detail::parse_bool(raw(key), b);
    return b;
  }
  std::int64_t integer(const std::string& key) const {
    std::int64_t i = 0;
    detail::parse_number(raw(key), i);
    return i;
  }
  /// Non-negative integer; rejects negative values with the key named.
  std::size_t count(const std::string& key) const {
    const std::int64_t i = integer(key);
    if (i < 0) throw ConfigError(key, "config key " + key + " must be >= 0");
    return static_cast<std::size_t>(i);
  }
  double real(const std::string& key) const {
    double d = 0.0;
    detail::parse_number(raw(key), d);
    return d;
  }
  std::vector<std::size_t> sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : detail::split(raw(key), ',')) {
      std::uint64_t u = 0;
      detail::parse_number(item, u);
      out.push_back(static_cast<std::size_t>(u));
    }
    return out;
  }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : detail::split(raw(key), ',')) {
      double d = 0.0;
      detail::parse_number(item, d);
      out.push_back(d);
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  friend bool operator==(const RunConfig&, const RunConfig&) = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dmg
