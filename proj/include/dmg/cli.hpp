#pragma once

// Subcommand implementations behind tools/dmg_lab.cpp. Each returns the
// process exit code: 0 success, 1 runtime / I-O failure or failed
// verification, 2 configuration error.

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dmg/agent.hpp"
#include "dmg/config.hpp"
#include "dmg/dataset_io.hpp"
#include "dmg/envs.hpp"
#include "dmg/nn.hpp"
#include "dmg/operators.hpp"
#include "dmg/verifier.hpp"

namespace dmg::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Raised for invalid flags or config values; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Helpers

inline std::vector<Cell> parse_cells(const std::string& key, const std::string& text) {
  std::vector<Cell> out;
  if (detail::trim(text).empty()) return out;
  for (const auto& item : detail::split(text, ';')) {
    const auto colon = item.find(':');
    std::size_t x = 0, y = 0;
    if (colon == std::string::npos || !detail::parse_number(item.substr(0, colon), x) ||
        !detail::parse_number(item.substr(colon + 1), y))
      throw ConfigError(key, "config key " + key + ": expected cells x:y separated by ';', got \"" + text + "\"");
    out.push_back({x, y});
  }
  return out;
}

inline GridWorldSpec gridworld_spec(const RunConfig& c) {
  GridWorldSpec g;
  g.width = c.count("grid_width");
  g.height = c.count("grid_height");
  g.goals = parse_cells("grid_goals", c.text("grid_goals"));
  g.obstacles = parse_cells("grid_obstacles", c.text("grid_obstacles"));
  g.goal_reward = c.real("goal_reward");
  g.step_reward = c.real("step_reward");
  g.sparse_reward = c.boolean("sparse_reward");
  g.gamma = c.real("gamma");
  if (c.count("horizon") > 0) g.horizon = c.count("horizon");
  return g;
}

inline PointMassSpec pointmass_spec(const RunConfig& c) {
  PointMassSpec p;
  p.goal = c.reals("pm_goal");
  p.dt = c.real("pm_dt");
  p.a_max = c.real("pm_a_max");
  p.expert_gain = c.real("pm_expert_gain");
  p.gamma = c.real("gamma");
  if (c.count("horizon") > 0) p.horizon = c.count("horizon");
  return p;
}

/// Builds the configured environment. Invalid specs raise ConfigError.
inline std::unique_ptr<Env> make_env(const RunConfig& c) {
  const std::string name = c.text("env");
  try {
    if (name == "chain") {
      const std::size_t h = c.count("horizon") > 0 ? c.count("horizon") : 64;
      return std::make_unique<TabularEnv>(make_chain_env(c.real("gamma"), h));
    }
    if (name == "gridworld") return std::make_unique<TabularEnv>(make_gridworld(gridworld_spec(c)));
    if (name == "pointmass") return std::make_unique<PointMassEnv>(pointmass_spec(c));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("env", std::string("invalid environment spec: ") + e.what());
  }
  throw ConfigError("env", "config key env: unknown environment \"" + name + "\" (expected chain, gridworld or pointmass)");
}

inline AgentConfig agent_config(const RunConfig& c) {
  AgentConfig a;
  a.lambda = c.real("lambda");
  a.nu = c.real("nu");
  a.alpha_temp = c.real("alpha_temp");
  a.tau = c.real("tau");
  a.gamma = c.real("gamma");
  a.xi = c.real("xi");
  a.lr = c.real("lr");
  a.actor_lr = c.real("actor_lr");
  a.actor_cosine = c.boolean("actor_cosine");
  a.batch = c.count("batch");
  a.iterations = c.count("iterations");
  a.advantage_clip = c.real("advantage_clip");
  try {
    a.policy_kind = policy_kind_from_string(c.text("policy_kind"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("policy_kind", e.what());
  }
  a.policy_std = c.real("policy_std");
  a.hidden = c.sizes("hidden");
  try {
    a.activation = activation_from_string(c.text("activation"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("activation", e.what());
  }
  a.seed = static_cast<std::uint64_t>(c.integer("seed"));
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("", std::string("invalid agent config: ") + e.what());
  }
  return a;
}

inline FinetuneSchedule finetune_schedule(const RunConfig& c) {
  FinetuneSchedule s = FinetuneSchedule::for_nu(c.has("nu_start") ? c.real("nu_start") : c.real("nu"));
  if (c.has("nu_floor")) s.nu_floor = c.real("nu_floor");
  s.lambda_start = c.real("lambda_start");
  s.lambda_end = c.real("lambda_end");
  s.rate = c.real("schedule_rate");
  s.period = c.count("schedule_period");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("", std::string("invalid fine-tuning schedule: ") + e.what());
  }
  return s;
}

inline DatasetOptions dataset_options(const RunConfig& c) {
  DatasetOptions d;
  try {
    d.behavior.kind = behavior_from_string(c.text("behavior"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("behavior", e.what());
  }
  d.behavior.p = c.real("behavior_p");
  d.behavior.expert_fraction = c.real("expert_fraction");
  d.behavior.expert_noise = c.real("expert_noise");
  d.behavior.fixed_action = c.count("fixed_action");
  d.n = c.count("n");
  d.seed = static_cast<std::uint64_t>(c.integer("data_seed"));
  d.reward_shift = c.boolean("reward_shift") || c.boolean("sparse_reward");
  return d;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const ojson& j) { write_file(path, j.dump(2) + "\n"); }

inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : detail::split(text, ',')) {
    std::uint64_t s = 0;
    if (!detail::parse_number(item, s)) throw UsageError("--seeds: expected comma-separated integers, got \"" + text + "\"");
    out.push_back(s);
  }
  if (out.empty()) throw UsageError("--seeds: no seeds given");
  return out;
}

/// Worker count for fan-out: DMG_LAB_THREADS if set, else the hardware concurrency.
inline std::size_t fanout_threads() {
  if (const char* v = std::getenv("DMG_LAB_THREADS")) {
    std::size_t n = 0;
    if (!detail::parse_number(std::string(v), n) || n == 0)
      throw UsageError("DMG_LAB_THREADS must be a positive integer, got \"" + std::string(v) + "\"");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs job(i) for i in [0, n) on up to `threads` workers; returns the worst exit code.
template <class Job>
int fan_out(std::size_t n, std::size_t threads, Job job) {
  std::atomic<std::size_t> next{0};
  std::atomic<int> worst{kExitOk};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const int rc = job(i);
      int cur = worst.load();
      while (rc > cur && !worst.compare_exchange_weak(cur, rc)) {
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return worst.load();
}

/// Maps exceptions to exit codes, printing the message to `err`.
template <class Fn>
int guarded(std::ostream& err, Fn fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrainingAborted& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

/// Writes the dataset JSONL to `out` and a provenance sidecar to `out`.provenance.json.
inline int cmd_gen_data(const GenDataArgs& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    RunConfig c = RunConfig::load(args.config);
    c.require({"env", "n"});
    if (args.seed) c.set("data_seed", std::to_string(*args.seed));
    auto env = make_env(c);
    const DatasetOptions opt = dataset_options(c);
    if (opt.n < 1) throw ConfigError("n", "config key n must be >= 1");
    Dataset ds;
    try {
      ds = generate_dataset(*env, opt);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("behavior", e.what());
    }
    const fs::path out(args.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_dataset_jsonl(out.string(), ds);
    ojson side;
    side["provenance"] = ds.provenance;
    side["transitions"] = ds.size();
    side["representation"] = ds.representation == Representation::discrete ? "discrete" : "continuous";
    side["trajectories"] = ds.trajectory_labels.size();
    side["trajectory_labels"] = ds.trajectory_labels;
    side["config"] = c.render();
    write_json(out.string() + ".provenance.json", side);
    log << "wrote " << ds.size() << " transitions to " << out.string() << '\n';
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::uint64_t> seeds;
};

/// Dataset prepared for the agent: continuous features, the normalizer in
/// use, and the discrete original for tabular environments.
struct PreparedData {
  Dataset features;
  StateNormalizer normalizer;
  std::optional<Dataset> discrete;
};

inline PreparedData prepare_dataset(const RunConfig& c, const Env& env, const Dataset& raw) {
  PreparedData p;
  if (const auto* tab = dynamic_cast<const TabularEnv*>(&env)) {
    if (raw.representation != Representation::discrete)
      throw std::runtime_error("dataset is continuous but env " + env.name() + " is tabular");
    p.discrete = raw;
    p.features = featurize(raw, *tab);
    p.normalizer = identity_normalizer(tab->state_dim());
  } else {
    if (raw.representation != Representation::continuous)
      throw std::runtime_error("dataset is discrete but env " + env.name() + " is continuous");
    p.features = raw;
    p.normalizer = c.boolean("normalize_states") ? fit_normalizer(raw) : identity_normalizer(env.state_dim());
  }
  if (!p.features.empty() &&
      (p.features.transitions.front().state.size() != env.state_dim() ||
       p.features.transitions.front().action.size() != env.action_dim()))
    throw std::runtime_error("dataset dimensions do not match env " + env.name());
  return p;
}

inline std::optional<ScoreReference> score_reference(const RunConfig& c) {
  if (!c.has("score_reference") || c.text("score_reference").empty()) return std::nullopt;
  const std::string path = c.text("score_reference");
  return read_score_reference(path);
}

inline ojson tabular_report(const AgentState& st, const TabularEnv& env, const RunConfig& c,
                            const std::optional<Dataset>& discrete) {
  ojson j;
  const auto q = tabular_q(st, env);
  j["q"] = q;
  const auto greedy = greedy_tabular_policy(st, env);
  j["greedy_policy"] = greedy;
  if (c.boolean("oracle_generalization") && discrete) {
    const auto beta_hat = build_empirical_behavior(*discrete, env.mdp());
    const auto beta_tilde = build_mildly_generalized(beta_hat, c.real("eps_a"), env.mdp());
    const auto fp = value_iteration(env.mdp(), DmgBackup{beta_tilde, c.real("lambda")},
                                    QTable::on_support(env.mdp().n_actions(), beta_tilde.supports()), 1e-12);
    if (!fp.ok()) throw std::runtime_error("exact DMG fixed point did not converge");
    const auto exact_pi = extract_greedy(fp.q_star, beta_tilde.supports());
    double err = 0.0;
    ojson exact_q = ojson::array();
    for (std::size_t s = 0; s < env.mdp().n_states(); ++s) {
      ojson row = ojson::array();
      for (std::size_t a = 0; a < env.mdp().n_actions(); ++a) {
        if (fp.q_star.has(s, a)) {
          row.push_back(fp.q_star.at(s, a));
          err = std::max(err, std::abs(fp.q_star.at(s, a) - q[s][a]));
        } else {
          row.push_back(nullptr);
        }
      }
      exact_q.push_back(row);
    }
    bool match = true;
    ojson learned_on_support = ojson::array();
    for (std::size_t s = 0; s < env.mdp().n_states(); ++s) {
      if (beta_tilde.support(s).empty()) {
        learned_on_support.push_back(nullptr);
        continue;
      }
      std::size_t best = beta_tilde.support(s).front();
      for (std::size_t a : beta_tilde.support(s))
        if (q[s][a] > q[s][best]) best = a;
      learned_on_support.push_back(best);
      match = match && best == exact_pi[s];
    }
    j["exact_q_dmg"] = exact_q;
    j["exact_policy_dmg"] = exact_pi;
    j["learned_policy_on_support"] = learned_on_support;
    j["policy_matches_exact"] = match;
    j["max_abs_q_error"] = err;
  }
  return j;
}

inline int run_training(const RunConfig& c, const std::string& config_text, const Dataset& raw, const fs::path& dir,
                        std::ostream& log) {
  auto env = make_env(c);
  const AgentConfig cfg = agent_config(c);
  const PreparedData data = prepare_dataset(c, *env, raw);
  const auto ref = score_reference(c);

  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "reports");
  write_file(dir / "config.copy", config_text);

  AgentState st = init_agent(cfg, env->state_dim(), env->action_dim(), env->action_bound(), data.normalizer);
  ReplayBuffer buffer = ReplayBuffer::from_dataset(data.features, data.normalizer);
  TrainData td{&buffer, nullptr, {}};
  std::optional<TabularOracle> oracle;
  auto* tab = dynamic_cast<TabularEnv*>(env.get());
  if (c.boolean("oracle_generalization")) {
    if (!tab) throw ConfigError("oracle_generalization", "oracle_generalization needs a tabular env");
    const auto beta_hat = build_empirical_behavior(*data.discrete, tab->mdp());
    oracle = make_tabular_oracle(*tab, build_mildly_generalized(beta_hat, c.real("eps_a"), tab->mdp()),
                                 data.normalizer);
    td.q_data = &oracle->q_data;
    td.candidates = oracle->candidates;
  }

  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
  csv << kMetricsHeader << '\n';
  TrainOptions o;
  o.eval_env = env.get();
  o.eval_every = c.count("eval_every");
  o.eval_episodes = c.count("eval_episodes");
  o.eval_seed = static_cast<std::uint64_t>(c.integer("eval_seed"));
  o.log_every = c.count("log_every");
  o.csv = &csv;
  o.checkpoint_every = c.count("checkpoint_every");
  o.checkpoint = [&](const AgentState& s) {
    save_checkpoint((dir / "checkpoints" / ("step_" + std::to_string(s.step) + ".json")).string(), s);
  };
  if (o.eval_episodes < 1) throw ConfigError("eval_episodes", "config key eval_episodes must be >= 1");

  ojson summary;
  summary["command"] = "train";
  summary["env"] = env->name();
  summary["seed"] = cfg.seed;
  summary["iterations"] = cfg.iterations;
  TrainResult res;
  try {
    res = train_offline(st, cfg, td, o);
  } catch (const TrainingAborted& e) {
    csv.flush();
    summary["aborted"] = true;
    summary["aborted_at_step"] = e.step();
    summary["error"] = e.what();
    summary["diverged"] = true;
    write_json(dir / "summary.json", summary);
    throw;
  }
  csv.flush();
  save_checkpoint((dir / "checkpoints" / "final.json").string(), st);

  const double eval = res.final_eval ? *res.final_eval : evaluate_policy(st, *env, o.eval_episodes, o.eval_seed).mean_return;
  double max_q = -std::numeric_limits<double>::infinity();
  for (const auto& r : res.rows) max_q = std::max(max_q, r.q_mean);
  summary["aborted"] = false;
  summary["final_eval_return"] = eval;
  if (ref) summary["normalized_score"] = normalized_score(eval, *ref);
  if (!res.rows.empty()) summary["max_q_mean"] = max_q;
  summary["divergence_threshold"] = env->reward_upper_bound() / (1.0 - cfg.gamma);
  summary["diverged"] = value_diverged(res.rows, env->reward_upper_bound(), cfg.gamma);
  if (tab) {
    const ojson rep = tabular_report(st, *tab, c, data.discrete);
    summary["greedy_policy"] = rep["greedy_policy"];
    if (rep.contains("policy_matches_exact")) {
      summary["exact_policy_dmg"] = rep["exact_policy_dmg"];
      summary["policy_matches_exact"] = rep["policy_matches_exact"];
      summary["max_abs_q_error"] = rep["max_abs_q_error"];
    }
    write_json(dir / "reports" / "tabular.json", rep);
  }
  write_json(dir / "summary.json", summary);
  log << "train: " << dir.string() << " final_eval_return=" << format_double(eval) << '\n';
  return kExitOk;
}

inline int cmd_train(const TrainArgs& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const std::string text = read_file(args.config);
    RunConfig c = RunConfig::parse(text, args.config);
    c.require({"env"});
    if (args.seed && !args.seeds.empty()) throw UsageError("give either --seed or --seeds");
    if (args.seed) c.set("seed", std::to_string(*args.seed));
    make_env(c);
    agent_config(c);
    const Dataset raw = read_dataset_jsonl(args.dataset);
    const fs::path out(args.out);
    if (args.seeds.empty()) return run_training(c, text, raw, out, log);

    std::mutex log_mutex;
    return fan_out(args.seeds.size(), fanout_threads(), [&](std::size_t i) {
      RunConfig ci = c;
      ci.set("seed", std::to_string(args.seeds[i]));
      std::ostringstream run_log, run_err;
      const int rc = guarded(run_err, [&] {
        return run_training(ci, text, raw, out / ("seed_" + std::to_string(args.seeds[i])), run_log);
      });
      std::lock_guard<std::mutex> lock(log_mutex);
      log << run_log.str();
      err << run_err.str();
      return rc;
    });
  });
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneArgs {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::string dataset;  ///< optional: offline data kept in the online buffer
  std::optional<std::uint64_t> seed;
};

inline int cmd_finetune(const FinetuneArgs& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const std::string text = read_file(args.config);
    RunConfig c = RunConfig::parse(text, args.config);
    c.require({"env"});
    if (args.seed) c.set("env_seed", std::to_string(*args.seed));
    auto env = make_env(c);
    const AgentConfig cfg = agent_config(c);
    const FinetuneSchedule sched = finetune_schedule(c);
    const auto ref = score_reference(c);
    AgentState st = load_checkpoint(args.checkpoint);
    if (st.state_dim != env->state_dim() || st.action_dim != env->action_dim())
      throw std::runtime_error("checkpoint dimensions do not match env " + env->name());

    ReplayBuffer buffer(st.state_dim, st.action_dim);
    if (!args.dataset.empty()) {
      const PreparedData data = prepare_dataset(c, *env, read_dataset_jsonl(args.dataset));
      for (const auto& t : data.features.transitions) buffer.add(t, st.normalizer);
    }

    const fs::path dir(args.out);
    fs::create_directories(dir / "checkpoints");
    fs::create_directories(dir / "reports");
    write_file(dir / "config.copy", text);
    std::ofstream csv(dir / "metrics.csv", std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    csv << kMetricsHeader << '\n';

    FinetuneOptions fo;
    fo.steps = c.count("finetune_steps");
    fo.utd = c.count("utd");
    fo.explore_noise = c.real("explore_noise");
    fo.env_seed = static_cast<std::uint64_t>(c.integer("env_seed"));
    fo.train.eval_env = env.get();
    fo.train.eval_every = c.count("eval_every");
    fo.train.eval_episodes = c.count("eval_episodes");
    fo.train.eval_seed = static_cast<std::uint64_t>(c.integer("eval_seed"));
    fo.train.log_every = c.count("log_every");
    fo.train.csv = &csv;
    fo.train.checkpoint_every = c.count("checkpoint_every");
    fo.train.checkpoint = [&](const AgentState& s) {
      save_checkpoint((dir / "checkpoints" / ("step_" + std::to_string(s.step) + ".json")).string(), s);
    };
    if (fo.utd < 1) throw ConfigError("utd", "config key utd must be >= 1");
    if (fo.train.eval_episodes < 1) throw ConfigError("eval_episodes", "config key eval_episodes must be >= 1");

    const double before = evaluate_policy(st, *env, fo.train.eval_episodes, fo.train.eval_seed).mean_return;
    const TrainResult res = finetune_online(st, cfg, *env, sched, buffer, fo);
    csv.flush();
    save_checkpoint((dir / "checkpoints" / "final.json").string(), st);
    const double after =
        res.final_eval ? *res.final_eval : evaluate_policy(st, *env, fo.train.eval_episodes, fo.train.eval_seed).mean_return;
    const std::uint64_t events = sched.events(static_cast<std::uint64_t>(fo.steps) * fo.utd);

    ojson summary;
    summary["command"] = "finetune";
    summary["env"] = env->name();
    summary["env_seed"] = fo.env_seed;
    summary["steps"] = fo.steps;
    summary["offline_eval_return"] = before;
    summary["final_eval_return"] = after;
    summary["improvement"] = after - before;
    if (ref) {
      summary["offline_normalized_score"] = normalized_score(before, *ref);
      summary["normalized_score"] = normalized_score(after, *ref);
    }
    summary["schedule_events"] = events;
    summary["final_lambda"] = sched.lambda(events);
    summary["final_nu"] = sched.nu(events);
    summary["buffer_size"] = buffer.size();
    write_json(dir / "summary.json", summary);
    log << "finetune: " << dir.string() << " offline=" << format_double(before) << " final=" << format_double(after)
        << '\n';
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::size_t episodes = 10;
  std::optional<std::uint64_t> seed;
  std::string out;  ///< optional directory for summary.json
};

inline int cmd_eval(const EvalArgs& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    RunConfig c = RunConfig::load(args.config);
    c.require({"env"});
    if (args.episodes < 1) throw UsageError("--episodes must be >= 1");
    auto env = make_env(c);
    const auto ref = score_reference(c);
    const AgentState st = load_checkpoint(args.checkpoint);
    if (st.state_dim != env->state_dim() || st.action_dim != env->action_dim())
      throw std::runtime_error("checkpoint dimensions do not match env " + env->name());
    const std::uint64_t seed = args.seed.value_or(static_cast<std::uint64_t>(c.integer("eval_seed")));
    const EvalResult r = evaluate_policy(st, *env, args.episodes, seed);
    ojson summary;
    summary["command"] = "eval";
    summary["env"] = env->name();
    summary["seed"] = seed;
    summary["episodes"] = args.episodes;
    summary["mean_return"] = r.mean_return;
    summary["returns"] = r.returns;
    if (ref) summary["normalized_score"] = normalized_score(r.mean_return, *ref);
    if (const auto* tab = dynamic_cast<const TabularEnv*>(env.get()))
      summary["greedy_policy"] = greedy_tabular_policy(st, *tab);
    if (!args.out.empty()) write_json(fs::path(args.out) / "summary.json", summary);
    log << summary.dump(2) << '\n';
    return kExitOk;
  });
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string suite = "all";
  std::uint64_t seed = 1;
  std::optional<std::size_t> trials;
  std::string out;  ///< optional directory; the report goes to out/reports/verify_<suite>.json
  std::optional<double> corrupt_lambda;
};

inline const std::vector<double>& sandwich_lambdas() {
  static const std::vector<double> l = {0.0, 0.25, 1.0};
  return l;
}

inline ojson run_verify_suite(const std::string& suite, const VerifyArgs& args, bool& passed) {
  ojson reports = ojson::array();
  auto theorem = [&](TheoremId id, std::optional<double> lambda = std::nullopt) {
    VerifyOptions o = default_verify_options(id, args.seed);
    if (args.trials) o.trials = *args.trials;
    if (lambda) o.lambda = *lambda;
    o.corrupt_lambda = args.corrupt_lambda;
    const TheoremReport r = run_theorem_check(id, o);
    passed = passed && r.passed;
    reports.push_back(to_json(r));
  };
  if (suite == "probe") {
    ProbeSuiteOptions po;
    po.seed = args.seed;
    if (args.trials) po.trials = *args.trials;
    const ProbeSuiteReport r = run_probe_suite(po);
    passed = passed && r.passed;
    reports.push_back(to_json(r));
  } else if (suite == "thm4") {
    for (double l : sandwich_lambdas()) theorem(TheoremId::thm4, l);
  } else if (auto id = theorem_from_string(suite)) {
    theorem(*id);
  } else {
    throw UsageError("unknown suite \"" + suite + "\" (expected lemma1, thm2, thm3, thm4, thm5, probe or all)");
  }
  return reports;
}

inline int cmd_verify(const VerifyArgs& args, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (args.trials && *args.trials < 1) throw UsageError("--trials must be >= 1");
    std::vector<std::string> suites;
    if (args.suite == "all")
      suites = {"lemma1", "thm2", "thm3", "thm4", "thm5", "probe"};
    else
      suites = {args.suite};
    bool passed = true;
    ojson report;
    report["suite"] = args.suite;
    report["seed"] = args.seed;
    if (args.trials) report["trials"] = *args.trials;
    if (args.corrupt_lambda) report["corrupt_lambda"] = *args.corrupt_lambda;
    ojson all = ojson::array();
    for (const auto& s : suites) {
      bool ok = true;
      for (auto& r : run_verify_suite(s, args, ok)) all.push_back(std::move(r));
      log << "verify " << s << ": " << (ok ? "passed" : "FAILED") << '\n';
      passed = passed && ok;
    }
    report["passed"] = passed;
    report["reports"] = std::move(all);
    if (!args.out.empty()) write_json(fs::path(args.out) / "reports" / ("verify_" + args.suite + ".json"), report);
    else log << report.dump(2) << '\n';
    return passed ? kExitOk : kExitRuntime;
  });
}

}  // namespace dmg::cli
