#pragma once

// Environments (tabular simulator, chain, gridworld, point-mass), graded
// dataset generators, state normalization and the normalized score.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmg/mdp.hpp"
#include "dmg/operators.hpp"

namespace dmg {

using Rng = std::mt19937_64;

struct StepResult {
  std::vector<double> next_state;
  double reward = 0.0;
  bool terminal = false;
};

/// Episodic environment over real-vector observations and actions.
class Env {
 public:
  virtual ~Env() = default;
  virtual std::string name() const = 0;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t action_dim() const = 0;
  /// Per-coordinate action bound (actor outputs are scaled into [-b, b]).
  virtual double action_bound() const = 0;
  virtual std::size_t horizon() const = 0;
  virtual double gamma() const = 0;
  /// Upper bound on the per-step reward.
  virtual double reward_upper_bound() const = 0;
  virtual std::vector<double> reset(Rng& rng) = 0;
  virtual StepResult step(const std::vector<double>& action, Rng& rng) = 0;
  /// Reference controller used by the dataset generators.
  virtual std::vector<double> expert_action(const std::vector<double>& state) const = 0;
  virtual std::vector<double> random_action(Rng& rng) const = 0;
};

// ---------------------------------------------------------------------------
// Tabular simulator

/**
 * Samples trajectories of a TabularMdp. Observations are one-hot state
 * vectors; a real action is mapped to the nearest action embedding.
 * `terminal_states` end an episode on entry.
 */
class TabularEnv : public Env {
 public:
  TabularEnv(TabularMdp mdp, std::string name, std::size_t horizon, std::vector<std::uint8_t> terminal_states = {})
      : mdp_(std::move(mdp)), name_(std::move(name)), horizon_(horizon), terminal_(std::move(terminal_states)) {
    if (terminal_.empty()) terminal_.assign(mdp_.n_states(), 0);
    if (terminal_.size() != mdp_.n_states()) throw std::invalid_argument("TabularEnv: terminal mask has wrong size");
    expert_ = optimal_policy(mdp_);
    bound_ = 0.0;
    for (const auto& e : mdp_.embeddings())
      for (double v : e) bound_ = std::max(bound_, std::abs(v));
    if (bound_ == 0.0) bound_ = 1.0;
  }

  const TabularMdp& mdp() const { return mdp_; }
  const DeterministicPolicy& expert_policy() const { return expert_; }
  bool is_terminal(std::size_t s) const { return terminal_[s] != 0; }
  std::size_t current_state() const { return state_; }

  std::string name() const override { return name_; }
  std::size_t state_dim() const override { return mdp_.n_states(); }
  std::size_t action_dim() const override { return mdp_.embedding_dim(); }
  double action_bound() const override { return bound_; }
  std::size_t horizon() const override { return horizon_; }
  double gamma() const override { return mdp_.gamma(); }
  double reward_upper_bound() const override { return mdp_.r_max(); }

  std::vector<double> one_hot(std::size_t s) const {
    std::vector<double> x(mdp_.n_states(), 0.0);
    x.at(s) = 1.0;
    return x;
  }
  std::size_t state_of(const std::vector<double>& obs) const {
    if (obs.size() != mdp_.n_states()) throw std::invalid_argument("TabularEnv: observation has wrong size");
    return static_cast<std::size_t>(std::max_element(obs.begin(), obs.end()) - obs.begin());
  }
  std::vector<double> action_vector(std::size_t a) const {
    const auto e = mdp_.embedding(a);
    return {e.begin(), e.end()};
  }
  std::size_t nearest_action(const std::vector<double>& action) const {
    if (action.size() != mdp_.embedding_dim()) throw std::invalid_argument("TabularEnv: action has wrong size");
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < mdp_.n_actions(); ++a) {
      const double d = euclidean_distance(action, mdp_.embedding(a));
      if (d < best_d) {
        best_d = d;
        best = a;
      }
    }
    return best;
  }

  std::size_t reset_id(Rng& rng) {
    std::discrete_distribution<std::size_t> d0(mdp_.d0().begin(), mdp_.d0().end());
    state_ = d0(rng);
    return state_;
  }
  /// Returns (next state, reward, terminal) for a discrete action.
  StepResult step_id(std::size_t a, Rng& rng) {
    if (a >= mdp_.n_actions()) throw std::invalid_argument("TabularEnv: action id out of range");
    const auto p = mdp_.next_distribution(state_, a);
    std::discrete_distribution<std::size_t> next(p.begin(), p.end());
    const double r = mdp_.reward(state_, a);
    state_ = next(rng);
    return {{static_cast<double>(state_)}, r, is_terminal(state_)};
  }

  std::vector<double> reset(Rng& rng) override { return one_hot(reset_id(rng)); }
  StepResult step(const std::vector<double>& action, Rng& rng) override {
    StepResult r = step_id(nearest_action(action), rng);
    r.next_state = one_hot(state_);
    return r;
  }
  std::vector<double> expert_action(const std::vector<double>& state) const override {
    return action_vector(expert_[state_of(state)]);
  }
  std::vector<double> random_action(Rng& rng) const override {
    return action_vector(std::uniform_int_distribution<std::size_t>(0, mdp_.n_actions() - 1)(rng));
  }

 private:
  TabularMdp mdp_;
  std::string name_;
  std::size_t horizon_;
  std::vector<std::uint8_t> terminal_;
  DeterministicPolicy expert_;
  double bound_ = 1.0;
  std::size_t state_ = 0;
};

/// Index of the chain actions.
inline constexpr std::size_t kChainStay = 0;
inline constexpr std::size_t kChainGo = 1;

/**
 * Two states; "stay" keeps the state, "go" switches it. Staying in s1 pays 1,
 * everything else 0. Action embeddings: stay = 0, go = 1. d0 uniform.
 */
inline TabularMdp make_chain_mdp(double gamma = 0.5) {
  std::vector<std::vector<std::vector<double>>> p{{{1.0, 0.0}, {0.0, 1.0}}, {{0.0, 1.0}, {1.0, 0.0}}};
  std::vector<std::vector<double>> r{{0.0, 0.0}, {1.0, 0.0}};
  return TabularMdp(std::move(p), std::move(r), {{0.0}, {1.0}}, gamma, {0.5, 0.5}, 1.0);
}

inline TabularEnv make_chain_env(double gamma = 0.5, std::size_t horizon = 64) {
  return TabularEnv(make_chain_mdp(gamma), "chain", horizon);
}

// ---------------------------------------------------------------------------
// Gridworld

struct Cell {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const Cell&) const = default;
};

struct GridWorldSpec {
  std::size_t width = 3;
  std::size_t height = 3;
  std::vector<Cell> goals{{2, 2}};
  double goal_reward = 1.0;
  double step_reward = 0.0;
  std::vector<Cell> obstacles;
  /// Generator flag: datasets get reward - 1 on every transition.
  bool sparse_reward = false;
  double gamma = 0.9;
  std::size_t horizon = 100;
};

inline constexpr std::size_t kGridActions = 4;  // up, down, left, right

namespace detail {

inline std::size_t cell_id(const GridWorldSpec& g, Cell c) { return c.y * g.width + c.x; }

inline bool in_list(const std::vector<Cell>& cells, Cell c) {
  return std::find(cells.begin(), cells.end(), c) != cells.end();
}

inline Cell grid_move(const GridWorldSpec& g, Cell c, std::size_t a) {
  static constexpr int dx[kGridActions] = {0, 0, -1, 1};
  static constexpr int dy[kGridActions] = {1, -1, 0, 0};
  const long nx = static_cast<long>(c.x) + dx[a];
  const long ny = static_cast<long>(c.y) + dy[a];
  if (nx < 0 || ny < 0 || nx >= static_cast<long>(g.width) || ny >= static_cast<long>(g.height)) return c;
  const Cell n{static_cast<std::size_t>(nx), static_cast<std::size_t>(ny)};
  return in_list(g.obstacles, n) ? c : n;
}

/// Breadth-first distances (in moves) to the nearest goal; -1 if unreachable.
inline std::vector<long> goal_distances(const GridWorldSpec& g) {
  std::vector<long> dist(g.width * g.height, -1);
  std::deque<Cell> queue;
  for (const Cell& c : g.goals) {
    dist[cell_id(g, c)] = 0;
    queue.push_back(c);
  }
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const Cell from{x, y};
        if (in_list(g.obstacles, from) || dist[cell_id(g, from)] >= 0) continue;
        for (std::size_t a = 0; a < kGridActions; ++a)
          if (grid_move(g, from, a) == c) {
            dist[cell_id(g, from)] = dist[cell_id(g, c)] + 1;
            queue.push_back(from);
            break;
          }
      }
  }
  return dist;
}

}  // namespace detail

inline void validate(const GridWorldSpec& g) {
  if (g.width == 0 || g.height == 0) throw std::invalid_argument("gridworld: width and height must be positive");
  if (g.goals.empty()) throw std::invalid_argument("gridworld: at least one goal is required");
  for (const Cell& c : g.goals) {
    if (c.x >= g.width || c.y >= g.height) throw std::invalid_argument("gridworld: goal outside the grid");
    if (detail::in_list(g.obstacles, c)) throw std::invalid_argument("gridworld: goal on an obstacle");
  }
  for (const Cell& c : g.obstacles)
    if (c.x >= g.width || c.y >= g.height) throw std::invalid_argument("gridworld: obstacle outside the grid");
  if (!(g.gamma >= 0.0 && g.gamma < 1.0)) throw std::invalid_argument("gridworld: gamma must lie in [0,1)");
  const auto dist = detail::goal_distances(g);
  bool reachable = false;
  for (std::size_t i = 0; i < dist.size(); ++i) reachable = reachable || dist[i] > 0;
  if (!reachable) throw std::invalid_argument("gridworld: no goal is reachable from any free cell");
}

/**
 * Deterministic moves; bumping a wall or obstacle leaves the agent in place.
 * Entering a goal pays goal_reward, other moves step_reward. Goals and
 * obstacles are absorbing with zero reward. d0 is uniform over free,
 * non-goal cells. Action embeddings are the unit move directions.
 */
inline TabularMdp make_gridworld_mdp(const GridWorldSpec& g) {
  validate(g);
  const std::size_t n = g.width * g.height;
  std::vector<std::vector<std::vector<double>>> p(n, std::vector<std::vector<double>>(kGridActions, std::vector<double>(n, 0.0)));
  std::vector<std::vector<double>> r(n, std::vector<double>(kGridActions, 0.0));
  std::vector<double> d0(n, 0.0);
  std::size_t n_start = 0;
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      const Cell c{x, y};
      const std::size_t s = detail::cell_id(g, c);
      const bool absorbing = detail::in_list(g.goals, c) || detail::in_list(g.obstacles, c);
      for (std::size_t a = 0; a < kGridActions; ++a) {
        if (absorbing) {
          p[s][a][s] = 1.0;
          continue;
        }
        const Cell nxt = detail::grid_move(g, c, a);
        p[s][a][detail::cell_id(g, nxt)] = 1.0;
        r[s][a] = detail::in_list(g.goals, nxt) ? g.goal_reward : g.step_reward;
      }
      if (!absorbing) {
        d0[s] = 1.0;
        ++n_start;
      }
    }
  for (auto& v : d0) v /= static_cast<double>(n_start);
  const double r_max = std::max({std::abs(g.goal_reward), std::abs(g.step_reward), 1e-12});
  std::vector<std::vector<double>> emb{{0.0, 1.0}, {0.0, -1.0}, {-1.0, 0.0}, {1.0, 0.0}};
  return TabularMdp(std::move(p), std::move(r), std::move(emb), g.gamma, std::move(d0), r_max);
}

inline TabularEnv make_gridworld(const GridWorldSpec& g) {
  std::vector<std::uint8_t> terminal(g.width * g.height, 0);
  for (const Cell& c : g.goals) terminal[detail::cell_id(g, c)] = 1;
  return TabularEnv(make_gridworld_mdp(g), "gridworld", g.horizon, std::move(terminal));
}

/// Optimal return from each cell by shortest path: goal_reward * gamma^(d-1) with zero step reward.
inline std::vector<double> gridworld_bfs_values(const GridWorldSpec& g) {
  if (g.step_reward != 0.0) throw std::invalid_argument("gridworld_bfs_values assumes zero step reward");
  const auto dist = detail::goal_distances(g);
  std::vector<double> v(dist.size(), 0.0);
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (dist[i] > 0) v[i] = g.goal_reward * std::pow(g.gamma, static_cast<double>(dist[i] - 1));
  return v;
}

// ---------------------------------------------------------------------------
// Point-mass

struct PointMassSpec {
  std::vector<double> goal{0.5, 0.5};
  double dt = 0.1;
  double a_max = 1.0;
  std::size_t horizon = 50;
  double gamma = 0.9;
  /// Proportional gain of the expert controller.
  double expert_gain = 1.0;
};

inline void validate(const PointMassSpec& p) {
  if (p.goal.size() != 2) throw std::invalid_argument("point-mass: goal must be 2-dimensional");
  for (double g : p.goal)
    if (!(g >= -1.0 && g <= 1.0)) throw std::invalid_argument("point-mass: goal outside [-1,1]^2");
  if (!(p.dt > 0.0)) throw std::invalid_argument("point-mass: dt must be > 0");
  if (!(p.a_max > 0.0)) throw std::invalid_argument("point-mass: a_max must be > 0");
  if (p.horizon == 0) throw std::invalid_argument("point-mass: horizon must be >= 1");
  if (!(p.gamma >= 0.0 && p.gamma < 1.0)) throw std::invalid_argument("point-mass: gamma must lie in [0,1)");
}

/**
 * Position in [-1,1]^2, velocity action with ||a|| <= a_max (longer actions
 * are projected), x' = clip(x + a dt), reward -||x - goal|| at the current x.
 * Episodes start uniformly in the square and end at the horizon.
 */
class PointMassEnv : public Env {
 public:
  explicit PointMassEnv(PointMassSpec spec) : spec_(std::move(spec)) { validate(spec_); }

  const PointMassSpec& spec() const { return spec_; }
  const std::vector<double>& position() const { return x_; }
  void set_position(std::vector<double> x) {
    if (x.size() != 2) throw std::invalid_argument("point-mass: position must be 2-dimensional");
    x_ = std::move(x);
  }

  std::string name() const override { return "pointmass"; }
  std::size_t state_dim() const override { return 2; }
  std::size_t action_dim() const override { return 2; }
  double action_bound() const override { return spec_.a_max; }
  std::size_t horizon() const override { return spec_.horizon; }
  double gamma() const override { return spec_.gamma; }
  double reward_upper_bound() const override { return 0.0; }

  std::vector<double> project(std::vector<double> a) const {
    if (a.size() != 2) throw std::invalid_argument("point-mass: action must be 2-dimensional");
    for (double v : a)
      if (!std::isfinite(v)) throw std::invalid_argument("point-mass: non-finite action");
    const double n = std::hypot(a[0], a[1]);
    if (n > spec_.a_max)
      for (double& v : a) v *= spec_.a_max / n;
    return a;
  }

  std::vector<double> reset(Rng& rng) override {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double x = u(rng);
    x_ = {x, u(rng)};
    return x_;
  }

  StepResult step(const std::vector<double>& action, Rng&) override {
    const auto a = project(action);
    StepResult r;
    r.reward = -std::hypot(x_[0] - spec_.goal[0], x_[1] - spec_.goal[1]);
    for (std::size_t i = 0; i < 2; ++i) x_[i] = std::clamp(x_[i] + a[i] * spec_.dt, -1.0, 1.0);
    r.next_state = x_;
    return r;
  }

  std::vector<double> expert_action(const std::vector<double>& state) const override {
    std::vector<double> a(2);
    for (std::size_t i = 0; i < 2; ++i) a[i] = spec_.expert_gain * (spec_.goal[i] - state.at(i)) / spec_.dt;
    return project(a);
  }

  std::vector<double> random_action(Rng& rng) const override {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double radius = spec_.a_max * std::sqrt(u(rng));
    const double angle = 2.0 * std::numbers::pi * u(rng);
    return {radius * std::cos(angle), radius * std::sin(angle)};
  }

 private:
  PointMassSpec spec_;
  std::vector<double> x_{0.0, 0.0};
};

// ---------------------------------------------------------------------------
// Dataset generation

enum class BehaviorKind { random, mediocre, expert, mixture, fixed };

struct BehaviorSpec {
  BehaviorKind kind = BehaviorKind::expert;
  /// mediocre: per-step probability of the expert action.
  double p = 0.5;
  /// mixture: per-trajectory probability of an expert trajectory.
  double expert_fraction = 0.5;
  /// Gaussian noise added to expert actions of continuous environments.
  double expert_noise = 0.0;
  /// fixed: the action id every step takes (tabular environments only).
  std::size_t fixed_action = 0;
};

inline const char* to_string(BehaviorKind k) {
  switch (k) {
    case BehaviorKind::random: return "random";
    case BehaviorKind::mediocre: return "mediocre";
    case BehaviorKind::expert: return "expert";
    case BehaviorKind::mixture: return "mixture";
    case BehaviorKind::fixed: return "fixed";
  }
  return "unknown";
}

inline BehaviorKind behavior_from_string(const std::string& s) {
  for (BehaviorKind k : {BehaviorKind::random, BehaviorKind::mediocre, BehaviorKind::expert, BehaviorKind::mixture,
                         BehaviorKind::fixed})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown behavior \"" + s + "\" (expected random, mediocre, expert, mixture or fixed)");
}

struct DatasetOptions {
  BehaviorSpec behavior;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  /// Subtract 1 from every reward (sparse-reward convention).
  bool reward_shift = false;
};

namespace detail {

inline std::string behavior_tag(const BehaviorSpec& b) {
  std::string tag = to_string(b.kind);
  if (b.kind == BehaviorKind::mediocre) tag += "(" + std::to_string(b.p) + ")";
  if (b.kind == BehaviorKind::mixture) tag += "(" + std::to_string(b.expert_fraction) + ")";
  if (b.kind == BehaviorKind::fixed) tag += "(" + std::to_string(b.fixed_action) + ")";
  return tag;
}

}  // namespace detail

/**
 * Rolls out the behavior until `n` transitions are collected. Tabular
 * environments yield discrete datasets (ids), others continuous ones.
 */
inline Dataset generate_dataset(Env& env, const DatasetOptions& opt) {
  if (opt.n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  const BehaviorSpec& b = opt.behavior;
  if (!(b.p >= 0.0 && b.p <= 1.0)) throw std::invalid_argument("generate_dataset: mediocre p must lie in [0,1]");
  if (!(b.expert_fraction >= 0.0 && b.expert_fraction <= 1.0))
    throw std::invalid_argument("generate_dataset: mixture fraction must lie in [0,1]");
  if (!(b.expert_noise >= 0.0)) throw std::invalid_argument("generate_dataset: expert noise must be >= 0");

  auto* tab = dynamic_cast<TabularEnv*>(&env);
  if (b.kind == BehaviorKind::fixed && (!tab || b.fixed_action >= tab->mdp().n_actions()))
    throw std::invalid_argument("generate_dataset: fixed behavior needs a tabular environment and a valid action id");
  Rng rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.representation = tab ? Representation::discrete : Representation::continuous;
  const double shift = opt.reward_shift ? -1.0 : 0.0;
  bool reached_terminal = false;

  while (ds.transitions.size() < opt.n) {
    bool expert_traj = b.kind == BehaviorKind::expert;
    if (b.kind == BehaviorKind::mixture) expert_traj = unit(rng) < b.expert_fraction;
    if (b.kind == BehaviorKind::mixture || b.kind == BehaviorKind::expert || b.kind == BehaviorKind::random)
      ds.trajectory_labels.push_back(expert_traj ? "expert" : "random");
    else
      ds.trajectory_labels.push_back(to_string(b.kind));

    std::vector<double> obs = env.reset(rng);
    for (std::size_t t = 0; t < env.horizon() && ds.transitions.size() < opt.n; ++t) {
      bool use_expert = expert_traj;
      if (b.kind == BehaviorKind::mediocre) use_expert = unit(rng) < b.p;
      std::vector<double> action = use_expert ? env.expert_action(obs) : env.random_action(rng);
      if (b.kind == BehaviorKind::fixed) action = tab->action_vector(b.fixed_action);
      if (use_expert && !tab && b.expert_noise > 0.0)
        for (double& v : action) v += b.expert_noise * noise(rng);

      Transition tr;
      if (tab) {
        const std::size_t s = tab->current_state();
        const std::size_t a = tab->nearest_action(action);
        const StepResult r = tab->step_id(a, rng);
        tr = Transition::discrete(s, a, r.reward + shift, tab->current_state(), r.terminal);
        obs = tab->one_hot(tab->current_state());
        ds.transitions.push_back(tr);
        if (r.terminal) {
          reached_terminal = true;
          break;
        }
      } else {
        StepResult r = env.step(action, rng);
        if (auto* pm = dynamic_cast<PointMassEnv*>(&env)) action = pm->project(action);
        tr.state = obs;
        tr.action = action;
        tr.reward = r.reward + shift;
        tr.next_state = r.next_state;
        tr.terminal = r.terminal;
        obs = r.next_state;
        ds.transitions.push_back(std::move(tr));
        if (r.terminal) {
          reached_terminal = true;
          break;
        }
      }
    }
  }
  ds.provenance = "generator=" + env.name() + " behavior=" + detail::behavior_tag(b) + " n=" + std::to_string(opt.n) +
                  " seed=" + std::to_string(opt.seed) + (opt.reward_shift ? " reward_shift=-1" : "");
  if (tab && !reached_terminal) {
    bool has_terminal = false;
    for (std::size_t s = 0; s < tab->mdp().n_states(); ++s) has_terminal = has_terminal || tab->is_terminal(s);
    if (has_terminal) ds.provenance += " warning=goal_never_reached";
  }
  return ds;
}

/// Rewrites a discrete dataset into one-hot states and embedded actions.
inline Dataset featurize(const Dataset& ds, const TabularEnv& env) {
  if (ds.representation != Representation::discrete) throw std::invalid_argument("featurize: dataset is not discrete");
  Dataset out;
  out.representation = Representation::continuous;
  out.provenance = ds.provenance;
  out.trajectory_labels = ds.trajectory_labels;
  for (std::size_t i = 0; i < ds.transitions.size(); ++i) {
    const Transition& t = ds.transitions[i];
    validate_discrete_transition(t, i, env.mdp());
    out.transitions.push_back(
        {env.one_hot(t.state_id()), env.action_vector(t.action_id()), t.reward, env.one_hot(t.next_state_id()), t.terminal});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and scores

struct StateNormalizer {
  std::vector<double> mean;
  std::vector<double> std;

  std::vector<double> apply(const std::vector<double>& x) const {
    if (x.size() != mean.size()) throw std::invalid_argument("StateNormalizer: dimension mismatch");
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean[i]) / std[i];
    return y;
  }
  std::vector<double> invert(const std::vector<double>& y) const {
    if (y.size() != mean.size()) throw std::invalid_argument("StateNormalizer: dimension mismatch");
    std::vector<double> x(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) x[i] = y[i] * std[i] + mean[i];
    return x;
  }
  bool identity() const {
    for (std::size_t i = 0; i < mean.size(); ++i)
      if (mean[i] != 0.0 || std[i] != 1.0) return false;
    return true;
  }
};

inline constexpr double kStdFloor = 1e-3;

inline StateNormalizer identity_normalizer(std::size_t dim) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
}

/// Per-dimension statistics over states and next states.
inline StateNormalizer fit_normalizer(const Dataset& ds) {
  if (ds.representation != Representation::continuous)
    throw std::invalid_argument("normalize_states: tabular datasets cannot be normalized");
  if (ds.transitions.empty()) throw std::invalid_argument("normalize_states: empty dataset");
  const std::size_t d = ds.transitions.front().state.size();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double count = 0.0;
  for (const auto& t : ds.transitions) {
    if (t.state.size() != d || t.next_state.size() != d)
      throw std::invalid_argument("normalize_states: inconsistent state dimension");
    for (const auto* x : {&t.state, &t.next_state}) {
      for (std::size_t i = 0; i < d; ++i) sum[i] += (*x)[i];
      count += 1.0;
    }
  }
  StateNormalizer n{std::vector<double>(d), std::vector<double>(d)};
  for (std::size_t i = 0; i < d; ++i) n.mean[i] = sum[i] / count;
  for (const auto& t : ds.transitions)
    for (const auto* x : {&t.state, &t.next_state})
      for (std::size_t i = 0; i < d; ++i) sq[i] += ((*x)[i] - n.mean[i]) * ((*x)[i] - n.mean[i]);
  for (std::size_t i = 0; i < d; ++i) n.std[i] = std::max(kStdFloor, std::sqrt(sq[i] / count));
  return n;
}

inline Dataset apply_normalizer(const Dataset& ds, const StateNormalizer& n) {
  Dataset out = ds;
  for (auto& t : out.transitions) {
    t.state = n.apply(t.state);
    t.next_state = n.apply(t.next_state);
  }
  return out;
}

struct NormalizedDataset {
  Dataset dataset;
  StateNormalizer stats;
};

inline NormalizedDataset normalize_states(const Dataset& ds) {
  StateNormalizer n = fit_normalizer(ds);
  return {apply_normalizer(ds, n), std::move(n)};
}

inline nlohmann::ordered_json to_json(const StateNormalizer& n) {
  nlohmann::ordered_json j;
  j["mean"] = n.mean;
  j["std"] = n.std;
  return j;
}

inline StateNormalizer normalizer_from_json(const nlohmann::json& j) {
  StateNormalizer n{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
  if (n.mean.size() != n.std.size()) throw std::runtime_error("normalizer mean/std sizes differ");
  return n;
}

struct ScoreReference {
  double random_return = 0.0;
  double expert_return = 1.0;
};

inline void validate(const ScoreReference& ref) {
  if (!(ref.expert_return > ref.random_return))
    throw std::invalid_argument("score reference: expert_return must exceed random_return");
}

inline double normalized_score(double ret, const ScoreReference& ref) {
  validate(ref);
  return 100.0 * (ret - ref.random_return) / (ref.expert_return - ref.random_return);
}

inline nlohmann::ordered_json to_json(const ScoreReference& ref) {
  nlohmann::ordered_json j;
  j["random_return"] = ref.random_return;
  j["expert_return"] = ref.expert_return;
  return j;
}

inline ScoreReference score_reference_from_json(const nlohmann::json& j) {
  ScoreReference ref{j.at("random_return").get<double>(), j.at("expert_return").get<double>()};
  validate(ref);
  return ref;
}

inline ScoreReference read_score_reference(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open score reference " + path);
  try {
    return score_reference_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid score reference " + path + ": " + e.what());
  }
}

/// Undiscounted mean episode return of a state -> action controller.
template <class Policy>
double rollout_return(Env& env, Policy&& policy, std::size_t episodes, std::uint64_t seed) {
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    std::vector<double> obs = env.reset(rng);
    for (std::size_t t = 0; t < env.horizon(); ++t) {
      const StepResult r = env.step(policy(obs, rng), rng);
      total += r.reward;
      obs = r.next_state;
      if (r.terminal) break;
    }
  }
  return total / static_cast<double>(episodes);
}

/// Random and expert reference returns of an environment.
inline ScoreReference compute_score_reference(Env& env, std::size_t episodes, std::uint64_t seed) {
  ScoreReference ref;
  ref.random_return = rollout_return(env, [&](const std::vector<double>&, Rng& rng) { return env.random_action(rng); },
                                     episodes, seed);
  ref.expert_return = rollout_return(env, [&](const std::vector<double>& s, Rng&) { return env.expert_action(s); },
                                     episodes, seed);
  return ref;
}

}  // namespace dmg
