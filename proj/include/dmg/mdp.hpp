#pragma once

// Finite MDPs with embedded actions, offline datasets, empirical and mildly
// generalized behavior policies, and exact policy evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace dmg {

inline constexpr double kStochasticTol = 1e-12;
inline constexpr double kEvaluationTol = 1e-10;

/// Sorted action ids available at one state.
using ActionSet = std::vector<std::size_t>;
/// Per-state action sets; an empty set marks a state without support.
using ActionSupport = std::vector<ActionSet>;
/// [state][action] probabilities; an empty row marks an undefined state.
using StochasticPolicy = std::vector<std::vector<double>>;
/// One action id per state.
using DeterministicPolicy = std::vector<std::size_t>;

inline double euclidean_distance(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("euclidean_distance: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline bool contains(const ActionSet& set, std::size_t a) {
  return std::binary_search(set.begin(), set.end(), a);
}

// ---------------------------------------------------------------------------
// TabularMdp

/**
 * Finite MDP (S, A, P, R, gamma, d0) whose discrete actions carry embedding
 * coordinates, so that distances between actions are Euclidean distances
 * between embeddings.
 *
 * Validated on construction: every P row is a distribution (1e-12), rewards
 * lie in [0, r_max], d0 is a distribution, gamma in [0, 1).
 */
class TabularMdp {
 public:
  TabularMdp() = default;

  /// transitions is indexed [s][a][s'], rewards [s][a], embeddings [a][dim].
  TabularMdp(std::vector<std::vector<std::vector<double>>> transitions,
             std::vector<std::vector<double>> rewards,
             std::vector<std::vector<double>> action_embeddings, double gamma,
             std::vector<double> d0, double r_max)
      : n_states_(transitions.size()),
        n_actions_(action_embeddings.size()),
        embeddings_(std::move(action_embeddings)),
        gamma_(gamma),
        d0_(std::move(d0)),
        r_max_(r_max) {
    if (n_states_ == 0) throw std::invalid_argument("TabularMdp: no states");
    if (n_actions_ == 0) throw std::invalid_argument("TabularMdp: no actions");
    if (!(gamma_ >= 0.0 && gamma_ < 1.0)) throw std::invalid_argument("TabularMdp: gamma must lie in [0,1)");
    if (!(r_max_ > 0.0)) throw std::invalid_argument("TabularMdp: r_max must be > 0");
    embedding_dim_ = embeddings_.front().size();
    for (const auto& e : embeddings_) {
      if (e.size() != embedding_dim_) throw std::invalid_argument("TabularMdp: ragged action embeddings");
      for (double x : e)
        if (!std::isfinite(x)) throw std::invalid_argument("TabularMdp: non-finite action embedding");
    }
    if (rewards.size() != n_states_) throw std::invalid_argument("TabularMdp: reward table has wrong number of states");
    if (d0_.size() != n_states_) throw std::invalid_argument("TabularMdp: d0 has wrong length");

    p_.assign(n_states_ * n_actions_ * n_states_, 0.0);
    r_.assign(n_states_ * n_actions_, 0.0);
    for (std::size_t s = 0; s < n_states_; ++s) {
      if (transitions[s].size() != n_actions_ || rewards[s].size() != n_actions_)
        throw std::invalid_argument("TabularMdp: state " + std::to_string(s) + " has wrong number of actions");
      for (std::size_t a = 0; a < n_actions_; ++a) {
        const auto& row = transitions[s][a];
        if (row.size() != n_states_)
          throw std::invalid_argument("TabularMdp: P row (" + std::to_string(s) + "," + std::to_string(a) + ") has wrong length");
        double total = 0.0;
        for (std::size_t s2 = 0; s2 < n_states_; ++s2) {
          if (!(row[s2] >= 0.0)) throw std::invalid_argument("TabularMdp: negative transition probability");
          p_[(s * n_actions_ + a) * n_states_ + s2] = row[s2];
          total += row[s2];
        }
        if (std::abs(total - 1.0) > kStochasticTol)
          throw std::invalid_argument("TabularMdp: P row (" + std::to_string(s) + "," + std::to_string(a) + ") does not sum to 1");
        const double r = rewards[s][a];
        if (!(r >= 0.0 && r <= r_max_))
          throw std::invalid_argument("TabularMdp: reward (" + std::to_string(s) + "," + std::to_string(a) + ") outside [0, r_max]");
        r_[s * n_actions_ + a] = r;
      }
    }
    double total = 0.0;
    for (double p : d0_) {
      if (!(p >= 0.0)) throw std::invalid_argument("TabularMdp: negative initial probability");
      total += p;
    }
    if (std::abs(total - 1.0) > kStochasticTol) throw std::invalid_argument("TabularMdp: d0 does not sum to 1");
  }

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }
  std::size_t embedding_dim() const { return embedding_dim_; }
  double gamma() const { return gamma_; }
  double r_max() const { return r_max_; }
  /// R_max / (1 - gamma), the largest attainable |Q|.
  double q_max() const { return r_max_ / (1.0 - gamma_); }
  const std::vector<double>& d0() const { return d0_; }

  double reward(std::size_t s, std::size_t a) const { return r_[s * n_actions_ + a]; }
  double prob(std::size_t s, std::size_t a, std::size_t s2) const { return p_[(s * n_actions_ + a) * n_states_ + s2]; }
  std::span<const double> next_distribution(std::size_t s, std::size_t a) const {
    return {p_.data() + (s * n_actions_ + a) * n_states_, n_states_};
  }
  std::span<const double> embedding(std::size_t a) const { return embeddings_.at(a); }
  const std::vector<std::vector<double>>& embeddings() const { return embeddings_; }

  double action_distance(std::size_t a1, std::size_t a2) const {
    return euclidean_distance(embeddings_.at(a1), embeddings_.at(a2));
  }

  /// Largest distance between any two action embeddings.
  double action_diameter() const {
    double d = 0.0;
    for (std::size_t i = 0; i < n_actions_; ++i)
      for (std::size_t j = i + 1; j < n_actions_; ++j) d = std::max(d, action_distance(i, j));
    return d;
  }

  ActionSupport full_support() const {
    ActionSet all(n_actions_);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return ActionSupport(n_states_, all);
  }

 private:
  std::size_t n_states_ = 0;
  std::size_t n_actions_ = 0;
  std::size_t embedding_dim_ = 0;
  std::vector<double> p_;
  std::vector<double> r_;
  std::vector<std::vector<double>> embeddings_;
  double gamma_ = 0.0;
  std::vector<double> d0_;
  double r_max_ = 1.0;
};

// ---------------------------------------------------------------------------
// Transitions and datasets

enum class Representation { discrete, continuous };

/// One (s, a, r, s', terminal) tuple. Discrete datasets store ids as
/// single-element vectors.
struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  bool terminal = false;

  static Transition discrete(std::size_t s, std::size_t a, double r, std::size_t s2, bool terminal = false) {
    return {{static_cast<double>(s)}, {static_cast<double>(a)}, r, {static_cast<double>(s2)}, terminal};
  }
  std::size_t state_id() const { return static_cast<std::size_t>(state.at(0)); }
  std::size_t action_id() const { return static_cast<std::size_t>(action.at(0)); }
  std::size_t next_state_id() const { return static_cast<std::size_t>(next_state.at(0)); }

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct Dataset {
  Representation representation = Representation::discrete;
  std::vector<Transition> transitions;
  /// Generator id, seed and any warnings.
  std::string provenance;
  /// One label per generated trajectory (e.g. "expert", "random").
  std::vector<std::string> trajectory_labels;

  std::size_t size() const { return transitions.size(); }
  bool empty() const { return transitions.empty(); }
};

// ---------------------------------------------------------------------------
// Behavior policies

/// Per-state empirical conditional action frequencies of a dataset.
class EmpiricalBehaviorPolicy {
 public:
  EmpiricalBehaviorPolicy() = default;
  EmpiricalBehaviorPolicy(std::vector<std::vector<double>> probs, ActionSupport support)
      : probs_(std::move(probs)), support_(std::move(support)) {}

  std::size_t n_states() const { return support_.size(); }
  const ActionSet& support(std::size_t s) const { return support_.at(s); }
  const ActionSupport& supports() const { return support_; }
  double prob(std::size_t s, std::size_t a) const { return probs_.at(s).at(a); }
  bool covers(std::size_t s) const { return !support_.at(s).empty(); }
  /// Distribution view; rows of uncovered states are empty.
  StochasticPolicy as_policy() const {
    StochasticPolicy pol(probs_.size());
    for (std::size_t s = 0; s < probs_.size(); ++s)
      if (covers(s)) pol[s] = probs_[s];
    return pol;
  }

 private:
  std::vector<std::vector<double>> probs_;
  ActionSupport support_;
};

/// Behavior support widened to every action within eps_a of an in-dataset action.
class MildlyGeneralizedPolicy {
 public:
  MildlyGeneralizedPolicy() = default;
  MildlyGeneralizedPolicy(EmpiricalBehaviorPolicy base, double eps_a, ActionSupport widened)
      : base_(std::move(base)), eps_a_(eps_a), widened_(std::move(widened)) {}

  const EmpiricalBehaviorPolicy& base() const { return base_; }
  double eps_a() const { return eps_a_; }
  const ActionSet& support(std::size_t s) const { return widened_.at(s); }
  const ActionSupport& supports() const { return widened_; }

 private:
  EmpiricalBehaviorPolicy base_;
  double eps_a_ = 0.0;
  ActionSupport widened_;
};

inline void validate_discrete_transition(const Transition& t, std::size_t index, const TabularMdp& mdp) {
  auto bad = [&](const std::string& what) {
    return std::invalid_argument("transition " + std::to_string(index) + ": " + what);
  };
  if (t.state.size() != 1 || t.action.size() != 1 || t.next_state.size() != 1)
    throw bad("expected integer state/action ids");
  auto valid_id = [](double x, std::size_t n) { return x >= 0.0 && x == std::floor(x) && x < static_cast<double>(n); };
  if (!valid_id(t.state[0], mdp.n_states())) throw bad("unknown state id " + std::to_string(t.state[0]));
  if (!valid_id(t.action[0], mdp.n_actions())) throw bad("unknown action id " + std::to_string(t.action[0]));
  if (!valid_id(t.next_state[0], mdp.n_states())) throw bad("unknown next state id " + std::to_string(t.next_state[0]));
}

inline EmpiricalBehaviorPolicy build_empirical_behavior(const Dataset& dataset, const TabularMdp& mdp) {
  if (dataset.empty()) throw std::invalid_argument("build_empirical_behavior: empty dataset");
  if (dataset.representation != Representation::discrete)
    throw std::invalid_argument("build_empirical_behavior: dataset is not discrete");
  std::vector<std::vector<std::size_t>> counts(mdp.n_states(), std::vector<std::size_t>(mdp.n_actions(), 0));
  for (std::size_t i = 0; i < dataset.transitions.size(); ++i) {
    const auto& t = dataset.transitions[i];
    validate_discrete_transition(t, i, mdp);
    ++counts[t.state_id()][t.action_id()];
  }
  std::vector<std::vector<double>> probs(mdp.n_states(), std::vector<double>(mdp.n_actions(), 0.0));
  ActionSupport support(mdp.n_states());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    const std::size_t total = std::accumulate(counts[s].begin(), counts[s].end(), std::size_t{0});
    if (total == 0) continue;
    for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
      if (counts[s][a] == 0) continue;
      probs[s][a] = static_cast<double>(counts[s][a]) / static_cast<double>(total);
      support[s].push_back(a);
    }
  }
  return {std::move(probs), std::move(support)};
}

inline MildlyGeneralizedPolicy build_mildly_generalized(const EmpiricalBehaviorPolicy& base, double eps_a,
                                                        const TabularMdp& mdp) {
  if (!(eps_a >= 0.0)) throw std::invalid_argument("build_mildly_generalized: eps_a must be >= 0");
  if (base.n_states() != mdp.n_states()) throw std::invalid_argument("build_mildly_generalized: state count mismatch");
  ActionSupport widened(mdp.n_states());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    const ActionSet& data = base.support(s);
    if (data.empty()) continue;
    for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
      const bool near = std::any_of(data.begin(), data.end(),
                                    [&](std::size_t b) { return mdp.action_distance(a, b) <= eps_a; });
      if (near) widened[s].push_back(a);
    }
  }
  return {base, eps_a, std::move(widened)};
}

// ---------------------------------------------------------------------------
// Value tables

/// State-action values on a declared support; entries outside it are absent.
class QTable {
 public:
  QTable() = default;
  QTable(std::size_t n_states, std::size_t n_actions)
      : n_states_(n_states), n_actions_(n_actions), values_(n_states * n_actions, 0.0), defined_(n_states * n_actions, 0) {}

  /// Table defined exactly on `support`, every entry set to `value`.
  static QTable on_support(std::size_t n_actions, const ActionSupport& support, double value = 0.0) {
    QTable q(support.size(), n_actions);
    for (std::size_t s = 0; s < support.size(); ++s)
      for (std::size_t a : support[s]) q.set(s, a, value);
    return q;
  }

  std::size_t n_states() const { return n_states_; }
  std::size_t n_actions() const { return n_actions_; }

  bool has(std::size_t s, std::size_t a) const { return s < n_states_ && a < n_actions_ && defined_[s * n_actions_ + a]; }

  double at(std::size_t s, std::size_t a) const {
    if (!has(s, a))
      throw std::out_of_range("QTable has no entry at (s=" + std::to_string(s) + ", a=" + std::to_string(a) + ")");
    return values_[s * n_actions_ + a];
  }

  void set(std::size_t s, std::size_t a, double v) {
    if (s >= n_states_ || a >= n_actions_) throw std::out_of_range("QTable::set out of range");
    values_[s * n_actions_ + a] = v;
    defined_[s * n_actions_ + a] = 1;
  }

  ActionSupport support() const {
    ActionSupport out(n_states_);
    for (std::size_t s = 0; s < n_states_; ++s)
      for (std::size_t a = 0; a < n_actions_; ++a)
        if (defined_[s * n_actions_ + a]) out[s].push_back(a);
    return out;
  }

  /// Largest |Q| over defined entries.
  double sup_norm() const {
    double m = 0.0;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (defined_[i]) m = std::max(m, std::abs(values_[i]));
    return m;
  }

  friend bool operator==(const QTable&, const QTable&) = default;

 private:
  std::size_t n_states_ = 0;
  std::size_t n_actions_ = 0;
  std::vector<double> values_;
  std::vector<std::uint8_t> defined_;
};

/// max over `domain` of |f1 - f2|; both tables must define the domain.
inline double sup_distance(const QTable& f1, const QTable& f2, const ActionSupport& domain) {
  double m = 0.0;
  for (std::size_t s = 0; s < domain.size(); ++s)
    for (std::size_t a : domain[s]) m = std::max(m, std::abs(f1.at(s, a) - f2.at(s, a)));
  return m;
}

/// State values; states outside the evaluable set are undefined.
class VTable {
 public:
  VTable() = default;
  explicit VTable(std::size_t n) : values_(n, 0.0), defined_(n, 0) {}
  std::size_t size() const { return values_.size(); }
  bool has(std::size_t s) const { return s < values_.size() && defined_[s]; }
  double operator[](std::size_t s) const {
    if (!has(s)) throw std::out_of_range("VTable has no value for state " + std::to_string(s));
    return values_[s];
  }
  void set(std::size_t s, double v) {
    values_.at(s) = v;
    defined_[s] = 1;
  }
  double sup_norm() const {
    double m = 0.0;
    for (std::size_t s = 0; s < values_.size(); ++s)
      if (defined_[s]) m = std::max(m, std::abs(values_[s]));
    return m;
  }

 private:
  std::vector<double> values_;
  std::vector<std::uint8_t> defined_;
};

struct LipschitzParams {
  double k_q = 0.0;
  double k_p = 0.0;
  double k_r = 0.0;
  double k_g = 0.0;
  double g_max = 0.0;
};

// ---------------------------------------------------------------------------
// Policy evaluation

inline StochasticPolicy to_stochastic(const DeterministicPolicy& pi, std::size_t n_actions) {
  StochasticPolicy out(pi.size());
  for (std::size_t s = 0; s < pi.size(); ++s) {
    if (pi[s] >= n_actions) throw std::invalid_argument("to_stochastic: action id out of range at state " + std::to_string(s));
    out[s].assign(n_actions, 0.0);
    out[s][pi[s]] = 1.0;
  }
  return out;
}

namespace detail {

inline void check_policy_shape(const TabularMdp& mdp, const StochasticPolicy& pi) {
  if (pi.size() != mdp.n_states()) throw std::invalid_argument("policy has wrong number of states");
  for (std::size_t s = 0; s < pi.size(); ++s) {
    if (pi[s].empty()) continue;
    if (pi[s].size() != mdp.n_actions())
      throw std::invalid_argument("policy row " + std::to_string(s) + " has wrong number of actions");
    double total = 0.0;
    for (double p : pi[s]) {
      if (!(p >= 0.0)) throw std::invalid_argument("policy row " + std::to_string(s) + " has a negative entry");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("policy row " + std::to_string(s) + " does not sum to 1");
  }
}

inline std::vector<double> successor_mass(const TabularMdp& mdp, const StochasticPolicy& pi, std::size_t s) {
  std::vector<double> mass(mdp.n_states(), 0.0);
  for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
    if (pi[s][a] <= 0.0) continue;
    const auto next = mdp.next_distribution(s, a);
    for (std::size_t s2 = 0; s2 < mdp.n_states(); ++s2) mass[s2] += pi[s][a] * next[s2];
  }
  return mass;
}

}  // namespace detail

/**
 * Exact V^pi by a dense linear solve of (I - gamma P_pi) V = R_pi over the
 * states whose value is well defined (defined states whose successors are all
 * defined). Every state reachable from d0 must be defined.
 */
inline VTable policy_value(const TabularMdp& mdp, const StochasticPolicy& pi) {
  detail::check_policy_shape(mdp, pi);
  const std::size_t n = mdp.n_states();

  std::vector<std::vector<double>> mass(n);
  for (std::size_t s = 0; s < n; ++s)
    if (!pi[s].empty()) mass[s] = detail::successor_mass(mdp, pi, s);

  // States reachable from d0 under pi must be defined.
  std::vector<std::uint8_t> seen(n, 0);
  std::queue<std::size_t> frontier;
  for (std::size_t s = 0; s < n; ++s)
    if (mdp.d0()[s] > 0.0) {
      seen[s] = 1;
      frontier.push(s);
    }
  while (!frontier.empty()) {
    const std::size_t s = frontier.front();
    frontier.pop();
    if (pi[s].empty()) throw std::invalid_argument("policy undefined on reachable state " + std::to_string(s));
    for (std::size_t s2 = 0; s2 < n; ++s2)
      if (mass[s][s2] > 0.0 && !seen[s2]) {
        seen[s2] = 1;
        frontier.push(s2);
      }
  }

  // Greatest set of defined states closed under successors.
  std::vector<std::uint8_t> ok(n, 0);
  for (std::size_t s = 0; s < n; ++s) ok[s] = !pi[s].empty();
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t s = 0; s < n; ++s) {
      if (!ok[s]) continue;
      for (std::size_t s2 = 0; s2 < n; ++s2)
        if (mass[s][s2] > 0.0 && !ok[s2]) {
          ok[s] = 0;
          changed = true;
          break;
        }
    }
  }

  std::vector<std::size_t> index(n, n), states;
  for (std::size_t s = 0; s < n; ++s)
    if (ok[s]) {
      index[s] = states.size();
      states.push_back(s);
    }
  const auto m = static_cast<Eigen::Index>(states.size());
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(m, m);
  Eigen::VectorXd rhs(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::size_t s = states[static_cast<std::size_t>(i)];
    double r = 0.0;
    for (std::size_t a = 0; a < mdp.n_actions(); ++a) r += pi[s][a] * mdp.reward(s, a);
    rhs(i) = r;
    for (std::size_t s2 = 0; s2 < n; ++s2)
      if (mass[s][s2] > 0.0) lhs(i, static_cast<Eigen::Index>(index[s2])) -= mdp.gamma() * mass[s][s2];
  }
  Eigen::VectorXd v = lhs.partialPivLu().solve(rhs);
  // One refinement step keeps the Bellman residual well under 1e-10.
  v += lhs.partialPivLu().solve(rhs - lhs * v);

  VTable out(n);
  for (Eigen::Index i = 0; i < m; ++i) out.set(states[static_cast<std::size_t>(i)], v(i));
  return out;
}

inline VTable policy_value(const TabularMdp& mdp, const DeterministicPolicy& pi) {
  return policy_value(mdp, to_stochastic(pi, mdp.n_actions()));
}

/// J(pi) = sum_s d0(s) V^pi(s).
inline double policy_return(const TabularMdp& mdp, const StochasticPolicy& pi) {
  const VTable v = policy_value(mdp, pi);
  double j = 0.0;
  for (std::size_t s = 0; s < mdp.n_states(); ++s)
    if (mdp.d0()[s] > 0.0) j += mdp.d0()[s] * v[s];
  return j;
}

inline double policy_return(const TabularMdp& mdp, const DeterministicPolicy& pi) {
  return policy_return(mdp, to_stochastic(pi, mdp.n_actions()));
}

}  // namespace dmg
