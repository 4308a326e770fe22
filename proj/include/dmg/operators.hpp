#pragma once

// Exact Bellman backups (generic T_u, in-sample T_In, doubly mild T_DMG),
// fixed-point iteration, greedy extraction and the maximal Lipschitz
// extension used to model worst-case generalization.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "dmg/mdp.hpp"

namespace dmg {

namespace detail {

/// max over `support` of q(s, .); rejects empty supports and missing entries.
inline double support_max(const QTable& q, std::size_t s, const ActionSet& support) {
  if (support.empty()) throw std::invalid_argument("no action support at next state s'=" + std::to_string(s));
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t a : support) {
    if (!q.has(s, a))
      throw std::invalid_argument("Q is missing the entry required at (s'=" + std::to_string(s) + ", a'=" + std::to_string(a) + ")");
    best = std::max(best, q.at(s, a));
  }
  return best;
}

/**
 * (T Q)(s,a) = R(s,a) + gamma * sum_{s'} P(s'|s,a) next[s'] for every (s,a)
 * in `domain`. `next` holds the bootstrap value per state; states flagged
 * unusable may not be reached with positive probability.
 */
inline QTable bellman_backup(const TabularMdp& mdp, const ActionSupport& domain, const std::vector<double>& next,
                             const std::vector<std::uint8_t>& usable) {
  if (domain.size() != mdp.n_states()) throw std::invalid_argument("backup domain has wrong number of states");
  QTable out(mdp.n_states(), mdp.n_actions());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    for (std::size_t a : domain[s]) {
      const auto p = mdp.next_distribution(s, a);
      double expect = 0.0;
      for (std::size_t s2 = 0; s2 < mdp.n_states(); ++s2) {
        if (p[s2] <= 0.0) continue;
        if (!usable[s2])
          throw std::invalid_argument("backup at (s=" + std::to_string(s) + ", a=" + std::to_string(a) +
                                      ") reaches next state s'=" + std::to_string(s2) + " which has no action support");
        expect += p[s2] * next[s2];
      }
      out.set(s, a, mdp.reward(s, a) + mdp.gamma() * expect);
    }
  }
  return out;
}

/// Per-state support maxima for every state with a non-empty support.
inline void support_maxima(const QTable& q, const ActionSupport& support, std::vector<double>& value,
                           std::vector<std::uint8_t>& usable) {
  value.assign(support.size(), 0.0);
  usable.assign(support.size(), 0);
  for (std::size_t s = 0; s < support.size(); ++s) {
    if (support[s].empty()) continue;
    value[s] = support_max(q, s, support[s]);
    usable[s] = 1;
  }
}

inline ActionSupport support_of(const StochasticPolicy& u) {
  ActionSupport out(u.size());
  for (std::size_t s = 0; s < u.size(); ++s)
    for (std::size_t a = 0; a < u[s].size(); ++a)
      if (u[s][a] > 0.0) out[s].push_back(a);
  return out;
}

/// T_DMG without the lambda range check (used by negative-control hooks).
inline QTable backup_dmg_unchecked(const TabularMdp& mdp, const QTable& q, const MildlyGeneralizedPolicy& beta_tilde,
                                   double lambda, const ActionSupport& domain) {
  std::vector<double> wide, narrow;
  std::vector<std::uint8_t> wide_ok, narrow_ok;
  support_maxima(q, beta_tilde.supports(), wide, wide_ok);
  support_maxima(q, beta_tilde.base().supports(), narrow, narrow_ok);
  std::vector<double> next(wide.size());
  for (std::size_t s = 0; s < next.size(); ++s)
    next[s] = wide[s] == narrow[s] ? narrow[s] : lambda * wide[s] + (1.0 - lambda) * narrow[s];
  return bellman_backup(mdp, domain, next, narrow_ok);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backups

/// T_u Q on `domain`, maximizing over supp(u(.|s')).
inline QTable backup_generic(const TabularMdp& mdp, const QTable& q, const StochasticPolicy& u,
                             const ActionSupport& domain) {
  if (u.size() != mdp.n_states()) throw std::invalid_argument("backup_generic: u has wrong number of states");
  std::vector<double> next;
  std::vector<std::uint8_t> usable;
  detail::support_maxima(q, detail::support_of(u), next, usable);
  return detail::bellman_backup(mdp, domain, next, usable);
}

/// T_u Q evaluated on the support of u.
inline QTable backup_generic(const TabularMdp& mdp, const QTable& q, const StochasticPolicy& u) {
  return backup_generic(mdp, q, u, detail::support_of(u));
}

inline QTable backup_in_sample(const TabularMdp& mdp, const QTable& q, const EmpiricalBehaviorPolicy& beta_hat,
                               const ActionSupport& domain) {
  std::vector<double> next;
  std::vector<std::uint8_t> usable;
  detail::support_maxima(q, beta_hat.supports(), next, usable);
  return detail::bellman_backup(mdp, domain, next, usable);
}

/// T_In Q on the in-sample area beta_hat(a|s) > 0.
inline QTable backup_in_sample(const TabularMdp& mdp, const QTable& q, const EmpiricalBehaviorPolicy& beta_hat) {
  return backup_in_sample(mdp, q, beta_hat, beta_hat.supports());
}

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0,1]");
}

inline QTable backup_dmg(const TabularMdp& mdp, const QTable& q, const MildlyGeneralizedPolicy& beta_tilde,
                         double lambda, const ActionSupport& domain) {
  check_lambda(lambda);
  return detail::backup_dmg_unchecked(mdp, q, beta_tilde, lambda, domain);
}

/// T_DMG Q on the mild generalization area beta_tilde(a|s) > 0.
inline QTable backup_dmg(const TabularMdp& mdp, const QTable& q, const MildlyGeneralizedPolicy& beta_tilde,
                         double lambda) {
  return backup_dmg(mdp, q, beta_tilde, lambda, beta_tilde.supports());
}

// ---------------------------------------------------------------------------
// Backup specs and fixed points

struct GenericBackup {
  StochasticPolicy u;
};
struct InSampleBackup {
  EmpiricalBehaviorPolicy beta_hat;
};
struct DmgBackup {
  MildlyGeneralizedPolicy beta_tilde;
  double lambda = 0.25;
};
using BackupSpec = std::variant<GenericBackup, InSampleBackup, DmgBackup>;

/// Area on which the operator is defined (and on which it iterates).
inline ActionSupport backup_domain(const BackupSpec& spec) {
  struct Visitor {
    ActionSupport operator()(const GenericBackup& b) const { return detail::support_of(b.u); }
    ActionSupport operator()(const InSampleBackup& b) const { return b.beta_hat.supports(); }
    ActionSupport operator()(const DmgBackup& b) const { return b.beta_tilde.supports(); }
  };
  return std::visit(Visitor{}, spec);
}

inline QTable apply_backup(const TabularMdp& mdp, const BackupSpec& spec, const QTable& q) {
  struct Visitor {
    const TabularMdp& mdp;
    const QTable& q;
    QTable operator()(const GenericBackup& b) const { return backup_generic(mdp, q, b.u); }
    QTable operator()(const InSampleBackup& b) const { return backup_in_sample(mdp, q, b.beta_hat); }
    QTable operator()(const DmgBackup& b) const { return backup_dmg(mdp, q, b.beta_tilde, b.lambda); }
  };
  return std::visit(Visitor{mdp, q}, spec);
}

enum class FixedPointStatus { converged, max_iterations, diverged };

inline const char* to_string(FixedPointStatus s) {
  switch (s) {
    case FixedPointStatus::converged: return "converged";
    case FixedPointStatus::max_iterations: return "max_iterations";
    case FixedPointStatus::diverged: return "diverged";
  }
  return "unknown";
}

struct FixedPointReport {
  QTable q_star;
  std::size_t iterations = 0;
  /// Final ||T Q - Q||_inf on the operator's domain.
  double residual = std::numeric_limits<double>::infinity();
  FixedPointStatus status = FixedPointStatus::max_iterations;
  std::vector<double> residual_trace;

  bool ok() const { return status == FixedPointStatus::converged; }
};

inline constexpr double kDefaultFixedPointTol = 1e-8;
inline constexpr std::size_t kDivergenceRun = 10;

namespace detail {

/// Iterates q <- step(q) until the sup-norm change drops to tol.
template <class Step>
FixedPointReport iterate_to_fixed_point(Step&& step, const ActionSupport& domain, QTable q, double tol,
                                        std::size_t max_iter) {
  if (!(tol > 0.0)) throw std::invalid_argument("value_iteration: tol must be > 0");
  FixedPointReport report;
  std::size_t growth_run = 0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    QTable next = step(q);
    const double residual = sup_distance(next, q, domain);
    if (!report.residual_trace.empty() && residual > report.residual_trace.back())
      ++growth_run;
    else
      growth_run = 0;
    report.residual_trace.push_back(residual);
    report.iterations = it + 1;
    report.residual = residual;
    q = std::move(next);
    if (residual <= tol) {
      report.status = FixedPointStatus::converged;
      break;
    }
    if (growth_run >= kDivergenceRun || !std::isfinite(residual)) {
      report.status = FixedPointStatus::diverged;
      break;
    }
  }
  report.q_star = std::move(q);
  return report;
}

}  // namespace detail

/**
 * Repeated application of the backup in `spec` starting from q0, which must
 * be defined on the operator's domain. Divergence (ten consecutive residual
 * increases) is reported through the status, not thrown.
 */
inline FixedPointReport value_iteration(const TabularMdp& mdp, const BackupSpec& spec, const QTable& q0,
                                        double tol = kDefaultFixedPointTol, std::size_t max_iter = 100000) {
  const ActionSupport domain = backup_domain(spec);
  return detail::iterate_to_fixed_point([&](const QTable& q) { return apply_backup(mdp, spec, q); }, domain, q0, tol,
                                        max_iter);
}

/// argmax over support(s) of Q(s, .), ties to the lowest action id.
inline DeterministicPolicy extract_greedy(const QTable& q, const ActionSupport& support) {
  DeterministicPolicy pi(support.size());
  for (std::size_t s = 0; s < support.size(); ++s) {
    if (support[s].empty()) throw std::invalid_argument("extract_greedy: empty support at state " + std::to_string(s));
    std::size_t best = support[s].front();
    double best_v = q.at(s, best);
    for (std::size_t a : support[s]) {
      const double v = q.at(s, a);
      if (v > best_v || (v == best_v && a < best)) {
        best_v = v;
        best = a;
      }
    }
    pi[s] = best;
  }
  return pi;
}

/// Greedy policy of an unrestricted optimal Q over every action.
inline DeterministicPolicy optimal_policy(const TabularMdp& mdp, double tol = 1e-12) {
  const ActionSupport all = mdp.full_support();
  StochasticPolicy uniform(mdp.n_states(), std::vector<double>(mdp.n_actions(), 1.0 / static_cast<double>(mdp.n_actions())));
  const auto report = value_iteration(mdp, GenericBackup{uniform}, QTable::on_support(mdp.n_actions(), all), tol);
  return extract_greedy(report.q_star, all);
}

// ---------------------------------------------------------------------------
// Worst-case generalization

/**
 * Maximal K_Q-Lipschitz extension of in-sample values onto `targets`.
 *
 * In-sample entries keep their values; every other target receives
 * min over in-sample a of Q(s,a) + K_Q * ||embed(target) - embed(a)||, the
 * pointwise largest value consistent with a K_Q-Lipschitz Q. The result is
 * K_Q-Lipschitz whenever the in-sample values already are.
 */
inline QTable lipschitz_extension(const TabularMdp& mdp, const QTable& q, const ActionSupport& data_support, double k_q,
                                  const ActionSupport& targets) {
  if (!(k_q >= 0.0)) throw std::invalid_argument("lipschitz_extension: K_Q must be >= 0");
  if (targets.size() != mdp.n_states() || data_support.size() != mdp.n_states())
    throw std::invalid_argument("lipschitz_extension: support has wrong number of states");
  QTable out(mdp.n_states(), mdp.n_actions());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    const ActionSet& data = data_support[s];
    for (std::size_t a : data) out.set(s, a, q.at(s, a));
    for (std::size_t target : targets[s]) {
      if (contains(data, target)) continue;
      if (data.empty())
        throw std::invalid_argument("lipschitz_extension: state " + std::to_string(s) + " has targets but no in-sample actions");
      double v = std::numeric_limits<double>::infinity();
      for (std::size_t a : data) v = std::min(v, q.at(s, a) + k_q * mdp.action_distance(target, a));
      out.set(s, target, v);
    }
  }
  return out;
}

/// One worst-case step: T_DMG on the in-sample area with out-of-sample values
/// supplied by the maximal Lipschitz extension of `q`.
inline QTable worst_case_backup(const TabularMdp& mdp, const MildlyGeneralizedPolicy& beta_tilde, double lambda,
                                double k_q, const QTable& q) {
  const ActionSupport& data = beta_tilde.base().supports();
  const QTable extended = lipschitz_extension(mdp, q, data, k_q, beta_tilde.supports());
  return detail::backup_dmg_unchecked(mdp, extended, beta_tilde, lambda, data);
}

/// Q^1..Q^k of the worst-case iteration, each on the in-sample area.
inline std::vector<QTable> iterate_worst_case(const TabularMdp& mdp, const MildlyGeneralizedPolicy& beta_tilde,
                                              double lambda, double k_q, const QTable& q0, std::size_t k) {
  check_lambda(lambda);
  std::vector<QTable> out;
  out.reserve(k);
  QTable q = q0;
  for (std::size_t i = 0; i < k; ++i) {
    q = worst_case_backup(mdp, beta_tilde, lambda, k_q, q);
    out.push_back(q);
  }
  return out;
}

/// Worst-case iteration run to its fixed point.
inline FixedPointReport worst_case_fixed_point(const TabularMdp& mdp, const MildlyGeneralizedPolicy& beta_tilde,
                                               double lambda, double k_q, const QTable& q0,
                                               double tol = kDefaultFixedPointTol, std::size_t max_iter = 100000) {
  check_lambda(lambda);
  return detail::iterate_to_fixed_point(
      [&](const QTable& q) { return worst_case_backup(mdp, beta_tilde, lambda, k_q, q); },
      beta_tilde.base().supports(), q0, tol, max_iter);
}

// ---------------------------------------------------------------------------
// CSV

/// Writes "state,action,value" rows for every defined entry.
inline void write_qtable_csv(std::ostream& out, const QTable& q) {
  out << "state,action,value\n";
  char buf[64];
  for (std::size_t s = 0; s < q.n_states(); ++s)
    for (std::size_t a = 0; a < q.n_actions(); ++a)
      if (q.has(s, a)) {
        std::snprintf(buf, sizeof buf, "%.17g", q.at(s, a));
        out << s << ',' << a << ',' << buf << '\n';
      }
}

}  // namespace dmg
