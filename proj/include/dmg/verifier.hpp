#pragma once

// Executable checks of the operator theorems over seeded random instances.
// Every claim is phrased as lhs <= rhs; a violation is recorded when
// rhs - lhs < -kTheoremSlack, or when an exactness requirement fails.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmg/instances.hpp"
#include "dmg/mdp.hpp"
#include "dmg/operators.hpp"

namespace dmg {

inline constexpr double kTheoremSlack = 1e-9;
inline constexpr double kVerifierFixedPointTol = 1e-12;

enum class TheoremId { lemma1, thm2, thm3, thm4, thm5 };

inline const char* to_string(TheoremId id) {
  switch (id) {
    case TheoremId::lemma1: return "lemma1";
    case TheoremId::thm2: return "thm2";
    case TheoremId::thm3: return "thm3";
    case TheoremId::thm4: return "thm4";
    case TheoremId::thm5: return "thm5";
  }
  return "unknown";
}

inline std::optional<TheoremId> theorem_from_string(const std::string& name) {
  for (TheoremId id : {TheoremId::lemma1, TheoremId::thm2, TheoremId::thm3, TheoremId::thm4, TheoremId::thm5})
    if (name == to_string(id)) return id;
  return std::nullopt;
}

struct Violation {
  std::uint64_t seed = 0;
  std::string location;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  ///< rhs - lhs
};

struct TheoremReport {
  TheoremId theorem_id = TheoremId::lemma1;
  bool passed = true;
  std::size_t instances_checked = 0;
  std::vector<Violation> violations;
  nlohmann::ordered_json extras = nlohmann::ordered_json::object();
  std::string note;
};

inline nlohmann::ordered_json to_json(const Violation& v) {
  nlohmann::ordered_json j;
  j["seed"] = v.seed;
  j["location"] = v.location;
  j["lhs"] = v.lhs;
  j["rhs"] = v.rhs;
  j["slack"] = v.slack;
  return j;
}

inline nlohmann::ordered_json to_json(const TheoremReport& r) {
  nlohmann::ordered_json j;
  j["theorem_id"] = to_string(r.theorem_id);
  j["passed"] = r.passed;
  j["instances_checked"] = r.instances_checked;
  j["violations"] = nlohmann::ordered_json::array();
  for (const auto& v : r.violations) j["violations"].push_back(to_json(v));
  j["extras"] = r.extras;
  if (!r.note.empty()) j["note"] = r.note;
  return j;
}

struct VerifyOptions {
  std::uint64_t seed = 1;
  std::size_t trials = 200;
  /// Random function pairs per instance for the contraction checks.
  std::size_t pairs = 50;
  double eps_a = kGridSpacing;
  double lambda = 0.25;
  double k_q = 1.0;
  /// Only reported (reference scale of the lower-bound constant).
  double k_p = 1.0;
  std::size_t k = 100;
  std::vector<double> eps_sweep = {0.4, 0.2, 0.1, 0.05};
  InstanceOptions instance;
  /// Negative-control hook: operators use this mixture coefficient instead of `lambda`.
  std::optional<double> corrupt_lambda;

  double operator_lambda() const { return corrupt_lambda.value_or(lambda); }
};

/// Defaults used by each suite (instance family and sizes).
inline VerifyOptions default_verify_options(TheoremId id, std::uint64_t seed = 1) {
  VerifyOptions o;
  o.seed = seed;
  switch (id) {
    case TheoremId::lemma1:
    case TheoremId::thm2:
      o.trials = 200;
      break;
    case TheoremId::thm3:
      o.trials = 200;
      o.eps_a = 0.3;
      break;
    case TheoremId::thm4:
      o.trials = 100;
      break;
    case TheoremId::thm5:
      // Smooth dynamics over a fine action line; one data action per state,
      // away from both ends so every widened level is two-sided.
      o.trials = 50;
      o.instance.lipschitz_dynamics = true;
      o.instance.layout = EmbeddingLayout::grid;
      o.instance.grid_spacing = 1.0 / 4096.0;
      o.instance.min_actions = 4097;
      o.instance.max_actions = 4097;
      o.instance.singleton_fraction = 1.0;
      o.instance.max_support = 1;
      o.instance.data_margin = 8;
      o.eps_sweep.clear();
      for (double m : {8.0, 4.0, 2.0, 1.0}) o.eps_sweep.push_back(m * o.instance.grid_spacing);
      break;
  }
  return o;
}

namespace detail {

struct CheckContext {
  std::vector<Violation>* out;
  std::uint64_t seed;

  /// Records lhs <= rhs (+ slack tolerance).
  void leq(const std::string& where, double lhs, double rhs) const {
    const double slack = rhs - lhs;
    if (!(slack >= -kTheoremSlack)) out->push_back({seed, where, lhs, rhs, slack});
  }
  void exact(const std::string& where, double lhs, double rhs) const {
    if (!(lhs == rhs)) out->push_back({seed, where, lhs, rhs, rhs - lhs});
  }
};

inline std::string sa(std::size_t s, std::size_t a) {
  return "(s=" + std::to_string(s) + ",a=" + std::to_string(a) + ")";
}

inline QTable random_qtable(const ActionSupport& domain, std::size_t n_actions, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  QTable q(domain.size(), n_actions);
  for (std::size_t s = 0; s < domain.size(); ++s)
    for (std::size_t a : domain[s]) q.set(s, a, u(rng));
  return q;
}

/// Running statistics a suite accumulates into its extras.
struct SuiteStats {
  double max_ratio = 0.0;
  double max_gain = 0.0;
  double sum_gain = 0.0;
  std::size_t strict_gain_instances = 0;
  double max_tightness = 0.0;
  double max_abs_difference = 0.0;
  double c_hat = 0.0;
  double max_epsilon_d = 0.0;
  double sum_epsilon_d = 0.0;
  double max_slack = 0.0;
  std::size_t instances = 0;
};

inline FixedPointReport dmg_fixed_point(const TabularMdp& mdp, const MildlyGeneralizedPolicy& beta_tilde, double lambda) {
  const ActionSupport& domain = beta_tilde.supports();
  return iterate_to_fixed_point(
      [&](const QTable& q) { return backup_dmg_unchecked(mdp, q, beta_tilde, lambda, domain); }, domain,
      QTable::on_support(mdp.n_actions(), domain), kVerifierFixedPointTol, 100000);
}

inline FixedPointReport in_sample_fixed_point(const TabularMdp& mdp, const EmpiricalBehaviorPolicy& beta_hat) {
  return value_iteration(mdp, InSampleBackup{beta_hat}, QTable::on_support(mdp.n_actions(), beta_hat.supports()),
                         kVerifierFixedPointTol);
}

inline void check_contraction_instance(const Instance& inst, bool dmg, const VerifyOptions& opt, const CheckContext& ctx,
                                       SuiteStats& stats) {
  const TabularMdp& mdp = inst.mdp;
  const auto beta_tilde = build_mildly_generalized(inst.beta_hat, opt.eps_a, mdp);
  const ActionSupport& domain = dmg ? beta_tilde.supports() : inst.beta_hat.supports();
  const double lambda = opt.operator_lambda();
  Rng rng(inst.seed ^ 0xC0FFEEull);
  auto apply = [&](const QTable& f) {
    return dmg ? backup_dmg_unchecked(mdp, f, beta_tilde, lambda, domain) : backup_in_sample(mdp, f, inst.beta_hat);
  };
  for (std::size_t j = 0; j < opt.pairs; ++j) {
    const QTable f1 = random_qtable(domain, mdp.n_actions(), mdp.q_max(), rng);
    const QTable f2 = random_qtable(domain, mdp.n_actions(), mdp.q_max(), rng);
    const double lhs = sup_distance(apply(f1), apply(f2), domain);
    const double gap = sup_distance(f1, f2, domain);
    if (gap > 0.0) stats.max_ratio = std::max(stats.max_ratio, lhs / gap);
    ctx.leq("pair " + std::to_string(j), lhs, mdp.gamma() * gap);
  }
}

inline void check_dominance_instance(const Instance& inst, const VerifyOptions& opt, const CheckContext& ctx,
                                     SuiteStats& stats) {
  const TabularMdp& mdp = inst.mdp;
  const auto beta_tilde = build_mildly_generalized(inst.beta_hat, opt.eps_a, mdp);
  const auto in = in_sample_fixed_point(mdp, inst.beta_hat);
  const auto dm = dmg_fixed_point(mdp, beta_tilde, opt.operator_lambda());
  if (!dm.ok()) {
    ctx.leq(std::string("dmg fixed point ") + to_string(dm.status), dm.residual, kVerifierFixedPointTol);
    return;
  }
  const auto pi_in = extract_greedy(in.q_star, inst.beta_hat.supports());
  const auto pi_dmg = extract_greedy(dm.q_star, beta_tilde.supports());
  const VTable v_in = policy_value(mdp, pi_in);
  const VTable v_dmg = policy_value(mdp, pi_dmg);
  double gain = 0.0;
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    if (!inst.beta_hat.covers(s)) continue;
    ctx.leq("state " + std::to_string(s), v_in[s], v_dmg[s]);
    gain = std::max(gain, v_dmg[s] - v_in[s]);
  }
  stats.max_gain = std::max(stats.max_gain, gain);
  stats.sum_gain += gain;
  if (gain > kTheoremSlack) ++stats.strict_gain_instances;
}

inline void check_sandwich_instance(const Instance& inst, const VerifyOptions& opt, const CheckContext& ctx,
                                    SuiteStats& stats) {
  const TabularMdp& mdp = inst.mdp;
  const auto beta_tilde = build_mildly_generalized(inst.beta_hat, opt.eps_a, mdp);
  const ActionSupport& data = inst.beta_hat.supports();
  Rng rng(inst.seed ^ 0x5A4D17ull);
  const QTable q0 = random_qtable(data, mdp.n_actions(), mdp.q_max(), rng);
  const double lambda = opt.operator_lambda();
  const double g = mdp.gamma();
  QTable q_in = q0, q_hat = q0;
  double tightness = 0.0;
  for (std::size_t i = 1; i <= opt.k; ++i) {
    q_in = backup_in_sample(mdp, q_in, inst.beta_hat);
    q_hat = worst_case_backup(mdp, beta_tilde, lambda, opt.k_q, q_hat);
    const double bound = opt.lambda * opt.eps_a * opt.k_q * g * (1.0 - std::pow(g, static_cast<double>(i))) / (1.0 - g);
    double attained = 0.0;
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
      for (std::size_t a : data[s]) {
        const std::string where = "step " + std::to_string(i) + " " + sa(s, a);
        ctx.leq(where + " lower", q_in.at(s, a), q_hat.at(s, a));
        ctx.leq(where + " upper", q_hat.at(s, a), q_in.at(s, a) + bound);
        if (opt.lambda == 0.0 || opt.k_q == 0.0) ctx.exact(where + " collapse", q_hat.at(s, a), q_in.at(s, a));
        attained = std::max(attained, q_hat.at(s, a) - q_in.at(s, a));
        stats.max_abs_difference = std::max(stats.max_abs_difference, std::abs(q_hat.at(s, a) - q_in.at(s, a)));
      }
    if (i == opt.k && bound > 0.0) tightness = attained / bound;
  }
  stats.max_tightness = std::max(stats.max_tightness, tightness);
}

/// Greedy policy of the worst-case fixed point over the widened support.
inline DeterministicPolicy worst_case_policy(const Instance& inst, double eps_a, double lambda, double k_q) {
  const TabularMdp& mdp = inst.mdp;
  const auto beta_tilde = build_mildly_generalized(inst.beta_hat, eps_a, mdp);
  const ActionSupport& data = inst.beta_hat.supports();
  const auto fp = worst_case_fixed_point(mdp, beta_tilde, lambda, k_q, QTable::on_support(mdp.n_actions(), data),
                                         kVerifierFixedPointTol);
  if (!fp.ok()) throw std::runtime_error(std::string("worst-case iteration ") + to_string(fp.status));
  const QTable extended = lipschitz_extension(mdp, fp.q_star, data, k_q, beta_tilde.supports());
  return extract_greedy(extended, beta_tilde.supports());
}

inline void check_lower_bound_instance(const Instance& inst, const VerifyOptions& opt, const CheckContext& ctx,
                                       SuiteStats& stats) {
  const TabularMdp& mdp = inst.mdp;
  const auto in = in_sample_fixed_point(mdp, inst.beta_hat);
  const double j_in = policy_return(mdp, extract_greedy(in.q_star, inst.beta_hat.supports()));
  const double j_star = policy_return(mdp, optimal_policy(mdp));
  stats.max_epsilon_d = std::max(stats.max_epsilon_d, j_star - j_in);
  stats.sum_epsilon_d += j_star - j_in;

  const double lambda = opt.operator_lambda();
  std::optional<double> prev;
  for (std::size_t i = 0; i < opt.eps_sweep.size(); ++i) {
    const double eps = opt.eps_sweep[i];
    const double j_hat = policy_return(mdp, worst_case_policy(inst, eps, lambda, opt.k_q));
    const double slack = std::max(0.0, j_in - j_hat);
    stats.max_slack = std::max(stats.max_slack, slack);
    if (eps > 0.0) stats.c_hat = std::max(stats.c_hat, slack / eps);
    if (prev) ctx.leq("eps " + std::to_string(opt.eps_sweep[i - 1]) + " -> " + std::to_string(eps), slack, *prev);
    prev = slack;
  }
  const double j_zero = policy_return(mdp, worst_case_policy(inst, 0.0, lambda, opt.k_q));
  ctx.exact("eps 0", j_zero, j_in);
}

inline std::vector<Violation> check_instance(TheoremId id, const VerifyOptions& opt, std::uint64_t seed,
                                             SuiteStats& stats) {
  std::vector<Violation> out;
  const CheckContext ctx{&out, seed};
  const Instance inst = generate_instance(opt.instance, seed);
  switch (id) {
    case TheoremId::lemma1: check_contraction_instance(inst, false, opt, ctx, stats); break;
    case TheoremId::thm2: check_contraction_instance(inst, true, opt, ctx, stats); break;
    case TheoremId::thm3: check_dominance_instance(inst, opt, ctx, stats); break;
    case TheoremId::thm4: check_sandwich_instance(inst, opt, ctx, stats); break;
    case TheoremId::thm5: check_lower_bound_instance(inst, opt, ctx, stats); break;
  }
  ++stats.instances;
  return out;
}

inline void validate(const VerifyOptions& opt, TheoremId id) {
  if (opt.trials < 1) throw std::invalid_argument("verify: trials must be >= 1");
  if (!(opt.eps_a >= 0.0)) throw std::invalid_argument("verify: eps_a must be >= 0");
  if (!(opt.k_q >= 0.0)) throw std::invalid_argument("verify: K_Q must be >= 0");
  if (!(opt.lambda >= 0.0 && opt.lambda <= 1.0)) throw std::invalid_argument("verify: lambda must lie in [0,1]");
  if (id == TheoremId::thm5) {
    if (opt.eps_sweep.empty()) throw std::invalid_argument("verify: eps sweep is empty");
    for (std::size_t i = 0; i < opt.eps_sweep.size(); ++i)
      if (!(opt.eps_sweep[i] > 0.0) || (i > 0 && !(opt.eps_sweep[i] < opt.eps_sweep[i - 1])))
        throw std::invalid_argument("verify: eps sweep must be positive and strictly decreasing");
  }
}

}  // namespace detail

/// Runs one theorem check over `opt.trials` instances derived from `opt.seed`.
inline TheoremReport run_theorem_check(TheoremId id, const VerifyOptions& opt) {
  detail::validate(opt, id);
  TheoremReport report;
  report.theorem_id = id;
  detail::SuiteStats stats;
  for (std::size_t i = 0; i < opt.trials; ++i) {
    auto v = detail::check_instance(id, opt, instance_seed(opt.seed, i), stats);
    report.violations.insert(report.violations.end(), v.begin(), v.end());
  }
  report.instances_checked = stats.instances;
  report.passed = report.violations.empty();

  auto& x = report.extras;
  x["base_seed"] = opt.seed;
  x["gamma"] = opt.instance.gamma;
  if (opt.corrupt_lambda) x["corrupt_lambda"] = *opt.corrupt_lambda;
  switch (id) {
    case TheoremId::lemma1:
    case TheoremId::thm2:
      x["pairs_per_instance"] = opt.pairs;
      if (id == TheoremId::thm2) {
        x["eps_a"] = opt.eps_a;
        x["lambda"] = opt.lambda;
      }
      x["max_ratio"] = stats.max_ratio;
      break;
    case TheoremId::thm3:
      x["eps_a"] = opt.eps_a;
      x["lambda"] = opt.lambda;
      x["max_value_gain"] = stats.max_gain;
      x["mean_value_gain"] = stats.sum_gain / static_cast<double>(std::max<std::size_t>(1, stats.instances));
      x["strict_gain_instances"] = stats.strict_gain_instances;
      break;
    case TheoremId::thm4:
      x["eps_a"] = opt.eps_a;
      x["lambda"] = opt.lambda;
      x["k_q"] = opt.k_q;
      x["k"] = opt.k;
      x["max_tightness"] = stats.max_tightness;
      x["max_abs_difference"] = stats.max_abs_difference;
      break;
    case TheoremId::thm5: {
      x["lambda"] = opt.lambda;
      x["k_q"] = opt.k_q;
      x["eps_sweep"] = opt.eps_sweep;
      x["c_hat"] = stats.c_hat;
      x["max_slack"] = stats.max_slack;
      x["max_epsilon_d"] = stats.max_epsilon_d;
      x["mean_epsilon_d"] = stats.sum_epsilon_d / static_cast<double>(std::max<std::size_t>(1, stats.instances));
      x["reference_scale_kp_rmax_over_1mg"] = opt.k_p * opt.instance.r_max / (1.0 - opt.instance.gamma);
      report.note =
          "lower bound checked as a trend: slack non-increasing along the eps sweep and zero at eps=0; "
          "the constant of the bound is not asserted, c_hat is the measured max slack/eps";
      break;
    }
  }
  return report;
}

/// Re-evaluates the instance behind `v` and returns the matching violation if it still occurs.
inline std::optional<Violation> replay_violation(TheoremId id, const VerifyOptions& opt, const Violation& v) {
  detail::SuiteStats stats;
  for (auto& w : detail::check_instance(id, opt, v.seed, stats))
    if (w.location == v.location) return w;
  return std::nullopt;
}

}  // namespace dmg
