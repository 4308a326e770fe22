// One PASS/FAIL line per acceptance criterion. Optional arguments select
// criteria by number, e.g. `dmg_lab_acceptance 1 7 12`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "agent_checks.hpp"
#include "dmg/cli.hpp"
#include "dmg/operators.hpp"
#include "dmg/verifier.hpp"

using namespace dmg;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kRatioSlack = 1e-9;
constexpr double kContractionBudget = 60.0;
constexpr double kSandwichBudget = 120.0;
constexpr double kProbeBudget = 60.0;
constexpr double kExpectileTol = 1e-2;
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradConfigs = 100;
constexpr std::size_t kCollapseConfigs = 100;
constexpr double kChainQTol = 1e-2;
constexpr double kChainBudget = 60.0;
constexpr double kAblationBudget = 20.0 * 60.0;
constexpr double kScheduleTol = 1e-12;
constexpr std::size_t kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double max_ratio(const TheoremReport& r) { return r.extras.value("max_ratio", 0.0); }

Outcome contraction() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto in = run_theorem_check(TheoremId::lemma1, default_verify_options(TheoremId::lemma1, 1));
  const auto dm = run_theorem_check(TheoremId::thm2, default_verify_options(TheoremId::thm2, 1));
  const double gamma = default_verify_options(TheoremId::lemma1).instance.gamma;
  const double t = seconds_since(t0);
  const bool ok = in.passed && dm.passed && max_ratio(in) <= gamma + kRatioSlack && max_ratio(dm) <= gamma + kRatioSlack &&
                  in.instances_checked == 200 && dm.instances_checked == 200 && t < kContractionBudget;
  return {ok, fmt("200 MDPs x 50 pairs; max ratio in-sample %.6f, DMG %.6f (gamma %.2f); %.1f s", max_ratio(in),
                  max_ratio(dm), gamma, t)};
}

Outcome dominance() {
  const auto r = run_theorem_check(TheoremId::thm3, default_verify_options(TheoremId::thm3, 1));
  TabularEnv env = make_chain_env(0.5, 16);
  DatasetOptions o;
  o.behavior.kind = BehaviorKind::fixed;
  o.behavior.fixed_action = kChainStay;
  o.n = 200;
  const auto bh = build_empirical_behavior(generate_dataset(env, o), env.mdp());
  const auto bt = build_mildly_generalized(bh, 1.0, env.mdp());
  const auto in = value_iteration(env.mdp(), InSampleBackup{bh}, QTable::on_support(2, bh.supports()), 1e-13);
  const auto dm = value_iteration(env.mdp(), DmgBackup{bt, 0.25}, QTable::on_support(2, bt.supports()), 1e-13);
  const double v_in = policy_value(env.mdp(), extract_greedy(in.q_star, bh.supports()))[0];
  const double v_dmg = policy_value(env.mdp(), extract_greedy(dm.q_star, bt.supports()))[0];
  const bool chain_ok = std::abs(v_in) < 1e-12 && std::abs(v_dmg - 1.0) < 1e-12;
  return {r.passed && r.instances_checked == 200 && chain_ok,
          fmt("%zu MDPs, %zu violations, %d with strict gain; chain V(s0) in-sample %.3g vs DMG %.3g",
              r.instances_checked, r.violations.size(), r.extras.value("strict_gain_instances", 0), v_in, v_dmg)};
}

Outcome sandwich() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string d;
  for (double l : {0.0, 0.25, 1.0}) {
    VerifyOptions o = default_verify_options(TheoremId::thm4, 1);
    o.lambda = l;
    const auto r = run_theorem_check(TheoremId::thm4, o);
    ok = ok && r.passed && o.k == 100 && o.instance.gamma == 0.9;
    d += fmt("lambda %.2f: %zu violations, max |diff| %.3g; ", l, r.violations.size(),
             r.extras.value("max_abs_difference", 0.0));
  }
  const double t = seconds_since(t0);
  return {ok && t < kSandwichBudget, d + fmt("k=100, gamma=0.9; %.1f s", t)};
}

Outcome lower_bound() {
  const auto o = default_verify_options(TheoremId::thm5, 1);
  const auto r = run_theorem_check(TheoremId::thm5, o);
  return {r.passed && r.instances_checked == 50 && o.eps_sweep.size() == 4,
          fmt("%zu instances, %zu violations; max slack %.3g, c_hat %.3g", r.instances_checked, r.violations.size(),
              r.extras.value("max_slack", 0.0), r.extras.value("c_hat", 0.0))};
}

Outcome probe() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_probe_suite({});
  std::size_t cond = 0;
  for (const auto& t : r.trials) cond += t.conditions_hold;
  const double t = seconds_since(t0);
  return {r.passed && r.trials.size() == 20 && t < kProbeBudget,
          fmt("20 nets; residual ratio in [%.3f, %.3f]; conditions hold on %zu, C1 in [0,1] there; %.1f s",
              r.min_ratio, r.max_ratio, cond, t)};
}

Outcome expectile() {
  bool ok = true;
  double prev = -1.0;
  std::string d;
  for (double tau : {0.5, 0.7, 0.9}) {
    const double v = checks::fit_two_point_expectile(tau, 1);
    ok = ok && std::abs(v - tau) < kExpectileTol && v > prev;
    prev = v;
    d += fmt("tau %.1f -> V %.4f; ", tau, v);
  }
  return {ok, d + "monotone"};
}

Outcome gradients() {
  checks::GradErrors worst;
  for (std::size_t s = 1; s <= kGradConfigs; ++s) {
    const auto e = checks::gradient_errors(s);
    worst.v = std::max(worst.v, e.v);
    worst.q1 = std::max({worst.q1, e.q1, e.q2});
    worst.pi = std::max(worst.pi, e.pi);
  }
  return {worst.max() < kGradTol, fmt("%zu configs; max rel. err loss_v %.2e, loss_q %.2e, loss_pi %.2e", kGradConfigs,
                                      worst.v, worst.q1, worst.pi)};
}

Outcome collapse() {
  std::size_t bad = 0;
  for (std::size_t s = 1; s <= kCollapseConfigs; ++s) {
    const auto r = checks::collapse_check(s);
    bad += !(r.in_sample_exact && r.full_exact);
  }
  return {bad == 0, fmt("%zu random batches; %zu with a bit-level mismatch at lambda 0 or 1", kCollapseConfigs, bad)};
}

Outcome chain_training() {
  const auto t0 = std::chrono::steady_clock::now();
  TabularEnv env = make_chain_env(0.5, 16);
  DatasetOptions o;
  o.behavior.kind = BehaviorKind::fixed;
  o.behavior.fixed_action = kChainStay;
  o.n = 200;
  o.seed = 1;
  const Dataset d = generate_dataset(env, o);
  const auto bh = build_empirical_behavior(d, env.mdp());
  const auto bt = build_mildly_generalized(bh, 1.0, env.mdp());
  const auto exact = value_iteration(env.mdp(), DmgBackup{bt, 0.25}, QTable::on_support(2, bt.supports()), 1e-13);
  const auto norm = identity_normalizer(env.state_dim());
  const ReplayBuffer buf = ReplayBuffer::from_dataset(featurize(d, env), norm);
  const auto orc = make_tabular_oracle(env, bt, norm);
  AgentConfig c;
  c.gamma = 0.5;
  c.lambda = 0.25;
  c.hidden = {32, 32};
  c.batch = 64;
  c.iterations = 10000;
  c.lr = 1e-3;
  c.actor_lr = 1e-3;
  c.xi = 0.01;
  c.seed = 3;
  AgentState st = init_agent(c, env.state_dim(), env.action_dim(), env.action_bound(), norm);
  train_offline(st, c, {&buf, &orc.q_data, orc.candidates}, {});
  const auto q = tabular_q(st, env);
  double err = 0.0;
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t a : bt.support(s)) err = std::max(err, std::abs(q[s][a] - exact.q_star.at(s, a)));
  const auto pi = greedy_tabular_policy(st, env);
  const auto pi_exact = extract_greedy(exact.q_star, bt.supports());
  const double t = seconds_since(t0);
  return {pi == pi_exact && err < kChainQTol && t < kChainBudget,
          fmt("greedy (%zu,%zu) vs exact (%zu,%zu); max |Q - Q*| %.2e; %.1f s", pi[0], pi[1], pi_exact[0], pi_exact[1],
              err, t)};
}

// ---------------------------------------------------------------------------
// Point-mass experiments (criteria 10 and 11)

constexpr std::size_t kEvalEpisodes = 20;
constexpr std::uint64_t kEvalSeed = 7;

struct PmRun {
  bool diverged = false;
  double final_return = 0.0;
  double max_q = -INFINITY;
  std::optional<AgentState> state;
  std::optional<ReplayBuffer> buffer;
};

enum class PmData { narrow, medium, random };

/// narrow: a slow, lightly perturbed expert. medium: half of the steps random.
DatasetOptions pm_dataset(PmData kind, std::uint64_t seed) {
  DatasetOptions o;
  o.n = 2000;
  o.seed = 100 + seed;
  o.behavior.expert_noise = 0.05;
  o.behavior.p = 0.5;
  o.behavior.kind = kind == PmData::narrow   ? BehaviorKind::expert
                    : kind == PmData::medium ? BehaviorKind::mediocre
                                             : BehaviorKind::random;
  return o;
}

PointMassSpec pm_spec(PmData kind) {
  PointMassSpec s;
  if (kind == PmData::narrow) s.expert_gain = 0.1;
  return s;
}

AgentConfig pm_agent(double lambda, double nu, std::uint64_t seed, std::size_t iterations) {
  AgentConfig c;
  c.gamma = 0.9;
  c.lambda = lambda;
  c.nu = nu;
  c.hidden = {32, 32};
  c.batch = 128;
  c.xi = 0.05;
  c.iterations = iterations;
  c.seed = seed;
  return c;
}

PmRun pm_offline(PmData kind, double lambda, double nu, std::uint64_t seed, std::size_t iterations) {
  PointMassEnv env(pm_spec(kind));
  const Dataset d = generate_dataset(env, pm_dataset(kind, seed));
  const auto norm = fit_normalizer(d);
  const AgentConfig c = pm_agent(lambda, nu, seed, iterations);
  PmRun run;
  run.buffer = ReplayBuffer::from_dataset(d, norm);
  AgentState st = init_agent(c, 2, 2, env.action_bound(), norm);
  TrainOptions o;
  o.log_every = 100;
  try {
    const auto res = train_offline(st, c, {&*run.buffer, nullptr, {}}, o);
    for (const auto& r : res.rows) run.max_q = std::max(run.max_q, r.q_mean);
    run.diverged = value_diverged(res.rows, env.reward_upper_bound(), c.gamma);
    run.final_return = evaluate_policy(st, env, kEvalEpisodes, kEvalSeed).mean_return;
  } catch (const TrainingAborted&) {
    run.diverged = true;
    run.final_return = -INFINITY;
  }
  run.state = std::move(st);
  return run;
}

Outcome ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t div_full = 0, div_dmg = 0, strict = 0, within = 0;
  std::vector<double> r_dmg, r_in;
  for (std::uint64_t s = 1; s <= kSeeds; ++s) {
    div_full += pm_offline(PmData::narrow, 1.0, 0.0, s, 20000).diverged;
    div_dmg += pm_offline(PmData::narrow, 0.25, 0.1, s, 20000).diverged;
    const PmRun dmg = pm_offline(PmData::medium, 0.25, 0.1, s, 10000);
    div_dmg += dmg.diverged;
    const PmRun in = pm_offline(PmData::medium, 0.0, 0.1, s, 10000);
    r_dmg.push_back(dmg.final_return);
    r_in.push_back(in.final_return);
  }
  // Noise band: seed-to-seed standard deviation of the in-sample runs.
  double mean = 0.0, var = 0.0;
  for (double r : r_in) mean += r / kSeeds;
  for (double r : r_in) var += (r - mean) * (r - mean) / (kSeeds - 1);
  const double band = std::sqrt(var);
  std::string pairs;
  for (std::size_t i = 0; i < kSeeds; ++i) {
    strict += r_dmg[i] >= r_in[i];
    within += r_dmg[i] >= r_in[i] - band;
    pairs += fmt("%.2f/%.2f ", r_dmg[i], r_in[i]);
  }
  const double t = seconds_since(t0);
  const bool ok = div_full >= 3 && div_dmg == 0 && within >= 4 && t < kAblationBudget;
  return {ok, fmt("narrow data: lambda=1,nu=0 diverged %zu/5, lambda=0.25 %zu/10 runs; medium data returns "
                  "(0.25/0): %s; >= on %zu/5, within band %.3f on %zu/5; %.0f s",
                  div_full, div_dmg, pairs.c_str(), strict, band, within, t)};
}

Outcome finetune() {
  const FinetuneSchedule s = FinetuneSchedule::for_nu(0.5);
  const double nu229 = s.nu(229);
  bool sched_ok = std::abs(nu229 - 0.5 * std::pow(0.99, 229)) <= kScheduleTol && std::abs(nu229 - 0.0501) < 5e-5 &&
                  std::abs(s.lambda(1u << 20) - 0.5) <= kScheduleTol &&
                  std::abs(s.nu(1u << 20) - s.nu_floor) <= kScheduleTol && s.lambda(0) == 0.25 && s.nu(0) == 0.5;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t improved = 0;
  std::string d;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    // Offline start from uniform-random data, which leaves room to improve.
    const PmRun run = pm_offline(PmData::random, 0.25, 0.1, seed, 10000);
    PointMassEnv env(pm_spec(PmData::random));
    const AgentConfig c = pm_agent(0.25, 0.1, seed, 0);
    FinetuneOptions fo;
    fo.steps = 50000;
    fo.env_seed = seed;
    fo.train.log_every = 0;
    AgentState st = *run.state;
    ReplayBuffer buf = *run.buffer;
    const double before = evaluate_policy(st, env, kEvalEpisodes, kEvalSeed).mean_return;
    finetune_online(st, c, env, FinetuneSchedule::for_nu(c.nu), buf, fo);
    const double after = evaluate_policy(st, env, kEvalEpisodes, kEvalSeed).mean_return;
    improved += after > before;
    d += fmt("%.2f->%.2f ", before, after);
  }
  return {sched_ok && improved >= 4, fmt("nu(229)=%.6f, limits (%.2f, %.4f); fine-tune %s; improved %zu/5; %.0f s",
                                         nu229, s.lambda(1u << 20), s.nu(1u << 20), d.c_str(), improved,
                                         seconds_since(t0))};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "dmg_lab_acceptance_det";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cfg = (root / "pm.cfg").string();
  std::ofstream(cfg) << "env = pointmass\nbehavior = mediocre\nn = 1000\nhidden = 16,16\nbatch = 64\n"
                        "iterations = 500\nlog_every = 50\neval_every = 250\neval_episodes = 5\nseed = 7\n";
  std::ostringstream log, err;
  bool ok = cli::cmd_gen_data({cfg, (root / "a.jsonl").string(), {}}, log, err) == 0 &&
            cli::cmd_gen_data({cfg, (root / "b.jsonl").string(), {}}, log, err) == 0;
  ok = ok && cli::read_file((root / "a.jsonl").string()) == cli::read_file((root / "b.jsonl").string());
  for (const char* run : {"r1", "r2"}) {
    ok = ok && cli::cmd_train({cfg, (root / "a.jsonl").string(), (root / run).string(), {}, {}}, log, err) == 0;
    cli::VerifyArgs v;
    v.suite = "thm3";
    v.trials = 20;
    v.out = (root / run).string();
    ok = ok && cli::cmd_verify(v, log, err) == 0;
  }
  std::size_t compared = 0;
  for (const char* f : {"metrics.csv", "summary.json", "checkpoints/final.json", "reports/verify_thm3.json"}) {
    ok = ok && cli::read_file((root / "r1" / f).string()) == cli::read_file((root / "r2" / f).string());
    ++compared;
  }
  fs::remove_all(root);
  return {ok, fmt("dataset, %zu run artifacts (metrics, summary, checkpoint, verify report) byte-identical", compared)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"contraction of in-sample and DMG operators", contraction},
      {"DMG dominates in-sample greedy value", dominance},
      {"worst-case sandwich over k iterations", sandwich},
      {"lower-bound slack trend over eps halvings", lower_bound},
      {"one-step generalization probe", probe},
      {"expectile value on two-point targets", expectile},
      {"finite-difference gradient checks", gradients},
      {"target collapse identities", collapse},
      {"chain training matches exact DMG", chain_training},
      {"lambda ablation on point-mass", ablation},
      {"fine-tuning schedule and online improvement", finetune},
      {"determinism of metrics and reports", determinism},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %2zu  %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
