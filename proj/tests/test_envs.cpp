#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dmg/dataset_io.hpp"
#include "dmg/envs.hpp"
#include "dmg/operators.hpp"
#include "oracles.hpp"

using namespace dmg;

TEST(Chain, OptimalValuesInClosedForm) {
  // Stay in s1 forever: V(s1) = 1/(1-g); from s0 switch once: V(s0) = g/(1-g).
  for (double g : {0.5, 0.9}) {
    const TabularMdp m = make_chain_mdp(g);
    const auto v = oracle::policy_value(m, {kChainGo, kChainStay});
    EXPECT_NEAR(v[1], 1.0 / (1.0 - g), 1e-12);
    EXPECT_NEAR(v[0], g / (1.0 - g), 1e-12);
    EXPECT_EQ(optimal_policy(m), (DeterministicPolicy{kChainGo, kChainStay}));
  }
}

TEST(GridWorld, ValueIterationMatchesShortestPaths) {
  GridWorldSpec g;
  g.width = 5;
  g.height = 4;
  g.goals = {{4, 3}};
  g.obstacles = {{2, 1}, {2, 2}};
  g.gamma = 0.9;
  const TabularMdp m = make_gridworld_mdp(g);
  const auto bfs = gridworld_bfs_values(g);
  const auto v = oracle::policy_value(m, optimal_policy(m));
  for (std::size_t s = 0; s < m.n_states(); ++s) EXPECT_NEAR(v[s], bfs[s], 1e-10) << "cell " << s;
  EXPECT_EQ(bfs[detail::cell_id(g, {3, 3})], 1.0);
  EXPECT_NEAR(bfs[detail::cell_id(g, {0, 0})], std::pow(0.9, 6), 1e-15);
}

TEST(GridWorld, RejectsUnreachableGoalsAndBadCells) {
  GridWorldSpec g;
  g.width = 3;
  g.height = 1;
  g.goals = {{2, 0}};
  g.obstacles = {{1, 0}};
  EXPECT_THROW(make_gridworld(g), std::invalid_argument);
  g.obstacles.clear();
  g.goals = {{5, 0}};
  EXPECT_THROW(make_gridworld(g), std::invalid_argument);
}

TEST(GridWorld, EpisodesEndAtGoals) {
  GridWorldSpec g;
  g.goals = {{1, 0}};
  TabularEnv env = make_gridworld(g);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    env.reset(rng);
    for (std::size_t t = 0; t < env.horizon(); ++t) {
      const auto r = env.step_id(optimal_policy(env.mdp())[env.current_state()], rng);
      if (r.terminal) {
        EXPECT_EQ(r.reward, 1.0);
        break;
      }
      EXPECT_EQ(r.reward, 0.0);
    }
  }
}

TEST(PointMass, ExpertReachesGoal) {
  PointMassEnv env(PointMassSpec{});
  Rng rng(2);
  for (int e = 0; e < 50; ++e) {
    auto x = env.reset(rng);
    for (std::size_t t = 0; t < env.horizon(); ++t) x = env.step(env.expert_action(x), rng).next_state;
    EXPECT_LT(std::hypot(x[0] - 0.5, x[1] - 0.5), 0.1);
  }
}

TEST(PointMass, DynamicsAndReward) {
  PointMassEnv env(PointMassSpec{});
  Rng rng(0);
  env.set_position({0.5, 0.5});
  auto r = env.step({0.0, 0.0}, rng);
  EXPECT_EQ(r.reward, 0.0);
  env.set_position({0.95, -0.5});
  r = env.step({3.0, 4.0}, rng);  // projected to (0.6, 0.8)
  EXPECT_NEAR(r.reward, -std::hypot(0.45, 1.0), 1e-15);
  EXPECT_NEAR(r.next_state[0], 1.0, 1e-15);
  EXPECT_NEAR(r.next_state[1], -0.42, 1e-15);
  EXPECT_THROW(env.step({std::nan(""), 0.0}, rng), std::invalid_argument);
  PointMassSpec bad;
  bad.goal = {2.0, 0.0};
  EXPECT_THROW(PointMassEnv{bad}, std::invalid_argument);
}

TEST(Generator, SameSeedSameBytes) {
  PointMassEnv env(PointMassSpec{});
  DatasetOptions o;
  o.behavior.kind = BehaviorKind::mediocre;
  o.n = 500;
  o.seed = 11;
  std::ostringstream a, b, c;
  write_dataset_jsonl(a, generate_dataset(env, o));
  write_dataset_jsonl(b, generate_dataset(env, o));
  o.seed = 12;
  write_dataset_jsonl(c, generate_dataset(env, o));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(Generator, MixtureFractionOfTrajectories) {
  TabularEnv env = make_chain_env(0.5, 10);
  DatasetOptions o;
  o.behavior.kind = BehaviorKind::mixture;
  o.behavior.expert_fraction = 0.5;
  o.n = 20000;
  o.seed = 3;
  const Dataset d = generate_dataset(env, o);
  const auto experts = std::count(d.trajectory_labels.begin(), d.trajectory_labels.end(), "expert");
  const double frac = static_cast<double>(experts) / static_cast<double>(d.trajectory_labels.size());
  EXPECT_NEAR(frac, 0.5, 0.05);
  EXPECT_EQ(d.size(), 20000u);
}

TEST(Generator, FixedBehaviorAndShift) {
  TabularEnv env = make_chain_env(0.5, 8);
  DatasetOptions o;
  o.behavior.kind = BehaviorKind::fixed;
  o.behavior.fixed_action = kChainGo;
  o.n = 40;
  o.reward_shift = true;
  const Dataset d = generate_dataset(env, o);
  for (const auto& t : d.transitions) {
    EXPECT_EQ(t.action_id(), kChainGo);
    EXPECT_EQ(t.reward, -1.0);
    EXPECT_NE(t.state_id(), t.next_state_id());
  }
  o.behavior.fixed_action = 2;
  EXPECT_THROW(generate_dataset(env, o), std::invalid_argument);
  PointMassEnv pm(PointMassSpec{});
  o.behavior.fixed_action = 0;
  EXPECT_THROW(generate_dataset(pm, o), std::invalid_argument);
}

TEST(Generator, ExpertDatasetOnGridworldIsOnPolicy) {
  GridWorldSpec g;
  g.goals = {{2, 2}};
  TabularEnv env = make_gridworld(g);
  DatasetOptions o;
  o.n = 300;
  const Dataset d = generate_dataset(env, o);
  const auto pi = optimal_policy(env.mdp());
  for (const auto& t : d.transitions) EXPECT_EQ(t.action_id(), pi[t.state_id()]);
}

TEST(Normalizer, ZeroMeanUnitStdAndFloor) {
  Dataset d;
  d.representation = Representation::continuous;
  d.transitions = {{{1.0, 5.0}, {0.0}, 0.0, {3.0, 5.0}, false}, {{5.0, 5.0}, {0.0}, 0.0, {7.0, 5.0}, false}};
  const auto n = fit_normalizer(d);
  EXPECT_DOUBLE_EQ(n.mean[0], 4.0);
  EXPECT_DOUBLE_EQ(n.std[0], std::sqrt(5.0));
  EXPECT_EQ(n.std[1], kStdFloor);
  const auto back = n.invert(n.apply({2.0, 1.0}));
  EXPECT_NEAR(back[0], 2.0, 1e-15);
  EXPECT_NEAR(back[1], 1.0, 1e-15);
  EXPECT_TRUE(identity_normalizer(3).identity());
  const auto nd = normalize_states(d);
  double sum = 0.0;
  for (const auto& t : nd.dataset.transitions) sum += t.state[0] + t.next_state[0];
  EXPECT_NEAR(sum, 0.0, 1e-12);
}

TEST(Score, ReferenceAndFormula) {
  const ScoreReference ref{-30.0, -6.0};
  EXPECT_DOUBLE_EQ(normalized_score(-6.0, ref), 100.0);
  EXPECT_DOUBLE_EQ(normalized_score(-30.0, ref), 0.0);
  EXPECT_DOUBLE_EQ(normalized_score(-18.0, ref), 50.0);
  EXPECT_THROW(normalized_score(0.0, ScoreReference{1.0, 1.0}), std::invalid_argument);
  PointMassEnv env(PointMassSpec{});
  const auto pm = compute_score_reference(env, 20, 1);
  EXPECT_GT(pm.expert_return, pm.random_return);
}

TEST(Rollout, TabularReturnAgreesWithExactEvaluation) {
  // Undiscounted rollouts of a gamma-discounted chain: compare the Monte Carlo
  // discounted return instead, with horizon long enough that the tail is tiny.
  const double g = 0.5;
  TabularEnv env = make_chain_env(g, 60);
  const DeterministicPolicy pi{kChainGo, kChainStay};
  Rng rng(5);
  double total = 0.0;
  const int episodes = 4000;
  for (int e = 0; e < episodes; ++e) {
    env.reset_id(rng);
    double disc = 1.0, ret = 0.0;
    for (std::size_t t = 0; t < env.horizon(); ++t) {
      ret += disc * env.step_id(pi[env.current_state()], rng).reward;
      disc *= g;
    }
    total += ret;
  }
  EXPECT_NEAR(total / episodes, policy_return(env.mdp(), pi), 0.02);
}
