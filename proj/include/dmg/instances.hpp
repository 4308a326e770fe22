#pragma once

// Seeded random tabular instances (MDP + covering dataset) for theorem checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmg/mdp.hpp"

namespace dmg {

using Rng = std::mt19937_64;

enum class EmbeddingLayout {
  uniform,  ///< coordinates uniform in [0,1]^d
  grid,     ///< actions on a line, spacing InstanceOptions::grid_spacing
  mixed,    ///< grid or uniform, chosen per instance
};

inline constexpr double kGridSpacing = 0.25;

struct InstanceOptions {
  std::size_t min_states = 2;
  std::size_t max_states = 5;
  std::size_t min_actions = 2;
  std::size_t max_actions = 4;
  std::size_t action_dim = 1;
  double grid_spacing = kGridSpacing;
  /// Largest number of distinct actions per state in the dataset (0 = no limit).
  std::size_t max_support = 0;
  /// Dataset actions avoid this many ids at each end of the action range.
  std::size_t data_margin = 0;
  double gamma = 0.9;
  double r_max = 1.0;
  EmbeddingLayout layout = EmbeddingLayout::mixed;
  /// Probability that an instance's dataset holds a single action per state.
  double singleton_fraction = 0.25;
  std::size_t max_samples_per_pair = 3;
  /// Rewards and transitions vary smoothly (Lipschitz) with the action coordinate.
  bool lipschitz_dynamics = false;
};

struct Instance {
  std::uint64_t seed = 0;
  TabularMdp mdp;
  Dataset dataset;
  EmpiricalBehaviorPolicy beta_hat;
  bool grid_layout = false;
};

inline std::uint64_t instance_seed(std::uint64_t base, std::size_t index) {
  // splitmix64 finalizer so neighbouring indices give unrelated streams
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(index) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace detail {

inline std::vector<double> random_distribution(std::size_t n, Rng& rng) {
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> p(n);
  double total = 0.0;
  for (auto& x : p) total += (x = expo(rng));
  for (auto& x : p) x /= total;
  // Renormalize the last entry so the row sums to 1 to machine precision.
  double head = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) head += p[i];
  p.back() = std::max(0.0, 1.0 - head);
  return p;
}

}  // namespace detail

inline Instance generate_instance(const InstanceOptions& opt, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };

  const std::size_t ns = pick(opt.min_states, opt.max_states);
  const std::size_t na = pick(opt.min_actions, opt.max_actions);
  bool grid = opt.layout == EmbeddingLayout::grid;
  if (opt.layout == EmbeddingLayout::mixed) grid = unit(rng) < 0.5;

  std::vector<std::vector<double>> emb(na, std::vector<double>(opt.action_dim, 0.0));
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t d = 0; d < opt.action_dim; ++d)
      emb[a][d] = grid ? (d == 0 ? opt.grid_spacing * static_cast<double>(a) : 0.0) : unit(rng);

  // Normalized first coordinate, used by the Lipschitz-dynamics family.
  double lo = emb[0][0], hi = emb[0][0];
  for (const auto& e : emb) {
    lo = std::min(lo, e[0]);
    hi = std::max(hi, e[0]);
  }
  auto coord = [&](std::size_t a) { return hi > lo ? (emb[a][0] - lo) / (hi - lo) : 0.0; };

  std::vector<std::vector<std::vector<double>>> p(ns, std::vector<std::vector<double>>(na));
  std::vector<std::vector<double>> r(ns, std::vector<double>(na));
  for (std::size_t s = 0; s < ns; ++s) {
    if (opt.lipschitz_dynamics) {
      const auto p0 = detail::random_distribution(ns, rng);
      const auto p1 = detail::random_distribution(ns, rng);
      const double freq = 0.25 + 0.75 * unit(rng);
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      for (std::size_t a = 0; a < na; ++a) {
        const double w = coord(a);
        p[s][a].resize(ns);
        double head = 0.0;
        for (std::size_t s2 = 0; s2 < ns; ++s2) {
          p[s][a][s2] = (1.0 - w) * p0[s2] + w * p1[s2];
          if (s2 + 1 < ns) head += p[s][a][s2];
        }
        p[s][a].back() = std::max(0.0, 1.0 - head);
        r[s][a] = opt.r_max * (0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * freq * w + phase));
      }
    } else {
      for (std::size_t a = 0; a < na; ++a) {
        p[s][a] = detail::random_distribution(ns, rng);
        r[s][a] = opt.r_max * unit(rng);
      }
    }
  }
  std::vector<double> d0 = detail::random_distribution(ns, rng);

  Instance inst{seed, TabularMdp(std::move(p), std::move(r), std::move(emb), opt.gamma, std::move(d0), opt.r_max),
                Dataset{}, {}, grid};

  // Dataset covering every state with a random non-empty action subset.
  const bool singleton = unit(rng) < opt.singleton_fraction;
  Dataset& ds = inst.dataset;
  ds.representation = Representation::discrete;
  ds.provenance = "random_instance seed=" + std::to_string(seed);
  for (std::size_t s = 0; s < ns; ++s) {
    std::vector<std::size_t> actions;
    for (std::size_t a = opt.data_margin; a + opt.data_margin < na; ++a) actions.push_back(a);
    if (actions.empty()) throw std::invalid_argument("generate_instance: data_margin leaves no actions");
    std::shuffle(actions.begin(), actions.end(), rng);
    const std::size_t cap = opt.max_support == 0 ? actions.size() : std::min(actions.size(), opt.max_support);
    const std::size_t k = singleton ? 1 : pick(1, cap);
    actions.resize(k);
    std::sort(actions.begin(), actions.end());
    for (std::size_t a : actions) {
      const std::size_t count = pick(1, std::max<std::size_t>(1, opt.max_samples_per_pair));
      std::discrete_distribution<std::size_t> next(inst.mdp.next_distribution(s, a).begin(),
                                                   inst.mdp.next_distribution(s, a).end());
      for (std::size_t c = 0; c < count; ++c)
        ds.transitions.push_back(Transition::discrete(s, a, inst.mdp.reward(s, a), next(rng)));
    }
  }
  inst.beta_hat = build_empirical_behavior(ds, inst.mdp);
  return inst;
}

}  // namespace dmg
