#pragma once

// Actor-critic learner: expectile value net V, twin critics Q1/Q2 with
// targets, and an actor trained against Q1 with an advantage-weighted
// behavior penalty. Offline training, evaluation, online fine-tuning and
// checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmg/envs.hpp"
#include "dmg/mdp.hpp"
#include "dmg/nn.hpp"

namespace dmg {

enum class PolicyKind { deterministic, gaussian };

inline const char* to_string(PolicyKind k) { return k == PolicyKind::deterministic ? "deterministic" : "gaussian"; }

inline PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "deterministic") return PolicyKind::deterministic;
  if (s == "gaussian") return PolicyKind::gaussian;
  throw std::invalid_argument("unknown policy kind \"" + s + "\" (expected deterministic or gaussian)");
}

struct AgentConfig {
  double lambda = 0.25;
  double nu = 0.1;
  double alpha_temp = 3.0;
  double tau = 0.7;
  double gamma = 0.99;
  double xi = 0.005;
  double lr = 3e-4;
  double actor_lr = 3e-4;
  bool actor_cosine = true;
  std::size_t batch = 256;
  std::size_t iterations = 1000000;
  /// exp(alpha * A) is evaluated as exp(min(alpha * A, advantage_clip)).
  double advantage_clip = 10.0;
  PolicyKind policy_kind = PolicyKind::deterministic;
  /// Fixed standard deviation of the Gaussian policy.
  double policy_std = 0.2;
  std::vector<std::size_t> hidden = {256, 256};
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0,1]");
    if (!(nu >= 0.0)) fail("nu must be >= 0");
    if (!(alpha_temp > 0.0)) fail("alpha_temp must be > 0");
    if (!(tau > 0.0 && tau < 1.0)) fail("tau must lie in (0,1)");
    if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must lie in [0,1)");
    if (!(xi > 0.0 && xi <= 1.0)) fail("xi must lie in (0,1]");
    if (!(lr > 0.0)) fail("lr must be > 0");
    if (!(actor_lr > 0.0)) fail("actor_lr must be > 0");
    if (batch < 1) fail("batch must be >= 1");
    if (!(advantage_clip > 0.0)) fail("advantage_clip must be > 0");
    if (!(policy_std > 0.0)) fail("policy_std must be > 0");
    if (hidden.empty()) fail("hidden must list at least one layer size");
    for (std::size_t h : hidden)
      if (h == 0) fail("hidden layer sizes must be positive");
  }
};

// ---------------------------------------------------------------------------
// Data

/// Column-major minibatch; rewards and done flags are 1 x B.
struct Batch {
  Mat s, a, r, s2, done;
  std::size_t size() const { return static_cast<std::size_t>(s.cols()); }
};

class ReplayBuffer {
 public:
  ReplayBuffer() = default;
  ReplayBuffer(std::size_t state_dim, std::size_t action_dim) : sd_(state_dim), ad_(action_dim) {}

  /// States are normalized on insertion.
  static ReplayBuffer from_dataset(const Dataset& ds, const StateNormalizer& norm) {
    if (ds.representation != Representation::continuous)
      throw std::invalid_argument("replay buffer needs a continuous (featurized) dataset");
    if (ds.transitions.empty()) throw std::invalid_argument("replay buffer: empty dataset");
    ReplayBuffer b(ds.transitions.front().state.size(), ds.transitions.front().action.size());
    for (const auto& t : ds.transitions) b.add(t, norm);
    return b;
  }

  void add(const Transition& t, const StateNormalizer& norm) {
    if (t.state.size() != sd_ || t.next_state.size() != sd_ || t.action.size() != ad_)
      throw std::invalid_argument("replay buffer: transition has wrong dimensions");
    const auto s = norm.apply(t.state);
    const auto s2 = norm.apply(t.next_state);
    s_.insert(s_.end(), s.begin(), s.end());
    a_.insert(a_.end(), t.action.begin(), t.action.end());
    r_.push_back(t.reward);
    s2_.insert(s2_.end(), s2.begin(), s2.end());
    d_.push_back(t.terminal ? 1.0 : 0.0);
  }

  std::size_t size() const { return r_.size(); }
  std::size_t state_dim() const { return sd_; }
  std::size_t action_dim() const { return ad_; }

  Batch gather(const std::vector<std::size_t>& idx) const {
    const auto B = static_cast<Eigen::Index>(idx.size());
    Batch b{Mat(sd_, B), Mat(ad_, B), Mat(1, B), Mat(sd_, B), Mat(1, B)};
    for (Eigen::Index j = 0; j < B; ++j) {
      const std::size_t i = idx[static_cast<std::size_t>(j)];
      if (i >= size()) throw std::out_of_range("replay buffer index out of range");
      for (std::size_t k = 0; k < sd_; ++k) {
        b.s(static_cast<Eigen::Index>(k), j) = s_[i * sd_ + k];
        b.s2(static_cast<Eigen::Index>(k), j) = s2_[i * sd_ + k];
      }
      for (std::size_t k = 0; k < ad_; ++k) b.a(static_cast<Eigen::Index>(k), j) = a_[i * ad_ + k];
      b.r(0, j) = r_[i];
      b.done(0, j) = d_[i];
    }
    return b;
  }

  Batch sample(Rng& rng, std::size_t n) const {
    if (size() == 0) throw std::invalid_argument("replay buffer is empty");
    std::uniform_int_distribution<std::size_t> pick(0, size() - 1);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = pick(rng);
    return gather(idx);
  }

  Batch all() const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(idx);
  }

 private:
  std::size_t sd_ = 0, ad_ = 0;
  std::vector<double> s_, a_, r_, s2_, d_;
};

/// Candidate actions (columns) at a normalized next state; replaces the
/// target actor in the lambda branch when an exact support maximizer is used.
using CandidateFn = std::function<Mat(const Vec& next_state)>;

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline Mat stack(const Mat& top, const Mat& bottom) {
  Mat x(top.rows() + bottom.rows(), top.cols());
  x << top, bottom;
  return x;
}

inline void require_finite_loss(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite ") + what);
}

}  // namespace detail

/// Row-vector of min(Q1(s,a), Q2(s,a)).
inline Mat min_q(const Mlp& q1, const Mlp& q2, const Mat& s, const Mat& a) {
  const Mat x = detail::stack(s, a);
  return q1.forward(x).cwiseMin(q2.forward(x));
}

/// a_max * tanh(net(s)); optionally returns the pre-squash output.
inline Mat actor_actions(const Mlp& pi, const Mat& s, double a_max, Tape* tape = nullptr, Mat* raw = nullptr) {
  Mat z = pi.forward(s, tape);
  if (raw) *raw = z;
  return a_max * z.array().tanh().matrix();
}

/**
 * r + gamma (1 - done) [lambda min_i Q'_i(s', a') + (1 - lambda) V(s')],
 * with a' = pi'(s'), or the best candidate under min_i Q'_i when given.
 */
inline Mat q_targets(const Batch& b, const Mlp& pi_target, const Mlp& q1_target, const Mlp& q2_target, const Mlp& v,
                     double lambda, double gamma, double a_max, const CandidateFn* candidates = nullptr) {
  const auto B = static_cast<Eigen::Index>(b.size());
  Mat generalized(1, B);
  if (candidates && *candidates) {
    for (Eigen::Index j = 0; j < B; ++j) {
      const Vec s2 = b.s2.col(j);
      const Mat c = (*candidates)(s2);
      if (c.cols() == 0) throw std::invalid_argument("candidate set is empty");
      const Mat s_rep = s2.replicate(1, c.cols());
      generalized(0, j) = min_q(q1_target, q2_target, s_rep, c).maxCoeff();
    }
  } else {
    generalized = min_q(q1_target, q2_target, b.s2, actor_actions(pi_target, b.s2, a_max));
  }
  const Mat v_next = v.forward(b.s2);
  const Mat mix = lambda * generalized.array() + (1.0 - lambda) * v_next.array();
  return (b.r.array() + gamma * (1.0 - b.done.array()) * mix.array()).matrix();
}

struct LossResult {
  double value = 0.0;
  Vec grad;
  double aux_mean = 0.0;  ///< mean prediction of the trained net on the batch
};

/// mean_i L_tau(min_j Q'_j(s_i,a_i) - V(s_i)); gradient w.r.t. V's parameters.
inline LossResult loss_v(const Batch& b, const Mlp& q1_target, const Mlp& q2_target, const Mlp& v, double tau) {
  const Mat target = min_q(q1_target, q2_target, b.s, b.a);
  Tape tape;
  const Mat pred = v.forward(b.s, &tape);
  const auto B = static_cast<double>(b.size());
  Mat d_out(1, pred.cols());
  LossResult out;
  for (Eigen::Index j = 0; j < pred.cols(); ++j) {
    const auto e = expectile_loss(target(0, j) - pred(0, j), tau);
    out.value += e.value / B;
    d_out(0, j) = -e.derivative / B;
  }
  detail::require_finite_loss(out.value, "value loss");
  out.grad = Vec::Zero(static_cast<Eigen::Index>(v.n_params()));
  v.backward(tape, d_out, &out.grad);
  out.aux_mean = pred.mean();
  return out;
}

struct QLossResult {
  double value = 0.0;
  Vec grad_q1;
  Vec grad_q2;
  Mat targets;
  double q_mean = 0.0;  ///< mean Q1(s,a) on the batch
};

/// (1/2) sum_j mean_i (Q_j(s_i,a_i) - y_i)^2 with y from q_targets.
inline QLossResult loss_q(const Batch& b, const Mlp& pi_target, const Mlp& q1_target, const Mlp& q2_target,
                          const Mlp& v, const Mlp& q1, const Mlp& q2, double lambda, double gamma, double a_max,
                          const CandidateFn* candidates = nullptr) {
  QLossResult out;
  out.targets = q_targets(b, pi_target, q1_target, q2_target, v, lambda, gamma, a_max, candidates);
  const Mat x = detail::stack(b.s, b.a);
  const auto B = static_cast<double>(b.size());
  auto one = [&](const Mlp& q, Vec& grad) {
    Tape tape;
    const Mat pred = q.forward(x, &tape);
    const Mat err = pred - out.targets;
    grad = Vec::Zero(static_cast<Eigen::Index>(q.n_params()));
    q.backward(tape, err / B, &grad);
    return std::make_pair(0.5 * err.squaredNorm() / B, pred.mean());
  };
  const auto [l1, m1] = one(q1, out.grad_q1);
  const auto [l2, m2] = one(q2, out.grad_q2);
  (void)m2;
  out.value = l1 + l2;
  out.q_mean = m1;
  detail::require_finite_loss(out.value, "critic loss");
  return out;
}

struct PolicyLossOptions {
  double nu = 0.1;
  double alpha_temp = 3.0;
  double advantage_clip = 10.0;
  double a_max = 1.0;
  PolicyKind kind = PolicyKind::deterministic;
  double policy_std = 0.2;
};

/**
 * Minimized actor objective:
 *   -mean Q1(s, a_pi) + nu mean[w ||mu(s) - a||^2]                 (deterministic)
 *   -mean Q1(s, a_pi) + nu mean[w ||mu(s) - a||^2 / (2 sigma^2)]   (gaussian)
 * with w = exp(min(alpha (min_j Q'_j(s,a) - V(s)), clip)); a_pi = mu(s) for the
 * deterministic policy and mu(s) + sigma * noise for the Gaussian one. The
 * first term reaches the actor only through Q1's action input.
 */
inline LossResult loss_pi(const Batch& b, const Mlp& q1, const Mlp& q1_target, const Mlp& q2_target, const Mlp& v,
                          const Mlp& pi, const PolicyLossOptions& o, const Mat* noise = nullptr) {
  const auto B = static_cast<double>(b.size());
  const Mat adv = min_q(q1_target, q2_target, b.s, b.a) - v.forward(b.s);
  const Mat w = (o.alpha_temp * adv.array()).min(o.advantage_clip).exp().matrix();

  Tape pi_tape;
  Mat raw;
  const Mat mu = actor_actions(pi, b.s, o.a_max, &pi_tape, &raw);
  Mat act = mu;
  if (o.kind == PolicyKind::gaussian) {
    if (!noise || noise->rows() != mu.rows() || noise->cols() != mu.cols())
      throw std::invalid_argument("loss_pi: gaussian policy needs a noise matrix shaped like the actions");
    act = mu + o.policy_std * *noise;
  }

  Tape q_tape;
  const Mat q = q1.forward(detail::stack(b.s, act), &q_tape);
  const Mat d_in = q1.backward(q_tape, Mat::Constant(1, q.cols(), -1.0 / B), nullptr);
  Mat d_mu = d_in.bottomRows(mu.rows());

  const Mat diff = mu - b.a;
  const double scale = o.kind == PolicyKind::gaussian ? 1.0 / (2.0 * o.policy_std * o.policy_std) : 1.0;
  double penalty = 0.0;
  for (Eigen::Index j = 0; j < diff.cols(); ++j) {
    penalty += w(0, j) * diff.col(j).squaredNorm();
    d_mu.col(j) += (o.nu * scale * 2.0 * w(0, j) / B) * diff.col(j);
  }
  LossResult out;
  out.value = -q.mean() + o.nu * scale * penalty / B;
  detail::require_finite_loss(out.value, "actor loss");
  const Mat d_raw = d_mu.cwiseProduct((o.a_max * (1.0 - raw.array().tanh().square())).matrix());
  out.grad = Vec::Zero(static_cast<Eigen::Index>(pi.n_params()));
  pi.backward(pi_tape, d_raw, &out.grad);
  out.aux_mean = q.mean();
  return out;
}

// ---------------------------------------------------------------------------
// Agent state and training

struct AgentState {
  Mlp pi, pi_target;
  Mlp q1, q2, q1_target, q2_target;
  Mlp v;
  AdamState opt_pi, opt_q1, opt_q2, opt_v;
  Rng rng;
  std::uint64_t step = 0;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  double a_max = 1.0;
  StateNormalizer normalizer;
};

inline AgentState init_agent(const AgentConfig& cfg, std::size_t state_dim, std::size_t action_dim, double a_max,
                             StateNormalizer normalizer) {
  cfg.validate();
  if (!(a_max > 0.0)) throw std::invalid_argument("action bound must be > 0");
  if (normalizer.mean.size() != state_dim) throw std::invalid_argument("normalizer dimension mismatch");
  AgentState st;
  st.rng.seed(cfg.seed);
  auto sizes = [&](std::size_t in, std::size_t out) {
    std::vector<std::size_t> s{in};
    s.insert(s.end(), cfg.hidden.begin(), cfg.hidden.end());
    s.push_back(out);
    return s;
  };
  st.pi = Mlp(sizes(state_dim, action_dim), cfg.activation, st.rng);
  st.q1 = Mlp(sizes(state_dim + action_dim, 1), cfg.activation, st.rng);
  st.q2 = Mlp(sizes(state_dim + action_dim, 1), cfg.activation, st.rng);
  st.v = Mlp(sizes(state_dim, 1), cfg.activation, st.rng);
  st.pi_target = st.pi;
  st.q1_target = st.q1;
  st.q2_target = st.q2;
  st.opt_pi = AdamState(st.pi.n_params(), cfg.actor_lr);
  st.opt_q1 = AdamState(st.q1.n_params(), cfg.lr);
  st.opt_q2 = AdamState(st.q2.n_params(), cfg.lr);
  st.opt_v = AdamState(st.v.n_params(), cfg.lr);
  st.state_dim = state_dim;
  st.action_dim = action_dim;
  st.a_max = a_max;
  st.normalizer = std::move(normalizer);
  return st;
}

struct MetricsRow {
  std::uint64_t step = 0;
  double loss_v = 0.0;
  double loss_q = 0.0;
  double loss_pi = 0.0;
  double q_mean = 0.0;
  double v_mean = 0.0;
  std::optional<double> eval_return;
  double lambda = 0.0;
  double nu = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,loss_v,loss_q,loss_pi,q_mean,v_mean,eval_return,lambda,nu";

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_csv(const MetricsRow& r) {
  std::string out = std::to_string(r.step);
  for (double v : {r.loss_v, r.loss_q, r.loss_pi, r.q_mean, r.v_mean}) out += "," + format_double(v);
  out += "," + (r.eval_return ? format_double(*r.eval_return) : std::string());
  out += "," + format_double(r.lambda) + "," + format_double(r.nu);
  return out;
}

/// Sources of minibatches for one step.
struct TrainData {
  /// Dataset batches (value and actor updates; critic updates unless q_data is set).
  const ReplayBuffer* data = nullptr;
  /// Optional separate source for critic batches.
  const ReplayBuffer* q_data = nullptr;
  /// Optional exact maximizer for the lambda branch.
  CandidateFn candidates;
};

struct StepHyper {
  double lambda = 0.25;
  double nu = 0.1;
  double actor_lr = 3e-4;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::uint64_t step, const std::string& what)
      : std::runtime_error("training aborted at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

/// One update of V, then Q1/Q2, then the actor, then the targets.
inline MetricsRow train_step(AgentState& st, const AgentConfig& cfg, const TrainData& data, const StepHyper& h) {
  if (!data.data) throw std::invalid_argument("train_step: no dataset");
  const std::uint64_t step = st.step + 1;
  try {
    const Batch b = data.data->sample(st.rng, cfg.batch);
    const Batch bq = data.q_data ? data.q_data->sample(st.rng, cfg.batch) : b;
    Mat noise;
    if (cfg.policy_kind == PolicyKind::gaussian) {
      std::normal_distribution<double> n01(0.0, 1.0);
      noise = Mat(st.action_dim, b.a.cols());
      for (Eigen::Index j = 0; j < noise.size(); ++j) noise.data()[j] = n01(st.rng);
    }

    const LossResult lv = loss_v(b, st.q1_target, st.q2_target, st.v, cfg.tau);
    adam_step(st.opt_v, st.v.params(), lv.grad);

    const CandidateFn* cand = data.candidates ? &data.candidates : nullptr;
    const QLossResult lq =
        loss_q(bq, st.pi_target, st.q1_target, st.q2_target, st.v, st.q1, st.q2, h.lambda, cfg.gamma, st.a_max, cand);
    adam_step(st.opt_q1, st.q1.params(), lq.grad_q1);
    adam_step(st.opt_q2, st.q2.params(), lq.grad_q2);

    const PolicyLossOptions po{h.nu, cfg.alpha_temp, cfg.advantage_clip, st.a_max, cfg.policy_kind, cfg.policy_std};
    const LossResult lp = loss_pi(b, st.q1, st.q1_target, st.q2_target, st.v, st.pi, po,
                                  cfg.policy_kind == PolicyKind::gaussian ? &noise : nullptr);
    st.opt_pi.lr = h.actor_lr;
    adam_step(st.opt_pi, st.pi.params(), lp.grad);

    polyak_update(st.q1_target, st.q1, cfg.xi);
    polyak_update(st.q2_target, st.q2, cfg.xi);
    polyak_update(st.pi_target, st.pi, cfg.xi);

    for (const Mlp* net : {&st.v, &st.q1, &st.q2, &st.pi})
      if (!net->all_finite()) throw NonFiniteError("non-finite parameters");
    st.step = step;
    MetricsRow row;
    row.step = step;
    row.loss_v = lv.value;
    row.loss_q = lq.value;
    row.loss_pi = lp.value;
    row.q_mean = lq.q_mean;
    row.v_mean = lv.aux_mean;
    row.lambda = h.lambda;
    row.nu = h.nu;
    return row;
  } catch (const NonFiniteError& e) {
    throw TrainingAborted(step, e.what());
  }
}

/// Cosine annealing from `lr` at step 0 to 0 at `total`.
inline double cosine_lr(double lr, std::uint64_t step, std::uint64_t total) {
  if (total == 0) return lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double mean_return = 0.0;
  std::vector<double> returns;
};

/// Deterministic action of the actor for a raw (unnormalized) observation.
inline std::vector<double> act(const AgentState& st, const std::vector<double>& obs) {
  const auto x = st.normalizer.apply(obs);
  const Vec a = actor_actions(st.pi, Mat(Eigen::Map<const Vec>(x.data(), static_cast<Eigen::Index>(x.size()))), st.a_max).col(0);
  return {a.data(), a.data() + a.size()};
}

/// Undiscounted episode returns of the actor's mean action, no exploration.
inline EvalResult evaluate_policy(const AgentState& st, Env& env, std::size_t episodes, std::uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate_policy: episodes must be >= 1");
  Rng rng(seed);
  EvalResult out;
  for (std::size_t e = 0; e < episodes; ++e) {
    std::vector<double> obs = env.reset(rng);
    double ret = 0.0;
    for (std::size_t t = 0; t < env.horizon(); ++t) {
      const StepResult r = env.step(act(st, obs), rng);
      ret += r.reward;
      obs = r.next_state;
      if (r.terminal) break;
    }
    out.returns.push_back(ret);
  }
  double sum = 0.0;
  for (double r : out.returns) sum += r;
  out.mean_return = sum / static_cast<double>(episodes);
  return out;
}

/// Normalized [one_hot(s); embed(a)] network input.
inline Vec tabular_input(const AgentState& st, const TabularEnv& env, std::size_t s, std::size_t a) {
  const auto x = st.normalizer.apply(env.one_hot(s));
  const auto e = env.mdp().embedding(a);
  Vec in(static_cast<Eigen::Index>(x.size() + e.size()));
  for (std::size_t i = 0; i < x.size(); ++i) in(static_cast<Eigen::Index>(i)) = x[i];
  for (std::size_t i = 0; i < e.size(); ++i) in(static_cast<Eigen::Index>(x.size() + i)) = e[i];
  return in;
}

/// argmax over actions of Q1 at each state of a tabular environment.
inline DeterministicPolicy greedy_tabular_policy(const AgentState& st, const TabularEnv& env) {
  const TabularMdp& mdp = env.mdp();
  DeterministicPolicy pi(mdp.n_states());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < mdp.n_actions(); ++a) {
      const double q = st.q1.forward(tabular_input(st, env, s, a))(0);
      if (q > best) {
        best = q;
        pi[s] = a;
      }
    }
  }
  return pi;
}

/// Oracle generalization on a tabular environment: critic batches cover
/// every widened (s, a) pair with its true successors, and the lambda branch
/// maximizes exactly over the widened support.
struct TabularOracle {
  ReplayBuffer q_data;
  CandidateFn candidates;
};

inline constexpr std::size_t kOracleResolution = 20;

inline TabularOracle make_tabular_oracle(const TabularEnv& env, const MildlyGeneralizedPolicy& beta_tilde,
                                         const StateNormalizer& norm) {
  const TabularMdp& mdp = env.mdp();
  if (beta_tilde.supports().size() != mdp.n_states()) throw std::invalid_argument("oracle: support has wrong size");
  TabularOracle out{ReplayBuffer(mdp.n_states(), mdp.embedding_dim()), {}};
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    for (std::size_t a : beta_tilde.support(s)) {
      const auto p = mdp.next_distribution(s, a);
      for (std::size_t s2 = 0; s2 < p.size(); ++s2) {
        if (p[s2] <= 0.0) continue;
        const auto copies = std::max<long>(1, std::lround(p[s2] * static_cast<double>(kOracleResolution)));
        for (long c = 0; c < copies; ++c)
          out.q_data.add({env.one_hot(s), env.action_vector(a), mdp.reward(s, a), env.one_hot(s2), env.is_terminal(s2)},
                         norm);
      }
    }
  }
  if (out.q_data.size() == 0) throw std::invalid_argument("oracle: widened support is empty");
  std::vector<Mat> cand(mdp.n_states());
  for (std::size_t s = 0; s < mdp.n_states(); ++s) {
    const ActionSet& sup = beta_tilde.support(s);
    // Unsupported states fall back to every action; their value is never read by a dataset target.
    const std::size_t n = sup.empty() ? mdp.n_actions() : sup.size();
    cand[s] = Mat(static_cast<Eigen::Index>(mdp.embedding_dim()), static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) {
      const auto e = mdp.embedding(sup.empty() ? j : sup[j]);
      for (std::size_t k = 0; k < e.size(); ++k) cand[s](static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = e[k];
    }
  }
  out.candidates = [cand, norm](const Vec& next_state) {
    const std::vector<double> x = norm.invert({next_state.data(), next_state.data() + next_state.size()});
    return cand[static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin())];
  };
  return out;
}

/// Q1 on every (s, a) pair of a tabular environment, [s][a].
inline std::vector<std::vector<double>> tabular_q(const AgentState& st, const TabularEnv& env) {
  const TabularMdp& mdp = env.mdp();
  std::vector<std::vector<double>> q(mdp.n_states(), std::vector<double>(mdp.n_actions()));
  for (std::size_t s = 0; s < mdp.n_states(); ++s)
    for (std::size_t a = 0; a < mdp.n_actions(); ++a) q[s][a] = st.q1.forward(tabular_input(st, env, s, a))(0);
  return q;
}

// ---------------------------------------------------------------------------
// Offline training

struct TrainOptions {
  Env* eval_env = nullptr;
  std::size_t eval_every = 0;  ///< 0 = only at the end (when an env is given)
  std::size_t eval_episodes = 10;
  std::uint64_t eval_seed = 0;
  std::size_t log_every = 1;
  std::ostream* csv = nullptr;  ///< rows are appended without the header
  std::function<void(const AgentState&)> checkpoint;
  std::size_t checkpoint_every = 0;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::optional<double> final_eval;
};

namespace detail {

inline void maybe_log(const MetricsRow& row, const TrainOptions& o, std::vector<MetricsRow>& rows, bool force) {
  if (!force && (o.log_every == 0 || row.step % o.log_every != 0)) return;
  rows.push_back(row);
  if (o.csv) *o.csv << to_csv(row) << '\n';
}

inline bool due(std::uint64_t step, std::size_t every, std::uint64_t last) {
  return (every > 0 && step % every == 0) || step == last;
}

}  // namespace detail

/// Runs cfg.iterations steps on `data`. Aborts throw TrainingAborted.
inline TrainResult train_offline(AgentState& st, const AgentConfig& cfg, const TrainData& data, const TrainOptions& o) {
  cfg.validate();
  TrainResult out;
  const std::uint64_t last = cfg.iterations;
  for (std::uint64_t i = 0; i < cfg.iterations; ++i) {
    const double lr_pi = cfg.actor_cosine ? cosine_lr(cfg.actor_lr, i, cfg.iterations) : cfg.actor_lr;
    MetricsRow row = train_step(st, cfg, data, {cfg.lambda, cfg.nu, lr_pi});
    bool force = false;
    if (o.eval_env && detail::due(row.step, o.eval_every, last)) {
      row.eval_return = evaluate_policy(st, *o.eval_env, o.eval_episodes, o.eval_seed).mean_return;
      out.final_eval = row.eval_return;
      force = true;
    }
    detail::maybe_log(row, o, out.rows, force || row.step == last);
    if (o.checkpoint && detail::due(row.step, o.checkpoint_every, last)) o.checkpoint(st);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Online fine-tuning

struct FinetuneSchedule {
  double lambda_start = 0.25;
  double lambda_end = 0.5;
  double nu_start = 0.1;
  double nu_floor = 0.001;
  double rate = 0.99;
  std::size_t period = 1000;

  static FinetuneSchedule for_nu(double nu0) {
    FinetuneSchedule s;
    s.nu_start = nu0;
    s.nu_floor = 0.01 * nu0;
    return s;
  }

  void validate() const {
    if (!(lambda_start >= 0.0 && lambda_start <= 1.0 && lambda_end >= 0.0 && lambda_end <= 1.0))
      throw std::invalid_argument("finetune schedule: lambda values must lie in [0,1]");
    if (!(nu_start >= 0.0 && nu_floor >= 0.0 && nu_floor <= nu_start))
      throw std::invalid_argument("finetune schedule: need 0 <= nu_floor <= nu_start");
    if (!(rate > 0.0 && rate <= 1.0)) throw std::invalid_argument("finetune schedule: rate must lie in (0,1]");
    if (period == 0) throw std::invalid_argument("finetune schedule: period must be >= 1");
  }

  /// nu after k decay events: max(nu_floor, nu_start rate^k).
  double nu(std::uint64_t k) const { return std::max(nu_floor, nu_start * std::pow(rate, static_cast<double>(k))); }
  /// lambda after k decay events: lambda_end - (lambda_end - lambda_start) rate^k.
  double lambda(std::uint64_t k) const {
    return lambda_end - (lambda_end - lambda_start) * std::pow(rate, static_cast<double>(k));
  }
  std::uint64_t events(std::uint64_t gradient_steps) const { return gradient_steps / period; }
};

struct FinetuneOptions {
  std::size_t steps = 50000;
  std::size_t utd = 1;
  /// Gaussian exploration noise, as a fraction of the action bound.
  double explore_noise = 0.1;
  std::uint64_t env_seed = 1;
  TrainOptions train;
};

/**
 * Interleaves one environment step (actor + noise) with `utd` gradient steps,
 * appending every collected transition to `buffer`. (lambda, nu) follow the
 * schedule, updated every `period` gradient steps.
 */
inline TrainResult finetune_online(AgentState& st, const AgentConfig& cfg, Env& env, const FinetuneSchedule& sched,
                                   ReplayBuffer& buffer, const FinetuneOptions& o) {
  cfg.validate();
  sched.validate();
  if (o.utd < 1) throw std::invalid_argument("finetune: utd must be >= 1");
  if (env.state_dim() != st.state_dim || env.action_dim() != st.action_dim)
    throw std::invalid_argument("finetune: environment does not match the checkpoint dimensions");
  TrainResult out;
  Rng env_rng(o.env_seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> obs = env.reset(env_rng);
  std::size_t t_episode = 0;
  std::uint64_t grad_steps = 0;
  const std::uint64_t last = static_cast<std::uint64_t>(o.steps) * o.utd;
  const TrainData data{&buffer, nullptr, {}};

  for (std::size_t i = 0; i < o.steps; ++i) {
    std::vector<double> a = act(st, obs);
    for (double& x : a) x = std::clamp(x + o.explore_noise * st.a_max * n01(env_rng), -st.a_max, st.a_max);
    StepResult r;
    try {
      r = env.step(a, env_rng);
    } catch (const std::exception& e) {
      throw std::runtime_error("environment failure at fine-tuning step " + std::to_string(i + 1) + ": " + e.what());
    }
    ++t_episode;
    if (auto* tab = dynamic_cast<TabularEnv*>(&env)) a = tab->action_vector(tab->nearest_action(a));
    if (auto* pm = dynamic_cast<PointMassEnv*>(&env)) a = pm->project(a);
    buffer.add({obs, a, r.reward, r.next_state, r.terminal}, st.normalizer);
    obs = r.next_state;
    if (r.terminal || t_episode >= env.horizon()) {
      obs = env.reset(env_rng);
      t_episode = 0;
    }

    for (std::size_t u = 0; u < o.utd; ++u) {
      const std::uint64_t k = sched.events(grad_steps);
      MetricsRow row = train_step(st, cfg, data, {sched.lambda(k), sched.nu(k), cfg.actor_lr});
      ++grad_steps;
      bool force = false;
      if (o.train.eval_env && detail::due(grad_steps, o.train.eval_every, last)) {
        row.eval_return = evaluate_policy(st, *o.train.eval_env, o.train.eval_episodes, o.train.eval_seed).mean_return;
        out.final_eval = row.eval_return;
        force = true;
      }
      detail::maybe_log(row, o.train, out.rows, force || grad_steps == last);
      if (o.train.checkpoint && detail::due(grad_steps, o.train.checkpoint_every, last)) o.train.checkpoint(st);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Divergence detector

/// True when any logged q_mean exceeds r_upper / (1 - gamma) or is non-finite.
inline bool value_diverged(const std::vector<MetricsRow>& rows, double reward_upper_bound, double gamma) {
  const double limit = reward_upper_bound / (1.0 - gamma);
  for (const auto& r : rows)
    if (!std::isfinite(r.q_mean) || r.q_mean > limit) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "dmg-lab-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json to_json(const AgentState& st) {
  nlohmann::ordered_json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["step"] = st.step;
  j["state_dim"] = st.state_dim;
  j["action_dim"] = st.action_dim;
  j["action_bound"] = st.a_max;
  j["normalizer"] = to_json(st.normalizer);
  auto& nets = j["nets"];
  nets["pi"] = to_json(st.pi);
  nets["pi_target"] = to_json(st.pi_target);
  nets["q1"] = to_json(st.q1);
  nets["q2"] = to_json(st.q2);
  nets["q1_target"] = to_json(st.q1_target);
  nets["q2_target"] = to_json(st.q2_target);
  nets["v"] = to_json(st.v);
  auto& opt = j["optimizers"];
  opt["pi"] = to_json(st.opt_pi);
  opt["q1"] = to_json(st.opt_q1);
  opt["q2"] = to_json(st.opt_q2);
  opt["v"] = to_json(st.opt_v);
  std::ostringstream rng;
  rng << st.rng;
  j["rng"] = rng.str();
  return j;
}

inline AgentState agent_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != kCheckpointFormat) throw std::runtime_error("not a dmg-lab checkpoint");
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  AgentState st;
  st.step = j.at("step").get<std::uint64_t>();
  st.state_dim = j.at("state_dim").get<std::size_t>();
  st.action_dim = j.at("action_dim").get<std::size_t>();
  st.a_max = j.at("action_bound").get<double>();
  st.normalizer = normalizer_from_json(j.at("normalizer"));
  const auto& nets = j.at("nets");
  st.pi = mlp_from_json(nets.at("pi"));
  st.pi_target = mlp_from_json(nets.at("pi_target"));
  st.q1 = mlp_from_json(nets.at("q1"));
  st.q2 = mlp_from_json(nets.at("q2"));
  st.q1_target = mlp_from_json(nets.at("q1_target"));
  st.q2_target = mlp_from_json(nets.at("q2_target"));
  st.v = mlp_from_json(nets.at("v"));
  const auto& opt = j.at("optimizers");
  st.opt_pi = adam_from_json(opt.at("pi"));
  st.opt_q1 = adam_from_json(opt.at("q1"));
  st.opt_q2 = adam_from_json(opt.at("q2"));
  st.opt_v = adam_from_json(opt.at("v"));
  std::istringstream rng(j.at("rng").get<std::string>());
  rng >> st.rng;
  if (!rng) throw std::runtime_error("checkpoint has an unreadable rng state");
  if (st.pi.input_size() != st.state_dim || st.pi.output_size() != st.action_dim ||
      st.q1.input_size() != st.state_dim + st.action_dim || st.v.input_size() != st.state_dim)
    throw std::runtime_error("checkpoint net shapes do not match its state/action dimensions");
  if (st.opt_pi.m.size() != st.pi.params().size() || st.opt_q1.m.size() != st.q1.params().size() ||
      st.opt_q2.m.size() != st.q2.params().size() || st.opt_v.m.size() != st.v.params().size())
    throw std::runtime_error("checkpoint optimizer state does not match its nets");
  return st;
}

inline void save_checkpoint(const std::string& path, const AgentState& st) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << to_json(st).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path);
}

inline AgentState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  try {
    return agent_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("invalid checkpoint " + path + ": " + e.what());
  }
}

}  // namespace dmg
