#pragma once

// Dense feed-forward nets with reverse-mode gradients, Adam, Polyak
// averaging, the expectile loss, and the one-step generalization probe.
//
// Batches are column-major: each column of an (in x B) matrix is a sample.
// Parameters live in one flat vector; layer l stores W_l (out x in,
// column-major) followed by b_l.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace dmg {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Activation { relu, softplus };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "softplus"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  throw std::invalid_argument("unknown activation \"" + s + "\"");
}

namespace detail {

inline double softplus(double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); }
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

/// Cached intermediate values of a batch forward pass.
struct Tape {
  std::vector<Mat> pre;   ///< pre-activations per layer
  std::vector<Mat> post;  ///< post[0] = input, post[l+1] = output of layer l
};

class Mlp {
 public:
  Mlp() = default;

  /// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  template <class Rng>
  Mlp(std::vector<std::size_t> sizes, Activation act, Rng& rng) : Mlp(std::move(sizes), act) {
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      const std::size_t n = sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
      for (std::size_t i = 0; i < n; ++i) params_[static_cast<Eigen::Index>(off + i)] = u(rng);
      off += n;
    }
  }

  /// All parameters zero.
  Mlp(std::vector<std::size_t> sizes, Activation act) : sizes_(std::move(sizes)), act_(act) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output sizes");
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      if (sizes_[l] == 0 || sizes_[l + 1] == 0) throw std::invalid_argument("Mlp layer sizes must be positive");
      n += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
    }
    params_ = Vec::Zero(static_cast<Eigen::Index>(n));
  }

  const std::vector<std::size_t>& sizes() const { return sizes_; }
  Activation activation() const { return act_; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  std::size_t n_layers() const { return sizes_.size() - 1; }
  std::size_t n_params() const { return static_cast<std::size_t>(params_.size()); }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  void set_params(const Vec& p) {
    if (p.size() != params_.size()) throw std::invalid_argument("Mlp::set_params: size mismatch");
    params_ = p;
  }

  Eigen::Map<const Mat> weight(std::size_t l) const {
    return {params_.data() + offset(l), rows(l), cols(l)};
  }
  Eigen::Map<const Vec> bias(std::size_t l) const {
    return {params_.data() + offset(l) + rows(l) * cols(l), rows(l)};
  }
  Eigen::Map<Mat> weight(std::size_t l) { return {params_.data() + offset(l), rows(l), cols(l)}; }
  Eigen::Map<Vec> bias(std::size_t l) { return {params_.data() + offset(l) + rows(l) * cols(l), rows(l)}; }

  Mat forward(const Mat& x, Tape* tape = nullptr) const {
    if (static_cast<std::size_t>(x.rows()) != input_size())
      throw std::invalid_argument("Mlp::forward: input has " + std::to_string(x.rows()) + " rows, expected " +
                                  std::to_string(input_size()));
    if (tape) {
      tape->pre.clear();
      tape->post.clear();
      tape->post.push_back(x);
    }
    Mat a = x;
    for (std::size_t l = 0; l < n_layers(); ++l) {
      Mat z = weight(l) * a;
      z.colwise() += bias(l);
      const bool last = l + 1 == n_layers();
      if (tape) tape->pre.push_back(z);
      a = last ? z : activate(z);
      if (tape) tape->post.push_back(a);
    }
    return a;
  }

  Vec forward(const Vec& x) const { return forward(Mat(x)).col(0); }

  /**
   * Backpropagates d(loss)/d(output) through a recorded pass. Adds the
   * parameter gradient into `grad` (if non-null) and returns d(loss)/d(input).
   */
  Mat backward(const Tape& tape, const Mat& d_out, Vec* grad) const {
    if (tape.pre.size() != n_layers()) throw std::invalid_argument("Mlp::backward: tape does not match the net");
    if (grad && grad->size() != params_.size()) throw std::invalid_argument("Mlp::backward: gradient size mismatch");
    Mat g = d_out;
    for (std::size_t k = n_layers(); k-- > 0;) {
      if (k + 1 != n_layers()) g = g.cwiseProduct(activate_derivative(tape.pre[k]));
      if (grad) {
        Eigen::Map<Mat> gw(grad->data() + offset(k), rows(k), cols(k));
        Eigen::Map<Vec> gb(grad->data() + offset(k) + rows(k) * cols(k), rows(k));
        gw.noalias() += g * tape.post[k].transpose();
        gb += g.rowwise().sum();
      }
      g = weight(k).transpose() * g;
    }
    return g;
  }

  /// Scalar output and its parameter gradient at one input (output size 1).
  double value_and_grad(const Vec& x, Vec& grad) const {
    if (output_size() != 1) throw std::invalid_argument("value_and_grad needs a scalar-output net");
    Tape tape;
    const Mat y = forward(Mat(x), &tape);
    grad = Vec::Zero(params_.size());
    backward(tape, Mat::Ones(1, 1), &grad);
    return y(0, 0);
  }

  bool all_finite() const { return params_.allFinite(); }

 private:
  Eigen::Index rows(std::size_t l) const { return static_cast<Eigen::Index>(sizes_[l + 1]); }
  Eigen::Index cols(std::size_t l) const { return static_cast<Eigen::Index>(sizes_[l]); }
  Eigen::Index offset(std::size_t l) const {
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < l; ++k) off += rows(k) * cols(k) + rows(k);
    return off;
  }

  Mat activate(const Mat& z) const {
    if (act_ == Activation::relu) return z.cwiseMax(0.0);
    return z.unaryExpr([](double v) { return detail::softplus(v); });
  }
  // One-sided rectifier derivative: 0 at the kink.
  Mat activate_derivative(const Mat& z) const {
    if (act_ == Activation::relu) return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    return z.unaryExpr([](double v) { return detail::sigmoid(v); });
  }

  std::vector<std::size_t> sizes_;
  Activation act_ = Activation::relu;
  Vec params_;
};

// ---------------------------------------------------------------------------
// Optimization

struct AdamState {
  Vec m;
  Vec v;
  std::uint64_t step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t n, double learning_rate = 3e-4)
      : m(Vec::Zero(static_cast<Eigen::Index>(n))), v(Vec::Zero(static_cast<Eigen::Index>(n))), lr(learning_rate) {}
};

/// Bias-corrected Adam descent step on `params`.
inline void adam_step(AdamState& st, Vec& params, const Vec& grad) {
  if (grad.size() != params.size() || st.m.size() != params.size() || st.v.size() != params.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  ++st.step;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  params.array() -= st.lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + st.eps);
}

/// target <- (1 - xi) target + xi online
inline void polyak_update(Vec& target, const Vec& online, double xi) {
  if (!(xi >= 0.0 && xi <= 1.0)) throw std::invalid_argument("polyak_update: xi must lie in [0,1]");
  if (target.size() != online.size()) throw std::invalid_argument("polyak_update: shape mismatch");
  if (xi == 1.0) {
    target = online;
    return;
  }
  if (xi == 0.0) return;
  target = (1.0 - xi) * target + xi * online;
}

inline void polyak_update(Mlp& target, const Mlp& online, double xi) {
  if (target.sizes() != online.sizes()) throw std::invalid_argument("polyak_update: nets differ in shape");
  polyak_update(target.params(), online.params(), xi);
}

struct ExpectileValue {
  double value;
  double derivative;
};

/// L(u) = |tau - 1(u < 0)| u^2 and dL/du.
inline ExpectileValue expectile_loss(double u, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("expectile_loss: tau must lie in (0,1)");
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return {w * u * u, 2.0 * w * u};
}

// ---------------------------------------------------------------------------
// One-step generalization probe

struct ProbeReport {
  double alpha = 0.0;
  double c1 = 0.0;            ///< alpha * grad Q(s,a~) . grad Q(s,a)
  double delta_target = 0.0;  ///< target - Q(s,a)
  double observed = 0.0;      ///< Q'(s,a~) - Q(s,a~)
  double residual = 0.0;      ///< observed - c1 * delta_target
  double grad_norm_a = 0.0;
  double grad_norm_a_tilde = 0.0;
  double action_distance = 0.0;
  /// delta_target - (target at a~ - Q(s,a~)), when a target at a~ is supplied.
  std::optional<double> c2_term;
};

namespace detail {

inline Vec concat(const Vec& s, const Vec& a) {
  Vec x(s.size() + a.size());
  x << s, a;
  return x;
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError(std::string("generalization probe: non-finite ") + what);
}

}  // namespace detail

/**
 * Applies theta' = theta + alpha (target - Q(s,a)) grad Q(s,a) to a copy of
 * `net` (input = [s; a], scalar output) and measures the induced change at
 * (s, a_tilde).
 */
inline ProbeReport generalization_probe(const Mlp& net, double target, const Vec& s, const Vec& a, const Vec& a_tilde,
                                        double alpha, std::optional<double> target_at_a_tilde = std::nullopt) {
  if (net.activation() != Activation::softplus)
    throw std::invalid_argument("generalization probe requires a smooth (softplus) net");
  if (a.size() != a_tilde.size()) throw std::invalid_argument("generalization probe: action sizes differ");
  Vec g_a, g_t;
  const double q_a = net.value_and_grad(detail::concat(s, a), g_a);
  const double q_t = net.value_and_grad(detail::concat(s, a_tilde), g_t);

  ProbeReport r;
  r.alpha = alpha;
  r.delta_target = target - q_a;
  r.c1 = alpha * g_t.dot(g_a);
  Mlp moved = net;
  moved.params() += alpha * r.delta_target * g_a;
  r.observed = moved.forward(detail::concat(s, a_tilde))(0) - q_t;
  r.residual = r.observed - r.c1 * r.delta_target;
  r.grad_norm_a = g_a.norm();
  r.grad_norm_a_tilde = g_t.norm();
  r.action_distance = (a_tilde - a).norm();
  if (target_at_a_tilde) r.c2_term = r.delta_target - (*target_at_a_tilde - q_t);
  for (double v : {r.c1, r.delta_target, r.observed, r.residual}) detail::require_finite(v, "quantity");
  return r;
}

inline nlohmann::ordered_json to_json(const ProbeReport& r) {
  nlohmann::ordered_json j;
  j["alpha"] = r.alpha;
  j["c1"] = r.c1;
  j["delta_target"] = r.delta_target;
  j["observed"] = r.observed;
  j["residual"] = r.residual;
  j["grad_norm_a"] = r.grad_norm_a;
  j["grad_norm_a_tilde"] = r.grad_norm_a_tilde;
  j["action_distance"] = r.action_distance;
  if (r.c2_term) j["c2_term"] = *r.c2_term;
  return j;
}

struct ProbeSuiteOptions {
  std::uint64_t seed = 1;
  std::size_t trials = 20;
  std::size_t state_dim = 3;
  std::size_t action_dim = 2;
  std::vector<std::size_t> hidden = {32, 32};
  /// alpha = alpha_scale / g_max^2, then halved once.
  double alpha_scale = 0.05;
  double ratio_lo = 3.0;
  double ratio_hi = 5.0;
};

struct ProbeTrial {
  ProbeReport full;
  ProbeReport half;
  double ratio = 0.0;
  double g_max = 0.0;
  double k_g = 0.0;
  bool conditions_hold = false;  ///< alpha <= 1/g_max^2 and ||a~-a|| <= ||grad Q(s,a)|| / K_g
  bool c1_in_unit_interval = false;
  bool passed = false;
};

struct ProbeSuiteReport {
  bool passed = true;
  std::vector<ProbeTrial> trials;
  double min_ratio = 0.0;
  double max_ratio = 0.0;
};

/**
 * Random smooth nets and probe points. g_max is the largest parameter
 * gradient norm seen over the probe points and 64 random inputs; K_g is the
 * local gradient-difference ratio between a and a~.
 */
inline ProbeSuiteReport run_probe_suite(const ProbeSuiteOptions& opt) {
  ProbeSuiteReport rep;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_vec = [&](std::size_t n, double scale) {
    Vec v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = scale * normal(rng);
    return v;
  };
  rep.min_ratio = std::numeric_limits<double>::infinity();
  rep.max_ratio = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < opt.trials; ++t) {
    std::vector<std::size_t> sizes{opt.state_dim + opt.action_dim};
    sizes.insert(sizes.end(), opt.hidden.begin(), opt.hidden.end());
    sizes.push_back(1);
    const Mlp net(sizes, Activation::softplus, rng);
    const Vec s = random_vec(opt.state_dim, 1.0);
    const Vec a = random_vec(opt.action_dim, 1.0);
    const Vec a_tilde = a + random_vec(opt.action_dim, 0.02);
    const double target = net.forward(detail::concat(s, a))(0) + normal(rng);

    Vec g_a, g_t, g;
    net.value_and_grad(detail::concat(s, a), g_a);
    net.value_and_grad(detail::concat(s, a_tilde), g_t);
    double g_max = std::max(g_a.norm(), g_t.norm());
    for (int i = 0; i < 64; ++i) {
      net.value_and_grad(random_vec(opt.state_dim + opt.action_dim, 1.0), g);
      g_max = std::max(g_max, g.norm());
    }
    const double dist = (a_tilde - a).norm();
    const double k_g = (g_t - g_a).norm() / dist;

    ProbeTrial trial;
    const double alpha = opt.alpha_scale / (g_max * g_max);
    trial.full = generalization_probe(net, target, s, a, a_tilde, alpha);
    trial.half = generalization_probe(net, target, s, a, a_tilde, alpha / 2.0);
    trial.ratio = trial.full.residual / trial.half.residual;
    trial.g_max = g_max;
    trial.k_g = k_g;
    trial.conditions_hold = alpha <= 1.0 / (g_max * g_max) && dist <= g_a.norm() / k_g;
    trial.c1_in_unit_interval = trial.full.c1 >= 0.0 && trial.full.c1 <= 1.0 && trial.half.c1 >= 0.0 &&
                                trial.half.c1 <= 1.0;
    const bool ratio_ok = trial.ratio >= opt.ratio_lo && trial.ratio <= opt.ratio_hi;
    trial.passed = ratio_ok && (!trial.conditions_hold || trial.c1_in_unit_interval);
    rep.passed = rep.passed && trial.passed;
    rep.min_ratio = std::min(rep.min_ratio, trial.ratio);
    rep.max_ratio = std::max(rep.max_ratio, trial.ratio);
    rep.trials.push_back(trial);
  }
  return rep;
}

inline nlohmann::ordered_json to_json(const ProbeSuiteReport& r) {
  nlohmann::ordered_json j;
  j["suite"] = "probe";
  j["passed"] = r.passed;
  j["trials_checked"] = r.trials.size();
  j["min_residual_ratio"] = r.min_ratio;
  j["max_residual_ratio"] = r.max_ratio;
  j["trials"] = nlohmann::ordered_json::array();
  for (const auto& t : r.trials) {
    nlohmann::ordered_json x;
    x["passed"] = t.passed;
    x["residual_ratio"] = t.ratio;
    x["g_max"] = t.g_max;
    x["k_g"] = t.k_g;
    x["conditions_hold"] = t.conditions_hold;
    x["c1_in_unit_interval"] = t.c1_in_unit_interval;
    x["alpha"] = to_json(t.full);
    x["alpha_half"] = to_json(t.half);
    j["trials"].push_back(std::move(x));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const Mlp& net) {
  nlohmann::ordered_json j;
  j["sizes"] = net.sizes();
  j["activation"] = to_string(net.activation());
  j["params"] = std::vector<double>(net.params().data(), net.params().data() + net.params().size());
  return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  Mlp net(j.at("sizes").get<std::vector<std::size_t>>(), activation_from_string(j.at("activation").get<std::string>()));
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != net.n_params())
    throw std::runtime_error("checkpoint net has " + std::to_string(p.size()) + " parameters, expected " +
                             std::to_string(net.n_params()));
  net.set_params(Eigen::Map<const Vec>(p.data(), static_cast<Eigen::Index>(p.size())));
  if (!net.all_finite()) throw std::runtime_error("checkpoint net has non-finite parameters");
  return net;
}

inline nlohmann::ordered_json to_json(const AdamState& st) {
  nlohmann::ordered_json j;
  j["step"] = st.step;
  j["lr"] = st.lr;
  j["beta1"] = st.beta1;
  j["beta2"] = st.beta2;
  j["eps"] = st.eps;
  j["m"] = std::vector<double>(st.m.data(), st.m.data() + st.m.size());
  j["v"] = std::vector<double>(st.v.data(), st.v.data() + st.v.size());
  return j;
}

inline AdamState adam_from_json(const nlohmann::json& j) {
  AdamState st;
  st.step = j.at("step").get<std::uint64_t>();
  st.lr = j.at("lr").get<double>();
  st.beta1 = j.at("beta1").get<double>();
  st.beta2 = j.at("beta2").get<double>();
  st.eps = j.at("eps").get<double>();
  const auto m = j.at("m").get<std::vector<double>>();
  const auto v = j.at("v").get<std::vector<double>>();
  if (m.size() != v.size()) throw std::runtime_error("checkpoint optimizer moments differ in size");
  st.m = Eigen::Map<const Vec>(m.data(), static_cast<Eigen::Index>(m.size()));
  st.v = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
  return st;
}

}  // namespace dmg
