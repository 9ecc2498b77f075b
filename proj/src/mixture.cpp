#include "ldp/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ldp/error.hpp"

namespace ldp {

namespace {

constexpr int kComp = -2;
constexpr int kPix = -1;

void require_mixture_rank(const Var& v, const char* what) {
  if (v.shape().size() < 2)
    throw DimensionError(std::string(what) + ": expected [K, M] or [B, K, M], got " + to_string(v.shape()));
}

Tensor exp_of(const Tensor& t) {
  Tensor out = t;
  for (double& x : out.data()) x = std::exp(x);
  return out;
}

Tensor log_of(const Tensor& t, const char* what) {
  Tensor out = t;
  for (double& x : out.data()) {
    if (!(x > 0.0)) throw DomainError(std::string(what) + ": non-positive value");
    x = std::log(x);
  }
  return out;
}

}  // namespace

void ComponentModel::validate() const {
  if (family == Family::Gaussian && !(alpha > 0.0)) throw DomainError("inverse variance must be positive");
}

double PriorSpec::mean_param(const ComponentModel& model) const {
  return model.family == Family::Gaussian ? gaussian_mean : bernoulli_theta;
}

void PriorSpec::validate() const {
  if (!(bernoulli_theta > 0.0 && bernoulli_theta < 1.0)) throw DomainError("Bernoulli prior must lie in (0, 1)");
  if (!(lambda >= 0.0)) throw DomainError("regularisation weight must be non-negative");
  if (!std::isfinite(gaussian_mean)) throw DomainError("prior mean must be finite");
}

Tensor MixtureState::p() const { return exp_of(log_p.value()); }
Tensor MixtureState::pi() const { return exp_of(log_pi.value()); }

Var stick_breaking_log_weights(const Var& sticks) {
  require_mixture_rank(sticks, "stick_breaking_weights");
  for (double c : sticks.value().data())
    if (!(c > 0.0 && c < 1.0)) throw DomainError("stick length outside (0, 1)");
  Var log_c = log(sticks);
  Var log_rest = log(add_scalar(neg(sticks), 1.0));
  Var head = add(log_c, cumsum(log_rest, kComp, /*exclusive=*/true));
  Var tail = reduce_sum(log_rest, {kComp}, /*keepdims=*/true);
  return concat({head, tail}, static_cast<int>(sticks.shape().size()) - 2);
}

std::string to_string(Family family) { return family == Family::Gaussian ? "gaussian" : "bernoulli"; }

Family parse_family(const std::string& name) {
  if (name == "gaussian") return Family::Gaussian;
  if (name == "bernoulli") return Family::Bernoulli;
  throw ConfigError("family: expected gaussian or bernoulli, got '" + name + "'");
}

Tensor stick_breaking_weights(const Tensor& sticks) {
  NoGradGuard guard;
  Tape tape;
  return exp_of(stick_breaking_log_weights(tape.constant(sticks)).value());
}

Var softmax_log_weights(const Var& logits) {
  require_mixture_rank(logits, "softmax_weights");
  return sub(logits, logsumexp(logits, kComp, /*keepdims=*/true));
}

Tensor softmax_weights(const Tensor& logits) {
  NoGradGuard guard;
  Tape tape;
  return exp_of(softmax_log_weights(tape.constant(logits)).value());
}

Var component_log_likelihood(const Var& x, const Var& means, const ComponentModel& model) {
  model.validate();
  if (model.family == Family::Gaussian) {
    const double log_norm = 0.5 * std::log(model.alpha / (2.0 * std::numbers::pi));
    return add_scalar(scale(square(sub(x, means)), -0.5 * model.alpha), log_norm);
  }
  Var log_on = log(means);
  Var log_off = log(add_scalar(neg(means), 1.0));
  // x log theta + (1 - x) log(1 - theta), written to broadcast x once.
  return add(mul(x, sub(log_on, log_off)), log_off);
}

double component_likelihood(double x, double mean, const ComponentModel& model) {
  model.validate();
  if (model.family == Family::Gaussian) {
    const double d = x - mean;
    return std::sqrt(model.alpha / (2.0 * std::numbers::pi)) * std::exp(-0.5 * model.alpha * d * d);
  }
  if (!(mean > 0.0 && mean < 1.0)) throw DomainError("Bernoulli parameter outside (0, 1)");
  return std::pow(mean, x) * std::pow(1.0 - mean, 1.0 - x);
}

Var log_posterior(const Var& log_p, const Var& log_pi) {
  require_mixture_rank(log_p, "posterior");
  Var joint = add(log_p, log_pi);
  return sub(joint, logsumexp(joint, kComp, /*keepdims=*/true));
}

Tensor posterior(const Tensor& p, const Tensor& pi) {
  if (p.shape() != pi.shape()) throw DimensionError("posterior: shape mismatch");
  NoGradGuard guard;
  Tape tape;
  Var lp = tape.constant(log_of(p, "posterior"));
  Var lw = tape.constant(log_of(pi, "posterior"));
  return exp_of(log_posterior(lp, lw).value());
}

Var q_function(const Var& gamma, const Var& log_p, const Var& log_pi) {
  require_mixture_rank(log_p, "q_function");
  return reduce_sum(mul(gamma, add(log_p, log_pi)), {kComp, kPix});
}

Var log_likelihood(const Var& log_p, const Var& log_pi) {
  require_mixture_rank(log_p, "log_likelihood");
  return reduce_sum(logsumexp(add(log_p, log_pi), kComp), {kPix});
}

double kl_div(const Distribution& prior, const Distribution& q) {
  if (prior.family != q.family) throw ContractError("kl_div: distributions of different families");
  if (prior.family == Family::Gaussian) {
    if (!(prior.alpha > 0.0) || prior.alpha != q.alpha)
      throw ContractError("kl_div: Gaussians must share a positive inverse variance");
    const double d = prior.param - q.param;
    return 0.5 * prior.alpha * d * d;
  }
  const double a = prior.param, b = q.param;
  if (!(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0)) throw DomainError("Bernoulli parameter outside (0, 1)");
  return a * std::log(a / b) + (1.0 - a) * std::log((1.0 - a) / (1.0 - b));
}

Var kl_from_prior(const Var& means, const PriorSpec& prior, const ComponentModel& model) {
  model.validate();
  if (model.family == Family::Gaussian)
    return scale(square(add_scalar(means, -prior.gaussian_mean)), 0.5 * model.alpha);
  const double a = prior.bernoulli_theta;
  if (!(a > 0.0 && a < 1.0)) throw DomainError("Bernoulli prior must lie in (0, 1)");
  const double entropy_term = a * std::log(a) + (1.0 - a) * std::log(1.0 - a);
  Var cross = add(scale(log(means), a), scale(log(add_scalar(neg(means), 1.0)), 1.0 - a));
  return add_scalar(neg(cross), entropy_term);
}

Var ldp_loss(const Var& gamma, const Var& log_p, const Var& log_pi, const Var& background_mean,
             const PriorSpec& prior, const ComponentModel& model) {
  require_mixture_rank(log_p, "ldp_loss");
  Var q = q_function(detach(gamma), log_p, log_pi);
  if (prior.lambda == 0.0) return neg(q);
  Shape bg_shape = log_p.shape();
  bg_shape[bg_shape.size() - 2] = 1;
  Var kl = broadcast_to(kl_from_prior(background_mean, prior, model), bg_shape);
  return add(neg(q), scale(reduce_sum(kl, {kComp, kPix}), prior.lambda));
}

std::vector<int> argmax_labels(const Tensor& gamma) {
  const Shape& s = gamma.shape();
  if (s.size() < 2) throw DimensionError("argmax_labels: expected [K, M] or [B, K, M]");
  const std::size_t m = s[s.size() - 1], k = s[s.size() - 2];
  const std::size_t b = gamma.size() / std::max<std::size_t>(1, k * m);
  std::vector<int> labels(b * m, 0);
  const auto data = gamma.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t px = 0; px < m; ++px) {
      const double* base = data.data() + i * k * m + px;
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (base[c * m] > base[best * m]) best = c;
      labels[i * m + px] = static_cast<int>(best);
    }
  return labels;
}

}  // namespace ldp
