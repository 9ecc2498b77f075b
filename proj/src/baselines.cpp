#include "ldp/baselines.hpp"

#include <cmath>

#include "ldp/error.hpp"

namespace ldp {

namespace {

Var squash(const Var& a, const EmConfig& config) {
  return config.model.family == Family::Bernoulli || config.bounded_mean ? sigmoid(a) : a;
}

Var weighted_score(const Var& gamma, const Var& images, const Var& means, const ComponentModel& model) {
  Var r = mul(gamma, sub(images, means));
  return model.family == Family::Gaussian ? scale(r, model.alpha) : r;
}

void finish_posterior(EStep& e, const EmConfig& config) {
  e.mix.log_gamma = log_posterior(e.mix.log_p, e.mix.log_pi);
  e.mix.gamma = exp(e.mix.log_gamma);
  if (config.detach_gamma) e.mix.gamma = detach(e.mix.gamma);
}

}  // namespace

EStep nem_e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params, const ArchConfig& arch,
                 const EmConfig& config) {
  const std::size_t b = images.shape()[0], k = config.components, m = images.shape()[2];
  EStep e;
  e.logits = reshape(decode_shape_logits(tape, params, arch, state.latents), {b, k, m});
  e.means = squash(e.logits, config);
  e.mix.log_pi = tape.constant(Tensor(Shape{b, k, m}, -std::log(static_cast<double>(k))));
  e.mix.log_p = component_log_likelihood(images, e.means, config.model);
  finish_posterior(e, config);
  return e;
}

Var nem_update_signal(const Var& images, const EStep& e, const EmConfig& config) {
  const std::size_t b = images.shape()[0], k = config.components, m = images.shape()[2];
  return reshape(weighted_score(e.mix.gamma, images, e.means, config.model), {b * k, m});
}

LatentState nem_latent_update(Tape& tape, const Var& images, const EStep& e, const LatentState& state,
                              ParamStore& params, const ArchConfig& arch, const EmConfig& config) {
  if (config.method != Method::Nem) throw ContractError("nem_latent_update called for another method");
  return m_step(tape, images, e, state, params, arch, config);
}

Var nem_loss(const Var& gamma, const Var& log_p, const Var& log_pi, const Var& means, const PriorSpec& prior,
             const ComponentModel& model) {
  Var fixed = detach(gamma);
  Var q = q_function(fixed, log_p, log_pi);
  if (prior.lambda == 0.0) return neg(q);
  Var kl = broadcast_to(kl_from_prior(means, prior, model), fixed.shape());
  Var penalty = reduce_sum(mul(add_scalar(neg(fixed), 1.0), kl), {-2, -1});
  return add(neg(q), scale(penalty, prior.lambda));
}

EStep softmax_e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params,
                     const ArchConfig& arch, const EmConfig& config) {
  const std::size_t b = images.shape()[0], k = config.components, m = images.shape()[2];
  EStep e;
  e.logits = reshape(decode_shape_logits(tape, params, arch, state.latents), {b, k, m});
  e.appearance_logits = reshape(appearance_logits(tape, params, arch, state.latents), {b, k, 1});
  e.means = squash(e.appearance_logits, config);
  e.background_mean = slice(e.means, 1, k - 1, k);
  e.mix.log_pi = softmax_log_weights(e.logits);
  e.mix.log_p = component_log_likelihood(images, e.means, config.model);
  finish_posterior(e, config);
  return e;
}

Var softmax_update_signal(const Var& images, const EStep& e, const EmConfig& config) {
  const std::size_t b = images.shape()[0], k = config.components, m = images.shape()[2];
  Var u = reduce_sum(weighted_score(e.mix.gamma, images, e.means, config.model), {2}, true);
  Var v = sub(e.mix.gamma, exp(e.mix.log_pi));
  return reshape(concat({u, v}, 2), {b * k, m + 1});
}

}  // namespace ldp
