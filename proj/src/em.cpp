#include "ldp/em.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldp/baselines.hpp"
#include "ldp/error.hpp"

namespace ldp {

namespace {

std::size_t batch_of(const Var& images) { return images.shape()[0]; }
std::size_t pixels_of(const Var& images) { return images.shape()[2]; }

// Gradient of log p with respect to the component's natural parameter,
// times the posterior: alpha (x - mu) for Gaussian, (x - theta) for Bernoulli.
Var weighted_score(const Var& gamma, const Var& images, const Var& means, const ComponentModel& model) {
  Var r = mul(gamma, sub(images, means));
  return model.family == Family::Gaussian ? scale(r, model.alpha) : r;
}

EStep ldp_e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params, const ArchConfig& arch,
                 const EmConfig& config) {
  const std::size_t b = batch_of(images), s = config.latent_slots(), m = pixels_of(images);
  EStep e;
  e.logits = reshape(decode_shape_logits(tape, params, arch, state.latents), {b, s, m});
  Var sticks = sigmoid(e.logits);
  e.appearance_logits = reshape(appearance_logits(tape, params, arch, state.latents), {b, s, 1});
  const bool bounded = config.model.family == Family::Bernoulli || config.bounded_mean;
  Var appearance = bounded ? sigmoid(e.appearance_logits) : e.appearance_logits;
  e.background_mean = config.model.family == Family::Bernoulli ? sigmoid(state.background) : state.background;
  e.means = concat({appearance, e.background_mean}, 1);
  e.mix.sticks = sticks;
  e.mix.log_pi = stick_breaking_log_weights(sticks);
  e.mix.log_p = component_log_likelihood(images, e.means, config.model);
  e.mix.log_gamma = log_posterior(e.mix.log_p, e.mix.log_pi);
  e.mix.gamma = exp(e.mix.log_gamma);
  if (config.detach_gamma) e.mix.gamma = detach(e.mix.gamma);
  return e;
}

Var ldp_update_signal(const Var& images, const EStep& e, const EmConfig& config) {
  const std::size_t b = batch_of(images), s = config.latent_slots(), m = pixels_of(images);
  const Var& gamma = e.mix.gamma;
  Var gamma_obj = slice(gamma, 1, 0, s);
  Var u = reduce_sum(weighted_score(gamma_obj, images, slice(e.means, 1, 0, s), config.model), {2}, true);
  Var tail = slice(cumsum(gamma, 1, /*exclusive=*/false, /*reverse=*/true), 1, 0, s);
  Var v = sub(gamma_obj, mul(e.mix.sticks, tail));
  return reshape(concat({u, v}, 2), {b * s, m + 1});
}

}  // namespace

std::string to_string(Method method) {
  switch (method) {
    case Method::Ldp: return "ldp";
    case Method::Softmax: return "ldp-softmax";
    case Method::Nem: return "nem";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  if (name == "ldp") return Method::Ldp;
  if (name == "ldp-softmax") return Method::Softmax;
  if (name == "nem") return Method::Nem;
  throw ConfigError("unknown method '" + name + "' (expected ldp, ldp-softmax or nem)");
}

std::string to_string(UpdateMode mode) { return mode == UpdateMode::Gradient ? "gradient" : "rnn"; }

UpdateMode parse_update_mode(const std::string& name) {
  if (name == "gradient") return UpdateMode::Gradient;
  if (name == "rnn") return UpdateMode::Rnn;
  throw ConfigError("unknown update mode '" + name + "' (expected gradient or rnn)");
}

void EmConfig::validate() const {
  if (components < 2) throw ConfigError("need at least two components");
  if (steps < 1) throw ConfigError("need at least one EM step");
  if (!(latent_init_scale >= 0.0)) throw ConfigError("latent init scale must be non-negative");
  try {
    model.validate();
    prior.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (!step_weights.empty()) {
    if (step_weights.size() != steps) throw ConfigError("step weight count must equal the step count");
    double total = 0.0;
    for (double w : step_weights) {
      if (!(w >= 0.0)) throw ConfigError("step weights must be non-negative");
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("step weights must not all be zero");
  }
}

std::size_t EmConfig::latent_slots() const { return method == Method::Ldp ? components - 1 : components; }

std::vector<double> EmConfig::normalized_weights() const {
  std::vector<double> w = step_weights;
  if (w.empty()) {
    w.resize(steps);
    std::iota(w.begin(), w.end(), 1.0);
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= total;
  return w;
}

ArchConfig arch_for(const EmConfig& config, ArchConfig base) {
  base.family = config.model.family;
  if (config.method == Method::Nem) {
    base.appearance_dim = 0;
    base.encoder_input = base.pixels();
  } else {
    base.appearance_dim = 1;
    base.encoder_input = base.pixels() + 1;
  }
  return base;
}

LatentInit init_latents(const EmConfig& config, std::size_t latent_dim, Rng& rng) {
  LatentInit init;
  init.latents = Tensor(Shape{config.latent_slots(), latent_dim});
  for (double& v : init.latents.data()) v = config.latent_init_scale * rng.normal();
  if (config.model.family == Family::Gaussian) {
    init.background = config.prior.gaussian_mean;
  } else {
    const double theta = config.prior.bernoulli_theta;
    init.background = std::log(theta / (1.0 - theta));
  }
  return init;
}

LatentState initial_state(Tape& tape, const EmConfig& config, const ArchConfig& arch,
                          std::span<const std::uint64_t> seeds) {
  const std::size_t b = seeds.size(), s = config.latent_slots(), n = arch.latent_dim;
  Tensor latents(Shape{b * s, n});
  Tensor background(Shape{b, 1, 1});
  for (std::size_t i = 0; i < b; ++i) {
    Rng rng(seeds[i]);
    LatentInit init = init_latents(config, n, rng);
    std::copy(init.latents.data().begin(), init.latents.data().end(), latents.data().begin() + i * s * n);
    background[i] = init.background;
  }
  LatentState state;
  // The gradient update differentiates through the latents, so they must be tracked.
  state.latents = config.mode == UpdateMode::Gradient ? tape.variable(std::move(latents))
                                                      : tape.constant(std::move(latents));
  if (config.method == Method::Ldp) state.background = tape.constant(std::move(background));
  return state;
}

EStep e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params, const ArchConfig& arch,
             const EmConfig& config) {
  if (images.shape().size() != 3 || images.shape()[1] != 1 || images.shape()[2] != arch.pixels())
    throw ContractError("e_step: images must be [B, 1, " + std::to_string(arch.pixels()) + "], got " +
                        to_string(images.shape()));
  switch (config.method) {
    case Method::Ldp: return ldp_e_step(tape, images, state, params, arch, config);
    case Method::Softmax: return softmax_e_step(tape, images, state, params, arch, config);
    case Method::Nem: return nem_e_step(tape, images, state, params, arch, config);
  }
  throw ContractError("unknown method");
}

Var update_signal(const Var& images, const EStep& e, const EmConfig& config) {
  switch (config.method) {
    case Method::Ldp: return ldp_update_signal(images, e, config);
    case Method::Softmax: return softmax_update_signal(images, e, config);
    case Method::Nem: return nem_update_signal(images, e, config);
  }
  throw ContractError("unknown method");
}

LatentState m_step_gradient(Tape& tape, const EStep& e, const LatentState& state, ParamStore& params,
                            const EmConfig& /*config*/) {
  if (!state.latents.requires_grad())
    throw ContractError("gradient update needs tracked latents with recording enabled");
  // dQ/ds with gamma as the seed: fixed within the step, still differentiable
  // as a function of the previous latents.
  std::vector<Var> outs{e.mix.log_p, e.mix.log_pi}, seeds{e.mix.gamma, e.mix.gamma}, ins{state.latents};
  Var dq = tape.grad(outs, seeds, ins, /*create_graph=*/true)[0];
  LatentState next = state;
  next.latents = add(state.latents, mul(latent_step_size(tape, params), dq));
  return next;
}

LatentState m_step_rnn(Tape& tape, const Var& images, const EStep& e, const LatentState& state, ParamStore& params,
                       const ArchConfig& arch, const EmConfig& config) {
  Var features = encode_update_signal(tape, params, arch, update_signal(images, e, config));
  LatentState next = state;
  next.latents = rnn_step(tape, params, arch, features, state.latents);
  return next;
}

LatentState m_step(Tape& tape, const Var& images, const EStep& e, const LatentState& state, ParamStore& params,
                   const ArchConfig& arch, const EmConfig& config) {
  return config.mode == UpdateMode::Gradient ? m_step_gradient(tape, e, state, params, config)
                                             : m_step_rnn(tape, images, e, state, params, arch, config);
}

LatentState update_background(Tape& tape, const Var& images, const EStep& e, const LatentState& state,
                              ParamStore& params, const EmConfig& config) {
  if (config.method != Method::Ldp) return state;
  const std::size_t k = config.components;
  Var gamma_bg = slice(e.mix.gamma, 1, k - 1, k);
  Var step = reduce_sum(weighted_score(gamma_bg, images, e.background_mean, config.model), {2}, true);
  LatentState next = state;
  next.background = add(state.background, mul(background_step_size(tape, params), step));
  return next;
}

Var step_loss(const EStep& before, const EStep& after, const EmConfig& config) {
  const std::size_t k = config.components;
  switch (config.method) {
    case Method::Ldp:
      return ldp_loss(before.mix.gamma, after.mix.log_p, after.mix.log_pi, after.background_mean, config.prior,
                      config.model);
    case Method::Softmax:
      return ldp_loss(before.mix.gamma, after.mix.log_p, after.mix.log_pi, slice(after.means, 1, k - 1, k),
                      config.prior, config.model);
    case Method::Nem:
      return nem_loss(before.mix.gamma, after.mix.log_p, after.mix.log_pi, after.means, config.prior, config.model);
  }
  throw ContractError("unknown method");
}

std::vector<int> EmTrace::labels() const { return argmax_labels(final_gamma()); }

const Tensor& EmTrace::final_gamma() const {
  if (esteps.size() < 2) throw ContractError("empty trace");
  return esteps[esteps.size() - 2].mix.gamma.value();
}

EmTrace run_em(Tape& tape, const Tensor& images, std::span<const std::uint64_t> seeds, ParamStore& params,
               const ArchConfig& arch, const EmConfig& config) {
  config.validate();
  if (images.rank() != 2 || images.dim(1) != arch.pixels())
    throw ContractError("run_em: images must be [B, " + std::to_string(arch.pixels()) + "], got " +
                        to_string(images.shape()));
  if (seeds.size() != images.dim(0)) throw ContractError("run_em: one latent seed per image required");
  if (config.mode == UpdateMode::Gradient && !grad_enabled())
    throw ContractError("gradient update mode needs recording enabled");

  const std::size_t b = images.dim(0), m = arch.pixels();
  Var x = tape.constant(images.reshaped({b, 1, m}));
  const std::vector<double> w = config.normalized_weights();

  EmTrace trace;
  std::size_t t = 0;
  try {
    trace.states.push_back(initial_state(tape, config, arch, seeds));
    trace.esteps.push_back(e_step(tape, x, trace.states.back(), params, arch, config));
    for (; t < config.steps; ++t) {
      const EStep& e = trace.esteps.back();
      LatentState next = m_step(tape, x, e, trace.states.back(), params, arch, config);
      next = update_background(tape, x, e, next, params, config);
      trace.states.push_back(next);
      trace.esteps.push_back(e_step(tape, x, next, params, arch, config));
      Var loss = step_loss(trace.esteps[t], trace.esteps[t + 1], config);
      trace.losses.push_back(loss);
      Var weighted = scale(loss, w[t]);
      trace.weighted_loss = t == 0 ? weighted : add(trace.weighted_loss, weighted);
    }
  } catch (const NumericalError& err) {
    throw NumericalError("EM step " + std::to_string(t) + ": " + err.what());
  }
  return trace;
}

Tensor object_reconstructions(const EmTrace& trace, const EmConfig& config) {
  const EStep& e = trace.esteps.at(trace.esteps.size() - 2);
  const Tensor& means = e.means.value();
  const std::size_t b = means.dim(0), k = config.components;
  const Tensor& log_pi = e.mix.log_pi.value();
  const std::size_t m = log_pi.dim(2);
  const std::size_t r = config.method == Method::Ldp ? k - 1 : k;
  Tensor out(Shape{b, r, m});
  if (config.method == Method::Nem) {
    const Tensor& gamma = e.mix.gamma.value();
    for (std::size_t i = 0; i < b * k * m; ++i) out[i] = gamma[i] * means[i];
    return out;
  }
  const double bg = config.prior.mean_param(config.model);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c = 0; c < r; ++c) {
      const double a = means[i * k + c];
      for (std::size_t px = 0; px < m; ++px) {
        const double pi = std::exp(log_pi[(i * k + c) * m + px]);
        out[(i * r + c) * m + px] = pi * a + (1.0 - pi) * bg;
      }
    }
  return out;
}

}  // namespace ldp
