#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ldp/autodiff.hpp"
#include "ldp/mixture.hpp"
#include "ldp/networks.hpp"
#include "ldp/random.hpp"

// Unrolled EM over a batch of B images held as [B, 1, M]. Latents are rows
// [B * S, N], image-major, where S is the number of latent slots per image.

namespace ldp {

enum class Method { Ldp, Softmax, Nem };
std::string to_string(Method method);
Method parse_method(const std::string& name);

enum class UpdateMode { Gradient, Rnn };
std::string to_string(UpdateMode mode);
UpdateMode parse_update_mode(const std::string& name);

struct EmConfig {
  Method method = Method::Ldp;
  std::size_t components = 3;  ///< K, background last
  std::size_t steps = 10;      ///< T
  UpdateMode mode = UpdateMode::Rnn;
  ComponentModel model;
  PriorSpec prior;
  double latent_init_scale = 1.0;
  /// Per-step loss weights; empty selects w_t proportional to t (t = 1..T).
  std::vector<double> step_weights;
  /// Cuts the path through the posterior between steps.
  bool detach_gamma = false;
  /// Squash Gaussian component means into (0, 1) instead of the linear head.
  bool bounded_mean = false;

  void validate() const;
  /// K - 1 for the stick-breaking model, K otherwise.
  std::size_t latent_slots() const;
  std::vector<double> normalized_weights() const;
};

/// Fills the method-dependent fields of `base` (family, appearance head,
/// encoder input width).
ArchConfig arch_for(const EmConfig& config, ArchConfig base);

/// Latents [B * S, N] plus the background parameter [B, 1, 1] (Gaussian
/// mean, or logit of the Bernoulli parameter). The background is unset for
/// methods without a learned background component.
struct LatentState {
  Var latents;
  Var background;
};

struct LatentInit {
  Tensor latents;  ///< [S, N]
  double background = 0.0;
};

/// s ~ N(0, sigma_init^2) per entry; background at the prior.
LatentInit init_latents(const EmConfig& config, std::size_t latent_dim, Rng& rng);

/// One latent stream per image: image i draws from Rng(seeds[i]).
LatentState initial_state(Tape& tape, const EmConfig& config, const ArchConfig& arch,
                          std::span<const std::uint64_t> seeds);

/// Everything the E-step derives from a latent state.
struct EStep {
  MixtureState mix;
  Var logits;           ///< [B, S, M] decoder output
  Var means;            ///< [B, K, 1] component mean parameters ([B, K, M] for the per-pixel baseline)
  Var appearance_logits;///< [B, S, 1] appearance preactivation (weighted models)
  Var background_mean;  ///< [B, 1, 1] mean parameter of the last component
};

EStep e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params, const ArchConfig& arch,
             const EmConfig& config);

/// Closed-form update signal [B * S, encoder_input] fed to the recurrent updater.
Var update_signal(const Var& images, const EStep& e, const EmConfig& config);

/// s += eta_s * dQ/ds with the posterior held fixed.
LatentState m_step_gradient(Tape& tape, const EStep& e, const LatentState& state, ParamStore& params,
                            const EmConfig& config);
/// s <- rnn(enc(update_signal), s).
LatentState m_step_rnn(Tape& tape, const Var& images, const EStep& e, const LatentState& state, ParamStore& params,
                       const ArchConfig& arch, const EmConfig& config);
LatentState m_step(Tape& tape, const Var& images, const EStep& e, const LatentState& state, ParamStore& params,
                   const ArchConfig& arch, const EmConfig& config);

/// Background gradient step: mu += eta_bg * alpha * sum_m gamma_K (x - mu)
/// (Bernoulli: logit += eta_bg * sum_m gamma_K (x - theta)).
LatentState update_background(Tape& tape, const Var& images, const EStep& e, const LatentState& state,
                              ParamStore& params, const EmConfig& config);

/// Per-image loss [B] of the posterior `before` against the parameters of `after`.
Var step_loss(const EStep& before, const EStep& after, const EmConfig& config);

struct EmTrace {
  std::vector<EStep> esteps;         ///< T + 1 entries; the last scores the final update
  std::vector<LatentState> states;   ///< T + 1 entries
  std::vector<Var> losses;           ///< T entries of [B]
  Var weighted_loss;                 ///< [B]

  std::size_t steps() const { return losses.size(); }
  /// Argmax of the posterior of the last in-loop E-step, B * M labels.
  std::vector<int> labels() const;
  /// Posterior of the last in-loop E-step, [B, K, M].
  const Tensor& final_gamma() const;
};

/// Runs the unrolled loop on images [B, M]. Throws NumericalError naming the
/// step on NaN/Inf.
EmTrace run_em(Tape& tape, const Tensor& images, std::span<const std::uint64_t> seeds, ParamStore& params,
               const ArchConfig& arch, const EmConfig& config);

/// Per-object reconstructions [B, R, M] from the last in-loop E-step:
/// pi * appearance over the prior background (weighted models, R = K - 1 or
/// K for softmax) or gamma * mean (per-pixel baseline, R = K).
Tensor object_reconstructions(const EmTrace& trace, const EmConfig& config);

}  // namespace ldp
