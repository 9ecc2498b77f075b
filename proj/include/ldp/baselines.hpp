#pragma once

#include "ldp/em.hpp"

namespace ldp {

// Per-pixel decoder baseline: fixed uniform weights, the decoder emits one
// component mean per pixel.

EStep nem_e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params, const ArchConfig& arch,
                 const EmConfig& config);

/// gamma * dlog p / d(natural parameter), one row of M per latent.
Var nem_update_signal(const Var& images, const EStep& e, const EmConfig& config);

/// Latent update of the baseline; dispatches on the configured update mode.
LatentState nem_latent_update(Tape& tape, const Var& images, const EStep& e, const LatentState& state,
                              ParamStore& params, const ArchConfig& arch, const EmConfig& config);

/// -Q + lambda * sum_{m,k} (1 - gamma) D_KL(p_prior || p_{m,k}), gamma held
/// constant; one value per batch entry.
Var nem_loss(const Var& gamma, const Var& log_p, const Var& log_pi, const Var& means, const PriorSpec& prior,
             const ComponentModel& model);

// Softmax-weight ablation: every component, background included, owns a
// latent; weights are a per-pixel softmax over K decoder logits.

EStep softmax_e_step(Tape& tape, const Var& images, const LatentState& state, ParamStore& params,
                     const ArchConfig& arch, const EmConfig& config);

/// [u, v] with u = appearance gradient factor and v = gamma - pi.
Var softmax_update_signal(const Var& images, const EStep& e, const EmConfig& config);

}  // namespace ldp
