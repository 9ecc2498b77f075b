#pragma once

#include <string>

#include "ldp/autodiff.hpp"

// Mixture arrays are laid out as [B, K, M]: batch, component, pixel. The
// background is always the last component.

namespace ldp {

enum class Family { Gaussian, Bernoulli };

std::string to_string(Family family);
/// Throws ConfigError for names other than "gaussian" and "bernoulli".
Family parse_family(const std::string& name);

/// Per-pixel conditional distribution of the mixture components. Gaussian
/// components have fixed inverse variance `alpha`.
struct ComponentModel {
  Family family = Family::Gaussian;
  double alpha = 4.0;

  void validate() const;
};

/// Background prior p_prior and the weight of its KL regulariser.
struct PriorSpec {
  double gaussian_mean = 0.0;
  double bernoulli_theta = 0.01;
  double lambda = 0.1;

  /// Mean parameter of p_prior under `model` (mu or theta).
  double mean_param(const ComponentModel& model) const;
  void validate() const;
};

/// A single component distribution in mean parameterisation.
struct Distribution {
  Family family = Family::Gaussian;
  double param = 0.0;  ///< mean (Gaussian) or success probability (Bernoulli)
  double alpha = 1.0;  ///< inverse variance, Gaussian only
};

/// Log-domain mixture quantities of one E-step. `sticks` is only set for
/// stick-breaking weights.
struct MixtureState {
  Var log_p;
  Var log_pi;
  Var log_gamma;
  Var gamma;
  Var sticks;

  Tensor p() const;
  Tensor pi() const;
};

/// log pi from stick lengths c [B, K-1, M] in (0, 1):
/// pi_k = c_k prod_{k'<k} (1 - c_k'), pi_K = prod_{k'<K} (1 - c_k').
Var stick_breaking_log_weights(const Var& sticks);
Tensor stick_breaking_weights(const Tensor& sticks);

/// log softmax over the component axis of logits [B, K, M].
Var softmax_log_weights(const Var& logits);
Tensor softmax_weights(const Tensor& logits);

/// log p(x | component) for pixels x [B, 1, M] and component mean
/// parameters broadcastable against [B, K, M].
Var component_log_likelihood(const Var& x, const Var& means, const ComponentModel& model);
double component_likelihood(double x, double mean, const ComponentModel& model);

/// log gamma = log p + log pi - logsumexp_k(log p + log pi).
Var log_posterior(const Var& log_p, const Var& log_pi);
Tensor posterior(const Tensor& p, const Tensor& pi);

/// Q = sum_{m,k} gamma (log p + log pi), one value per batch entry.
Var q_function(const Var& gamma, const Var& log_p, const Var& log_pi);

/// log P(X) = sum_m log sum_k p pi, one value per batch entry.
Var log_likelihood(const Var& log_p, const Var& log_pi);

/// D_KL(prior || q) in closed form; both sides must share a family.
double kl_div(const Distribution& prior, const Distribution& q);

/// Elementwise D_KL(p_prior || component(mean)) as a differentiable op.
Var kl_from_prior(const Var& means, const PriorSpec& prior, const ComponentModel& model);

/// -Q + lambda * sum_m D_KL(p_prior || p_{m,K}). gamma is treated as a
/// constant; only the background (last) component enters the KL term.
/// `background_mean` must broadcast against [B, 1, M] (e.g. [B, 1, 1]).
Var ldp_loss(const Var& gamma, const Var& log_p, const Var& log_pi, const Var& background_mean,
             const PriorSpec& prior, const ComponentModel& model);

/// Hard assignment per pixel: argmax over components, ties to the lowest index.
/// Input [B, K, M] (or [K, M]); output B*M labels, row-major.
std::vector<int> argmax_labels(const Tensor& gamma);

}  // namespace ldp
