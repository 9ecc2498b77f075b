#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ldp/autodiff.hpp"
#include "ldp/mixture.hpp"

// Networks act on row batches: a latent batch is [R, N] where R counts
// (image, component) pairs.

namespace ldp {

enum class Preset { Fc, Conv };

std::string to_string(Preset preset);
Preset parse_preset(const std::string& name);

struct ArchConfig {
  Preset preset = Preset::Fc;
  std::size_t height = 20;
  std::size_t width = 20;
  std::size_t latent_dim = 64;    ///< N
  std::size_t feature_dim = 64;   ///< F
  std::size_t hidden = 250;
  std::size_t appearance_dim = 1; ///< P; 0 drops the appearance head
  /// Width of the update signal fed to the encoder: [u, v] has P + M entries
  /// for the weighted models, M for the per-pixel decoder baseline.
  std::size_t encoder_input = 401;
  std::size_t conv_channels1 = 16;
  std::size_t conv_channels2 = 32;
  std::size_t kernel = 4;
  Family family = Family::Gaussian;
  double latent_step_init = 0.5;
  double background_step_init = 0.1;

  std::size_t pixels() const { return height * width; }
  /// Throws ConfigError on non-positive or inconsistent dimensions.
  void validate() const;
};

/// Named parameters with stable addresses (std::map nodes never move).
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor value);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const;
  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;
  void zero_grad();

  /// Bitwise equality of names, shapes and values.
  bool identical(const ParamStore& other) const;

  std::map<std::string, Parameter>& entries() { return params_; }
  const std::map<std::string, Parameter>& entries() const { return params_; }

 private:
  std::map<std::string, Parameter> params_;
};

/// Glorot-uniform weights, zero biases, unit layer-norm gains, and
/// softplus-reparameterised step sizes.
ParamStore init_params(std::uint64_t seed, const ArchConfig& arch);

/// Latents [R, N] -> per-pixel logits [R, M].
Var decode_shape_logits(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& latents);

/// Latents [R, N] -> appearance preactivation [R, P] (identity head).
Var appearance_logits(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& latents);
/// Mean parameter of the component: identity for Gaussian, sigmoid for Bernoulli.
Var decode_appearance(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& latents);

/// Update signal [R, encoder_input] -> features [R, F].
Var encode_update_signal(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& signal);

/// s' = tanh(LN(r W_r + s W_s + b)).
Var rnn_step(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& features, const Var& state);

/// Positive learnable step sizes (scalars).
Var latent_step_size(Tape& tape, ParamStore& params);
Var background_step_size(Tape& tape, ParamStore& params);

/// softplus^{-1}(y) for y > 0.
double inverse_softplus(double y);

}  // namespace ldp
