#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ldp/datasets.hpp"
#include "ldp/em.hpp"
#include "ldp/networks.hpp"
#include "ldp/random.hpp"

namespace ldp::checks {

struct Fixture {
  EmConfig config;
  ArchConfig arch;
  ParamStore params;
};

inline Fixture small_setup(Method method, UpdateMode mode, std::size_t k, std::size_t h, std::size_t w,
                         Family family = Family::Gaussian, std::uint64_t seed = 1) {
  Fixture s;
  s.config.method = method;
  s.config.mode = mode;
  s.config.components = k;
  s.config.steps = 3;
  s.config.model = ComponentModel{family, 4.0};
  ArchConfig base;
  base.height = h;
  base.width = w;
  base.latent_dim = 4;
  base.feature_dim = 5;
  base.hidden = 7;
  base.latent_step_init = 0.05;
  base.background_step_init = 0.02;
  s.arch = arch_for(s.config, base);
  s.params = init_params(seed, s.arch);
  return s;
}

inline Tensor random_images(std::size_t b, std::size_t m, Rng& rng, bool binary) {
  Tensor t(Shape{b, m});
  for (double& v : t.data()) v = binary ? static_cast<double>(rng.uniform_int(2)) : rng.uniform();
  return t;
}

inline std::vector<std::uint64_t> seeds_for(std::size_t b, std::uint64_t base) {
  std::vector<std::uint64_t> s(b);
  for (std::size_t i = 0; i < b; ++i) s[i] = stream_seed(base, i);
  return s;
}

/// Hand-set parameters for a two-component model that claims exactly the
/// pixels of `mask` with an appearance of `level`, independent of the latent
/// except through appearance.w (left at zero unless the caller changes it).
inline void set_single_object_params(ParamStore& params, const std::vector<int>& mask, double level,
                                     double logit = 30.0) {
  for (auto& [name, p] : params.entries()) p.value.fill(0.0);
  Tensor& bias = params.at("shape.fc3.b").value;
  for (std::size_t m = 0; m < mask.size(); ++m) bias[m] = mask[m] ? logit : -logit;
  params.at("appearance.b").value.fill(level);
  params.at("eta.latent").value.fill(std::log(std::expm1(0.05)));
  params.at("eta.background").value.fill(std::log(std::expm1(0.02)));
}

inline // Synthetic glyphs: a filled rectangle whose size and intensity vary with the id.
GlyphBank synthetic_bank(std::size_t n) {
  GlyphBank bank;
  bank.glyphs.resize(n);
  for (std::size_t g = 0; g < n; ++g) {
    auto& px = bank.glyphs[g];
    px.fill(0);
    const std::size_t side = 6 + g % 15;
    const std::uint8_t level = static_cast<std::uint8_t>(130 + (g * 37) % 126);
    for (std::size_t r = 4; r < 4 + side; ++r)
      for (std::size_t c = 6; c < 6 + side; ++c) px[r * kGlyphSide + c] = level;
    px[0] = static_cast<std::uint8_t>(g % 100);  // faint id mark, below the foreground threshold
    px[1] = static_cast<std::uint8_t>(g / 100 % 100);
  }
  return bank;
}

inline double softplus_value(double x) { return std::log1p(std::exp(x)); }

}  // namespace ldp::checks
