#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "ldp/baselines.hpp"
#include "ldp/em.hpp"
#include "ldp/error.hpp"
#include "param_check.hpp"

using namespace ldp;
using namespace ldp::checks;

TEST(InitLatents, ZeroScaleGivesZeros) {
  EmConfig cfg;
  cfg.latent_init_scale = 0.0;
  Rng rng(1);
  LatentInit init = init_latents(cfg, 8, rng);
  ASSERT_EQ(init.latents.shape(), (Shape{2, 8}));
  for (double v : init.latents.data()) EXPECT_EQ(v, 0.0);
}

TEST(InitLatents, SampleVarianceMatchesScale) {
  EmConfig cfg;
  cfg.components = 2;
  cfg.latent_init_scale = 1.7;
  Rng rng(2);
  LatentInit init = init_latents(cfg, 10000, rng);
  double mean = 0, sq = 0;
  for (double v : init.latents.data()) mean += v;
  mean /= 10000.0;
  for (double v : init.latents.data()) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(sq / 9999.0 / (1.7 * 1.7), 1.0, 0.05);
}

TEST(InitLatents, BackgroundStartsAtPrior) {
  EmConfig cfg;
  cfg.prior.gaussian_mean = 0.125;
  Rng rng(3);
  EXPECT_EQ(init_latents(cfg, 4, rng).background, 0.125);
  cfg.model.family = Family::Bernoulli;
  cfg.prior.bernoulli_theta = 0.2;
  const double logit = init_latents(cfg, 4, rng).background;
  EXPECT_NEAR(1.0 / (1.0 + std::exp(-logit)), 0.2, 1e-15);
}

TEST(EStep, VanishingSticksLeaveEverythingToBackground) {
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 2, 3, 3);
  s.params.at("shape.fc3.w").value.fill(0.0);
  s.params.at("shape.fc3.b").value.fill(-60.0);
  Rng rng(4);
  Tensor images = random_images(2, 9, rng, false);
  Tape tape;
  auto seeds = seeds_for(2, 5);
  LatentState st = initial_state(tape, s.config, s.arch, seeds);
  EStep e = e_step(tape, tape.constant(images.reshaped({2, 1, 9})), st, s.params, s.arch, s.config);
  Tensor pi = e.mix.pi();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t px = 0; px < 9; ++px) {
      EXPECT_NEAR(pi[(i * 2) * 9 + px], 0.0, 1e-5);
      EXPECT_NEAR(pi[(i * 2 + 1) * 9 + px], 1.0, 1e-5);
    }
}

TEST(EStep, RowsAreNormalised) {
  Rng rng(6);
  for (Method method : {Method::Ldp, Method::Softmax, Method::Nem}) {
    Fixture s = small_setup(method, UpdateMode::Rnn, 4, 3, 4);
    Tensor images = random_images(3, 12, rng, false);
    Tape tape;
    auto seeds = seeds_for(3, 7);
    LatentState st = initial_state(tape, s.config, s.arch, seeds);
    EStep e = e_step(tape, tape.constant(images.reshaped({3, 1, 12})), st, s.params, s.arch, s.config);
    Tensor pi = e.mix.pi();
    const Tensor& gamma = e.mix.gamma.value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t px = 0; px < 12; ++px) {
        double sp = 0, sg = 0;
        for (std::size_t c = 0; c < 4; ++c) {
          sp += pi[(i * 4 + c) * 12 + px];
          sg += gamma[(i * 4 + c) * 12 + px];
        }
        EXPECT_NEAR(sp, 1.0, 1e-9);
        EXPECT_NEAR(sg, 1.0, 1e-9);
      }
  }
}

TEST(EStep, SingleObjectSceneIsSeparated) {
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 2, 4, 4);
  std::vector<int> mask{0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0};
  set_single_object_params(s.params, mask, 1.0);
  Tensor image(Shape{1, 16});
  for (std::size_t m = 0; m < 16; ++m) image[m] = mask[m];
  Tape tape;
  auto seeds = seeds_for(1, 8);
  LatentState st = initial_state(tape, s.config, s.arch, seeds);
  EStep e = e_step(tape, tape.constant(image.reshaped({1, 1, 16})), st, s.params, s.arch, s.config);
  const Tensor& gamma = e.mix.gamma.value();
  for (std::size_t m = 0; m < 16; ++m) {
    EXPECT_NEAR(gamma[m], mask[m] ? 1.0 : 0.0, 1e-5);
    EXPECT_NEAR(gamma[16 + m], mask[m] ? 0.0 : 1.0, 1e-5);
  }
}

TEST(MStepGradient, HandWorkedSinglePixel) {
  // One pixel, K = 2, alpha = 1, appearance g = s, shape logits independent of s.
  EmConfig cfg;
  cfg.components = 2;
  cfg.mode = UpdateMode::Gradient;
  cfg.model = ComponentModel{Family::Gaussian, 1.0};
  ArchConfig base;
  base.height = 1;
  base.width = 1;
  base.latent_dim = 1;
  base.feature_dim = 2;
  base.hidden = 3;
  ArchConfig arch = arch_for(cfg, base);
  ParamStore params = init_params(1, arch);
  for (auto& [name, p] : params.entries()) p.value.fill(0.0);
  params.at("shape.fc3.b").value.fill(40.0);  // c saturates: gamma ~ (1, 0)
  params.at("appearance.w").value.fill(1.0);
  params.at("eta.latent").value.fill(inverse_softplus(0.5));

  Tape tape;
  LatentState st;
  st.latents = tape.variable(Tensor(Shape{1, 1}, 0.3));
  st.background = tape.constant(Tensor(Shape{1, 1, 1}, 0.0));
  Var x = tape.constant(Tensor(Shape{1, 1, 1}, 0.5));  // x - g = 0.2
  EStep e = e_step(tape, x, st, params, arch, cfg);
  EXPECT_NEAR(e.mix.gamma.value()[0], 1.0, 1e-5);
  LatentState next = m_step_gradient(tape, e, st, params, cfg);
  EXPECT_NEAR(next.latents.value()[0] - 0.3, 0.1, 1e-6);
}

TEST(MStepGradient, ZeroPosteriorAndResidualLeavesLatentsAlone) {
  Fixture s = small_setup(Method::Ldp, UpdateMode::Gradient, 2, 2, 2);
  std::vector<int> mask{0, 0, 0, 0};
  set_single_object_params(s.params, mask, 0.0, 60.0);
  // gamma_1 = 0 and c saturated at its floor: the shape residual c * gamma_2
  // is 1e-6 per pixel and the decoder ignores the latent anyway.
  Tape tape;
  auto seeds = seeds_for(1, 3);
  LatentState st = initial_state(tape, s.config, s.arch, seeds);
  EStep e = e_step(tape, tape.constant(Tensor(Shape{1, 1, 4}, 0.0)), st, s.params, s.arch, s.config);
  LatentState next = m_step_gradient(tape, e, st, s.params, s.config);
  for (std::size_t i = 0; i < st.latents.size(); ++i)
    EXPECT_EQ(next.latents.value()[i], st.latents.value()[i]);
}

TEST(MStepGradient, MatchesClosedForm) {
  Rng rng(9);
  int instance = 0;
  for (Family fam : {Family::Gaussian, Family::Bernoulli})
    for (std::size_t k : {2, 3, 4})
      for (std::size_t side : {4, 10}) {
        Fixture s = small_setup(Method::Ldp, UpdateMode::Gradient, k, side, side, fam, 100 + instance);
        const std::size_t m = side * side;
        Tensor images = random_images(2, m, rng, fam == Family::Bernoulli);
        Tape tape;
        auto seeds = seeds_for(2, 200 + instance++);
        LatentState st = initial_state(tape, s.config, s.arch, seeds);
        EStep e = e_step(tape, tape.constant(images.reshaped({2, 1, m})), st, s.params, s.arch, s.config);
        LatentState next = m_step_gradient(tape, e, st, s.params, s.config);
        Tensor oracle = closed_form_latent_step(tape, images, e, st, s.params, s.config);
        for (std::size_t i = 0; i < oracle.size(); ++i) {
          const double got = next.latents.value()[i] - st.latents.value()[i];
          ASSERT_NEAR(got, oracle[i], 1e-8 * std::max(1.0, std::abs(oracle[i])));
        }
      }
}

TEST(MStepRnn, SignalMatchesGradientFactors) {
  Rng rng(10);
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 3, 3, 3);
  Tensor images = random_images(2, 9, rng, false);
  Tape tape;
  auto seeds = seeds_for(2, 11);
  LatentState st = initial_state(tape, s.config, s.arch, seeds);
  EStep e = e_step(tape, tape.constant(images.reshaped({2, 1, 9})), st, s.params, s.arch, s.config);
  Tensor sig = update_signal(tape.constant(images.reshaped({2, 1, 9})), e, s.config).value();
  ASSERT_EQ(sig.shape(), (Shape{4, 10}));
  const Tensor& gamma = e.mix.gamma.value();
  const Tensor& means = e.means.value();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double u = 0;
      for (std::size_t px = 0; px < 9; ++px) u += gamma[(i * 3 + c) * 9 + px] * (images[i * 9 + px] - means[i * 3 + c]);
      EXPECT_NEAR(sig.at(i * 2 + c, 0), 4.0 * u, 1e-12);
      for (std::size_t px = 0; px < 9; ++px) {
        double tail = 0;
        for (std::size_t c2 = c; c2 < 3; ++c2) tail += gamma[(i * 3 + c2) * 9 + px];
        const double v = gamma[(i * 3 + c) * 9 + px] - clamped_sigmoid(e.logits.value()[(i * 2 + c) * 9 + px]) * tail;
        EXPECT_NEAR(sig.at(i * 2 + c, 1 + px), v, 1e-12);
      }
    }
}

TEST(MStepRnn, ZeroNetworksKeepPriorStateOnly) {
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 3, 3, 3);
  for (auto& [name, p] : s.params.entries()) p.value.fill(0.0);
  s.params.at("rnn.state.w").value = Tensor(Shape{4, 4}, 0.0);
  for (std::size_t i = 0; i < 4; ++i) s.params.at("rnn.state.w").value.at(i, i) = 1.0;
  s.params.at("rnn.ln.gain").value.fill(1.0);
  Tape tape;
  auto seeds = seeds_for(1, 12);
  LatentState st = initial_state(tape, s.config, s.arch, seeds);
  Var x = tape.constant(Tensor(Shape{1, 1, 9}, 0.0));
  EStep e = e_step(tape, x, st, s.params, s.arch, s.config);
  LatentState next = m_step_rnn(tape, x, e, st, s.params, s.arch, s.config);
  // Features are zero, so the cell sees only W_s s = s.
  Tape ref;
  Tensor expected = tanh(layer_norm(ref.constant(st.latents.value()), ref.constant(Tensor(Shape{4}, 1.0)),
                                    ref.constant(Tensor(Shape{4}, 0.0))))
                        .value();
  EXPECT_TRUE(next.latents.value().identical(expected));
}

TEST(MStepRnn, Deterministic) {
  Rng rng(13);
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 3, 3, 3);
  Tensor images = random_images(2, 9, rng, false);
  auto run = [&]() {
    Tape tape;
    auto seeds = seeds_for(2, 14);
    LatentState st = initial_state(tape, s.config, s.arch, seeds);
    Var x = tape.constant(images.reshaped({2, 1, 9}));
    EStep e = e_step(tape, x, st, s.params, s.arch, s.config);
    return m_step_rnn(tape, x, e, st, s.params, s.arch, s.config).latents.value();
  };
  EXPECT_TRUE(run().identical(run()));
}

namespace {

// EStep stub carrying only what the background update reads.
EStep background_fixture(Tape& tape, const Tensor& gamma_bg, double mu, std::size_t k) {
  const std::size_t m = gamma_bg.size();
  Tensor gamma(Shape{1, k, m}, 0.0);
  for (std::size_t px = 0; px < m; ++px) {
    gamma[(k - 1) * m + px] = gamma_bg[px];
    gamma[px] = 1.0 - gamma_bg[px];
  }
  EStep e;
  e.mix.gamma = tape.constant(gamma);
  e.background_mean = tape.constant(Tensor(Shape{1, 1, 1}, mu));
  return e;
}

}  // namespace

TEST(UpdateBackground, HandWorkedStep) {
  EmConfig cfg;
  cfg.components = 2;
  cfg.model = ComponentModel{Family::Gaussian, 1.0};
  ParamStore params;
  params.add("eta.background", Tensor::scalar(inverse_softplus(0.1)));
  Tape tape;
  EStep e = background_fixture(tape, Tensor(Shape{4}, 1.0), 0.0, 2);
  LatentState st;
  st.background = tape.constant(Tensor(Shape{1, 1, 1}, 0.0));
  LatentState next = update_background(tape, tape.constant(Tensor(Shape{1, 1, 4}, 0.5)), e, st, params, cfg);
  EXPECT_NEAR(next.background.value().item(), 0.2, 1e-14);
}

TEST(UpdateBackground, NoBackgroundPosteriorNoChange) {
  EmConfig cfg;
  cfg.components = 3;
  ParamStore params;
  params.add("eta.background", Tensor::scalar(inverse_softplus(0.1)));
  Tape tape;
  EStep e = background_fixture(tape, Tensor(Shape{5}, 0.0), 0.3, 3);
  LatentState st;
  st.background = tape.constant(Tensor(Shape{1, 1, 1}, 0.3));
  Rng rng(15);
  LatentState next = update_background(tape, tape.constant(random_images(1, 5, rng, false).reshaped({1, 1, 5})), e,
                                       st, params, cfg);
  EXPECT_EQ(next.background.value().item(), 0.3);
}

TEST(UpdateBackground, WeightedMeanIsFixedPoint) {
  EmConfig cfg;
  cfg.components = 2;
  ParamStore params;
  params.add("eta.background", Tensor::scalar(inverse_softplus(0.02)));
  Rng rng(16);
  Tensor x = random_images(1, 20, rng, false);
  Tensor g(Shape{20});
  for (double& v : g.data()) v = rng.uniform();
  double num = 0, den = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    num += g[i] * x[i];
    den += g[i];
  }
  const double target = num / den;
  {
    Tape tape;
    EStep e = background_fixture(tape, g, target, 2);
    LatentState st;
    st.background = tape.constant(Tensor(Shape{1, 1, 1}, target));
    EXPECT_NEAR(update_background(tape, tape.constant(x.reshaped({1, 1, 20})), e, st, params, cfg)
                    .background.value()
                    .item(),
                target, 1e-15);
  }
  double mu = -1.0;
  for (int it = 0; it < 500; ++it) {
    Tape tape;
    EStep e = background_fixture(tape, g, mu, 2);
    LatentState st;
    st.background = tape.constant(Tensor(Shape{1, 1, 1}, mu));
    mu = update_background(tape, tape.constant(x.reshaped({1, 1, 20})), e, st, params, cfg).background.value().item();
  }
  EXPECT_NEAR(mu, target, 1e-6);
}

TEST(UpdateBackground, MatchesTapeDerivative) {
  Rng rng(17);
  int instance = 0;
  for (Family fam : {Family::Gaussian, Family::Bernoulli})
    for (std::size_t k : {2, 3, 4})
      for (std::size_t side : {4, 10}) {
        Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, k, side, side, fam, 300 + instance);
        const std::size_t m = side * side;
        Tensor images = random_images(2, m, rng, fam == Family::Bernoulli);
        Tape tape;
        auto seeds = seeds_for(2, 400 + instance++);
        LatentState st = initial_state(tape, s.config, s.arch, seeds);
        Tensor bg(Shape{2, 1, 1});
        for (double& v : bg.data()) v = rng.normal();
        st.background = tape.constant(bg);
        Var x = tape.constant(images.reshaped({2, 1, m}));
        EStep e = e_step(tape, x, st, s.params, s.arch, s.config);
        LatentState next = update_background(tape, x, e, st, s.params, s.config);
        Tensor oracle = background_step_oracle(tape, x, e, bg, s.params, s.config);
        for (std::size_t i = 0; i < 2; ++i) {
          const double got = next.background.value()[i] - bg[i];
          ASSERT_NEAR(got, oracle[i], 1e-8 * std::max(1.0, std::abs(oracle[i])));
        }
      }
}

TEST(RunEm, SingleStepTrace) {
  Rng rng(18);
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 3, 3, 3);
  s.config.steps = 1;
  Tape tape;
  auto seeds = seeds_for(2, 19);
  EmTrace trace = run_em(tape, random_images(2, 9, rng, false), seeds, s.params, s.arch, s.config);
  EXPECT_EQ(trace.steps(), 1u);
  EXPECT_EQ(trace.esteps.size(), 2u);
  EXPECT_EQ(trace.labels().size(), 18u);
  // With one step the labels come from the initial E-step alone.
  EXPECT_EQ(argmax_labels(trace.esteps[0].mix.gamma.value()), trace.labels());
}

TEST(RunEm, BitReproducible) {
  Rng rng(20);
  for (Method method : {Method::Ldp, Method::Softmax, Method::Nem})
    for (UpdateMode mode : {UpdateMode::Rnn, UpdateMode::Gradient}) {
      Fixture s = small_setup(method, mode, 3, 4, 4);
      Tensor images = random_images(3, 16, rng, false);
      auto seeds = seeds_for(3, 21);
      Tape t1, t2;
      EmTrace a = run_em(t1, images, seeds, s.params, s.arch, s.config);
      EmTrace b = run_em(t2, images, seeds, s.params, s.arch, s.config);
      EXPECT_TRUE(a.weighted_loss.value().identical(b.weighted_loss.value()));
      EXPECT_TRUE(a.final_gamma().identical(b.final_gamma()));
      for (std::size_t t = 0; t < a.steps(); ++t) EXPECT_TRUE(a.losses[t].value().identical(b.losses[t].value()));
    }
}

TEST(RunEm, GradientModeLossesDecreaseOnSingleObject) {
  Fixture s = small_setup(Method::Ldp, UpdateMode::Gradient, 2, 4, 4);
  std::vector<int> mask{0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0};
  set_single_object_params(s.params, mask, 0.0);
  s.params.at("appearance.w").value.at(0, 0) = 1.0;  // appearance = first latent coordinate
  s.params.at("eta.latent").value.fill(inverse_softplus(0.01));
  s.config.steps = 8;
  Tensor image(Shape{1, 16});
  for (std::size_t m = 0; m < 16; ++m) image[m] = mask[m];
  Tape tape;
  auto seeds = seeds_for(1, 22);
  EmTrace trace = run_em(tape, image, seeds, s.params, s.arch, s.config);
  for (std::size_t t = 1; t < trace.steps(); ++t)
    EXPECT_LE(trace.losses[t].value().item(), trace.losses[t - 1].value().item()) << "step " << t;
  EXPECT_LT(trace.losses.back().value().item(), trace.losses.front().value().item());
}

TEST(RunEm, NumericalFailureNamesStep) {
  Rng rng(23);
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 3, 3, 3);
  s.params.at("appearance.b").value.fill(1e200);
  Tape tape;
  auto seeds = seeds_for(1, 24);
  try {
    run_em(tape, random_images(1, 9, rng, false), seeds, s.params, s.arch, s.config);
    FAIL() << "expected a numerical failure";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("EM step 0"), std::string::npos) << e.what();
  }
}

TEST(EStep, BoundedMeansStayInUnitInterval) {
  Rng rng(31);
  for (Method method : {Method::Ldp, Method::Softmax, Method::Nem}) {
    Fixture s = small_setup(method, UpdateMode::Rnn, 3, 4, 4);
    for (auto& [name, p] : s.params.entries())
      for (double& v : p.value.data()) v = 20.0 * rng.normal();
    const Tensor images = random_images(2, 16, rng, false);
    const auto seeds = seeds_for(2, 32);
    auto extremes = [&](bool bounded) {
      s.config.bounded_mean = bounded;
      Tape tape;
      const Tensor means = run_em(tape, images, seeds, s.params, s.arch, s.config).esteps[0].means.value();
      const std::size_t k = means.dim(1), per = means.dim(2);
      // The stick-breaking background keeps its own unbounded parameter.
      const std::size_t slots = method == Method::Ldp ? k - 1 : k;
      double lo = INFINITY, hi = -INFINITY;
      for (std::size_t i = 0; i < means.dim(0); ++i)
        for (std::size_t c = 0; c < slots; ++c)
          for (std::size_t j = 0; j < per; ++j) {
            lo = std::min(lo, means[(i * k + c) * per + j]);
            hi = std::max(hi, means[(i * k + c) * per + j]);
          }
      return std::make_pair(lo, hi);
    };
    const auto [lo, hi] = extremes(true);
    EXPECT_GT(lo, 0.0) << to_string(method);
    EXPECT_LT(hi, 1.0) << to_string(method);
    const auto [raw_lo, raw_hi] = extremes(false);
    EXPECT_TRUE(raw_lo < 0.0 || raw_hi > 1.0) << to_string(method);
  }
}

TEST(RunEm, RejectsMismatchedImages) {
  Fixture s = small_setup(Method::Ldp, UpdateMode::Rnn, 3, 3, 3);
  Tape tape;
  auto seeds = seeds_for(1, 1);
  EXPECT_THROW(run_em(tape, Tensor(Shape{1, 8}, 0.0), seeds, s.params, s.arch, s.config), ContractError);
}

TEST(RunEm, StepWeightsIncreaseLinearly) {
  EmConfig cfg;
  cfg.steps = 4;
  std::vector<double> w = cfg.normalized_weights();
  EXPECT_NEAR(w[0], 0.1, 1e-15);
  EXPECT_NEAR(w[3], 0.4, 1e-15);
  cfg.step_weights = {1, 1, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.step_weights = {0, 0, 0, 0};
  EXPECT_THROW(cfg.validate(), ConfigError);
}


TEST(RunEm, WeightedLossGradientMatchesFiniteDifferences) {
  Rng rng(25);
  for (Method method : {Method::Ldp, Method::Softmax, Method::Nem})
    for (UpdateMode mode : {UpdateMode::Rnn, UpdateMode::Gradient}) {
      Fixture s = small_setup(method, mode, 3, 10, 10, Family::Gaussian, 26);
      s.config.steps = 3;
      Tensor images = random_images(2, 100, rng, false);
      auto seeds = seeds_for(2, 27);
      std::vector<Tensor> pinned;
      {
        Tape tape;
        EmTrace base = run_em(tape, images, seeds, s.params, s.arch, s.config);
        for (std::size_t t = 0; t < base.steps(); ++t) pinned.push_back(base.esteps[t].mix.gamma.value());
        Var pinned_total = pinned_weighted_loss(tape, images, seeds, s.params, s.arch, s.config, pinned);
        EXPECT_NEAR(pinned_total.value().item(), sum_all(base.weighted_loss).value().item(), 1e-10);
      }
      auto loss = [&](Tape& tape) {
        return pinned_weighted_loss(tape, images, seeds, s.params, s.arch, s.config, pinned);
      };
      // The analytic side comes from run_em's own weighted loss.
      auto analytic = [&](Tape& tape) { return sum_all(run_em(tape, images, seeds, s.params, s.arch, s.config).weighted_loss); };
      ParamCheckResult r = check_param_grads(s.params, analytic, loss, 10, 28);
      EXPECT_LT(r.max_rel_error, 1e-3) << to_string(method) << " " << to_string(mode) << " " << r.worst;
    }
}
