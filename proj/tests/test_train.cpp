#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "fixtures.hpp"
#include "ldp/error.hpp"
#include "ldp/train.hpp"

using namespace ldp;
using namespace ldp::checks;

namespace {

struct TrainCase {
  Fixture setup;
  Dataset train, validation;
  TrainConfig config;
};

TrainCase small_run(Method method, UpdateMode mode = UpdateMode::Rnn) {
  TrainCase r{small_setup(method, mode, 3, 10, 10), generate_multi_shapes(ShapesConfig{12, 10, 2, 21}),
        generate_multi_shapes(ShapesConfig{4, 10, 2, 22}), TrainConfig{}};
  r.config.epochs = 2;
  r.config.batch = 5;
  r.config.chunk = 2;
  r.config.seed = 17;
  r.config.validation_limit = 0;
  return r;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore params;
  Parameter& p = params.add("w", Tensor(Shape{3}, 1.0));
  p.grad[0] = 2.0;
  p.grad[1] = -0.5;
  p.grad[2] = 0.0;
  AdamState state = AdamState::zeros_like(params);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  adam_step(params, state, cfg);
  // Bias correction makes the first step lr * g / (|g| + eps).
  EXPECT_NEAR(p.value[0], 0.9, 1e-7);
  EXPECT_NEAR(p.value[1], 1.1, 1e-7);
  EXPECT_EQ(p.value[2], 1.0);
  EXPECT_EQ(state.steps, 1u);
  EXPECT_NEAR(state.first.at("w")[0], 0.2, 1e-15);
  EXPECT_NEAR(state.second.at("w")[0], 0.004, 1e-15);
}

TEST(Adam, ClipScalesTheGlobalNorm) {
  ParamStore a, b;
  for (ParamStore* s : {&a, &b}) {
    Parameter& p = s->add("w", Tensor(Shape{2}, 0.0));
    p.grad[0] = 3.0;
    p.grad[1] = 4.0;
  }
  b.at("w").grad[0] = 0.6;
  b.at("w").grad[1] = 0.8;
  AdamState sa = AdamState::zeros_like(a), sb = AdamState::zeros_like(b);
  TrainConfig clipped, plain;
  clipped.clip_norm = 1.0;
  adam_step(a, sa, clipped);
  adam_step(b, sb, plain);
  EXPECT_DOUBLE_EQ(sa.first.at("w")[0], sb.first.at("w")[0]);
  EXPECT_DOUBLE_EQ(sa.second.at("w")[1], sb.second.at("w")[1]);
}

TEST(Adam, RejectsMismatchedState) {
  ParamStore params;
  params.add("w", Tensor(Shape{2}, 0.0));
  AdamState state;
  EXPECT_THROW(adam_step(params, state, TrainConfig{}), ContractError);
}

TEST(TrainConfig, RejectsBadValues) {
  TrainConfig c;
  c.batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.beta2 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.workers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EpochOrder, IsASeededPermutation) {
  auto a = epoch_order(50, 3, 0), b = epoch_order(50, 3, 0), c = epoch_order(50, 3, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 50u);
}

TEST(HistoryRecord, LineFormat) {
  HistoryRecord r{3, 1.5, 0.25, 0.125};
  EXPECT_EQ(r.line(), "epoch=3 loss=1.5 ami=0.25 mse=0.125");
}

TEST(TrainBptt, ZeroEpochsLeavesParametersAlone) {
  TrainCase r = small_run(Method::Ldp);
  r.config.epochs = 0;
  ParamStore before = r.setup.params;
  AdamState opt = AdamState::zeros_like(r.setup.params);
  TrainResult res = train_bptt(r.train, r.validation, r.setup.params, opt, r.setup.arch, r.setup.config, r.config);
  EXPECT_TRUE(res.history.empty());
  EXPECT_TRUE(r.setup.params.identical(before));
}

TEST(TrainBptt, ZeroLearningRateRecordsLossWithoutMoving) {
  TrainCase r = small_run(Method::Ldp);
  r.config.epochs = 1;
  r.config.learning_rate = 0.0;
  ParamStore before = r.setup.params;
  AdamState opt = AdamState::zeros_like(r.setup.params);
  TrainResult res = train_bptt(r.train, r.validation, r.setup.params, opt, r.setup.arch, r.setup.config, r.config);
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_TRUE(std::isfinite(res.history[0].loss));
  EXPECT_GT(res.history[0].loss, 0.0);
  EXPECT_TRUE(std::isfinite(res.history[0].ami));
  EXPECT_TRUE(r.setup.params.identical(before));
  EXPECT_EQ(opt.steps, 3u);
}

TEST(TrainBptt, LossDecreasesOnTinyProblem) {
  TrainCase r = small_run(Method::Ldp);
  r.config.epochs = 6;
  r.config.learning_rate = 1e-2;
  AdamState opt = AdamState::zeros_like(r.setup.params);
  TrainResult res = train_bptt(r.train, Dataset{}, r.setup.params, opt, r.setup.arch, r.setup.config, r.config);
  ASSERT_EQ(res.history.size(), 6u);
  EXPECT_LT(res.history.back().loss, res.history.front().loss);
  EXPECT_TRUE(std::isnan(res.history.back().ami));
}

TEST(TrainBptt, WorkerCountIsInvisible) {
  for (Method method : {Method::Ldp, Method::Softmax, Method::Nem})
    for (UpdateMode mode : {UpdateMode::Rnn, UpdateMode::Gradient}) {
      TrainCase a = small_run(method, mode), b = small_run(method, mode);
      b.config.workers = 3;
      AdamState oa = AdamState::zeros_like(a.setup.params), ob = AdamState::zeros_like(b.setup.params);
      TrainResult ra = train_bptt(a.train, a.validation, a.setup.params, oa, a.setup.arch, a.setup.config, a.config);
      TrainResult rb = train_bptt(b.train, b.validation, b.setup.params, ob, b.setup.arch, b.setup.config, b.config);
      EXPECT_TRUE(a.setup.params.identical(b.setup.params)) << to_string(method) << ' ' << to_string(mode);
      EXPECT_TRUE(oa == ob);
      ASSERT_EQ(ra.history.size(), rb.history.size());
      for (std::size_t i = 0; i < ra.history.size(); ++i) EXPECT_EQ(ra.history[i].line(), rb.history[i].line());
    }
}

TEST(TrainBptt, ResumeMatchesUninterruptedRun) {
  TrainCase full = small_run(Method::Ldp), split = small_run(Method::Ldp);
  full.config.epochs = 3;
  AdamState of = AdamState::zeros_like(full.setup.params);
  TrainResult rf =
      train_bptt(full.train, full.validation, full.setup.params, of, full.setup.arch, full.setup.config, full.config);

  AdamState os = AdamState::zeros_like(split.setup.params);
  split.config.epochs = 1;
  train_bptt(split.train, split.validation, split.setup.params, os, split.setup.arch, split.setup.config,
             split.config);
  ParamStore saved = split.setup.params;
  AdamState saved_opt = os;
  split.config.epochs = 3;
  TrainResult rs = train_bptt(split.train, split.validation, saved, saved_opt, split.setup.arch, split.setup.config,
                              split.config, /*first_epoch=*/1);
  ASSERT_EQ(rs.history.size(), 2u);
  EXPECT_EQ(rs.history[0].line(), rf.history[1].line());
  EXPECT_EQ(rs.history[1].line(), rf.history[2].line());
  EXPECT_TRUE(saved.identical(full.setup.params));
  EXPECT_TRUE(saved_opt == of);
}

TEST(TrainBptt, NumericalFailureNamesEpochAndBatch) {
  TrainCase r = small_run(Method::Ldp);
  r.setup.params.at("appearance.b").value.fill(std::numeric_limits<double>::infinity());
  AdamState opt = AdamState::zeros_like(r.setup.params);
  try {
    train_bptt(r.train, r.validation, r.setup.params, opt, r.setup.arch, r.setup.config, r.config);
    FAIL();
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0 batch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("EM step 0"), std::string::npos) << msg;
  }
}

TEST(TrainBptt, RejectsMismatchedImages) {
  TrainCase r = small_run(Method::Ldp);
  Dataset wrong = generate_multi_shapes(ShapesConfig{3, 20, 2, 1});
  AdamState opt = AdamState::zeros_like(r.setup.params);
  EXPECT_THROW(train_bptt(wrong, r.validation, r.setup.params, opt, r.setup.arch, r.setup.config, r.config),
               ConfigError);
  Dataset empty;
  EXPECT_THROW(train_bptt(empty, r.validation, r.setup.params, opt, r.setup.arch, r.setup.config, r.config),
               ConfigError);
}
