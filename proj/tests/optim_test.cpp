#include <gtest/gtest.h>

#include <cmath>

#include "c2sti/ops.hpp"
#include "c2sti/optim.hpp"

using namespace c2sti;

TEST(CosineSchedule, EndpointsAndMonotone) {
  const double lr0 = 1e-4, lr_min = 1e-6;
  const std::int64_t total = 137;
  EXPECT_DOUBLE_EQ(cosine_lr(lr0, lr_min, 0, total), lr0);
  EXPECT_DOUBLE_EQ(cosine_lr(lr0, lr_min, total, total), lr_min);
  double prev = lr0;
  for (std::int64_t t = 1; t <= total; ++t) {
    const double lr = cosine_lr(lr0, lr_min, t, total);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
  EXPECT_DOUBLE_EQ(cosine_lr(lr0, lr_min, total + 10, total), lr_min);
}

TEST(CosineSchedule, MidpointIsMean) {
  EXPECT_NEAR(cosine_lr(1.0, 0.0, 50, 100), 0.5, 1e-15);
}

TEST(AdamW, DefaultConfig) {
  const AdamWConfig cfg;
  EXPECT_EQ(cfg.lr0, 1e-4);
  EXPECT_EQ(cfg.lr_min, 1e-6);
  EXPECT_EQ(cfg.weight_decay, 1e-4);
  EXPECT_EQ(cfg.beta1, 0.9);
  EXPECT_EQ(cfg.beta2, 0.999);
  EXPECT_EQ(cfg.eps, 1e-8);
}

TEST(AdamW, ZeroGradientZeroDecayIsFixedPoint) {
  ModelParams params;
  Tensor w = params.add("w", Tensor::from_vector({3}, {0.5, -2.0, 3.0}, DType::F64));
  sum(scale(w, 0.0)).backward();
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.total_steps = 10;
  OptimizerState state(cfg);
  adamw_step(params, state);
  EXPECT_EQ(w.flat(0), 0.5);
  EXPECT_EQ(w.flat(1), -2.0);
  EXPECT_EQ(w.flat(2), 3.0);
  EXPECT_EQ(state.step, 1);
}

TEST(AdamW, TwoStepsMatchHandRecurrence) {
  ModelParams params;
  Tensor w = params.add("w", Tensor::from_vector({1}, {1.0}, DType::F64));
  AdamWConfig cfg;
  cfg.lr0 = 0.1;
  cfg.lr_min = 0.01;
  cfg.weight_decay = 0.1;
  cfg.total_steps = 2;
  OptimizerState state(cfg);

  // loss_k = c_k * w  =>  grad = c_k
  const double c1 = 0.5, c2 = -0.25;
  sum(scale(w, c1)).backward();
  adamw_step(params, state);
  params.zero_grad();
  sum(scale(w, c2)).backward();
  adamw_step(params, state);

  // Hand evaluation. lr(0) = 0.1, lr(1) = 0.01 + 0.045 * (1 + cos(pi/2)) = 0.055.
  double p = 1.0, m = 0.0, v = 0.0;
  const double lr1 = 0.1, lr2 = 0.055;
  p = p - lr1 * 0.1 * p;
  m = 0.1 * c1;
  v = 0.001 * c1 * c1;
  p = p - lr1 * (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
  p = p - lr2 * 0.1 * p;
  m = 0.9 * m + 0.1 * c2;
  v = 0.999 * v + 0.001 * c2 * c2;
  p = p - lr2 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_DOUBLE_EQ(w.item(), p);
  EXPECT_EQ(state.step, 2);
}

TEST(AdamW, MissingGradientNamesParameter) {
  ModelParams params;
  Tensor a = params.add("layer.a", Tensor::full({2}, 1.0, DType::F64));
  params.add("layer.b", Tensor::full({2}, 1.0, DType::F64));
  sum(a).backward();
  OptimizerState state;
  try {
    adamw_step(params, state);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("layer.b"), std::string::npos);
  }
  EXPECT_EQ(state.step, 0);
}

TEST(ModelParams, LexicographicOrderAndUniquePaths) {
  ModelParams params;
  params.add("z.w", Tensor::zeros({1}));
  params.add("a.w", Tensor::zeros({1}));
  params.add("m.w", Tensor::zeros({1}));
  EXPECT_EQ(params.paths(), (std::vector<std::string>{"a.w", "m.w", "z.w"}));
  EXPECT_THROW(params.add("a.w", Tensor::zeros({1})), Error);
}

TEST(HeUniform, BoundAndDeterminism) {
  Tensor a = he_uniform({16, 8, 3, 3}, 72, 5, DType::F64);
  Tensor b = he_uniform({16, 8, 3, 3}, 72, 5, DType::F64);
  const double bound = std::sqrt(6.0 / 72.0);
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    EXPECT_LE(std::abs(a.flat(i)), bound);
    EXPECT_EQ(a.flat(i), b.flat(i));
  }
}
