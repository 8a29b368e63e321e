#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "c2sti/params.hpp"

namespace c2sti {

struct AdamWConfig {
  double lr0 = 1e-4;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::int64_t total_steps = 1;
};

/// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2, held at lr_min past the horizon.
double cosine_lr(double lr0, double lr_min, std::int64_t step, std::int64_t total_steps);

struct OptimizerState {
  explicit OptimizerState(AdamWConfig cfg = {}) : config(cfg) {}

  AdamWConfig config;
  std::int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;

  double lr() const { return cosine_lr(config.lr0, config.lr_min, step, config.total_steps); }
};

/// One AdamW update of every parameter in `params` (or only `paths` when given),
/// using the scheduled rate for the current step. Weight decay is decoupled:
///   p <- p - lr*wd*p ;  p <- p - lr * mhat / (sqrt(vhat) + eps)
/// Throws naming the first parameter that has no gradient.
void adamw_step(ModelParams& params, OptimizerState& state);
void adamw_step(ModelParams& params, const std::vector<std::string>& paths, OptimizerState& state);

}  // namespace c2sti
