#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "c2sti/tensor.hpp"

namespace c2sti {

struct GradCheckOptions {
  double step = 1e-4;
  /// Elements probed per input; -1 probes every element.
  std::int64_t max_elements_per_input = -1;
  /// When positive, probes ceil(fraction * numel) elements of each input
  /// instead (still capped by max_elements_per_input).
  double sample_fraction = 0.0;
  /// Entries whose magnitude is below floor_ratio * max|grad| are judged
  /// against that floor instead of their own magnitude.
  double floor_ratio = 1e-2;
  std::uint64_t seed = 1;
  /// Elements whose error at `step` exceeds refine_above are re-probed at
  /// 10*step and at step/10, step/100, ... (refine_steps smaller steps); the
  /// closest estimate is kept. A ReLU or bilinear-cell boundary within `step`
  /// of the point spoils the primary estimate but not the smaller ones, and a
  /// tiny gradient drowned in rounding of the loss recovers at the larger one.
  /// A wrong analytic gradient disagrees at every step.
  double refine_above = 1e-5;
  int refine_steps = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_input;
  std::int64_t worst_index = -1;
  std::int64_t probed = 0;
  /// Elements that needed re-probing at smaller steps.
  std::int64_t refined = 0;
};

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` must rebuild the scalar loss from the current values of the named
/// inputs (which are perturbed in place and restored). Error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor>>& inputs,
                          const GradCheckOptions& options = {});

}  // namespace c2sti
