#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "c2sti/gradcheck.hpp"

namespace c2sti {

struct GradSuiteRow {
  std::string name;
  GradCheckResult result;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const { return result.max_rel_error < tolerance; }
};

struct GradSuiteOptions {
  std::uint64_t seed = 17;
  double op_tolerance = 1e-4;
  double end_to_end_tolerance = 1e-3;
  /// Share of all model parameters probed end to end.
  double end_to_end_fraction = 0.01;
  bool end_to_end = true;
};

/// Finite-difference checks of every differentiable building block in 64-bit
/// mode, then of L_sim through the whole network on a 16x16, 8-gene tuple.
std::vector<GradSuiteRow> gradient_suite(const GradSuiteOptions& options = {});

}  // namespace c2sti
