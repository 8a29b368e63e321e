#include "c2sti/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "c2sti/rng.hpp"

namespace c2sti {

GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn,
                          const std::vector<std::pair<std::string, Tensor>>& inputs,
                          const GradCheckOptions& options) {
  for (const auto& [name, t] : inputs) {
    if (!t.requires_grad()) throw Error("gradcheck: input '" + name + "' does not require grad");
    const_cast<Tensor&>(t).clear_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();

  GradCheckResult result;
  Rng rng(options.seed);
  for (const auto& [name, t_const] : inputs) {
    Tensor t = t_const;
    const std::vector<double> analytic =
        t.has_grad() ? t.grad().to_vector() : std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);

    std::vector<std::int64_t> probe(static_cast<std::size_t>(t.numel()));
    std::iota(probe.begin(), probe.end(), 0);
    std::int64_t take = options.max_elements_per_input;
    if (options.sample_fraction > 0.0) {
      const auto f = static_cast<std::int64_t>(std::ceil(options.sample_fraction * static_cast<double>(t.numel())));
      take = take >= 0 ? std::min(take, f) : f;
    }
    if (take >= 0 && take < t.numel()) {
      for (std::int64_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t.numel() - i)));
        std::swap(probe[i], probe[j]);
      }
      probe.resize(static_cast<std::size_t>(take));
    }

    NoGradGuard no_grad;
    auto central = [&](std::int64_t i, double h) {
      const double orig = t.flat(i);
      t.set_flat(i, orig + h);
      const double up = loss_fn().item();
      t.set_flat(i, orig - h);
      const double down = loss_fn().item();
      t.set_flat(i, orig);
      return (up - down) / (2.0 * h);
    };
    std::vector<double> numeric(probe.size());
    for (std::size_t k = 0; k < probe.size(); ++k) numeric[k] = central(probe[k], options.step);

    double scale = 0.0;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      scale = std::max({scale, std::abs(numeric[k]), std::abs(analytic[probe[k]])});
    }
    const double floor = std::max(options.floor_ratio * scale, 1e-10);
    auto rel_error = [&](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}); };
    for (std::size_t k = 0; k < probe.size(); ++k) {
      const double a = analytic[probe[k]];
      double n = numeric[k];
      if (options.refine_steps > 0 && rel_error(a, n) > options.refine_above) {
        ++result.refined;
        std::vector<double> steps{options.step * 10.0};
        for (int r = 1; r <= options.refine_steps; ++r) steps.push_back(options.step * std::pow(10.0, -r));
        for (double h : steps) {
          const double m = central(probe[k], h);
          if (rel_error(a, m) < rel_error(a, n)) n = m;
        }
      }
      const double abs_err = std::abs(a - n);
      const double rel = rel_error(a, n);
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = name;
        result.worst_index = probe[k];
      }
      ++result.probed;
    }
  }
  return result;
}

}  // namespace c2sti
