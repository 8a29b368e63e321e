#include "c2sti/optim.hpp"

#include <algorithm>
#include <cmath>

namespace c2sti {

double cosine_lr(double lr0, double lr_min, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return lr_min;
  const std::int64_t t = std::clamp<std::int64_t>(step, 0, total_steps);
  return lr_min + 0.5 * (lr0 - lr_min) *
                      (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total_steps)));
}

void adamw_step(ModelParams& params, OptimizerState& state) { adamw_step(params, params.paths(), state); }

void adamw_step(ModelParams& params, const std::vector<std::string>& paths, OptimizerState& state) {
  for (const auto& path : paths) {
    if (!params.at(path).has_grad()) throw Error("adamw_step: parameter '" + path + "' has no gradient");
  }
  const auto& cfg = state.config;
  const double lr = state.lr();
  const auto t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  for (const auto& path : paths) {
    Tensor& p = params.at(path);
    auto [mit, m_new] = state.m.try_emplace(path);
    if (m_new) mit->second = Tensor::zeros(p.shape(), p.dtype());
    auto [vit, v_new] = state.v.try_emplace(path);
    if (v_new) vit->second = Tensor::zeros(p.shape(), p.dtype());
    Tensor grad = p.grad();
    dispatch(p.dtype(), [&]<typename T>() {
      auto w = p.data<T>();
      auto g = grad.data<T>();
      auto m = mit->second.data<T>();
      auto v = vit->second.data<T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        double wi = w[i];
        wi -= lr * cfg.weight_decay * wi;
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
        w[i] = static_cast<T>(wi);
      }
    });
  }
  ++state.step;
}

}  // namespace c2sti
