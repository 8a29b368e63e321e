#include "c2sti/suite.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include "c2sti/cross_modal.hpp"
#include "c2sti/dlsm.hpp"
#include "c2sti/metrics.hpp"
#include "c2sti/model.hpp"
#include "c2sti/ops.hpp"
#include "c2sti/pyramid.hpp"
#include "c2sti/rng.hpp"

namespace c2sti {

namespace {

using Inputs = std::vector<std::pair<std::string, Tensor>>;

Tensor rand64(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  Tensor t = Tensor::zeros(shape, DType::F64);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, rng.uniform(lo, hi));
  if (grad) t.set_requires_grad(true);
  return t;
}

void randomize(const ModelParams& p, Rng& rng, double r) {
  for (const auto& [_, t] : p) {
    Tensor v = rand64(t.shape(), rng, -r, r, false);
    Tensor(t).copy_from(v);
  }
}

Inputs all_of(const ModelParams& p) { return {p.begin(), p.end()}; }


}  // namespace

std::vector<GradSuiteRow> gradient_suite(const GradSuiteOptions& o) {
  std::vector<GradSuiteRow> rows;
  Rng rng(o.seed);
  const Init init{o.seed, DType::F64};

  auto run = [&](const std::string& name, const std::function<Tensor()>& loss, const Inputs& in,
                 double fraction = 0.0, double tol = -1.0) {
    GradCheckOptions opt;
    opt.sample_fraction = fraction;
    opt.seed = o.seed;
    const auto t0 = std::chrono::steady_clock::now();
    GradSuiteRow row{name, gradcheck(loss, in, opt), tol > 0 ? tol : o.op_tolerance, 0.0};
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
  };

  {
    Tensor x = rand64({2, 3, 7, 6}, rng), w = rand64({4, 3, 3, 3}, rng), b = rand64({4}, rng);
    Tensor wy = rand64({2, 4, 7, 6}, rng, -1, 1, false);
    run("conv2d", [&] { return sum(mul(conv2d(x, w, b, 1, 1), wy)); }, {{"x", x}, {"w", w}, {"b", b}});
    Tensor wy2 = rand64({2, 4, 4, 3}, rng, -1, 1, false);
    run("conv2d_stride2", [&] { return sum(mul(conv2d(x, w, b, 2, 1), wy2)); }, {{"x", x}, {"w", w}, {"b", b}});
  }
  {
    Tensor x = rand64({2, 3, 6, 5}, rng), k = rand64({3, 3, 3}, rng);
    Tensor wy = rand64({2, 3, 6, 5}, rng, -1, 1, false);
    run("depthwise_conv2d", [&] { return sum(mul(depthwise_conv2d(x, k, 1), wy)); }, {{"x", x}, {"k", k}});
  }
  {
    Tensor x = rand64({1, 8, 3, 4}, rng);
    Tensor wy = rand64({1, 2, 6, 8}, rng, -1, 1, false);
    run("pixel_shuffle", [&] { return sum(mul(pixel_shuffle(x, 2), wy)); }, {{"x", x}});
  }
  {
    ModelParams p;
    GatedFusion g = make_gated_fusion(p, "gate", 3, 4, init);
    randomize(p, rng, 0.5);
    Tensor mh = rand64({1, 3, 5, 5}, rng), ms = rand64({1, 4, 5, 5}, rng);
    Tensor wy = rand64({1, 4, 5, 5}, rng, -1, 1, false);
    Inputs in = all_of(p);
    in.emplace_back("m_h", mh);
    in.emplace_back("m_s", ms);
    run("gated_fusion", [&] { return sum(mul(g(mh, ms).x, wy)); }, in);
  }
  {
    ModelParams p;
    GraphLayer layer = make_graph_layer(p, 4, 3, init);
    randomize(p, rng, 0.5);
    Tensor c = rand64({1, 4, 4, 4}, rng);
    Tensor a = rand64({3, 3}, rng, 0.0, 1.0, false);
    Tensor sym = scale(add(a, transpose2d(a)), 0.5);
    Tensor prop = propagation_matrix(sym);
    Tensor wy = rand64({1, 4, 4, 4}, rng, -1, 1, false);
    Inputs in = all_of(p);
    in.emplace_back("c", c);
    run("gcn_propagate", [&] { return sum(mul(gcn_propagate(c, prop, 0.5, layer), wy)); }, in);
  }
  {
    ModelParams p;
    Modulator m = make_modulator(p, 3, init);
    randomize(p, rng, 0.5);
    Tensor f = rand64({1, 3, 4, 4}, rng);
    Tensor w1 = rand64({1, 3, 4, 4}, rng, -1, 1, false), w2 = rand64({1, 3, 4, 4}, rng, -1, 1, false);
    Inputs in = all_of(p);
    in.emplace_back("f", f);
    run("modulate_channel", [&] { return sum(mul(modulate(f, 0.37, m).f_ca, w1)); }, in);
    run("modulate_spatial", [&] { return sum(mul(modulate(f, 0.37, m).f_sp, w2)); }, in);
    run("modulate", [&] { return sum(mul(modulate(f, 0.62, m).f_out, w1)); }, in);
  }
  {
    ModelParams p;
    Estimators e = make_estimators(p, 3, init);
    randomize(p, rng, 0.5);
    Tensor f = rand64({1, 3, 4, 4}, rng);
    Tensor w1 = rand64({1, 3, 9}, rng, -1, 1, false), w2 = rand64({1, 18, 4, 4}, rng, -1, 1, false),
           w3 = rand64({1, 9, 4, 4}, rng, -1, 1, false);
    Inputs in = all_of(p);
    in.emplace_back("f", f);
    run("estimators", [&] {
      const DeformParams dp = estimate_deform(f, e);
      return add(add(sum(mul(reshape(dp.kernel, {1, 3, 9}), w1)), sum(mul(dp.offset, w2))), sum(mul(dp.mask, w3)));
    }, in);
  }
  {
    Tensor f = rand64({1, 3, 5, 5}, rng), k = rand64({1, 3, 3, 3}, rng);
    Tensor off = rand64({1, 18, 5, 5}, rng, -0.8, 0.8), mask = rand64({1, 9, 5, 5}, rng, 0.1, 0.9);
    Tensor wy = rand64({1, 3, 5, 5}, rng, -1, 1, false);
    run("deformable_fuse", [&] { return sum(mul(deformable_fuse(f, DeformParams{k, off, mask}), wy)); },
        {{"f", f}, {"kernel", k}, {"offset", off}, {"mask", mask}});
  }
  {
    Tensor p0 = rand64({1, 2, 4, 4}, rng, 0, 1), p1 = rand64({1, 2, 4, 4}, rng, 0, 1);
    Tensor t0 = rand64({1, 2, 4, 4}, rng, 0, 1, false), t1 = rand64({1, 2, 4, 4}, rng, 0, 1, false);
    run("loss_sim", [&] { return loss_sim({p0, p1}, {t0, t1}); }, {{"p0", p0}, {"p1", p1}});
    Tensor f01 = rand64({1, 3, 4, 5}, rng), f10 = rand64({1, 3, 4, 5}, rng);
    run("loss_smooth", [&] { return loss_smooth(f01, f10); }, {{"f01", f01}, {"f10", f10}});
  }

  if (o.end_to_end) {
    Model m(ModelConfig{}, o.seed, DType::F64);
    // zero-initialised heads would leave the offset and mask paths untested
    for (const auto& [path, t] : m.params()) {
      if (path.rfind("dlsm.estimate.", 0) == 0) Tensor(t).copy_from(rand64(t.shape(), rng, -0.05, 0.05, false));
    }
    Tensor st0 = rand64({8, 16, 16}, rng, 0, 1, false), st1 = rand64({8, 16, 16}, rng, 0, 1, false);
    Tensor he0 = rand64({3, 16, 16}, rng, 0, 1, false), he1 = rand64({3, 16, 16}, rng, 0, 1, false);
    Tensor target = reshape(rand64({8, 16, 16}, rng, 0, 1, false), {1, 8, 16, 16});
    run("end_to_end_l_sim",
        [&] { return loss_sim(m.forward(st0, st1, he0, he1, 1).slices, {target}); }, all_of(m.params()),
        o.end_to_end_fraction, o.end_to_end_tolerance);
  }
  return rows;
}

}  // namespace c2sti
