#include "c2sti/layers.hpp"

#include "c2sti/ops.hpp"
#include "c2sti/rng.hpp"

namespace c2sti {

std::uint64_t path_seed(std::uint64_t master, const std::string& path) {
  return mix_seed(master, hash_string(path));
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Conv2d make_conv(ModelParams& params, const std::string& path, int cin, int cout, int k, int stride,
                 const Init& init, InitKind kind) {
  const Shape shape = {cout, cin, k, k};
  Tensor w = kind == InitKind::He ? he_uniform(shape, static_cast<std::int64_t>(cin) * k * k,
                                               path_seed(init.seed, path + ".weight"), init.dtype)
                                  : Tensor::zeros(shape, init.dtype);
  Conv2d c;
  c.weight = params.add(path + ".weight", w);
  c.bias = params.add(path + ".bias", Tensor::zeros({cout}, init.dtype));
  c.stride = stride;
  c.padding = k / 2;
  return c;
}

Linear make_linear(ModelParams& params, const std::string& path, int in, int out, const Init& init,
                   InitKind kind) {
  const Shape shape = {out, in};
  Tensor w = kind == InitKind::He
                 ? he_uniform(shape, in, path_seed(init.seed, path + ".weight"), init.dtype)
                 : Tensor::zeros(shape, init.dtype);
  Linear l;
  l.weight = params.add(path + ".weight", w);
  l.bias = params.add(path + ".bias", Tensor::zeros({out}, init.dtype));
  return l;
}

}  // namespace c2sti
