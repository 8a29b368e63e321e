#pragma once

#include <cstdint>
#include <string>

#include "c2sti/params.hpp"
#include "c2sti/tensor.hpp"

namespace c2sti {

/// Master seed and dtype for parameter creation. Every tensor is seeded from
/// its own path, so a parameter's initial value does not depend on which other
/// parameters exist.
struct Init {
  std::uint64_t seed = 0;
  DType dtype = DType::F32;
};

enum class InitKind { He, Zero };

std::uint64_t path_seed(std::uint64_t master, const std::string& path);

struct Conv2d {
  Tensor weight;  // [Cout,Cin,k,k]
  Tensor bias;    // [Cout]
  int stride = 1;
  int padding = 0;

  Tensor operator()(const Tensor& x) const;
  int in_channels() const { return static_cast<int>(weight.dim(1)); }
  int out_channels() const { return static_cast<int>(weight.dim(0)); }
};

struct Linear {
  Tensor weight;  // [out,in]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const;
};

/// Registers `<path>.weight` and `<path>.bias`; padding keeps the size for stride 1.
Conv2d make_conv(ModelParams& params, const std::string& path, int cin, int cout, int k, int stride,
                 const Init& init, InitKind kind = InitKind::He);
Linear make_linear(ModelParams& params, const std::string& path, int in, int out, const Init& init,
                   InitKind kind = InitKind::He);

}  // namespace c2sti
