#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2sti/cross_modal.hpp"
#include "c2sti/data.hpp"
#include "c2sti/dlsm.hpp"
#include "c2sti/pyramid.hpp"

namespace c2sti {

enum class Variant { Full, NoCrossModal, NoMgcGraph, NoDlsm };

const char* variant_name(Variant v);
/// Accepts "full", "no_cross_modal", "no_mgc_graph", "no_dlsm".
Variant parse_variant(const std::string& name);

struct ModelConfig {
  int genes = 8;
  int backbone_channels = 16;
  int channels = 32;
  double lambda = 0.5;
  double alpha = 1.0;
  Variant variant = Variant::Full;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ForwardTrace {
  Tensor x0, x1;                 // cross-modal features
  CoexpressionGraph graph;
  DeformationBundle bundle;      // level 0 is the finest
  PositionSet positions;
};

struct ForwardResult {
  std::vector<Tensor> slices;    // s tensors [B,N,H,W], ordered by position
  PositionSet positions;
  Tensor f01, f10;               // finest deformation features
  ForwardTrace trace;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed, DType dtype = DType::F32);

  const ModelConfig& config() const { return config_; }
  DType dtype() const { return dtype_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  /// Parameters that receive gradient under the current variant and lambda.
  std::vector<std::string> active_paths() const;

  /// Anchors as [N,H,W]/[3,H,W] or with a leading batch axis of 1.
  ForwardResult forward(const Tensor& st0, const Tensor& st1, const Tensor& he0, const Tensor& he1,
                        int s) const;
  ForwardResult forward(const SliceTuple& t) const;
  /// Explicit positions (still within (0,1), strictly increasing).
  ForwardResult forward(const Tensor& st0, const Tensor& st1, const Tensor& he0, const Tensor& he1,
                        const PositionSet& positions) const;

  /// Effective GCN blend after the variant is applied.
  double effective_lambda() const;

  nlohmann::json describe() const;

 private:
  Tensor prepare(const Tensor& t, std::int64_t channels) const;

  ModelConfig config_;
  DType dtype_;
  ModelParams params_;
  CrossModal cross_modal_;
  PyramidEncoder encoder_;
  GraphLayer graph_;
  DeformationDecoder decoder_;
  Modulator modulator_;
  Estimators estimators_;
  Synthesizer synth_;
};

/// Parameter-path prefixes that stay inactive for a variant.
std::vector<std::string> inactive_prefixes(Variant v, double lambda);

}  // namespace c2sti
