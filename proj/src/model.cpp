#include "c2sti/model.hpp"

#include "c2sti/ops.hpp"

namespace c2sti {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoCrossModal: return "no_cross_modal";
    case Variant::NoMgcGraph: return "no_mgc_graph";
    case Variant::NoDlsm: return "no_dlsm";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::Full, Variant::NoCrossModal, Variant::NoMgcGraph, Variant::NoDlsm})
    if (name == variant_name(v)) return v;
  throw Error("unknown variant '" + name + "' (expected full, no_cross_modal, no_mgc_graph or no_dlsm)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"genes", c.genes},   {"backbone_channels", c.backbone_channels}, {"channels", c.channels},
       {"lambda", c.lambda}, {"alpha", c.alpha}, {"variant", variant_name(c.variant)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.genes = j.value("genes", d.genes);
  c.backbone_channels = j.value("backbone_channels", d.backbone_channels);
  c.channels = j.value("channels", d.channels);
  c.lambda = j.value("lambda", d.lambda);
  c.alpha = j.value("alpha", d.alpha);
  c.variant = parse_variant(j.value("variant", std::string(variant_name(d.variant))));
}

std::vector<std::string> inactive_prefixes(Variant v, double lambda) {
  std::vector<std::string> out;
  if (v == Variant::NoCrossModal) out = {"cross_modal.backbone_he.", "cross_modal.gate."};
  if (v == Variant::NoMgcGraph || lambda == 0.0) out.push_back("gcn.");
  if (v == Variant::NoDlsm) out.push_back("dlsm.modulate.");
  return out;
}

Model::Model(const ModelConfig& config, std::uint64_t seed, DType dtype) : config_(config), dtype_(dtype) {
  if (config.genes < 2) throw Error("model: genes must be >= 2");
  if (!(config.lambda >= 0.0 && config.lambda <= 1.0)) throw Error("model: lambda must lie in [0,1]");
  if (!(config.alpha >= 0.0)) throw Error("model: alpha must be >= 0");
  const Init init{seed, dtype};
  cross_modal_ = make_cross_modal(params_, config.genes, config.backbone_channels,
                                  config.variant != Variant::NoCrossModal, init);
  encoder_ = make_pyramid_encoder(params_, config.backbone_channels, config.channels, init);
  graph_ = make_graph_layer(params_, config.channels, config.genes, init);
  decoder_ = make_decoder(params_, config.backbone_channels, config.channels, init);
  modulator_ = make_modulator(params_, config.channels, init);
  estimators_ = make_estimators(params_, config.channels, init);
  synth_ = make_synthesizer(params_, config.channels, config.genes, init);
}

double Model::effective_lambda() const {
  return config_.variant == Variant::NoMgcGraph ? 0.0 : config_.lambda;
}

std::vector<std::string> Model::active_paths() const {
  const auto skip = inactive_prefixes(config_.variant, effective_lambda());
  std::vector<std::string> out;
  for (const auto& [path, _] : params_) {
    bool keep = true;
    for (const auto& pre : skip) keep = keep && path.rfind(pre, 0) != 0;
    if (keep) out.push_back(path);
  }
  return out;
}

Tensor Model::prepare(const Tensor& t, std::int64_t channels) const {
  Tensor x = t.ndim() == 3 ? reshape(t.detach(), {1, t.dim(0), t.dim(1), t.dim(2)}) : t.detach();
  if (x.ndim() != 4 || x.dim(1) != channels)
    throw ShapeError("model: expected " + std::to_string(channels) + "-channel input, got " + shape_str(t.shape()));
  return x.dtype() == dtype_ ? x : x.to(dtype_);
}

ForwardResult Model::forward(const SliceTuple& t) const {
  return forward(t.anchors[0].genes, t.anchors[1].genes, t.he_anchors[0].rgb, t.he_anchors[1].rgb, t.s());
}

ForwardResult Model::forward(const Tensor& st0, const Tensor& st1, const Tensor& he0, const Tensor& he1,
                             int s) const {
  const PositionSet pos = config_.variant == Variant::NoDlsm ? uniform_positions(s)
                                                             : compute_positions(he0, he1, s, config_.alpha);
  return forward(st0, st1, he0, he1, pos);
}

ForwardResult Model::forward(const Tensor& st0_in, const Tensor& st1_in, const Tensor& he0_in,
                             const Tensor& he1_in, const PositionSet& positions) const {
  const Tensor st0 = prepare(st0_in, config_.genes), st1 = prepare(st1_in, config_.genes);
  const Tensor he0 = prepare(he0_in, 3), he1 = prepare(he1_in, 3);
  if (st0.shape() != st1.shape()) throw ShapeError("model: anchor shapes differ");
  const std::int64_t h = st0.dim(2), w = st0.dim(3);
  if (h % 16 != 0 || w % 16 != 0)
    throw ShapeError("model: patch extents must be multiples of 16, got " + shape_str(st0.shape()));
  if (he0.dim(2) != h || he0.dim(3) != w || he1.shape() != he0.shape())
    throw ShapeError("model: H&E patches are not registered to the ST anchors");

  if (positions.p.empty()) throw Error("model: no positions to synthesize");
  for (std::size_t i = 0; i < positions.p.size(); ++i) {
    const double p = positions.p[i];
    if (!(p > 0.0 && p < 1.0)) throw Error("model: position outside (0,1)");
    if (i > 0 && !(p > positions.p[i - 1])) throw Error("model: positions must be strictly increasing");
  }

  ForwardResult r;
  r.positions = positions;
  ForwardTrace& tr = r.trace;
  tr.positions = positions;
  tr.x0 = cross_modal_(st0, he0);
  tr.x1 = cross_modal_(st1, he1);

  const double lambda = effective_lambda();
  std::vector<Tensor> c0 = encoder_(tr.x0), c1 = encoder_(tr.x1);
  std::vector<std::pair<Tensor, Tensor>> levels;
  if (lambda > 0.0) tr.graph = build_graph(st0, st1, dtype_);
  for (int l = 0; l < kPyramidLevels; ++l) {
    if (lambda > 0.0)
      levels.emplace_back(gcn_propagate(c0[l], tr.graph.p_prop, lambda, graph_),
                          gcn_propagate(c1[l], tr.graph.p_prop, lambda, graph_));
    else
      levels.emplace_back(c0[l], c1[l]);
  }
  tr.bundle = decoder_(levels, {tr.x0, tr.x1});
  r.f01 = tr.bundle[0].first;
  r.f10 = tr.bundle[0].second;

  const bool modulated = config_.variant != Variant::NoDlsm;
  for (double p : positions.p) {
    Tensor f01 = r.f01, f10 = r.f10;
    const Tensor m01 = modulated ? modulate(f01, p, modulator_).f_out : f01;
    const Tensor m10 = modulated ? modulate(f10, 1.0 - p, modulator_).f_out : f10;
    const Tensor fused01 = deformable_fuse(f01, estimate_deform(m01, estimators_));
    const Tensor fused10 = deformable_fuse(f10, estimate_deform(m10, estimators_));
    r.slices.push_back(synthesize_slice(fused01, fused10, p, synth_));
  }
  return r;
}

nlohmann::json Model::describe() const {
  nlohmann::json j = config_;
  j["dtype"] = dtype_name(dtype_);
  j["parameters"] = params_.element_count();
  return j;
}

}  // namespace c2sti
