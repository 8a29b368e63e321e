#include "c2sti/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "c2sti/io.hpp"
#include "c2sti/parallel.hpp"
#include "c2sti/rng.hpp"

namespace c2sti {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"genes", c.genes},         {"size", c.size},         {"slices", c.slices},
           {"volumes", c.volumes},     {"deformation", c.deformation},
           {"drift", c.drift},         {"sparsity", c.sparsity}, {"blobs", c.blobs},
           {"programs", c.programs}};
}

void from_json(const json& j, GeneratorConfig& c) {
  GeneratorConfig d;
  c.genes = j.value("genes", d.genes);
  c.size = j.value("size", d.size);
  c.slices = j.value("slices", d.slices);
  c.volumes = j.value("volumes", d.volumes);
  c.deformation = j.value("deformation", d.deformation);
  c.drift = j.value("drift", d.drift);
  c.sparsity = j.value("sparsity", d.sparsity);
  c.blobs = j.value("blobs", d.blobs);
  c.programs = j.value("programs", d.programs);
}

void to_json(json& j, const DatasetManifest& m) {
  j = json{{"format", "c2sti-dataset-1"},
           {"generator", m.generator},
           {"seed", m.seed},
           {"ratio", m.ratio},
           {"counts", {{"train", m.counts.train}, {"val", m.counts.val}, {"test", m.counts.test}}},
           {"volume_seeds", m.volume_seeds}};
}

void from_json(const json& j, DatasetManifest& m) {
  m.generator = j.at("generator").get<GeneratorConfig>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.ratio = j.at("ratio").get<std::array<int, 3>>();
  const json& c = j.at("counts");
  m.counts = {c.at("train").get<int>(), c.at("val").get<int>(), c.at("test").get<int>()};
  m.volume_seeds = j.at("volume_seeds").get<std::vector<std::uint64_t>>();
}

SplitCounts split_counts(int volumes, const std::array<int, 3>& ratio) {
  if (volumes < 0) throw Error("split_counts: negative volume count");
  const long total = static_cast<long>(ratio[0]) + ratio[1] + ratio[2];
  if (total <= 0 || ratio[0] < 0 || ratio[1] < 0 || ratio[2] < 0)
    throw Error("split_counts: ratio must be non-negative with a positive sum");
  std::array<int, 3> n{};
  std::array<long, 3> rem{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const long q = static_cast<long>(volumes) * ratio[i];
    n[i] = static_cast<int>(q / total);
    rem[i] = q % total;
    assigned += n[i];
  }
  std::array<int, 3> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; assigned < volumes; ++k, ++assigned) ++n[order[k % 3]];
  return {n[0], n[1], n[2]};
}

std::uint64_t volume_seed(std::uint64_t seed, int index) {
  return mix_seed(seed, static_cast<std::uint64_t>(index));
}

namespace {

double clamp_sample(const double* plane, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
         fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
}

// [C,H,W] f64 planes, warped in place semantics
std::vector<double> warp_planes(const std::vector<double>& src, int c, int h, int w,
                                const std::vector<double>& field) {
  std::vector<double> out(src.size());
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = src.data() + ch * hw;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const double dy = field[p], dx = field[hw + p];
        out[ch * hw + p] = (dy == 0.0 && dx == 0.0) ? plane[p] : clamp_sample(plane, h, w, y - dy, x - dx);
      }
  }
  return out;
}

std::vector<double> displacement(int h, int w, double magnitude, Rng& rng) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> f(2 * hw, 0.0);
  if (magnitude == 0.0) return f;
  constexpr int kWaves = 3;
  for (int comp = 0; comp < 2; ++comp) {
    double fy[kWaves], fx[kWaves], ph[kWaves], a[kWaves], asum = 0.0;
    for (int q = 0; q < kWaves; ++q) {
      fy[q] = rng.uniform(-1.5, 1.5);
      fx[q] = rng.uniform(-1.5, 1.5);
      ph[q] = rng.uniform(0.0, 2.0 * M_PI);
      a[q] = rng.uniform(0.2, 1.0);
      asum += a[q];
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.0;
        for (int q = 0; q < kWaves; ++q)
          v += a[q] * std::sin(2.0 * M_PI * (fy[q] * y / h + fx[q] * x / w) + ph[q]);
        f[comp * hw + static_cast<std::size_t>(y) * w + x] = magnitude * v / asum;
      }
  }
  return f;
}

void check_config(const GeneratorConfig& c) {
  if (c.genes < 2) throw Error("generator: genes must be >= 2, got " + std::to_string(c.genes));
  if (c.size < 1) throw Error("generator: size must be positive");
  if (c.slices < 3) throw Error("generator: slices must be >= 3");
  if (c.programs < 1 || c.blobs < 1) throw Error("generator: programs and blobs must be positive");
  if (c.deformation < 0 || c.drift < 0) throw Error("generator: negative deformation or drift");
  if (c.sparsity < 0 || c.sparsity >= 1) throw Error("generator: sparsity must lie in [0,1)");
}

Tensor planes_to_tensor(const std::vector<double>& v, std::size_t offset, int c, int h, int w) {
  Tensor t = Tensor::zeros({c, h, w}, DType::F32);
  auto dst = t.data<float>();
  for (std::size_t i = 0; i < dst.size(); ++i)
    dst[i] = static_cast<float>(std::clamp(v[offset + i], 0.0, 1.0));
  return t;
}

}  // namespace

Tensor warp_stack(const Tensor& stack, const Tensor& field) {
  if (stack.ndim() != 3) throw ShapeError("warp_stack: stack must be [C,H,W], got " + shape_str(stack.shape()));
  const Shape fs_ = {2, stack.dim(1), stack.dim(2)};
  if (field.shape() != fs_) throw ShapeError("warp_stack: field must be " + shape_str(fs_));
  const int c = static_cast<int>(stack.dim(0)), h = static_cast<int>(stack.dim(1)),
            w = static_cast<int>(stack.dim(2));
  const auto out = warp_planes(stack.to(DType::F64).to_vector(), c, h, w, field.to(DType::F64).to_vector());
  return Tensor::from_vector(stack.shape(), out, DType::F64).to(stack.dtype());
}

Tensor smooth_displacement(int height, int width, double magnitude, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::from_vector({2, height, width}, displacement(height, width, magnitude, rng), DType::F64);
}

Volume generate_volume(const GeneratorConfig& cfg, std::uint64_t seed) {
  check_config(cfg);
  Rng rng(seed);
  const int n = cfg.genes, k = cfg.programs, h = cfg.size, w = cfg.size, s = cfg.slices;
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  // latent fields: k programs + 1 texture channel
  std::vector<double> latent((k + 1) * hw, 0.0);
  for (int b = 0; b < cfg.blobs; ++b) {
    const int prog = b % k;
    const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
    const double sigma = rng.uniform(h / 10.0, h / 5.0) + 0.5;
    const double amp = rng.uniform(0.5, 1.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        latent[prog * hw + y * w + x] += amp * std::exp(-d2 / (2 * sigma * sigma));
      }
  }
  {
    double fy[3], fx[3], ph[3];
    for (int q = 0; q < 3; ++q) {
      const double ang = rng.uniform(0.0, M_PI), freq = rng.uniform(2.0, 5.0);
      fy[q] = freq * std::sin(ang);
      fx[q] = freq * std::cos(ang);
      ph[q] = rng.uniform(0.0, 2.0 * M_PI);
    }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = 0.0;
        for (int q = 0; q < 3; ++q) v += std::sin(2.0 * M_PI * (fy[q] * y / h + fx[q] * x / w) + ph[q]);
        latent[k * hw + y * w + x] = 0.5 + v / 6.0;
      }
  }

  // nonnegative gene loadings, gene g led by program g % k
  std::vector<double> load(static_cast<std::size_t>(n) * k);
  for (int g = 0; g < n; ++g)
    for (int p = 0; p < k; ++p) {
      const double off = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, 0.3);
      load[g * k + p] = (p == g % k) ? rng.uniform(0.6, 1.0) : off;
    }
  std::vector<double> level(n, 1.0);

  std::vector<double> genes(static_cast<std::size_t>(s) * n * hw);
  std::vector<double> texture(static_cast<std::size_t>(s) * hw);
  for (int sl = 0; sl < s; ++sl) {
    if (sl > 0) {
      latent = warp_planes(latent, k + 1, h, w, displacement(h, w, cfg.deformation, rng));
      for (int g = 0; g < n; ++g) level[g] *= 1.0 + cfg.drift * rng.uniform(-1.0, 1.0);
    }
    for (int g = 0; g < n; ++g)
      for (std::size_t p = 0; p < hw; ++p) {
        double v = 0.0;
        for (int q = 0; q < k; ++q) v += load[g * k + q] * latent[q * hw + p];
        genes[(static_cast<std::size_t>(sl) * n + g) * hw + p] = level[g] * v;
      }
    std::copy_n(latent.begin() + k * hw, hw, texture.begin() + sl * hw);
  }

  // per-gene normalization over the whole volume
  const std::size_t per_gene = static_cast<std::size_t>(s) * hw;
  std::vector<double> smooth_density(per_gene, 0.0);
  for (int g = 0; g < n; ++g) {
    double mx = 0.0;
    for (int sl = 0; sl < s; ++sl)
      for (std::size_t p = 0; p < hw; ++p) mx = std::max(mx, genes[(static_cast<std::size_t>(sl) * n + g) * hw + p]);
    std::vector<double> vals;
    vals.reserve(per_gene);
    for (int sl = 0; sl < s; ++sl)
      for (std::size_t p = 0; p < hw; ++p) {
        double& v = genes[(static_cast<std::size_t>(sl) * n + g) * hw + p];
        v = mx > 0 ? std::clamp(v / mx, 0.0, 1.0) : 0.0;
        smooth_density[sl * hw + p] += v / n;
        vals.push_back(v);
      }
    const std::size_t cut = static_cast<std::size_t>(std::floor(cfg.sparsity * per_gene));
    if (cut == 0) continue;
    std::nth_element(vals.begin(), vals.begin() + cut, vals.end());
    const double thr = vals[cut];
    for (int sl = 0; sl < s; ++sl)
      for (std::size_t p = 0; p < hw; ++p) {
        double& v = genes[(static_cast<std::size_t>(sl) * n + g) * hw + p];
        if (v < thr) v = 0.0;
      }
  }

  // H&E: hematoxylin-like darkening with cell density, eosin background, texture
  static constexpr double kBg[3] = {0.95, 0.86, 0.93};
  static constexpr double kHem[3] = {0.55, 0.65, 0.25};
  static constexpr double kTex[3] = {0.20, 0.25, 0.10};
  Volume vol;
  vol.st.reserve(s);
  vol.he.reserve(s);
  for (int sl = 0; sl < s; ++sl) {
    vol.st.push_back({planes_to_tensor(genes, static_cast<std::size_t>(sl) * n * hw, n, h, w), sl});
    std::vector<double> rgb(3 * hw);
    for (std::size_t p = 0; p < hw; ++p) {
      const double dens = 1.0 - std::exp(-3.0 * smooth_density[sl * hw + p]);
      const double tex = texture[sl * hw + p];
      for (int c = 0; c < 3; ++c)
        rgb[c * hw + p] = kBg[c] - kHem[c] * dens - kTex[c] * tex * (0.3 + 0.7 * dens);
    }
    vol.he.push_back({planes_to_tensor(rgb, 0, 3, h, w), sl});
  }
  return vol;
}

std::vector<SliceTuple> make_tuples(const Volume& volume, int s) {
  if (s < 1) throw Error("make_tuples: s must be >= 1, got " + std::to_string(s));
  const int len = static_cast<int>(volume.st.size());
  if (static_cast<int>(volume.he.size()) != len) throw Error("make_tuples: ST/H&E slice counts differ");
  if (len < s + 2)
    throw Error("make_tuples: volume of " + std::to_string(len) + " slices is shorter than s+2");
  std::vector<SliceTuple> out;
  out.reserve(len - s - 1);
  for (int j = 0; j + s + 1 < len; ++j) {
    SliceTuple t;
    t.anchors = {volume.st[j], volume.st[j + s + 1]};
    t.he_anchors = {volume.he[j], volume.he[j + s + 1]};
    for (int i = 1; i <= s; ++i) t.targets.push_back(volume.st[j + i]);
    out.push_back(std::move(t));
  }
  return out;
}

void save_patch(const STPatch& patch, const fs::path& path) { save_ctf(patch.genes, path); }
void save_patch(const HEPatch& patch, const fs::path& path) { save_ctf(patch.rgb, path); }

STPatch load_st_patch(const fs::path& path, int slice_index) {
  return {load_ctf(path, 3), slice_index};
}

HEPatch load_he_patch(const fs::path& path, int slice_index) {
  Tensor t = load_ctf(path, 3);
  if (t.dim(0) != 3) throw ShapeError("H&E patch " + path.string() + " must have 3 channels, got " + shape_str(t.shape()));
  return {t, slice_index};
}

namespace {

const char* const kSplits[3] = {"train", "val", "test"};

fs::path volume_dir(const fs::path& root, const char* split, int k) {
  return root / split / ("vol_" + std::to_string(k));
}

}  // namespace

DatasetManifest write_dataset(const GeneratorConfig& config, std::uint64_t seed, const fs::path& root) {
  check_config(config);
  if (config.volumes < 1) throw Error("generator: volumes must be positive");
  DatasetManifest m;
  m.generator = config;
  m.seed = seed;
  m.counts = split_counts(config.volumes);
  for (int k = 0; k < config.volumes; ++k) m.volume_seeds.push_back(volume_seed(seed, k));

  fs::create_directories(root);
  parallel_for(config.volumes, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t k = b; k < e; ++k) {
      const int kk = static_cast<int>(k);
      const char* split = kk < m.counts.train ? kSplits[0] : kk < m.counts.train + m.counts.val ? kSplits[1] : kSplits[2];
      const Volume v = generate_volume(config, m.volume_seeds[kk]);
      const fs::path dir = volume_dir(root, split, kk);
      fs::create_directories(dir);
      for (int i = 0; i < config.slices; ++i) {
        save_patch(v.st[i], dir / ("st_" + std::to_string(i) + ".ctf"));
        save_patch(v.he[i], dir / ("he_" + std::to_string(i) + ".ctf"));
      }
    }
  });
  std::ofstream(root / "manifest.json") << json(m).dump(2) << "\n";
  return m;
}

DatasetManifest read_dataset_manifest(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw Error("dataset manifest not found under " + root.string());
  return json::parse(in).get<DatasetManifest>();
}

std::vector<Volume> load_split(const fs::path& root, const std::string& split) {
  const DatasetManifest m = read_dataset_manifest(root);
  int first = 0, count = 0;
  if (split == "train") {
    count = m.counts.train;
  } else if (split == "val") {
    first = m.counts.train;
    count = m.counts.val;
  } else if (split == "test") {
    first = m.counts.train + m.counts.val;
    count = m.counts.test;
  } else {
    throw Error("unknown split '" + split + "'");
  }
  std::vector<Volume> out;
  for (int k = first; k < first + count; ++k) {
    const fs::path dir = volume_dir(root, split.c_str(), k);
    Volume v;
    for (int i = 0; i < m.generator.slices; ++i) {
      v.st.push_back(load_st_patch(dir / ("st_" + std::to_string(i) + ".ctf"), i));
      v.he.push_back(load_he_patch(dir / ("he_" + std::to_string(i) + ".ctf"), i));
      if (v.st.back().genes.dim(0) != m.generator.genes)
        throw ShapeError("gene count mismatch in " + dir.string());
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace c2sti
