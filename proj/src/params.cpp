#include "c2sti/params.hpp"

#include <cmath>
#include <fstream>

#include "c2sti/io.hpp"
#include "c2sti/rng.hpp"

namespace c2sti {

namespace fs = std::filesystem;

Tensor ModelParams::add(const std::string& path, Tensor t) {
  if (path.empty()) throw Error("parameter path must not be empty");
  if (!entries_.emplace(path, t).second) throw Error("duplicate parameter path '" + path + "'");
  t.set_requires_grad(true);
  return t;
}

const Tensor& ModelParams::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw Error("unknown parameter '" + path + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw Error("unknown parameter '" + path + "'");
  return it->second;
}

std::vector<std::string> ModelParams::paths() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::int64_t ModelParams::element_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& [_, t] : entries_) t.clear_grad();
}

Tensor he_uniform(const Shape& shape, std::int64_t fan_in, std::uint64_t seed, DType dt) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(1, fan_in)));
  Rng rng(seed);
  Tensor t = Tensor::zeros(shape, dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, rng.uniform(-bound, bound));
  return t;
}

fs::path param_file(const fs::path& dir, const std::string& path) {
  std::string rel = path;
  for (auto& c : rel) {
    if (c == '.') c = '/';
  }
  return dir / (rel + ".ctf");
}

void save_checkpoint(const ModelParams& params, const fs::path& dir, std::int64_t step,
                     const nlohmann::json& extra) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "c2sti-checkpoint";
  manifest["step"] = step;
  manifest["config"] = extra;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [path, t] : params) {
    const fs::path file = param_file(dir, path);
    fs::create_directories(file.parent_path());
    save_ctf(t, file);
    entries.push_back({{"path", path}, {"shape", t.shape()}, {"dtype", dtype_name(t.dtype())}});
  }
  manifest["params"] = entries;
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw Error("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

nlohmann::json read_checkpoint_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw Error("no checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
  }
  return manifest;
}

nlohmann::json load_checkpoint(ModelParams& params, const fs::path& dir) {
  const nlohmann::json manifest = read_checkpoint_manifest(dir);
  std::map<std::string, Shape> saved;
  for (const auto& e : manifest.at("params")) saved[e.at("path").get<std::string>()] = e.at("shape").get<Shape>();

  // Report the lexicographically first disagreement across both sides.
  auto mi = params.begin();
  auto si = saved.begin();
  while (mi != params.end() || si != saved.end()) {
    if (si == saved.end() || (mi != params.end() && mi->first < si->first)) {
      throw Error("checkpoint mismatch at '" + mi->first + "': missing from checkpoint");
    }
    if (mi == params.end() || si->first < mi->first) {
      throw Error("checkpoint mismatch at '" + si->first + "': not a model parameter");
    }
    if (mi->second.shape() != si->second) {
      throw Error("checkpoint mismatch at '" + mi->first + "': model shape " + shape_str(mi->second.shape()) +
                  ", checkpoint shape " + shape_str(si->second));
    }
    ++mi;
    ++si;
  }
  for (const auto& [path, _] : saved) {
    Tensor value = load_ctf(param_file(dir, path));
    params.at(path).copy_from(value);
  }
  return manifest;
}

}  // namespace c2sti
