#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2sti/tensor.hpp"

namespace c2sti {

/// Named learnable tensors, iterated in lexicographic path order.
class ModelParams {
 public:
  using Map = std::map<std::string, Tensor>;

  /// Registers `t` under `path` and enables its gradient. Duplicate paths throw.
  Tensor add(const std::string& path, Tensor t);
  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> paths() const;
  std::int64_t element_count() const;
  void zero_grad();

 private:
  Map entries_;
};

/// He-uniform weights: U(-b, b) with b = sqrt(6 / fan_in).
Tensor he_uniform(const Shape& shape, std::int64_t fan_in, std::uint64_t seed, DType dt);

/// Writes one CTF per parameter (dots in the path become directories, plus a
/// ".ctf" suffix) and a manifest.json with paths, shapes, step and `extra`.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& dir, std::int64_t step,
                     const nlohmann::json& extra = nlohmann::json::object());

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

/// Copies checkpoint values into the existing parameters. Throws naming the
/// first path whose presence or shape disagrees. Returns the manifest.
nlohmann::json load_checkpoint(ModelParams& params, const std::filesystem::path& dir);

std::filesystem::path param_file(const std::filesystem::path& dir, const std::string& path);

}  // namespace c2sti
