#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "c2sti/tensor.hpp"

namespace c2sti {

/// Expression maps of one slice: genes [N,H,W], values in [0,1].
struct STPatch {
  Tensor genes;
  int slice_index = 0;
};

/// Registered H&E rendering of one slice: rgb [3,H,W], values in [0,1].
struct HEPatch {
  Tensor rgb;
  int slice_index = 0;
};

struct Volume {
  std::vector<STPatch> st;
  std::vector<HEPatch> he;
};

/// Two anchors at j and j+s+1 with the s slices between them as targets.
struct SliceTuple {
  std::array<STPatch, 2> anchors;
  std::array<HEPatch, 2> he_anchors;
  std::vector<STPatch> targets;

  int s() const { return static_cast<int>(targets.size()); }
};

struct GeneratorConfig {
  int genes = 8;
  int size = 32;
  int slices = 19;
  int volumes = 64;
  /// Peak displacement (pixels) of the smooth warp between adjacent slices.
  double deformation = 1.5;
  /// Per-slice relative random walk of each gene's intensity.
  double drift = 0.05;
  /// Fraction of lowest values zeroed per gene.
  double sparsity = 0.5;
  int blobs = 12;
  /// Latent spatial programs shared by co-expressed genes.
  int programs = 4;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

/// Train/val/test ratio used to split volumes.
inline constexpr std::array<int, 3> kDefaultSplitRatio = {852, 100, 264};

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};

/// Largest-remainder apportionment of `volumes` by `ratio`.
SplitCounts split_counts(int volumes, const std::array<int, 3>& ratio = kDefaultSplitRatio);

struct DatasetManifest {
  GeneratorConfig generator;
  std::uint64_t seed = 7;
  std::array<int, 3> ratio = kDefaultSplitRatio;
  SplitCounts counts;
  std::vector<std::uint64_t> volume_seeds;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Seed of volume `index` under master seed `seed`.
std::uint64_t volume_seed(std::uint64_t seed, int index);

/// Backward-maps every channel of `stack` [C,H,W] through `field` [2,H,W]
/// (dy, dx): out(y,x) = in(y - dy, x - dx), bilinear with edge clamping.
Tensor warp_stack(const Tensor& stack, const Tensor& field);

/// Smooth random displacement field [2,H,W] with peak magnitude <= `magnitude`.
Tensor smooth_displacement(int height, int width, double magnitude, std::uint64_t seed);

/// One synthetic volume of registered ST/H&E slices.
Volume generate_volume(const GeneratorConfig& config, std::uint64_t seed);

/// Every window of s+2 consecutive slices, sliding by one.
std::vector<SliceTuple> make_tuples(const Volume& volume, int s);

void save_patch(const STPatch& patch, const std::filesystem::path& path);
void save_patch(const HEPatch& patch, const std::filesystem::path& path);
STPatch load_st_patch(const std::filesystem::path& path, int slice_index = 0);
HEPatch load_he_patch(const std::filesystem::path& path, int slice_index = 0);

/// Generates `config.volumes` volumes and writes
///   root/{train,val,test}/vol_<k>/{st,he}_<i>.ctf  and  root/manifest.json
DatasetManifest write_dataset(const GeneratorConfig& config, std::uint64_t seed,
                              const std::filesystem::path& root);

DatasetManifest read_dataset_manifest(const std::filesystem::path& root);

/// Volumes of one split ("train", "val" or "test"), ordered by volume index.
std::vector<Volume> load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace c2sti
