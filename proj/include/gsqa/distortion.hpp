#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gsqa/rng.hpp"
#include "gsqa/splat.hpp"

namespace gsqa {

enum class DistortionKind {
  kDownsample,
  kSpatialNoise,
  kColorNoise,
  kReducedViewports,
  kLimitedTraining,
};

const char* to_string(DistortionKind kind);
DistortionKind parse_distortion_kind(const std::string& name);

// Executable kinds act on a cloud; the two reconstruction kinds are recipe
// metadata only.
bool is_executable(DistortionKind kind);

// Per-type reporting group (reconstruction, downsampling, gaussian_noise,
// color_noise).
const char* distortion_group(DistortionKind kind);

struct DistortionSpec {
  DistortionKind kind = DistortionKind::kDownsample;
  // p_frac, sigma, delta, view count or iteration count depending on kind.
  double level = 0.0;
  std::uint64_t seed = 0;
};

// Half-to-even rounding of p_frac * n.
std::size_t downsample_target(std::size_t n, double p_frac);

// (V / (N * p_frac))^(1/3).
double poisson_min_distance(double volume, std::size_t n, double p_frac);

struct DownsampleResult {
  GaussianCloud cloud;
  double r_min = 0.0;
  // Input indices retained by dart throwing (sorted); the remainder of the
  // output came from the seeded fill phase.
  std::vector<std::size_t> dart_accepted;
  std::vector<std::size_t> filled;
};

DownsampleResult downsample_poisson_detailed(const GaussianCloud& cloud, double p_frac,
                                             std::uint64_t seed);
GaussianCloud downsample_poisson(const GaussianCloud& cloud, double p_frac, std::uint64_t seed);

GaussianCloud perturb_positions(const GaussianCloud& cloud, double sigma, std::uint64_t seed);
GaussianCloud perturb_sh(const GaussianCloud& cloud, double delta, std::uint64_t seed);

// Dispatches an executable spec.
GaussianCloud apply_distortion(const GaussianCloud& cloud, const DistortionSpec& spec);

// Default grid: 3 levels for each of the five kinds, 15 specs per base.
std::vector<DistortionSpec> default_distortion_grid();

struct ManifestEntry {
  std::string id;  // "<base>/<kind>_<level>"
  std::string base;
  DistortionSpec spec;
  // Relative to the manifest directory for executed entries; empty for
  // recipe markers unless a reconstructed file was attached later.
  std::string path;
  bool executable = true;
  std::optional<double> mos;
};

struct BaseModel {
  std::string name;
  std::string path;
};

struct DatasetManifest {
  std::vector<BaseModel> bases;
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::string rng = kRngAlgorithm;
  std::vector<std::string> notes;
};

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const std::string& text);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct BuildOptions {
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  // Empty means the default grid.
  std::vector<DistortionSpec> grid;
};

struct NamedCloud {
  std::string name;
  std::string path;
  const GaussianCloud* cloud = nullptr;
};

// Plans all entries, executes the executable ones (per-entry RNG stream
// derived from (seed, entry index)), writes outputs and manifest.json.
DatasetManifest build_manifest(const std::vector<NamedCloud>& bases, const BuildOptions& options);

// Loads every *.ply in `bases_dir` (sorted by file name) and builds.
DatasetManifest build_dataset(const std::filesystem::path& bases_dir, const BuildOptions& options);

}  // namespace gsqa
