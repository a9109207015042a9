#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "gsqa/splat.hpp"

namespace gsqa {

inline constexpr std::size_t kGroupingDims = 9;

// (centroid, scale_raw, DC SH) of one splat.
using GroupingPoint = std::array<double, kGroupingDims>;

struct RegionParams {
  std::size_t p_pre = 8192;
  std::size_t n = 64;
  std::size_t k = 32;
  std::uint64_t seed = 0;
  // Per-dimension standardization of the grouping space before FPS/kNN.
  bool standardize = false;
};

// n regions of k members each. embeddings holds n*k*59 floats, row-major
// [region][member][attribute]; member 0 of each region is its center.
struct RegionBatch {
  RegionParams params;
  std::vector<std::uint32_t> center_indices;
  std::vector<std::uint32_t> neighbors;  // n*k
  std::vector<float> embeddings;         // n*k*59

  std::size_t regions() const { return params.n; }
  std::size_t members() const { return params.k; }
  std::uint32_t neighbor(std::size_t region, std::size_t member) const {
    return neighbors[region * params.k + member];
  }
  const float* embedding(std::size_t region, std::size_t member) const {
    return embeddings.data() + (region * params.k + member) * kSplatAttributes;
  }

  bool operator==(const RegionBatch& other) const;
};

GaussianCloud pre_downsample(const GaussianCloud& cloud, std::size_t p_pre, std::uint64_t seed);

std::vector<GroupingPoint> grouping_space(const GaussianCloud& cloud);
GroupingPoint grouping_point(const float* attributes59);

// Shifts and scales each dimension to zero mean, unit variance (dimensions
// with zero variance are only centered).
void standardize_in_place(std::vector<GroupingPoint>& points);

struct FpsResult {
  std::vector<std::size_t> centers;
  // Max-min distance at each selection step; entry 0 is +inf.
  std::vector<double> selection_distances;
};

FpsResult fps_detailed(const std::vector<GroupingPoint>& points, std::size_t n, std::uint64_t seed);
std::vector<std::size_t> fps(const std::vector<GroupingPoint>& points, std::size_t n,
                             std::uint64_t seed);
// Deterministic variant with a caller-chosen start index.
FpsResult fps_from(const std::vector<GroupingPoint>& points, std::size_t n, std::size_t start);

// Row i: k nearest points to centers[i]; the center first, then nondecreasing
// distance with ties broken by lowest index.
std::vector<std::uint32_t> knn_regions(const std::vector<GroupingPoint>& points,
                                       const std::vector<std::size_t>& centers, std::size_t k);

std::vector<float> assemble_embeddings(const GaussianCloud& cloud,
                                       const std::vector<std::uint32_t>& neighbors);

// pre_downsample -> grouping_space -> fps -> knn_regions -> assemble_embeddings.
RegionBatch build_regions(const GaussianCloud& cloud, const RegionParams& params);

// Binary container, all little-endian: "GSRB" magic, u32 version (1), u32
// p_pre, u32 n, u32 k, then n center indices (u32), n*k neighbor indices
// (u32) and n*k*59 float32 embeddings.
void write_regions(const RegionBatch& batch, const std::filesystem::path& path);
RegionBatch read_regions(const std::filesystem::path& path);

}  // namespace gsqa
