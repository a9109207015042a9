#include "gsqa/regioning.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "gsqa/error.hpp"
#include "gsqa/rng.hpp"

namespace gsqa {
namespace {

constexpr std::uint64_t kPreDownsampleStream = 0;
constexpr std::uint64_t kFpsStream = 1;
constexpr std::uint32_t kRegionVersion = 1;
constexpr char kRegionMagic[4] = {'G', 'S', 'R', 'B'};

double squared_distance(const GroupingPoint& a, const GroupingPoint& b) {
  double d2 = 0.0;
  for (std::size_t i = 0; i < kGroupingDims; ++i) {
    const double d = a[i] - b[i];
    d2 += d * d;
  }
  return d2;
}

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) {
    fail(ErrorKind::kIo, "truncated region file '" + path.string() + "'");
  }
  return v;
}

}  // namespace

bool RegionBatch::operator==(const RegionBatch& other) const {
  return params.p_pre == other.params.p_pre && params.n == other.params.n &&
         params.k == other.params.k && center_indices == other.center_indices &&
         neighbors == other.neighbors && embeddings == other.embeddings;
}

GaussianCloud pre_downsample(const GaussianCloud& cloud, std::size_t p_pre, std::uint64_t seed) {
  require(p_pre >= 1, ErrorKind::kDomain, "pre-downsample count must be at least 1");
  if (cloud.size() <= p_pre) return cloud;
  Rng rng(seed, kPreDownsampleStream);
  std::vector<std::size_t> pool(cloud.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  // Partial Fisher-Yates: the first p_pre slots are a uniform subset.
  for (std::size_t i = 0; i < p_pre; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(p_pre);
  std::sort(pool.begin(), pool.end());
  return cloud.subset(pool);
}

GroupingPoint grouping_point(const float* a) {
  // [C(0..3), O(3), S(4..7), R(7..11), SH(11..59)]
  return {a[0], a[1], a[2], a[4], a[5], a[6], a[11], a[12], a[13]};
}

std::vector<GroupingPoint> grouping_space(const GaussianCloud& cloud) {
  std::vector<GroupingPoint> points;
  points.reserve(cloud.size());
  for (const auto& s : cloud.splats) {
    points.push_back({s.centroid[0], s.centroid[1], s.centroid[2], s.scale_raw[0],
                      s.scale_raw[1], s.scale_raw[2], s.sh[0], s.sh[1], s.sh[2]});
  }
  return points;
}

void standardize_in_place(std::vector<GroupingPoint>& points) {
  if (points.empty()) return;
  const double count = static_cast<double>(points.size());
  for (std::size_t d = 0; d < kGroupingDims; ++d) {
    double mean = 0.0;
    for (const auto& p : points) mean += p[d];
    mean /= count;
    double var = 0.0;
    for (const auto& p : points) var += (p[d] - mean) * (p[d] - mean);
    const double sd = std::sqrt(var / count);
    for (auto& p : points) {
      p[d] -= mean;
      if (sd > 0.0) p[d] /= sd;
    }
  }
}

FpsResult fps_from(const std::vector<GroupingPoint>& points, std::size_t n, std::size_t start) {
  require(n >= 1 && n <= points.size(), ErrorKind::kDomain,
          "FPS center count must lie in [1, point count]");
  require(start < points.size(), ErrorKind::kDomain, "FPS start index out of range");
  FpsResult r;
  r.centers.reserve(n);
  r.selection_distances.reserve(n);
  std::vector<double> min_d2(points.size(), std::numeric_limits<double>::infinity());
  std::vector<char> chosen(points.size(), 0);

  std::size_t current = start;
  r.centers.push_back(current);
  r.selection_distances.push_back(std::numeric_limits<double>::infinity());
  chosen[current] = 1;
  while (r.centers.size() < n) {
    std::size_t best = points.size();
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (chosen[i]) continue;
      min_d2[i] = std::min(min_d2[i], squared_distance(points[i], points[current]));
      if (min_d2[i] > best_d2) {
        best_d2 = min_d2[i];
        best = i;
      }
    }
    current = best;
    chosen[current] = 1;
    r.centers.push_back(current);
    r.selection_distances.push_back(std::sqrt(best_d2));
  }
  return r;
}

FpsResult fps_detailed(const std::vector<GroupingPoint>& points, std::size_t n, std::uint64_t seed) {
  require(!points.empty(), ErrorKind::kDomain, "FPS over an empty point set");
  Rng rng(seed, kFpsStream);
  const auto start = static_cast<std::size_t>(rng.below(points.size()));
  return fps_from(points, n, start);
}

std::vector<std::size_t> fps(const std::vector<GroupingPoint>& points, std::size_t n,
                             std::uint64_t seed) {
  return fps_detailed(points, n, seed).centers;
}

std::vector<std::uint32_t> knn_regions(const std::vector<GroupingPoint>& points,
                                       const std::vector<std::size_t>& centers, std::size_t k) {
  require(k >= 1 && k <= points.size(), ErrorKind::kDomain,
          "neighbor count must lie in [1, point count]");
  std::vector<std::uint32_t> table;
  table.reserve(centers.size() * k);
  std::vector<std::pair<double, std::uint32_t>> candidates;
  candidates.reserve(points.size());
  for (const std::size_t c : centers) {
    require(c < points.size(), ErrorKind::kDomain, "center index out of range");
    candidates.clear();
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (j == c) continue;
      candidates.emplace_back(squared_distance(points[c], points[j]),
                              static_cast<std::uint32_t>(j));
    }
    const auto take = static_cast<std::ptrdiff_t>(k - 1);
    std::nth_element(candidates.begin(), candidates.begin() + take, candidates.end());
    std::sort(candidates.begin(), candidates.begin() + take);
    table.push_back(static_cast<std::uint32_t>(c));
    for (std::ptrdiff_t j = 0; j < take; ++j) table.push_back(candidates[j].second);
  }
  return table;
}

std::vector<float> assemble_embeddings(const GaussianCloud& cloud,
                                       const std::vector<std::uint32_t>& neighbors) {
  std::vector<float> out;
  out.reserve(neighbors.size() * kSplatAttributes);
  for (const std::uint32_t idx : neighbors) {
    require(idx < cloud.size(), ErrorKind::kDomain,
            "embedding gather index " + std::to_string(idx) + " out of bounds");
    const auto a = cloud.splats[idx].attributes();
    out.insert(out.end(), a.begin(), a.end());
  }
  return out;
}

RegionBatch build_regions(const GaussianCloud& cloud, const RegionParams& params) {
  const GaussianCloud reduced = pre_downsample(cloud, params.p_pre, params.seed);
  auto points = grouping_space(reduced);
  if (params.standardize) standardize_in_place(points);
  RegionBatch batch;
  batch.params = params;
  const auto centers = fps(points, params.n, params.seed);
  batch.center_indices.assign(centers.begin(), centers.end());
  batch.neighbors = knn_regions(points, centers, params.k);
  batch.embeddings = assemble_embeddings(reduced, batch.neighbors);
  return batch;
}

void write_regions(const RegionBatch& batch, const std::filesystem::path& path) {
  const auto& p = batch.params;
  require(batch.center_indices.size() == p.n && batch.neighbors.size() == p.n * p.k &&
              batch.embeddings.size() == p.n * p.k * kSplatAttributes,
          ErrorKind::kContract, "region batch shapes are inconsistent");
  std::string out;
  out.append(kRegionMagic, 4);
  put<std::uint32_t>(out, kRegionVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.p_pre));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.n));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(p.k));
  for (const auto c : batch.center_indices) put<std::uint32_t>(out, c);
  for (const auto i : batch.neighbors) put<std::uint32_t>(out, i);
  for (const float f : batch.embeddings) put<float>(out, f);
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail(ErrorKind::kIo, "cannot write region file '" + path.string() + "'");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) fail(ErrorKind::kIo, "write failed for region file '" + path.string() + "'");
}

RegionBatch read_regions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open region file '" + path.string() + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kRegionMagic, 4) != 0) {
    fail(ErrorKind::kParse, "'" + path.string() + "' is not a region file");
  }
  const auto version = take<std::uint32_t>(in, path);
  if (version != kRegionVersion) {
    fail(ErrorKind::kParse, "unsupported region file version " + std::to_string(version));
  }
  RegionBatch batch;
  batch.params.p_pre = take<std::uint32_t>(in, path);
  batch.params.n = take<std::uint32_t>(in, path);
  batch.params.k = take<std::uint32_t>(in, path);
  const std::size_t n = batch.params.n;
  const std::size_t k = batch.params.k;
  batch.center_indices.resize(n);
  batch.neighbors.resize(n * k);
  batch.embeddings.resize(n * k * kSplatAttributes);
  in.read(reinterpret_cast<char*>(batch.center_indices.data()),
          static_cast<std::streamsize>(n * sizeof(std::uint32_t)));
  in.read(reinterpret_cast<char*>(batch.neighbors.data()),
          static_cast<std::streamsize>(n * k * sizeof(std::uint32_t)));
  in.read(reinterpret_cast<char*>(batch.embeddings.data()),
          static_cast<std::streamsize>(batch.embeddings.size() * sizeof(float)));
  if (!in) fail(ErrorKind::kIo, "truncated region file '" + path.string() + "'");
  for (std::size_t i = 0; i < n; ++i) {
    require(batch.neighbors[i * k] == batch.center_indices[i], ErrorKind::kParse,
            "region file rows must start with their center");
  }
  return batch;
}

}  // namespace gsqa
