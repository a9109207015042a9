#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace gsqa {

inline constexpr std::size_t kShCoeffs = 48;
inline constexpr std::size_t kSplatAttributes = 59;
inline constexpr double kEpsilonExtent = 1e-6;

// One Gaussian primitive with its stored (pre-activation) attributes:
// opacity is a logit, scale is log-scale, rotation is an unnormalized
// w-x-y-z quaternion. sh[0..3) are the DC terms, sh[3..48) the f_rest terms
// in file order.
struct GaussianSplat {
  std::array<float, 3> centroid{};
  float opacity_raw = 0.0F;
  std::array<float, 3> scale_raw{};
  std::array<float, 4> rotation_raw{1.0F, 0.0F, 0.0F, 0.0F};
  std::array<float, kShCoeffs> sh{};

  // Flattened as [C, O, S, R, SH].
  std::array<float, kSplatAttributes> attributes() const;
  static GaussianSplat from_attributes(const std::array<float, kSplatAttributes>& a);

  bool operator==(const GaussianSplat&) const = default;
};

// Scalar PLY property types, by their canonical PLY names.
enum class PlyType { kInt8, kUInt8, kInt16, kUInt16, kInt32, kUInt32, kFloat32, kFloat64 };

struct ExtraProperty {
  std::string name;
  PlyType type = PlyType::kFloat32;
  bool operator==(const ExtraProperty&) const = default;
};

// Vertex properties that are not part of the 59 splat attributes. Values are
// held as doubles (exact for every PLY scalar type) and written back in their
// original type.
struct ExtraProperties {
  std::vector<ExtraProperty> columns;
  std::vector<double> values;  // row-major, splat count x columns.size()

  bool operator==(const ExtraProperties&) const = default;
};

struct GaussianCloud {
  std::vector<GaussianSplat> splats;
  std::string source_label;
  ExtraProperties extras;

  std::size_t size() const { return splats.size(); }
  bool empty() const { return splats.empty(); }

  // Copy of the splats at `indices` (in the given order), extras included.
  GaussianCloud subset(const std::vector<std::size_t>& indices) const;
};

struct Aabb {
  std::array<double, 3> lo{};
  std::array<double, 3> hi{};
};

Aabb bounding_box(const GaussianCloud& cloud);

// Product of the axis-aligned centroid extents, each clamped below at
// kEpsilonExtent. Throws a domain error for an empty cloud.
double bounding_volume(const GaussianCloud& cloud);

enum class PlyEncoding { kBinaryLittleEndian, kAscii };

GaussianCloud read_ply(const std::filesystem::path& path);
void write_ply(const GaussianCloud& cloud, const std::filesystem::path& path,
               PlyEncoding encoding = PlyEncoding::kBinaryLittleEndian);

// The 59 canonical property names in write order.
const std::array<std::string, kSplatAttributes>& canonical_property_names();

}  // namespace gsqa
