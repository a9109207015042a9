#include "gsqa/splat.hpp"

#include <algorithm>
#include <limits>

#include "gsqa/error.hpp"

namespace gsqa {

std::array<float, kSplatAttributes> GaussianSplat::attributes() const {
  std::array<float, kSplatAttributes> a{};
  auto out = a.begin();
  out = std::copy(centroid.begin(), centroid.end(), out);
  *out++ = opacity_raw;
  out = std::copy(scale_raw.begin(), scale_raw.end(), out);
  out = std::copy(rotation_raw.begin(), rotation_raw.end(), out);
  std::copy(sh.begin(), sh.end(), out);
  return a;
}

GaussianSplat GaussianSplat::from_attributes(const std::array<float, kSplatAttributes>& a) {
  GaussianSplat s;
  auto in = a.begin();
  std::copy_n(in, 3, s.centroid.begin());
  in += 3;
  s.opacity_raw = *in++;
  std::copy_n(in, 3, s.scale_raw.begin());
  in += 3;
  std::copy_n(in, 4, s.rotation_raw.begin());
  in += 4;
  std::copy_n(in, kShCoeffs, s.sh.begin());
  return s;
}

GaussianCloud GaussianCloud::subset(const std::vector<std::size_t>& indices) const {
  GaussianCloud out;
  out.source_label = source_label;
  out.extras.columns = extras.columns;
  out.splats.reserve(indices.size());
  const std::size_t width = extras.columns.size();
  out.extras.values.reserve(indices.size() * width);
  for (const std::size_t i : indices) {
    require(i < splats.size(), ErrorKind::kDomain, "subset index out of range");
    out.splats.push_back(splats[i]);
    const auto row = extras.values.begin() + static_cast<std::ptrdiff_t>(i * width);
    out.extras.values.insert(out.extras.values.end(), row,
                             row + static_cast<std::ptrdiff_t>(width));
  }
  return out;
}

Aabb bounding_box(const GaussianCloud& cloud) {
  require(!cloud.empty(), ErrorKind::kDomain, "bounding box of an empty cloud");
  Aabb box;
  box.lo.fill(std::numeric_limits<double>::infinity());
  box.hi.fill(-std::numeric_limits<double>::infinity());
  for (const auto& s : cloud.splats) {
    for (std::size_t a = 0; a < 3; ++a) {
      box.lo[a] = std::min(box.lo[a], static_cast<double>(s.centroid[a]));
      box.hi[a] = std::max(box.hi[a], static_cast<double>(s.centroid[a]));
    }
  }
  return box;
}

double bounding_volume(const GaussianCloud& cloud) {
  const Aabb box = bounding_box(cloud);
  double volume = 1.0;
  for (std::size_t a = 0; a < 3; ++a) {
    volume *= std::max(box.hi[a] - box.lo[a], kEpsilonExtent);
  }
  return volume;
}

}  // namespace gsqa
