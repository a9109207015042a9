#include "gsqa/synthetic.hpp"

#include <cmath>
#include <numbers>

#include "gsqa/error.hpp"
#include "gsqa/rng.hpp"

namespace gsqa {
namespace {

struct SurfacePoint {
  double x, y, z;
};

SurfacePoint sample_surface(SyntheticShape shape, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  const double u = rng.uniform();
  const double v = rng.uniform();
  switch (shape) {
    case SyntheticShape::kSphere: {
      const double z = 2.0 * u - 1.0;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      return {r * std::cos(2 * pi * v), r * std::sin(2 * pi * v), z};
    }
    case SyntheticShape::kTorus: {
      const double a = 2 * pi * u;
      const double b = 2 * pi * v;
      return {(0.7 + 0.3 * std::cos(b)) * std::cos(a), (0.7 + 0.3 * std::cos(b)) * std::sin(a),
              0.3 * std::sin(b)};
    }
    case SyntheticShape::kBox: {
      const auto face = rng.below(6);
      const double s = 2.0 * u - 1.0;
      const double t = 2.0 * v - 1.0;
      const double sign = face % 2 == 0 ? 1.0 : -1.0;
      switch (face / 2) {
        case 0: return {sign, 0.8 * s, 0.6 * t};
        case 1: return {s, sign * 0.8, 0.6 * t};
        default: return {s, 0.8 * t, sign * 0.6};
      }
    }
    case SyntheticShape::kWave: {
      const double x = 2.0 * u - 1.0;
      const double y = 2.0 * v - 1.0;
      return {x, y, 0.25 * std::sin(3.0 * x) * std::cos(2.0 * y)};
    }
    case SyntheticShape::kHelix: {
      const double t = 4 * pi * u;
      const double a = 2 * pi * v;
      const double cx = 0.7 * std::cos(t);
      const double cy = 0.7 * std::sin(t);
      const double cz = t / (4 * pi) * 2.0 - 1.0;
      return {cx + 0.2 * std::cos(a) * std::cos(t), cy + 0.2 * std::cos(a) * std::sin(t),
              cz + 0.2 * std::sin(a)};
    }
  }
  return {0, 0, 0};
}

}  // namespace

const char* to_string(SyntheticShape shape) {
  switch (shape) {
    case SyntheticShape::kSphere: return "sphere";
    case SyntheticShape::kTorus: return "torus";
    case SyntheticShape::kBox: return "box";
    case SyntheticShape::kWave: return "wave";
    case SyntheticShape::kHelix: return "helix";
  }
  return "sphere";
}

SyntheticShape parse_synthetic_shape(const std::string& name) {
  for (const auto s : all_synthetic_shapes()) {
    if (name == to_string(s)) return s;
  }
  fail(ErrorKind::kDomain, "unknown synthetic shape '" + name + "'");
}

std::vector<SyntheticShape> all_synthetic_shapes() {
  return {SyntheticShape::kSphere, SyntheticShape::kTorus, SyntheticShape::kBox, SyntheticShape::kWave,
          SyntheticShape::kHelix};
}

GaussianCloud synthetic_cloud(SyntheticShape shape, std::size_t count, std::uint64_t seed) {
  require(count >= 1, ErrorKind::kDomain, "synthetic cloud needs at least one splat");
  Rng rng(seed);
  GaussianCloud cloud;
  cloud.source_label = std::string("synthetic:") + to_string(shape);
  cloud.splats.reserve(count);
  // Log of the typical spacing for a unit-scale surface.
  const double base_scale = std::log(2.0 / std::sqrt(static_cast<double>(count)));
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  for (std::size_t i = 0; i < count; ++i) {
    const auto p = sample_surface(shape, rng);
    GaussianSplat s;
    s.centroid = {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)};
    s.opacity_raw = static_cast<float>(2.0 + 0.5 * std::sin(3.0 * p.x + phase) + 0.1 * rng.normal());
    for (std::size_t a = 0; a < 3; ++a) {
      s.scale_raw[a] = static_cast<float>(base_scale + 0.2 * std::cos(2.0 * p.y + a) + 0.05 * rng.normal());
    }
    double q[4] = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]) + 1e-300;
    for (std::size_t a = 0; a < 4; ++a) s.rotation_raw[a] = static_cast<float>(q[a] / qn);
    // DC color: smooth field over the surface; higher bands decay with order.
    s.sh[0] = static_cast<float>(0.8 * std::sin(2.0 * p.x + phase) + 0.2 * p.z);
    s.sh[1] = static_cast<float>(0.8 * std::cos(2.5 * p.y - phase) + 0.1 * p.x);
    s.sh[2] = static_cast<float>(0.6 * std::sin(1.5 * p.z + 0.5 * p.x));
    for (std::size_t c = 3; c < kShCoeffs; ++c) {
      const double order = static_cast<double>(c / 3);
      s.sh[c] = static_cast<float>(0.3 / order * std::sin(order * p.x + c * p.y + phase - p.z));
    }
    cloud.splats.push_back(s);
  }
  return cloud;
}

}  // namespace gsqa
