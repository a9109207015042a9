#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gsqa/splat.hpp"

namespace gsqa {

// Procedural stand-ins for reconstructed scenes: splats on a surface with
// smoothly varying color, scale and opacity.
enum class SyntheticShape { kSphere, kTorus, kBox, kWave, kHelix };

const char* to_string(SyntheticShape shape);
SyntheticShape parse_synthetic_shape(const std::string& name);
std::vector<SyntheticShape> all_synthetic_shapes();

GaussianCloud synthetic_cloud(SyntheticShape shape, std::size_t count, std::uint64_t seed);

}  // namespace gsqa
