#include <cstring>
#include <functional>

#include "doctest.h"
#include "gsqa/error.hpp"
#include "gsqa/splat.hpp"
#include "support.hpp"

using namespace gsqa;
using gsqa::testing::TempDir;

namespace {

std::string header(std::size_t n, const std::string& format = "ascii") {
  std::string h = "ply\nformat " + format + " 1.0\nelement vertex " + std::to_string(n) + "\n";
  for (const auto& name : canonical_property_names()) h += "property float " + name + "\n";
  return h + "end_header\n";
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::kContract;
}

}  // namespace

TEST_CASE("attribute layout is [C, O, S, R, SH]") {
  GaussianSplat s;
  s.centroid = {1, 2, 3};
  s.opacity_raw = 4;
  s.scale_raw = {5, 6, 7};
  s.rotation_raw = {8, 9, 10, 11};
  for (std::size_t i = 0; i < kShCoeffs; ++i) s.sh[i] = static_cast<float>(12 + i);
  const auto a = s.attributes();
  for (std::size_t i = 0; i < kSplatAttributes; ++i) CHECK(a[i] == static_cast<float>(i + 1));
  CHECK(GaussianSplat::from_attributes(a) == s);
  CHECK(canonical_property_names()[0] == "x");
  // File order differs from the in-memory layout.
  CHECK(canonical_property_names()[3] == "f_dc_0");
  CHECK(canonical_property_names()[6] == "f_rest_0");
  CHECK(canonical_property_names()[50] == "f_rest_44");
  CHECK(canonical_property_names()[51] == "opacity");
  CHECK(canonical_property_names()[52] == "scale_0");
  CHECK(canonical_property_names()[55] == "rot_0");
  CHECK(canonical_property_names()[58] == "rot_3");
}

TEST_CASE("a header with zero vertices gives an empty cloud") {
  TempDir dir;
  testing::spit(dir / "empty.ply", header(0));
  CHECK(read_ply(dir / "empty.ply").empty());
}

TEST_CASE("one ASCII vertex with only rot_0 set") {
  TempDir dir;
  std::string body;
  for (std::size_t i = 0; i < kSplatAttributes; ++i) body += (i == 55 ? "1" : "0") + std::string(i + 1 < kSplatAttributes ? " " : "\n");
  testing::spit(dir / "one.ply", header(1) + body);
  const auto c = read_ply(dir / "one.ply");
  REQUIRE(c.size() == 1);
  CHECK(c.splats[0].centroid == std::array<float, 3>{0, 0, 0});
  CHECK(c.splats[0].rotation_raw == std::array<float, 4>{1, 0, 0, 0});
  for (const float v : c.splats[0].sh) CHECK(v == 0.0F);
}

TEST_CASE("binary round trip is bit-exact and ASCII matches") {
  TempDir dir;
  Rng rng(3);
  const auto cloud = testing::random_cloud(500, rng);
  write_ply(cloud, dir / "a.ply");
  const auto back = read_ply(dir / "a.ply");
  REQUIRE(back.size() == cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto x = cloud.splats[i].attributes();
    const auto y = back.splats[i].attributes();
    CHECK(std::memcmp(x.data(), y.data(), sizeof(x)) == 0);
  }
  write_ply(back, dir / "b.ply");
  CHECK(testing::slurp(dir / "a.ply") == testing::slurp(dir / "b.ply"));

  write_ply(cloud, dir / "c.ply", PlyEncoding::kAscii);
  const auto ascii = read_ply(dir / "c.ply");
  REQUIRE(ascii.size() == cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(ascii.splats[i] == cloud.splats[i]);
}

TEST_CASE("empty cloud writes element vertex 0") {
  TempDir dir;
  write_ply(GaussianCloud{}, dir / "e.ply");
  CHECK(testing::slurp(dir / "e.ply").find("element vertex 0") != std::string::npos);
  CHECK(read_ply(dir / "e.ply").empty());
}

TEST_CASE("extra properties survive a round trip with their types") {
  TempDir dir;
  std::string h = "ply\nformat ascii 1.0\nelement vertex 2\n";
  for (const auto& name : canonical_property_names()) {
    h += "property float " + name + "\n";
    if (name == "z") h += "property double nx\nproperty uchar red\n";
  }
  h += "end_header\n";
  std::string rows;
  for (int r = 0; r < 2; ++r) {
    for (std::size_t i = 0; i < kSplatAttributes; ++i) {
      rows += std::to_string(r + i) + " ";
      if (i == 2) rows += "0.5 " + std::to_string(200 + r) + " ";
    }
    rows += "\n";
  }
  testing::spit(dir / "x.ply", h + rows);
  const auto c = read_ply(dir / "x.ply");
  REQUIRE(c.extras.columns.size() == 2);
  CHECK(c.extras.columns[0] == ExtraProperty{"nx", PlyType::kFloat64});
  CHECK(c.extras.columns[1] == ExtraProperty{"red", PlyType::kUInt8});
  CHECK(c.extras.values == std::vector<double>{0.5, 200, 0.5, 201});
  CHECK(c.splats[1].centroid[0] == 1.0F);
  CHECK(c.splats[1].sh[47] == 51.0F);
  write_ply(c, dir / "y.ply");
  const auto d = read_ply(dir / "y.ply");
  CHECK(d.extras == c.extras);
  CHECK(d.splats == c.splats);
}

TEST_CASE("malformed inputs map to their error kinds") {
  TempDir dir;
  testing::spit(dir / "bad.ply", "ply\nformat ascii 1.0\nelement vertex x\nend_header\n");
  CHECK(kind_of([&] { read_ply(dir / "bad.ply"); }) == ErrorKind::kParse);

  std::string h = header(1);
  h.replace(h.find("property float opacity\n"), 23, "");
  testing::spit(dir / "missing.ply", h);
  try {
    read_ply(dir / "missing.ply");
    FAIL("expected a schema error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kSchema);
    CHECK(std::string(e.what()).find("opacity") != std::string::npos);
  }

  Rng rng(1);
  write_ply(testing::random_cloud(10, rng), dir / "full.ply");
  auto bytes = testing::slurp(dir / "full.ply");
  bytes.resize(bytes.size() - 7);
  testing::spit(dir / "cut.ply", bytes);
  CHECK(kind_of([&] { read_ply(dir / "cut.ply"); }) == ErrorKind::kIo);
  CHECK(kind_of([&] { read_ply(dir / "nope.ply"); }) == ErrorKind::kIo);
  CHECK(kind_of([&] { write_ply(GaussianCloud{}, dir / "no" / "such" / "dir.ply"); }) == ErrorKind::kIo);
}

TEST_CASE("bounding volume") {
  GaussianCloud c;
  c.splats.resize(2);
  c.splats[1].centroid = {1, 2, 3};
  CHECK(bounding_volume(c) == doctest::Approx(6.0).epsilon(1e-12));
  c.splats[1].centroid = {0, 0, 0};
  CHECK(bounding_volume(c) == doctest::Approx(kEpsilonExtent * kEpsilonExtent * kEpsilonExtent));
  c.splats.resize(1);
  CHECK(bounding_volume(c) == doctest::Approx(kEpsilonExtent * kEpsilonExtent * kEpsilonExtent));
  CHECK(kind_of([] { bounding_volume(GaussianCloud{}); }) == ErrorKind::kDomain);
}

TEST_CASE("subset keeps extras aligned") {
  GaussianCloud c;
  c.splats.resize(3);
  for (int i = 0; i < 3; ++i) c.splats[i].opacity_raw = static_cast<float>(i);
  c.extras.columns = {{"a", PlyType::kInt32}};
  c.extras.values = {10, 11, 12};
  const auto s = c.subset({2, 0});
  CHECK(s.size() == 2);
  CHECK(s.splats[0].opacity_raw == 2.0F);
  CHECK(s.extras.values == std::vector<double>{12, 10});
}
