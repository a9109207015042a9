#include <numeric>
#include <set>

#include "doctest.h"
#include "gsqa/error.hpp"
#include "gsqa/regioning.hpp"
#include "support.hpp"

using namespace gsqa;
using gsqa::testing::TempDir;

namespace {

std::vector<GroupingPoint> line(std::initializer_list<double> xs) {
  std::vector<GroupingPoint> pts;
  for (const double x : xs) pts.push_back({x, 0, 0, 0, 0, 0, 0, 0, 0});
  return pts;
}

}  // namespace

TEST_CASE("pre-downsampling") {
  Rng rng(1);
  const auto small = testing::random_cloud(100, rng);
  CHECK(pre_downsample(small, 200, 5).splats == small.splats);
  const auto big = testing::random_cloud(20000, rng);
  const auto out = pre_downsample(big, 8192, 5);
  CHECK(out.size() == 8192);
  std::set<std::array<float, 59>> all;
  for (const auto& s : big.splats) all.insert(s.attributes());
  for (const auto& s : out.splats) CHECK(all.contains(s.attributes()));
  CHECK(pre_downsample(big, 8192, 5).splats == out.splats);
  CHECK(pre_downsample(big, 8192, 6).splats != out.splats);
  CHECK_THROWS_AS(pre_downsample(big, 0, 5), Error);
}

TEST_CASE("grouping space copies centroid, log-scale and DC color") {
  GaussianSplat s;
  s.centroid = {1, 2, 3};
  s.scale_raw = {-1, -1, -1};
  s.sh[0] = 0.5F;
  s.sh[1] = 0.25F;
  s.sh[2] = 0.1F;
  s.sh[3] = 9.0F;
  s.opacity_raw = 7.0F;
  GaussianCloud c;
  c.splats = {GaussianSplat{}, s};
  c.splats[0].rotation_raw = {0, 0, 0, 0};
  const auto g = grouping_space(c);
  CHECK(g[0] == GroupingPoint{});
  CHECK(g[1] == GroupingPoint{1, 2, 3, -1, -1, -1, 0.5, 0.25, static_cast<double>(0.1F)});
  const auto a = s.attributes();
  CHECK(grouping_point(a.data()) == g[1]);
}

TEST_CASE("standardization gives zero mean and unit variance") {
  Rng rng(3);
  auto pts = testing::random_points(200, rng, false);
  for (auto& p : pts) p[8] = 4.0;
  standardize_in_place(pts);
  for (std::size_t d = 0; d < kGroupingDims; ++d) {
    double m = 0, v = 0;
    for (const auto& p : pts) m += p[d];
    m /= 200;
    for (const auto& p : pts) v += (p[d] - m) * (p[d] - m);
    CHECK(m == doctest::Approx(0).scale(1));
    CHECK(v / 200 == doctest::Approx(d == 8 ? 0.0 : 1.0));
  }
}

TEST_CASE("farthest point sampling") {
  const auto pts = line({0, 1, 10});
  CHECK(fps_from(pts, 2, 0).centers == std::vector<std::size_t>{0, 2});
  Rng rng(7);
  const auto many = testing::random_points(40, rng, false);
  auto all = fps(many, 40, 3);
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> iota(40);
  std::iota(iota.begin(), iota.end(), 0);
  CHECK(all == iota);
  const auto detailed = fps_detailed(many, 10, 3);
  for (std::size_t i = 2; i < detailed.selection_distances.size(); ++i) {
    CHECK(detailed.selection_distances[i] <= detailed.selection_distances[i - 1]);
  }
  CHECK_THROWS_AS(fps(many, 0, 1), Error);
  CHECK_THROWS_AS(fps(many, 41, 1), Error);
}

TEST_CASE("FPS and kNN match brute force") {
  Rng rng(21);
  for (int t = 0; t < 60; ++t) {
    const auto count = 1 + static_cast<std::size_t>(rng.below(64));
    const auto pts = testing::random_points(count, rng, t % 2 == 0);
    const auto n = 1 + static_cast<std::size_t>(rng.below(count));
    const auto k = 1 + static_cast<std::size_t>(rng.below(count));
    const auto start = static_cast<std::size_t>(rng.below(count));
    const auto centers = fps_from(pts, n, start).centers;
    CHECK(centers == testing::fps_oracle(pts, n, start));
    CHECK(knn_regions(pts, centers, k) == testing::knn_oracle(pts, centers, k));
  }
}

TEST_CASE("kNN rows") {
  const auto pts = line({0, 1, 2, 10});
  CHECK(knn_regions(pts, {1}, 3) == std::vector<std::uint32_t>{1, 0, 2});
  CHECK(knn_regions(pts, {0, 3}, 1) == std::vector<std::uint32_t>{0, 3});
  CHECK_THROWS_AS(knn_regions(pts, {0}, 0), Error);
  CHECK_THROWS_AS(knn_regions(pts, {0}, 5), Error);
}

TEST_CASE("embedding gather") {
  Rng rng(8);
  const auto cloud = testing::random_cloud(5, rng);
  const auto one = assemble_embeddings(cloud, {3});
  const auto a3 = cloud.splats[3].attributes();
  CHECK(std::vector<float>(a3.begin(), a3.end()) == one);
  const auto dup = assemble_embeddings(cloud, {2, 4, 2, 1});
  CHECK(std::equal(dup.begin(), dup.begin() + 59, dup.begin() + 2 * 59));
  CHECK_THROWS_AS(assemble_embeddings(cloud, {5}), Error);
}

TEST_CASE("region batches are deterministic and round-trip") {
  TempDir dir;
  Rng rng(9);
  const auto cloud = testing::random_cloud(3000, rng);
  RegionParams p;
  p.p_pre = 1024;
  p.n = 16;
  p.k = 8;
  p.seed = 4;
  const auto a = build_regions(cloud, p);
  const auto b = build_regions(cloud, p);
  CHECK(a == b);
  CHECK(a.regions() == 16);
  CHECK(a.embeddings.size() == 16 * 8 * 59);
  for (std::size_t r = 0; r < a.regions(); ++r) CHECK(a.neighbor(r, 0) == a.center_indices[r]);
  write_regions(a, dir / "a.gsrb");
  write_regions(b, dir / "b.gsrb");
  CHECK(testing::slurp(dir / "a.gsrb") == testing::slurp(dir / "b.gsrb"));
  CHECK(read_regions(dir / "a.gsrb") == a);
  p.standardize = true;
  CHECK_FALSE(build_regions(cloud, p) == a);
  testing::spit(dir / "junk.gsrb", "nope");
  CHECK_THROWS_AS(read_regions(dir / "junk.gsrb"), Error);
}
