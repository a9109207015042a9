#include <unistd.h>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "gsqa/gsqa.h"

namespace {

struct Text {
  char* p = nullptr;
  ~Text() { gsqa_string_free(p); }
  std::string str() const { return p != nullptr ? p : ""; }
};

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gsqa_capi_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(gsqa_status_name(GSQA_OK)) == "ok");
  CHECK(std::string(gsqa_status_name(GSQA_ERR_NOT_FOUND)) == "not_found");
  CHECK(std::string(gsqa_version()).size() > 0);
  CHECK(std::string(gsqa_build_info()).find("mt19937_64") != std::string::npos);
}

TEST_CASE("clouds, distortions and regions through handles") {
  gsqa_cloud* cloud = nullptr;
  REQUIRE(gsqa_cloud_synthetic("torus", 2000, 3, &cloud) == GSQA_OK);
  CHECK(gsqa_cloud_size(cloud) == 2000);
  double v = 0;
  CHECK(gsqa_cloud_bounding_volume(cloud, &v) == GSQA_OK);
  CHECK(v > 0);
  float attrs[59];
  CHECK(gsqa_cloud_attributes(cloud, 0, attrs) == GSQA_OK);
  CHECK(gsqa_cloud_attributes(cloud, 2000, attrs) == GSQA_ERR_DOMAIN);

  gsqa_cloud* down = nullptr;
  CHECK(gsqa_cloud_distort(cloud, "downsample", 0.5, 1, &down) == GSQA_OK);
  CHECK(gsqa_cloud_size(down) == 1000);
  gsqa_cloud* none = nullptr;
  CHECK(gsqa_cloud_distort(cloud, "limited_training", 7000, 1, &none) == GSQA_ERR_DOMAIN);
  CHECK(none == nullptr);
  CHECK(std::string(gsqa_last_error()).find("limited_training") != std::string::npos);
  CHECK(gsqa_cloud_distort(cloud, "blur", 1, 1, &none) == GSQA_ERR_DOMAIN);

  const auto path = scratch("c.ply");
  CHECK(gsqa_cloud_write(down, path.c_str(), 0) == GSQA_OK);
  gsqa_cloud* back = nullptr;
  CHECK(gsqa_cloud_read(path.c_str(), &back) == GSQA_OK);
  CHECK(gsqa_cloud_size(back) == 1000);
  CHECK(gsqa_cloud_read(scratch("missing.ply").c_str(), &none) == GSQA_ERR_IO);

  gsqa_region_params p = gsqa_region_params_default();
  CHECK(p.p_pre == 8192);
  CHECK(p.n == 64);
  CHECK(p.k == 32);
  p.n = 16;
  p.k = 8;
  gsqa_regions* regions = nullptr;
  REQUIRE(gsqa_regions_build(back, &p, &regions) == GSQA_OK);
  CHECK(gsqa_regions_count(regions) == 16);
  CHECK(gsqa_regions_members(regions) == 8);
  const auto rpath = scratch("r.gsrb");
  CHECK(gsqa_regions_write(regions, rpath.c_str()) == GSQA_OK);
  gsqa_regions* rback = nullptr;
  CHECK(gsqa_regions_read(rpath.c_str(), &rback) == GSQA_OK);
  CHECK(gsqa_regions_count(rback) == 16);

  CHECK(gsqa_cloud_size(nullptr) == 0);
  CHECK(gsqa_regions_build(nullptr, &p, &regions) == GSQA_ERR_INVALID_ARGUMENT);

  gsqa_regions_free(rback);
  gsqa_regions_free(regions);
  gsqa_cloud_free(back);
  gsqa_cloud_free(down);
  gsqa_cloud_free(cloud);
  gsqa_cloud_free(nullptr);
}

TEST_CASE("metrics") {
  const double p[] = {1, 2, 3, 4};
  const double t[] = {1, 3, 2, 4};
  Text j;
  REQUIRE(gsqa_metrics(p, t, 4, 0, &j.p) == GSQA_OK);
  CHECK(j.str().find("\"plcc\":0.8") != std::string::npos);
  const double flat[] = {1, 1, 1, 1};
  Text k;
  CHECK(gsqa_metrics(flat, t, 4, 0, &k.p) == GSQA_ERR_UNDEFINED_METRIC);
}

TEST_CASE("dataset, training, prediction and evaluation") {
  const auto root = scratch("train");
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root / "bases");
  for (const char* shape : {"sphere", "box"}) {
    gsqa_cloud* c = nullptr;
    REQUIRE(gsqa_cloud_synthetic(shape, 500, 1, &c) == GSQA_OK);
    CHECK(gsqa_cloud_write(c, (root / "bases" / (std::string(shape) + ".ply")).c_str(), 0) == GSQA_OK);
    gsqa_cloud_free(c);
  }
  Text manifest;
  REQUIRE(gsqa_dataset_build((root / "bases").c_str(), (root / "ds").c_str(), 7, 2, &manifest.p) == GSQA_OK);
  CHECK(manifest.str().find("box/color_noise_0.1") != std::string::npos);

  // MOS for every executable entry via a ratings file.
  std::ofstream ratings(root / "ratings.csv");
  ratings << "participant_id,stimulus_id,score,timestamp_iso8601,is_training\n";
  const char* kinds[] = {"downsample_0.25", "downsample_0.5",  "downsample_0.75", "spatial_noise_0.001",
                         "spatial_noise_0.005", "spatial_noise_0.01", "color_noise_0.01", "color_noise_0.05",
                         "color_noise_0.1"};
  for (int p = 0; p < 3; ++p) {
    for (const char* base : {"sphere", "box"}) {
      for (int i = 0; i < 9; ++i) {
        ratings << "p" << p << "," << base << "/" << kinds[i] << "," << 1 + (i + p) % 5 << ",t,0\n";
      }
    }
  }
  ratings.close();
  Text summary;
  REQUIRE(gsqa_mos((root / "ratings.csv").c_str(), (root / "mos.csv").c_str(), R"({"min_variance": 0})",
                   &summary.p) == GSQA_OK);
  Text attach;
  REQUIRE(gsqa_manifest_attach_mos((root / "ds" / "manifest.json").c_str(), (root / "mos.csv").c_str(),
                                   (root / "ds" / "manifest.json").c_str(), &attach.p) == GSQA_OK);
  CHECK(attach.str().find("\"attached\":18") != std::string::npos);

  const std::string opts =
      R"({"epochs": 2, "batch_size": 4, "d": 8, "heads": 2, "blocks": 1, "k_g": 3, "p_pre": 128, "n": 8, "k": 4, "folds": 2})";
  const auto ckpt = root / "full.ckpt";
  Text train_summary;
  REQUIRE(gsqa_train((root / "ds" / "manifest.json").c_str(), -2, opts.c_str(), ckpt.c_str(), &train_summary.p) ==
          GSQA_OK);
  gsqa_model* model = nullptr;
  REQUIRE(gsqa_model_load(ckpt.c_str(), &model) == GSQA_OK);
  gsqa_cloud* c = nullptr;
  REQUIRE(gsqa_cloud_read((root / "ds" / "box" / "color_noise_0.1.ply").c_str(), &c) == GSQA_OK);
  double a = 0, b = 0;
  CHECK(gsqa_model_predict_cloud(model, c, &a) == GSQA_OK);
  CHECK(gsqa_model_predict_cloud(model, c, &b) == GSQA_OK);
  CHECK(std::isfinite(a));
  CHECK(a == b);
  Text desc;
  CHECK(gsqa_model_describe(model, &desc.p) == GSQA_OK);
  CHECK(desc.str().find("regions") != std::string::npos);

  Text folds;
  REQUIRE(gsqa_train((root / "ds" / "manifest.json").c_str(), -1, opts.c_str(), (root / "folds").c_str(),
                     &folds.p) == GSQA_OK);
  Text report, table;
  REQUIRE(gsqa_evaluate((root / "ds" / "manifest.json").c_str(), (root / "folds").c_str(), opts.c_str(), &report.p,
                        &table.p) == GSQA_OK);
  CHECK(report.str().find("\"count\": 18") != std::string::npos);
  Text bad;
  CHECK(gsqa_train((root / "ds" / "manifest.json").c_str(), 0, "{\"epochs\": \"x\"}", ckpt.c_str(), &bad.p) ==
        GSQA_ERR_CONFIG);
  CHECK(gsqa_train((root / "ds" / "manifest.json").c_str(), 0, "{nope", ckpt.c_str(), &bad.p) == GSQA_ERR_CONFIG);
  gsqa_cloud_free(c);
  gsqa_model_free(model);
  std::filesystem::remove_all(root);
}
