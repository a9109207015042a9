// Prints one PASS/FAIL line per acceptance criterion. Usage:
//   gsqa_acceptance [criterion numbers...]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gsqa/distortion.hpp"
#include "gsqa/error.hpp"
#include "gsqa/quality_metrics.hpp"
#include "gsqa/regioning.hpp"
#include "gsqa/subjective.hpp"
#include "gsqa/synthetic.hpp"
#include "gsqa/training.hpp"
#include "support.hpp"

using namespace gsqa;
namespace t = gsqa::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Detail {
 public:
  template <typename T>
  Detail& operator<<(const T& v) {
    out_ << v;
    return *this;
  }
  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---------------------------------------------------------------------------

Outcome metric_oracles() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  std::size_t checked = 0, undefined_agree = 0, mismatched = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = 2 + static_cast<std::size_t>(rng.below(49));
    const bool ties = trial % 2 == 0;
    std::vector<double> x(m), y(m);
    for (std::size_t i = 0; i < m; ++i) {
      x[i] = ties ? static_cast<double>(rng.below(6)) : rng.normal();
      y[i] = ties ? static_cast<double>(rng.below(6)) : rng.normal();
    }
    const double ps = t::pearson_direct(x, y);
    const double ss = t::spearman_oracle(x, y);
    const double ks = t::kendall_oracle(x, y);
    auto compare = [&](const std::function<double()>& f, double oracle) {
      try {
        const double v = f();
        if (!std::isfinite(oracle)) {
          ++mismatched;
          return;
        }
        worst = std::max(worst, std::abs(v - oracle));
        ++checked;
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kUndefinedMetric && !std::isfinite(oracle)) {
          ++undefined_agree;
        } else {
          ++mismatched;
        }
      }
    };
    compare([&] { return metrics::plcc(x, y); }, ps);
    compare([&] { return metrics::srcc(x, y); }, ss);
    compare([&] { return metrics::krcc(x, y); }, ks);
  }
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = worst <= 1e-12 && mismatched == 0 && secs < 10.0;
  o.detail = (Detail() << "max |diff| " << worst << " over " << checked << " values, " << undefined_agree
                       << " agreed-undefined, " << mismatched << " mismatches, " << secs << " s")
                 .str();
  return o;
}

Outcome gradient_check() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(202);
  std::size_t coords = 0, failures = 0, skips = 0, truncation = 0;
  double worst = 0.0;
  std::string worst_where;
  for (int c = 0; c < 20; ++c) {
    net::NetConfig cfg;
    const std::size_t heads_choice[] = {1, 2, 4};
    cfg.heads = heads_choice[rng.below(3)];
    // Widths below 8 make the per-token layer norm nearly a step function.
    const std::size_t lo = (8 + cfg.heads - 1) / cfg.heads;
    cfg.d = cfg.heads * (lo + rng.below(16 / cfg.heads - lo + 1));
    cfg.ffn_mult = 1 + rng.below(3);
    cfg.blocks = 1 + rng.below(3);
    cfg.relative_centroids = rng.below(2) == 1;
    const std::size_t n = 2 + rng.below(7);
    const std::size_t k = 1 + rng.below(4);
    cfg.k_g = 1 + rng.below(n);
    net::InitOptions init;
    init.random_pool_query = true;
    auto params = net::ModelParams::create(cfg, 300 + c, init);
    std::vector<RegionBatch> batches;
    std::vector<double> targets;
    const std::size_t b = 3 + rng.below(3);
    for (std::size_t i = 0; i < b; ++i) {
      batches.push_back(t::random_batch(n, k, rng));
      targets.push_back(1.0 + 4.0 * rng.uniform());
    }
    std::vector<const RegionBatch*> ptrs;
    for (const auto& x : batches) ptrs.push_back(&x);
    net::fit_input_normalization(params, ptrs);
    const auto r = t::check_gradients(params, batches, targets, 50, rng);
    coords += r.coordinates;
    failures += r.failures;
    skips += r.kink_skips;
    truncation += r.truncation_limited;
    if (r.worst > worst) {
      worst = r.worst;
      worst_where = (Detail() << r.worst_tensor << " (config " << c << ")").str();
    }
  }
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = failures == 0 && secs < 120.0;
  o.detail = (Detail() << coords << " coordinates, " << failures << " over 1e-4 (" << truncation
                       << " of them within 1e-4 at h/10, i.e. truncation-limited), worst rel err " << worst << " at "
                       << worst_where << ", " << skips << " kink-straddling draws replaced, " << secs << " s")
                 .str();
  return o;
}

Outcome loss_identities() {
  Rng rng(303);
  double worst_affine = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t m = 2 + rng.below(30);
    std::vector<double> p(m), y(m), q(m);
    for (std::size_t j = 0; j < m; ++j) {
      p[j] = rng.normal();
      y[j] = 1 + 4 * rng.uniform();
    }
    const double a = std::exp(2.0 * rng.normal());
    const double b = 5.0 * rng.normal();
    for (std::size_t j = 0; j < m; ++j) q[j] = a * p[j] + b;
    worst_affine = std::max(worst_affine, std::abs(train::loss_lin(q, y).value - train::loss_lin(p, y).value));
  }
  const double mon = train::loss_mon(std::vector<double>{1.5, 1.2}, std::vector<double>{2, 1}).value;
  std::vector<double> y = {1, 2.5, 3, 4.75, 5}, perfect;
  for (const double v : y) perfect.push_back(0.3 * v - 2.0);
  const double affine_zero = train::loss_lin(perfect, y).value;
  Outcome o;
  o.pass = worst_affine <= 1e-12 && mon == 0.175 && std::abs(affine_zero) <= 1e-12;
  o.detail = (Detail() << "affine invariance max diff " << worst_affine << ", hand case " << mon
                       << ", perfect-affine loss " << affine_zero)
                 .str();
  return o;
}

Outcome distortion_statistics() {
  Rng rng(404);
  bool ok = true;
  Detail d;
  const auto cloud = t::random_cloud(100000, rng);
  const auto moved = perturb_positions(cloud, 0.01, 17);
  for (int axis = 0; axis < 3; ++axis) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const double off = double(moved.splats[i].centroid[axis]) - cloud.splats[i].centroid[axis];
      sum += off;
      sq += off * off;
    }
    const double n = static_cast<double>(cloud.size());
    const double sd = std::sqrt((sq - sum * sum / n) / (n - 1));
    ok &= sd >= 0.0098 && sd <= 0.0102;
    d << "sd[" << axis << "] " << sd << ", ";
  }
  const auto small = t::random_cloud(21000, rng);
  const auto colored = perturb_sh(small, 0.1, 18);
  double sum = 0, sq = 0, count = 0;
  for (std::size_t i = 0; i < small.size(); ++i) {
    for (std::size_t c = 0; c < kShCoeffs; ++c) {
      const double off = double(colored.splats[i].sh[c]) - small.splats[i].sh[c];
      sum += off;
      sq += off * off;
      count += 1;
    }
  }
  const double mean = sum / count;
  const double var = sq / count - mean * mean;
  const double expected = 0.1 * 0.1 / 3.0;
  ok &= count >= 1e6 && std::abs(mean) <= 0.001 && std::abs(var - expected) <= 0.05 * expected;
  d << "SH offsets " << count << " mean " << mean << " var/expected " << var / expected << ", ";

  auto bits_equal = [](const GaussianCloud& a, const GaussianCloud& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto x = a.splats[i].attributes();
      const auto y = b.splats[i].attributes();
      if (std::memcmp(x.data(), y.data(), sizeof(x)) != 0) return false;
    }
    return true;
  };
  const bool zero_ok = bits_equal(perturb_positions(small, 0.0, 1), small) && bits_equal(perturb_sh(small, 0.0, 1), small);
  bool untouched = true;
  for (std::size_t i = 0; i < small.size(); ++i) {
    const auto& a = small.splats[i];
    const auto& p = perturb_positions(small, 0.01, 19).splats[i];
    const auto& s = colored.splats[i];
    untouched &= a.opacity_raw == p.opacity_raw && a.scale_raw == p.scale_raw && a.rotation_raw == p.rotation_raw &&
                 a.sh == p.sh;
    untouched &= a.opacity_raw == s.opacity_raw && a.scale_raw == s.scale_raw && a.rotation_raw == s.rotation_raw &&
                 a.centroid == s.centroid;
    if (i == 200) break;
  }
  ok &= zero_ok && untouched;
  d << "zero-level identity " << (zero_ok ? "yes" : "no") << ", untouched fields equal " << (untouched ? "yes" : "no");
  return {ok, d.str()};
}

Outcome downsampling_contract() {
  Rng rng(505);
  std::size_t count_ok = 0, spacing_violations = 0;
  for (int c = 0; c < 200; ++c) {
    const auto n = 10 + static_cast<std::size_t>(rng.below(1500));
    const auto cloud = t::random_cloud(n, rng, 0.2 + 2.0 * rng.uniform());
    const double p = 0.01 + 0.99 * rng.uniform();
    const auto r = downsample_poisson_detailed(cloud, p, rng.next_u64());
    if (r.cloud.size() == downsample_target(n, p) &&
        r.cloud.size() == static_cast<std::size_t>(std::nearbyint(p * static_cast<double>(n)))) {
      ++count_ok;
    }
    for (std::size_t a = 0; a < r.dart_accepted.size(); ++a) {
      for (std::size_t b = a + 1; b < r.dart_accepted.size(); ++b) {
        const auto& u = cloud.splats[r.dart_accepted[a]].centroid;
        const auto& v = cloud.splats[r.dart_accepted[b]].centroid;
        double d2 = 0;
        for (int i = 0; i < 3; ++i) d2 += (double(u[i]) - v[i]) * (double(u[i]) - v[i]);
        if (std::sqrt(d2) < r.r_min) ++spacing_violations;
      }
    }
  }
  const double r = poisson_min_distance(1.0, 1000, 0.5);
  const double rel = std::abs(r - std::cbrt(1.0 / 500.0)) / std::cbrt(1.0 / 500.0);
  Outcome o;
  o.pass = count_ok == 200 && spacing_violations == 0 && rel < 1e-12 && std::abs(r - 0.12599) < 5e-6;
  o.detail = (Detail() << count_ok << "/200 counts exact, " << spacing_violations << " spacing violations, r_min "
                       << r << " (rel err " << rel << ")")
                 .str();
  return o;
}

Outcome fps_knn_oracles() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(606);
  std::size_t fps_ok = 0, knn_ok = 0;
  for (int c = 0; c < 500; ++c) {
    const auto count = 1 + static_cast<std::size_t>(rng.below(128));
    const auto pts = t::random_points(count, rng, c % 3 == 0);
    const auto n = 1 + static_cast<std::size_t>(rng.below(count));
    const auto k = 1 + static_cast<std::size_t>(rng.below(count));
    const auto got = fps_detailed(pts, n, rng.next_u64()).centers;
    if (got == t::fps_oracle(pts, n, got.front())) ++fps_ok;
    if (knn_regions(pts, got, k) == t::knn_oracle(pts, got, k)) ++knn_ok;
  }
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = fps_ok == 500 && knn_ok == 500 && secs < 30.0;
  o.detail = (Detail() << "FPS " << fps_ok << "/500, kNN " << knn_ok << "/500, " << secs << " s").str();
  return o;
}

Outcome overfit_sanity() {
  const auto start = std::chrono::steady_clock::now();
  const double sigma_max = 0.05;
  const SyntheticShape shapes[] = {SyntheticShape::kSphere, SyntheticShape::kTorus, SyntheticShape::kWave};
  std::vector<RegionBatch> batches;
  std::vector<double> mos;
  RegionParams rp;  // p_pre 8192, n 64, k 32
  for (std::size_t b = 0; b < 3; ++b) {
    const auto base = synthetic_cloud(shapes[b], 20000, 700 + b);
    for (int j = 0; j < 10; ++j) {
      const double sigma = sigma_max * j / 9.0;
      const auto cloud = perturb_positions(base, sigma, 800 + 10 * b + j);
      rp.seed = 900 + 10 * b + j;
      batches.push_back(build_regions(cloud, rp));
      mos.push_back(5.0 - 4.0 * sigma / sigma_max);
    }
  }
  std::vector<train::Sample> samples;
  for (std::size_t i = 0; i < batches.size(); ++i) samples.push_back({&batches[i], mos[i]});
  train::TrainConfig cfg;  // d 128, peak 1e-4
  cfg.batch_size = 8;
  cfg.epochs = 100;
  cfg.seed = 7;
  const auto result = train::train_fold(samples, cfg);
  std::vector<double> pred;
  for (const auto& b : batches) pred.push_back(net::forward(result.params, b));
  const double srcc = metrics::srcc(pred, mos);
  const double plcc = metrics::plcc(pred, mos);
  const double secs = seconds_since(start);
  Outcome o;
  o.pass = srcc >= 0.95 && plcc >= 0.9 && secs < 600.0;
  o.detail = (Detail() << "training SRCC " << srcc << ", PLCC " << plcc << ", " << result.log.size() << " epochs, "
                       << secs << " s")
                 .str();
  return o;
}

double severity(const DistortionSpec& s) {
  switch (s.kind) {
    case DistortionKind::kDownsample: return (1.0 - s.level) / 0.75;
    case DistortionKind::kSpatialNoise: return s.level / 0.01;
    case DistortionKind::kColorNoise: return s.level / 0.1;
    default: return 0.0;
  }
}

Outcome generalization_smoke() {
  const auto start = std::chrono::steady_clock::now();
  t::TempDir dir("gsqa_accept8");
  std::vector<GaussianCloud> clouds;
  std::vector<NamedCloud> bases;
  const auto shapes = all_synthetic_shapes();
  clouds.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto c = synthetic_cloud(shapes[i], 20000, 40 + i);
    // Uniform splat scale, so standardized grouping stays spatial.
    const float uniform_scale = static_cast<float>(std::log(2.0 / std::sqrt(static_cast<double>(c.size()))));
    for (auto& s : c.splats) s.scale_raw.fill(uniform_scale);
    clouds.push_back(std::move(c));
    bases.push_back({to_string(shapes[i]), "", &clouds.back()});
  }
  BuildOptions opt;
  opt.out_dir = dir.path();
  opt.seed = 8;
  for (const auto& g : default_distortion_grid()) {
    if (is_executable(g.kind)) opt.grid.push_back(g);
  }
  auto manifest = build_manifest(bases, opt);
  for (auto& e : manifest.entries) e.mos = 5.0 - 4.0 * severity(e.spec);

  train::BenchmarkConfig cfg;
  cfg.manifest_dir = dir.path();
  cfg.regions.p_pre = 20000;
  cfg.regions.n = 32;
  cfg.regions.k = 16;
  cfg.regions.standardize = true;
  cfg.resample_per_epoch = true;
  cfg.train.net.d = 64;
  cfg.train.batch_size = 8;
  cfg.train.epochs = 150;
  cfg.train.peak_lr = 1e-3;
  cfg.train.seed = 3;
  cfg.folds = 5;
  cfg.fold_seed = 5;
  cfg.threads = 5;
  const auto report = train::run_benchmark(manifest, cfg);
  const double secs = seconds_since(start);
  const double srcc = report.overall.srcc.value_or(std::numeric_limits<double>::quiet_NaN());
  Outcome o;
  o.pass = report.overall.count == 45 && srcc >= 0.6;
  Detail d;
  d << "held-out pooled SRCC " << srcc << " over " << report.overall.count << " stimuli (";
  for (const auto& g : {"downsampling", "gaussian_noise", "color_noise"}) {
    const auto& b = report.per_group.at(g);
    d << g << " " << (b.srcc ? std::to_string(*b.srcc) : "n/a") << " ";
  }
  d << "), " << secs << " s";
  o.detail = d.str();
  return o;
}

Outcome determinism() {
  t::TempDir a("gsqa_accept9a"), b("gsqa_accept9b");
  auto run_once = [](const t::TempDir& dir) {
    const auto base = synthetic_cloud(SyntheticShape::kBox, 5000, 9);
    write_ply(downsample_poisson(base, 0.5, 1), dir / "down.ply");
    write_ply(perturb_positions(base, 0.01, 2), dir / "pos.ply");
    write_ply(perturb_sh(base, 0.1, 3), dir / "sh.ply");
    RegionParams rp;
    rp.p_pre = 2048;
    rp.n = 16;
    rp.k = 8;
    rp.seed = 4;
    std::vector<RegionBatch> batches;
    std::vector<train::Sample> samples;
    for (const char* name : {"down.ply", "pos.ply", "sh.ply"}) batches.push_back(build_regions(read_ply(dir / name), rp));
    batches.push_back(build_regions(base, rp));
    write_regions(batches[0], dir / "r.gsrb");
    for (std::size_t i = 0; i < batches.size(); ++i) samples.push_back({&batches[i], 1.0 + static_cast<double>(i)});
    train::TrainConfig cfg;
    cfg.net.d = 16;
    cfg.batch_size = 2;
    cfg.epochs = 3;
    cfg.seed = 5;
    net::save_checkpoint(train::train_fold(samples, cfg).params, dir / "m.ckpt", "{}");
  };
  run_once(a);
  run_once(b);
  bool ok = true;
  Detail d;
  for (const char* name : {"down.ply", "pos.ply", "sh.ply", "r.gsrb", "m.ckpt", "m.ckpt.json"}) {
    const bool same = t::slurp(a / name) == t::slurp(b / name) && !t::slurp(a / name).empty();
    ok &= same;
    d << name << (same ? " identical" : " DIFFERS") << "; ";
  }
  return {ok, d.str()};
}

Outcome subjective_pipeline() {
  const auto screened = subjective::screen_participants(subjective::make_table(t::crafted_ratings()));
  const auto mos = subjective::compute_mos(screened);
  std::size_t flagged = 0;
  for (const bool f : screened.flagged) flagged += f ? 1 : 0;
  bool ok = flagged == 1 && screened.excluded.at("P4") && screened.excluded.at("P5") &&
            screened.exclusion_reason.at("P4") == "outlier_fraction" &&
            screened.exclusion_reason.at("P5") == "uniform_ratings" && !screened.excluded.at("P1") &&
            !screened.excluded.at("P2") && !screened.excluded.at("P3") && !screened.excluded.at("P6");
  const double expected[] = {4.25, 2.25, 13.0 / 3.0, 3.5};
  const std::size_t raters[] = {4, 4, 3, 4};
  ok &= mos.size() == 4;
  for (std::size_t i = 0; ok && i < 4; ++i) ok &= std::abs(mos[i].mos - expected[i]) <= 1e-12 && mos[i].raters == raters[i];
  ok &= std::abs(mos[2].mos - 4.3333) <= 1e-4 + 1e-9 && std::abs(mos[2].mos - 13.0 / 3.0) <= 1e-9;
  return {ok, (Detail() << flagged << " flagged rating, excluded P4 (outlier) and P5 (uniform), MOS "
                        << mos[0].mos << " " << mos[1].mos << " " << mos[2].mos << " " << mos[3].mos)
                  .str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, Outcome (*)()>> criteria = {
      {"metric oracle equivalence", metric_oracles},
      {"gradient correctness", gradient_check},
      {"loss identities", loss_identities},
      {"distortion statistics", distortion_statistics},
      {"downsampling contract", downsampling_contract},
      {"FPS/kNN oracle equivalence", fps_knn_oracles},
      {"overfit sanity", overfit_sanity},
      {"generalization smoke", generalization_smoke},
      {"determinism", determinism},
      {"subjective pipeline", subjective_pipeline},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(number)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << number << " (" << criteria[i].first
              << "): " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
