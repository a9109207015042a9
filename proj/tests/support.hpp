#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <unistd.h>
#include <limits>
#include <string>
#include <vector>

#include "gsqa/net.hpp"
#include "gsqa/regioning.hpp"
#include "gsqa/rng.hpp"
#include "gsqa/splat.hpp"
#include "gsqa/subjective.hpp"
#include "gsqa/training.hpp"

namespace gsqa::testing {

// Fresh scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "gsqa") {
    static std::atomic<unsigned> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

// Cloud with every attribute drawn at random; centroids in [0, extent)^3.
inline GaussianCloud random_cloud(std::size_t n, Rng& rng, double extent = 1.0) {
  GaussianCloud c;
  c.splats.resize(n);
  for (auto& s : c.splats) {
    for (auto& v : s.centroid) v = static_cast<float>(extent * rng.uniform());
    s.opacity_raw = static_cast<float>(rng.normal());
    for (auto& v : s.scale_raw) v = static_cast<float>(rng.normal() - 4.0);
    for (auto& v : s.rotation_raw) v = static_cast<float>(rng.normal());
    for (auto& v : s.sh) v = static_cast<float>(0.5 * rng.normal());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Brute-force oracles

inline long double mean_of(const std::vector<long double>& v) {
  long double s = 0;
  for (const auto x : v) s += x;
  return s / static_cast<long double>(v.size());
}

inline double pearson_direct(const std::vector<double>& x, const std::vector<double>& y) {
  const std::vector<long double> a(x.begin(), x.end()), b(y.begin(), y.end());
  const long double ma = mean_of(a), mb = mean_of(b);
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

// Rank = 1 + (#smaller) + (#equal others) / 2, by direct counting.
inline std::vector<double> ranks_by_counting(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) less += 1;
      if (j != i && v[j] == v[i]) equal += 1;
    }
    r[i] = 1.0 + less + equal / 2.0;
  }
  return r;
}

inline double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson_direct(ranks_by_counting(x), ranks_by_counting(y));
}

// Kendall tau-b from all pairs.
inline double kendall_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long long concordant = 0, discordant = 0, tie_x = 0, tie_y = 0, pairs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      ++pairs;
      const bool tx = x[i] == x[j];
      const bool ty = y[i] == y[j];
      if (tx) ++tie_x;
      if (ty) ++tie_y;
      if (tx || ty) continue;
      if ((x[i] < x[j]) == (y[i] < y[j])) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const long double denom = std::sqrt(static_cast<long double>(pairs - tie_x) * (pairs - tie_y));
  return static_cast<double>((concordant - discordant) / denom);
}

inline double sq_dist(const GroupingPoint& a, const GroupingPoint& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Greedy farthest-point selection recomputing every min distance from
// scratch; ties go to the lowest index.
inline std::vector<std::size_t> fps_oracle(const std::vector<GroupingPoint>& pts, std::size_t n,
                                           std::size_t start) {
  std::vector<std::size_t> centers{start};
  while (centers.size() < n) {
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(centers.begin(), centers.end(), i) != centers.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (const auto c : centers) d = std::min(d, sq_dist(pts[i], pts[c]));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    centers.push_back(best);
  }
  return centers;
}

// Center first, then the others by (distance, index) via a full sort.
inline std::vector<std::uint32_t> knn_oracle(const std::vector<GroupingPoint>& pts,
                                             const std::vector<std::size_t>& centers, std::size_t k) {
  std::vector<std::uint32_t> out;
  for (const auto c : centers) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j != c) others.push_back(j);
    }
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
      return sq_dist(pts[c], pts[a]) < sq_dist(pts[c], pts[b]);
    });
    out.push_back(static_cast<std::uint32_t>(c));
    for (std::size_t j = 0; j + 1 < k; ++j) out.push_back(static_cast<std::uint32_t>(others[j]));
  }
  return out;
}

inline std::vector<GroupingPoint> random_points(std::size_t count, Rng& rng, bool coarse) {
  std::vector<GroupingPoint> pts(count);
  for (auto& p : pts) {
    for (auto& v : p) v = coarse ? static_cast<double>(rng.below(4)) : rng.normal();
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Network helpers

// Region batch with random embeddings (no cloud behind it).
inline RegionBatch random_batch(std::size_t n, std::size_t k, Rng& rng) {
  RegionBatch b;
  b.params.n = n;
  b.params.k = k;
  b.params.p_pre = n * k;
  for (std::size_t i = 0; i < n; ++i) {
    b.center_indices.push_back(static_cast<std::uint32_t>(i * k));
    for (std::size_t j = 0; j < k; ++j) b.neighbors.push_back(static_cast<std::uint32_t>(i * k + j));
  }
  b.embeddings.resize(n * k * kSplatAttributes);
  for (auto& v : b.embeddings) v = static_cast<float>(rng.normal());
  return b;
}

struct GradCheck {
  std::size_t coordinates = 0;
  std::size_t failures = 0;
  std::size_t kink_skips = 0;  // coordinates redrawn because +h and -h straddle a kink
  // Failures whose estimate at h/10 is within tolerance, i.e. limited by the
  // O(h^2) truncation error of the difference quotient.
  std::size_t truncation_limited = 0;
  double worst = 0.0;
  std::string worst_tensor;
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

// The floor keeps exactly-zero gradients (e.g. the head bias under the
// shift-invariant losses) from dividing finite-difference round-off by zero.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
}

// Loss plus the discrete state of every non-smooth op: encoder max-pool
// winners, attention pre-activation signs, and active ranking-hinge pairs.
struct KinkedLoss {
  double value = 0.0;
  std::vector<std::uint32_t> pattern;
};

inline KinkedLoss loss_with_pattern(const net::ModelParams& params, const std::vector<RegionBatch>& batches,
                                    const std::vector<double>& targets) {
  KinkedLoss out;
  std::vector<double> pred;
  for (const auto& b : batches) {
    net::ForwardCache cache;
    pred.push_back(net::forward(params, b, &cache));
    out.pattern.insert(out.pattern.end(), cache.encoder.argmax.begin(), cache.encoder.argmax.end());
    for (const auto& block : cache.blocks) {
      for (const auto& head : block.pre_activation) {
        for (const double u : head) out.pattern.push_back(u > 0.0 ? 1U : 0U);
      }
    }
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t j = 0; j < pred.size(); ++j) {
      if (targets[i] > targets[j]) out.pattern.push_back(1.0 - (pred[i] - pred[j]) > 0.0 ? 1U : 0U);
    }
  }
  out.value = train::loss_total(pred, targets).value;
  return out;
}

// Central differences of loss_total over a batch of forward passes against
// the analytic gradient, at `per_tensor` random coordinates of every
// trainable tensor (all of them when smaller). A coordinate whose +h and -h
// evaluations differ in any kink state is redrawn, since the difference
// quotient there does not estimate a derivative.
inline GradCheck check_gradients(net::ModelParams& params, const std::vector<RegionBatch>& batches,
                                 const std::vector<double>& targets, std::size_t per_tensor, Rng& rng,
                                 double h = 1e-4, double tol = 1e-4) {
  std::vector<net::ForwardCache> caches(batches.size());
  std::vector<double> pred;
  for (std::size_t i = 0; i < batches.size(); ++i) pred.push_back(net::forward(params, batches[i], &caches[i]));
  const auto loss = train::loss_total(pred, targets);
  params.zero_grad();
  for (std::size_t i = 0; i < batches.size(); ++i) net::backward(params, caches[i], loss.grad[i]);

  GradCheck r;
  for (auto& t : params.tensors()) {
    if (!t.trainable) continue;
    const auto size = static_cast<std::size_t>(t.value.size());
    std::vector<std::size_t> coords(size);
    for (std::size_t i = 0; i < size; ++i) coords[i] = i;
    rng.shuffle(coords);
    std::size_t checked = 0;
    for (const auto c : coords) {
      if (checked == per_tensor) break;
      double& v = t.value.data()[c];
      const double saved = v;
      v = saved + h;
      const auto up = loss_with_pattern(params, batches, targets);
      v = saved - h;
      const auto down = loss_with_pattern(params, batches, targets);
      v = saved;
      if (up.pattern != down.pattern) {
        ++r.kink_skips;
        continue;
      }
      ++checked;
      const double numeric = (up.value - down.value) / (2 * h);
      const double err = relative_error(t.grad.data()[c], numeric);
      ++r.coordinates;
      if (err >= tol) ++r.failures;
      if (err > r.worst) {
        r.worst = err;
        r.worst_tensor = t.name;
        r.worst_analytic = t.grad.data()[c];
        r.worst_numeric = numeric;
      }
      if (err >= tol) {
        v = saved + h / 10;
        const auto up_fine = loss_with_pattern(params, batches, targets);
        v = saved - h / 10;
        const auto down_fine = loss_with_pattern(params, batches, targets);
        v = saved;
        const double fine = (up_fine.value - down_fine.value) / (2 * h / 10);
        if (relative_error(t.grad.data()[c], fine) < tol) ++r.truncation_limited;
        if (std::getenv("GSQA_GRADCHECK_VERBOSE")) {
          std::fprintf(stderr, "%s[%zu]: analytic %.12g numeric %.12g, at h/10 %.12g\n", t.name.c_str(), c,
                       t.grad.data()[c], numeric, fine);
        }
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Crafted subjective table: six participants, four stimuli. P4's score of 1
// for A is the only rating outside the 1.5 IQR fences (A: q1 3.25, q3 4); P5
// rates everything 3; P6 skipped C. Valid MOS: A 4.25, B 2.25, C (5,4,4),
// D 3.5.
inline std::vector<subjective::Rating> crafted_ratings() {
  const char* stimuli[] = {"A", "B", "C", "D"};
  const int scores[6][4] = {{4, 2, 5, 3}, {4, 3, 4, 4}, {5, 2, 4, 3}, {1, 2, 5, 3}, {3, 3, 3, 3}, {4, 2, 0, 4}};
  std::vector<subjective::Rating> out;
  for (int p = 0; p < 6; ++p) {
    for (int s = 0; s < 4; ++s) {
      if (scores[p][s] == 0) continue;
      out.push_back({"P" + std::to_string(p + 1), stimuli[s], scores[p][s], "2026-01-01T00:00:00Z", false});
    }
  }
  out.push_back({"P1", "T", 5, "2026-01-01T00:00:00Z", true});
  return out;
}

}  // namespace gsqa::testing
