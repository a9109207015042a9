#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gsqa/distortion.hpp"
#include "gsqa/net.hpp"
#include "gsqa/regioning.hpp"

namespace gsqa::train {

struct LossConfig {
  double lambda_lin = 0.5;
  double lambda_mon = 0.5;
};

struct LossValue {
  double value = 0.0;
  std::vector<double> grad;  // d(value)/d(pred)
};

// 1 - Pearson(pred, target); 1.0 with zero gradient when sd(pred)*sd(target) < 1e-12.
LossValue loss_lin(std::span<const double> pred, std::span<const double> target);
// (1/B^2) sum_ij [t_i > t_j] max(0, 1 - (p_i - p_j)); subgradient 0 at the kink.
LossValue loss_mon(std::span<const double> pred, std::span<const double> target);
LossValue loss_total(std::span<const double> pred, std::span<const double> target,
                     const LossConfig& cfg = {});

// One-cycle step size: cosine rise from peak/initial_div to peak over the
// first warmup fraction of steps, then cosine decay to peak/final_div.
struct OneCycle {
  double peak = 1e-4;
  std::size_t total_steps = 1;
  double warmup = 0.3;
  double initial_div = 25.0;
  double final_div = 25.0;

  double operator()(std::size_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled weight decay: theta *= 1 - lr*wd, then the bias-corrected Adam step.
class AdamW {
 public:
  AdamW(const net::ModelParams& params, const AdamWConfig& cfg);
  void step(net::ModelParams& params, double lr);
  std::size_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<net::Mat> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double peak_lr = 1e-4;
  double weight_decay = 1e-4;
  double warmup = 0.3;
  double initial_div = 25.0;
  double final_div = 25.0;
  std::uint64_t seed = 0;
  net::NetConfig net;
  net::InitOptions init;
  LossConfig loss;
  // Fit the encoder input normalization on the training set before step 0.
  bool fit_normalization = true;
  // When set, samples that carry a cloud get fresh regions every epoch
  // (seed derived from these params' seed and the epoch).
  std::optional<RegionParams> resample_regions;
  // After the last epoch, fold a least-squares affine map from training
  // predictions to MOS into the head, so scores come out on the MOS scale.
  bool calibrate_head = true;
};

// floor(N / B) full batches plus one more when the remainder holds >= 2 samples.
std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

struct Sample {
  const RegionBatch* batch = nullptr;
  double mos = 0.0;
  const GaussianCloud* cloud = nullptr;  // only needed for per-epoch resampling
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;  // step size of the last update
  std::optional<double> plcc, srcc;
};

std::string epoch_log_json(const EpochLog& log);

using EpochCallback = std::function<void(const EpochLog&)>;

struct TrainResult {
  net::ModelParams params;
  std::vector<EpochLog> log;
};

// Least-squares affine map from the model's predictions on `samples` to their MOS,
// folded into head.weight and head.bias.
void calibrate_head(net::ModelParams& params, const std::vector<Sample>& samples);

TrainResult train_fold(const std::vector<Sample>& samples, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

// Seeded partition of base names into `folds` groups of equal size.
struct FoldPlan {
  std::vector<std::vector<std::string>> test_bases;
  std::size_t folds() const { return test_bases.size(); }
};

FoldPlan make_folds(const std::vector<std::string>& base_names, std::uint64_t seed,
                    std::size_t folds = 5);

struct FoldSplit {
  std::vector<std::size_t> train;  // manifest entry indices
  std::vector<std::size_t> test;
};

FoldSplit fold_split(const FoldPlan& plan, const DatasetManifest& manifest, std::size_t fold);

struct Prediction {
  std::string id;
  std::string group;
  std::size_t fold = 0;
  double predicted = 0.0;
  double mos = 0.0;
};

struct MetricBlock {
  std::size_t count = 0;
  std::optional<double> plcc, srcc, krcc, rmse;
  std::string note;  // why a metric is missing
};

inline const std::vector<std::string>& report_groups() {
  static const std::vector<std::string> groups = {"reconstruction", "downsampling",
                                                  "gaussian_noise", "color_noise"};
  return groups;
}

struct EvalReport {
  std::string aggregation = "fold_pooled";  // or "per_fold_average"
  std::string mapping = "none";             // or "logistic4"
  MetricBlock overall;
  std::map<std::string, MetricBlock> per_group;
  std::vector<Prediction> predictions;
  std::vector<std::string> skipped;  // recipe entries without a file
};

EvalReport evaluate_predictions(const std::vector<Prediction>& predictions, bool per_fold_average,
                                bool logistic_map);
std::string report_to_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

struct BenchmarkConfig {
  TrainConfig train;
  RegionParams regions;
  std::size_t folds = 5;
  std::uint64_t fold_seed = 0;
  // Directory manifest-relative paths are resolved against.
  std::filesystem::path manifest_dir;
  // Region batches are cached here when set.
  std::filesystem::path cache_dir;
  // Per-fold checkpoints (fold_<i>.ckpt) are written here when set.
  std::filesystem::path checkpoint_dir;
  unsigned threads = 1;
  bool per_fold_average = false;
  bool logistic_map = false;
  // Redraw pre-downsampling and FPS start every epoch instead of once.
  bool resample_per_epoch = false;
  // Receives (fold, epoch log).
  std::function<void(std::size_t, const EpochLog&)> on_epoch;
};

// Loads or builds the region batch for a manifest entry.
RegionBatch entry_regions(const ManifestEntry& entry, const BenchmarkConfig& cfg);

// Entries usable for training/evaluation: with a file and MOS. Entries with a
// file but no MOS raise kData; recipe entries without a file are returned in
// `skipped`.
std::vector<std::size_t> usable_entries(const DatasetManifest& manifest,
                                        std::vector<std::string>* skipped);

std::vector<std::string> base_names(const DatasetManifest& manifest);

// Sidecar metadata recorded with fold checkpoints.
std::string checkpoint_metadata(const BenchmarkConfig& cfg, const FoldPlan& plan,
                                std::optional<std::size_t> fold);
RegionParams regions_from_metadata(const std::string& metadata_json);

// Trains one fold (or every entry when fold is empty) and returns the model.
TrainResult train_on_manifest(const DatasetManifest& manifest, const BenchmarkConfig& cfg,
                              std::optional<std::size_t> fold);

EvalReport run_benchmark(const DatasetManifest& manifest, const BenchmarkConfig& cfg);

// Scores held-out entries with fold checkpoints (fold_<i>.ckpt) previously
// written by train_on_manifest / run_benchmark.
EvalReport evaluate_checkpoints(const DatasetManifest& manifest, const std::filesystem::path& ckpt_dir,
                                const BenchmarkConfig& cfg);

}  // namespace gsqa::train
