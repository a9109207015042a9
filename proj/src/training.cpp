#include "gsqa/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "gsqa/error.hpp"
#include "gsqa/quality_metrics.hpp"
#include "gsqa/rng.hpp"
#include "json.hpp"

namespace gsqa::train {
namespace {

using ojson = nlohmann::ordered_json;

constexpr std::uint64_t kShuffleStream = 7;

void check_loss_input(std::span<const double> pred, std::span<const double> target) {
  require(pred.size() == target.size(), ErrorKind::kDomain, "loss inputs differ in length");
  require(pred.size() >= 2, ErrorKind::kDomain, "losses need a batch of at least 2");
}

ojson optional_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

MetricBlock metric_block(const std::vector<double>& pred, const std::vector<double>& target,
                         bool logistic) {
  MetricBlock b;
  b.count = pred.size();
  if (pred.empty()) {
    b.note = "no stimuli";
    return b;
  }
  b.rmse = metrics::rmse(pred, target);
  try {
    const auto m = logistic ? metrics::compute_all_mapped(pred, target) : metrics::compute_all(pred, target);
    b.plcc = m.plcc;
    b.srcc = m.srcc;
    b.krcc = m.krcc;
    b.rmse = m.rmse;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kUndefinedMetric && e.kind() != ErrorKind::kDomain) throw;
    b.note = e.what();
  }
  return b;
}

std::string cache_name(const ManifestEntry& e, const RegionParams& p) {
  std::string name = e.id;
  std::replace(name.begin(), name.end(), '/', '@');
  std::ostringstream out;
  out << name << ".p" << p.p_pre << "n" << p.n << "k" << p.k << "s" << p.seed
      << (p.standardize ? "z" : "") << ".gsrb";
  return out.str();
}

ojson regions_json(const RegionParams& p) {
  ojson j;
  j["p_pre"] = p.p_pre;
  j["n"] = p.n;
  j["k"] = p.k;
  j["seed"] = p.seed;
  j["standardize"] = p.standardize;
  return j;
}

ojson train_json(const TrainConfig& c) {
  ojson j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["peak_lr"] = c.peak_lr;
  j["weight_decay"] = c.weight_decay;
  j["schedule"] = {{"kind", "one_cycle_cosine"},
                   {"warmup", c.warmup},
                   {"initial_div", c.initial_div},
                   {"final_div", c.final_div}};
  j["lambda_lin"] = c.loss.lambda_lin;
  j["lambda_mon"] = c.loss.lambda_mon;
  j["seed"] = c.seed;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

LossValue loss_lin(std::span<const double> pred, std::span<const double> target) {
  check_loss_input(pred, target);
  const auto b = static_cast<double>(pred.size());
  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += target[i];
  }
  mp /= b;
  mt /= b;
  double spt = 0.0, spp = 0.0, stt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    spt += (pred[i] - mp) * (target[i] - mt);
    spp += (pred[i] - mp) * (pred[i] - mp);
    stt += (target[i] - mt) * (target[i] - mt);
  }
  LossValue out;
  out.grad.assign(pred.size(), 0.0);
  if (std::sqrt(spp / b) * std::sqrt(stt / b) < 1e-12) {
    out.value = 1.0;
    return out;
  }
  const double norm = std::sqrt(spp * stt);
  const double r = spt / norm;
  out.value = 1.0 - r;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.grad[i] = -((target[i] - mt) / norm - r * (pred[i] - mp) / spp);
  }
  return out;
}

LossValue loss_mon(std::span<const double> pred, std::span<const double> target) {
  check_loss_input(pred, target);
  const std::size_t n = pred.size();
  const double scale = 1.0 / static_cast<double>(n * n);
  LossValue out;
  out.grad.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!(target[i] > target[j])) continue;
      const double margin = 1.0 - (pred[i] - pred[j]);
      if (margin > 0.0) {
        out.value += margin;
        out.grad[i] -= scale;
        out.grad[j] += scale;
      }
    }
  }
  out.value *= scale;
  return out;
}

LossValue loss_total(std::span<const double> pred, std::span<const double> target,
                     const LossConfig& cfg) {
  require(cfg.lambda_lin >= 0.0 && cfg.lambda_mon >= 0.0, ErrorKind::kConfig,
          "loss weights must be non-negative");
  const auto lin = loss_lin(pred, target);
  const auto mon = loss_mon(pred, target);
  LossValue out;
  out.value = cfg.lambda_lin * lin.value + cfg.lambda_mon * mon.value;
  out.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    out.grad[i] = cfg.lambda_lin * lin.grad[i] + cfg.lambda_mon * mon.grad[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

double OneCycle::operator()(std::size_t step) const {
  const double lo = peak / initial_div;
  const double hi = peak;
  const double end = peak / final_div;
  const double s = static_cast<double>(step);
  const double warm_end = warmup * static_cast<double>(total_steps);
  if (s <= warm_end) {
    const double frac = warm_end > 0.0 ? s / warm_end : 1.0;
    return lo + (hi - lo) * 0.5 * (1.0 - std::cos(std::numbers::pi * frac));
  }
  const double span = static_cast<double>(total_steps) - 1.0 - warm_end;
  const double frac = span > 0.0 ? std::min(1.0, (s - warm_end) / span) : 1.0;
  return end + (hi - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(const net::ModelParams& params, const AdamWConfig& cfg) : cfg_(cfg) {
  for (const auto& t : params.tensors()) {
    m_.push_back(net::Mat::Zero(t.value.rows(), t.value.cols()));
    v_.push_back(net::Mat::Zero(t.value.rows(), t.value.cols()));
  }
}

void AdamW::step(net::ModelParams& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  auto& tensors = params.tensors();
  require(tensors.size() == m_.size(), ErrorKind::kContract, "optimizer state does not match parameters");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& t = tensors[i];
    if (!t.trainable) continue;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * t.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * t.grad.cwiseProduct(t.grad);
    t.value *= 1.0 - lr * cfg_.weight_decay;
    t.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
  params.bump_version();
}

// ---------------------------------------------------------------------------
// Training loop

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return samples / batch_size + (samples % batch_size >= 2 ? 1 : 0);
}

std::string epoch_log_json(const EpochLog& log) {
  ojson j;
  j["epoch"] = log.epoch;
  j["loss"] = log.loss;
  j["lr"] = log.lr;
  j["train_plcc"] = optional_json(log.plcc);
  j["train_srcc"] = optional_json(log.srcc);
  return j.dump();
}

void calibrate_head(net::ModelParams& params, const std::vector<Sample>& samples) {
  const std::size_t n = samples.size();
  double mp = 0.0, mm = 0.0;
  std::vector<double> pred(n);
  for (std::size_t i = 0; i < n; ++i) {
    pred[i] = net::forward(params, *samples[i].batch);
    mp += pred[i];
    mm += samples[i].mos;
  }
  mp /= static_cast<double>(n);
  mm /= static_cast<double>(n);
  double spp = 0.0, spm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    spp += (pred[i] - mp) * (pred[i] - mp);
    spm += (pred[i] - mp) * (samples[i].mos - mm);
  }
  // Constant predictions: only the offset can be matched.
  const double slope = spp > 1e-12 * static_cast<double>(n) ? spm / spp : 0.0;
  auto& w = params.at("head.weight").value;
  auto& b = params.at("head.bias").value;
  w *= slope;
  b(0, 0) = slope * (b(0, 0) - mp) + mm;
}

TrainResult train_fold(const std::vector<Sample>& samples, const TrainConfig& cfg,
                       const EpochCallback& on_epoch) {
  require(!samples.empty(), ErrorKind::kDomain, "training set is empty");
  require(cfg.batch_size >= 2, ErrorKind::kConfig, "batch size must be at least 2");
  require(samples.size() >= 2, ErrorKind::kDomain, "training needs at least two samples");
  for (const auto& s : samples) {
    require(s.batch != nullptr, ErrorKind::kContract, "training sample without a region batch");
  }

  TrainResult result{net::ModelParams::create(cfg.net, cfg.seed, cfg.init), {}};
  auto& params = result.params;
  if (cfg.fit_normalization) {
    std::vector<const RegionBatch*> batches;
    for (const auto& s : samples) batches.push_back(s.batch);
    net::fit_input_normalization(params, batches);
  }

  const std::size_t per_epoch = steps_per_epoch(samples.size(), cfg.batch_size);
  const OneCycle schedule{cfg.peak_lr, std::max<std::size_t>(1, per_epoch * cfg.epochs), cfg.warmup,
                          cfg.initial_div, cfg.final_div};
  AdamW opt(params, AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed, kShuffleStream);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<net::ForwardCache> caches(cfg.batch_size);
  std::vector<const RegionBatch*> current(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) current[i] = samples[i].batch;
  std::vector<RegionBatch> redrawn(samples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.resample_regions && epoch > 0) {
      auto p = *cfg.resample_regions;
      p.seed = derive_seed(cfg.resample_regions->seed, epoch);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].cloud == nullptr) continue;
        redrawn[i] = build_regions(*samples[i].cloud, p);
        current[i] = &redrawn[i];
      }
    }
    rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch;
    std::vector<double> seen_pred, seen_mos;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<double> pred, mos;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& s = samples[order[i]];
        pred.push_back(net::forward(params, *current[order[i]], &caches[i - lo]));
        mos.push_back(s.mos);
      }
      const auto loss = loss_total(pred, mos, cfg.loss);
      params.zero_grad();
      for (std::size_t i = 0; i < pred.size(); ++i) {
        if (loss.grad[i] != 0.0) net::backward(params, caches[i], loss.grad[i]);
      }
      const double lr = schedule(step++);
      opt.step(params, lr);
      log.lr = lr;
      loss_sum += loss.value;
      seen_pred.insert(seen_pred.end(), pred.begin(), pred.end());
      seen_mos.insert(seen_mos.end(), mos.begin(), mos.end());
    }
    log.loss = loss_sum / static_cast<double>(per_epoch);
    try {
      log.plcc = metrics::plcc(seen_pred, seen_mos);
    } catch (const Error&) {
    }
    try {
      log.srcc = metrics::srcc(seen_pred, seen_mos);
    } catch (const Error&) {
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (cfg.calibrate_head) calibrate_head(params, samples);
  return result;
}

// ---------------------------------------------------------------------------
// Folds

FoldPlan make_folds(const std::vector<std::string>& base_names, std::uint64_t seed, std::size_t folds) {
  require(folds >= 2, ErrorKind::kConfig, "need at least two folds");
  require(!base_names.empty() && base_names.size() % folds == 0, ErrorKind::kDomain,
          "base model count " + std::to_string(base_names.size()) + " is not divisible by " +
              std::to_string(folds));
  std::set<std::string> unique(base_names.begin(), base_names.end());
  require(unique.size() == base_names.size(), ErrorKind::kDomain, "duplicate base model names");
  auto names = base_names;
  Rng rng(seed);
  rng.shuffle(names);
  const std::size_t per = names.size() / folds;
  FoldPlan plan;
  for (std::size_t f = 0; f < folds; ++f) {
    plan.test_bases.emplace_back(names.begin() + static_cast<std::ptrdiff_t>(f * per),
                                 names.begin() + static_cast<std::ptrdiff_t>((f + 1) * per));
  }
  return plan;
}

FoldSplit fold_split(const FoldPlan& plan, const DatasetManifest& manifest, std::size_t fold) {
  require(fold < plan.folds(), ErrorKind::kDomain, "fold index out of range");
  const std::set<std::string> test(plan.test_bases[fold].begin(), plan.test_bases[fold].end());
  FoldSplit split;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    (test.contains(manifest.entries[i].base) ? split.test : split.train).push_back(i);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Reports

EvalReport evaluate_predictions(const std::vector<Prediction>& predictions, bool per_fold_average,
                                bool logistic_map) {
  EvalReport r;
  r.aggregation = per_fold_average ? "per_fold_average" : "fold_pooled";
  r.mapping = logistic_map ? "logistic4" : "none";
  r.predictions = predictions;

  auto block_for = [&](const std::string& group) {
    std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> by_fold;
    std::vector<double> p, t;
    for (const auto& pr : predictions) {
      if (!group.empty() && pr.group != group) continue;
      p.push_back(pr.predicted);
      t.push_back(pr.mos);
      by_fold[pr.fold].first.push_back(pr.predicted);
      by_fold[pr.fold].second.push_back(pr.mos);
    }
    if (!per_fold_average) return metric_block(p, t, logistic_map);
    MetricBlock avg;
    avg.count = p.size();
    std::array<double, 4> sum{};
    std::array<std::size_t, 4> cnt{};
    for (const auto& [fold, pt] : by_fold) {
      const auto b = metric_block(pt.first, pt.second, logistic_map);
      const std::array<std::optional<double>, 4> v{b.plcc, b.srcc, b.krcc, b.rmse};
      for (std::size_t i = 0; i < 4; ++i) {
        if (v[i]) {
          sum[i] += *v[i];
          ++cnt[i];
        }
      }
    }
    std::array<std::optional<double>*, 4> out{&avg.plcc, &avg.srcc, &avg.krcc, &avg.rmse};
    for (std::size_t i = 0; i < 4; ++i) {
      if (cnt[i] > 0) *out[i] = sum[i] / static_cast<double>(cnt[i]);
    }
    if (cnt[0] < by_fold.size()) avg.note = "some folds had undefined metrics";
    return avg;
  };

  r.overall = block_for("");
  for (const auto& g : report_groups()) r.per_group[g] = block_for(g);
  return r;
}

std::string report_to_json(const EvalReport& r) {
  auto block = [](const MetricBlock& b) {
    ojson j;
    j["count"] = b.count;
    j["plcc"] = optional_json(b.plcc);
    j["srcc"] = optional_json(b.srcc);
    j["krcc"] = optional_json(b.krcc);
    j["rmse"] = optional_json(b.rmse);
    if (!b.note.empty()) j["note"] = b.note;
    return j;
  };
  ojson j;
  j["format"] = "gsqa-eval-report";
  j["aggregation"] = r.aggregation;
  j["mapping"] = r.mapping;
  j["overall"] = block(r.overall);
  j["per_type"] = ojson::object();
  for (const auto& g : report_groups()) {
    const auto it = r.per_group.find(g);
    j["per_type"][g] = block(it == r.per_group.end() ? MetricBlock{} : it->second);
  }
  j["predictions"] = ojson::array();
  for (const auto& p : r.predictions) {
    j["predictions"].push_back(
        {{"id", p.id}, {"group", p.group}, {"fold", p.fold}, {"predicted", p.predicted}, {"mos", p.mos}});
  }
  j["skipped"] = r.skipped;
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& r) {
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(4) << *v;
    } else {
      s << "n/a";
    }
    return s.str();
  };
  std::ostringstream out;
  out << std::left << std::setw(16) << "type" << std::right << std::setw(7) << "count" << std::setw(9)
      << "PLCC" << std::setw(9) << "SRCC" << std::setw(9) << "KRCC" << std::setw(9) << "RMSE" << "\n";
  auto row = [&](const std::string& name, const MetricBlock& b) {
    out << std::left << std::setw(16) << name << std::right << std::setw(7) << b.count << std::setw(9)
        << cell(b.plcc) << std::setw(9) << cell(b.srcc) << std::setw(9) << cell(b.krcc) << std::setw(9)
        << cell(b.rmse) << "\n";
  };
  for (const auto& g : report_groups()) {
    const auto it = r.per_group.find(g);
    row(g, it == r.per_group.end() ? MetricBlock{} : it->second);
  }
  row("overall", r.overall);
  out << "aggregation: " << r.aggregation << ", mapping: " << r.mapping << "\n";
  if (!r.skipped.empty()) out << "skipped (no file): " << r.skipped.size() << " entries\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Benchmark

RegionBatch entry_regions(const ManifestEntry& entry, const BenchmarkConfig& cfg) {
  require(!entry.path.empty(), ErrorKind::kData, "entry '" + entry.id + "' has no file");
  std::filesystem::path cached;
  if (!cfg.cache_dir.empty()) {
    cached = cfg.cache_dir / cache_name(entry, cfg.regions);
    if (std::filesystem::exists(cached)) {
      auto batch = read_regions(cached);
      batch.params.seed = cfg.regions.seed;
      batch.params.standardize = cfg.regions.standardize;
      return batch;
    }
  }
  const auto cloud = read_ply(cfg.manifest_dir / entry.path);
  auto batch = build_regions(cloud, cfg.regions);
  if (!cached.empty()) {
    std::filesystem::create_directories(cfg.cache_dir);
    // Write then rename so concurrent readers never see a partial file.
    auto tmp = cached;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    write_regions(batch, tmp);
    std::filesystem::rename(tmp, cached);
  }
  return batch;
}

std::vector<std::size_t> usable_entries(const DatasetManifest& manifest,
                                        std::vector<std::string>* skipped) {
  std::vector<std::size_t> out;
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (e.path.empty()) {
      if (skipped != nullptr) skipped->push_back(e.id);
      continue;
    }
    if (!e.mos) {
      missing.push_back(e.id);
      continue;
    }
    out.push_back(i);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    fail(ErrorKind::kData, "stimuli without MOS: " + list);
  }
  require(!out.empty(), ErrorKind::kData, "manifest has no stimuli with files and MOS");
  return out;
}

std::vector<std::string> base_names(const DatasetManifest& manifest) {
  std::vector<std::string> names;
  for (const auto& b : manifest.bases) names.push_back(b.name);
  if (names.empty()) {
    std::set<std::string> seen;
    for (const auto& e : manifest.entries) {
      if (seen.insert(e.base).second) names.push_back(e.base);
    }
  }
  return names;
}

std::string checkpoint_metadata(const BenchmarkConfig& cfg, const FoldPlan& plan,
                                std::optional<std::size_t> fold) {
  ojson j;
  j["fold"] = fold ? ojson(*fold) : ojson(nullptr);
  j["folds"] = plan.folds();
  j["fold_seed"] = cfg.fold_seed;
  j["test_bases"] = fold ? ojson(plan.test_bases[*fold]) : ojson::array();
  j["regions"] = regions_json(cfg.regions);
  j["train"] = train_json(cfg.train);
  j["rng"] = kRngAlgorithm;
  return j.dump();
}

RegionParams regions_from_metadata(const std::string& metadata_json) {
  RegionParams p;
  try {
    const auto j = nlohmann::json::parse(metadata_json.empty() ? "{}" : metadata_json);
    if (!j.contains("regions")) return p;
    const auto& r = j["regions"];
    p.p_pre = r.value("p_pre", p.p_pre);
    p.n = r.value("n", p.n);
    p.k = r.value("k", p.k);
    p.seed = r.value("seed", p.seed);
    p.standardize = r.value("standardize", p.standardize);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("invalid checkpoint metadata: ") + e.what());
  }
  return p;
}

namespace {

std::vector<RegionBatch> all_regions(const DatasetManifest& manifest, const std::vector<std::size_t>& idx,
                                     const BenchmarkConfig& cfg) {
  std::vector<RegionBatch> out(idx.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < idx.size();) {
      try {
        out[j] = entry_regions(manifest.entries[idx[j]], cfg);
      } catch (...) {
        const std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const unsigned threads = std::max(1U, cfg.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
  return out;
}

std::vector<GaussianCloud> all_clouds(const DatasetManifest& manifest, const std::vector<std::size_t>& idx,
                                      const BenchmarkConfig& cfg) {
  std::vector<GaussianCloud> out;
  if (!cfg.resample_per_epoch) return out;
  out.reserve(idx.size());
  for (const auto i : idx) out.push_back(read_ply(cfg.manifest_dir / manifest.entries[i].path));
  return out;
}

TrainConfig effective_train_config(const BenchmarkConfig& cfg) {
  auto t = cfg.train;
  if (cfg.resample_per_epoch) t.resample_regions = cfg.regions;
  return t;
}

}  // namespace

TrainResult train_on_manifest(const DatasetManifest& manifest, const BenchmarkConfig& cfg,
                              std::optional<std::size_t> fold) {
  const auto usable = usable_entries(manifest, nullptr);
  std::vector<std::size_t> train_idx = usable;
  FoldPlan plan;
  if (fold) {
    plan = make_folds(base_names(manifest), cfg.fold_seed, cfg.folds);
    const auto split = fold_split(plan, manifest, *fold);
    const std::set<std::size_t> train_set(split.train.begin(), split.train.end());
    train_idx.clear();
    for (const auto i : usable) {
      if (train_set.contains(i)) train_idx.push_back(i);
    }
  }
  const auto batches = all_regions(manifest, train_idx, cfg);
  const auto clouds = all_clouds(manifest, train_idx, cfg);
  std::vector<Sample> samples;
  for (std::size_t j = 0; j < train_idx.size(); ++j) {
    samples.push_back({&batches[j], *manifest.entries[train_idx[j]].mos, clouds.empty() ? nullptr : &clouds[j]});
  }
  auto result = train_fold(samples, effective_train_config(cfg), [&](const EpochLog& log) {
    if (cfg.on_epoch) cfg.on_epoch(fold.value_or(0), log);
  });
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::string name = fold ? "fold_" + std::to_string(*fold) + ".ckpt" : "full.ckpt";
    net::save_checkpoint(result.params, cfg.checkpoint_dir / name, checkpoint_metadata(cfg, plan, fold));
  }
  return result;
}

EvalReport run_benchmark(const DatasetManifest& manifest, const BenchmarkConfig& cfg) {
  std::vector<std::string> skipped;
  const auto usable = usable_entries(manifest, &skipped);
  const FoldPlan plan = make_folds(base_names(manifest), cfg.fold_seed, cfg.folds);
  const auto batches = all_regions(manifest, usable, cfg);
  const auto clouds = all_clouds(manifest, usable, cfg);
  const auto train_cfg = effective_train_config(cfg);
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t j = 0; j < usable.size(); ++j) slot[usable[j]] = j;

  std::vector<std::vector<Prediction>> per_fold(plan.folds());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mutex;
  auto run_fold = [&](std::size_t f) {
    const auto split = fold_split(plan, manifest, f);
    std::vector<Sample> samples;
    for (const auto i : split.train) {
      if (!slot.contains(i)) continue;
      const auto j = slot.at(i);
      samples.push_back({&batches[j], *manifest.entries[i].mos, clouds.empty() ? nullptr : &clouds[j]});
    }
    const auto result = train_fold(samples, train_cfg, [&](const EpochLog& log) {
      if (cfg.on_epoch) {
        const std::lock_guard lock(mutex);
        cfg.on_epoch(f, log);
      }
    });
    if (!cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      net::save_checkpoint(result.params, cfg.checkpoint_dir / ("fold_" + std::to_string(f) + ".ckpt"),
                           checkpoint_metadata(cfg, plan, f));
    }
    for (const auto i : split.test) {
      if (!slot.contains(i)) continue;
      const auto& e = manifest.entries[i];
      per_fold[f].push_back({e.id, distortion_group(e.spec.kind), f,
                             net::forward(result.params, batches[slot.at(i)]), *e.mos});
    }
  };
  auto worker = [&] {
    for (std::size_t f; (f = next.fetch_add(1)) < plan.folds();) {
      try {
        run_fold(f);
      } catch (...) {
        const std::lock_guard lock(mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const unsigned threads = std::max(1U, std::min<unsigned>(cfg.threads, static_cast<unsigned>(plan.folds())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  std::vector<Prediction> pooled;
  for (const auto& fp : per_fold) pooled.insert(pooled.end(), fp.begin(), fp.end());
  auto report = evaluate_predictions(pooled, cfg.per_fold_average, cfg.logistic_map);
  report.skipped = std::move(skipped);
  return report;
}

EvalReport evaluate_checkpoints(const DatasetManifest& manifest, const std::filesystem::path& ckpt_dir,
                                const BenchmarkConfig& cfg) {
  std::vector<std::string> skipped;
  const auto usable = usable_entries(manifest, &skipped);
  std::vector<Prediction> pooled;
  std::set<std::string> scored;
  std::size_t f = 0;
  for (; std::filesystem::exists(ckpt_dir / ("fold_" + std::to_string(f) + ".ckpt")); ++f) {
    std::string meta;
    const auto params = net::load_checkpoint(ckpt_dir / ("fold_" + std::to_string(f) + ".ckpt"), &meta);
    BenchmarkConfig local = cfg;
    local.regions = regions_from_metadata(meta);
    std::set<std::string> test;
    try {
      const auto j = nlohmann::json::parse(meta);
      for (const auto& b : j.at("test_bases")) test.insert(b.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kSchema, "fold checkpoint " + std::to_string(f) + " lacks test_bases: " + e.what());
    }
    for (const auto i : usable) {
      const auto& e = manifest.entries[i];
      if (!test.contains(e.base)) continue;
      if (!scored.insert(e.id).second) {
        fail(ErrorKind::kData, "stimulus '" + e.id + "' is held out by more than one fold");
      }
      pooled.push_back({e.id, distortion_group(e.spec.kind), f,
                        net::forward(params, entry_regions(e, local)), *e.mos});
    }
  }
  require(f > 0, ErrorKind::kIo, "no fold_<i>.ckpt files in '" + ckpt_dir.string() + "'");
  auto report = evaluate_predictions(pooled, cfg.per_fold_average, cfg.logistic_map);
  report.skipped = std::move(skipped);
  return report;
}

}  // namespace gsqa::train
