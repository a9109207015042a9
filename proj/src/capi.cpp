#include "gsqa/gsqa.h"

#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>

#include "gsqa/distortion.hpp"
#include "gsqa/error.hpp"
#include "gsqa/net.hpp"
#include "gsqa/quality_metrics.hpp"
#include "gsqa/regioning.hpp"
#include "gsqa/sessions.hpp"
#include "gsqa/subjective.hpp"
#include "gsqa/synthetic.hpp"
#include "gsqa/training.hpp"
#include "json.hpp"

#ifndef GSQA_VERSION_STRING
#define GSQA_VERSION_STRING "0.0.0"
#endif

struct gsqa_cloud {
  gsqa::GaussianCloud cloud;
};

struct gsqa_regions {
  gsqa::RegionBatch batch;
};

struct gsqa_model {
  gsqa::net::ModelParams params;
  gsqa::RegionParams regions;
};

struct gsqa_sessions {
  std::unique_ptr<gsqa::sessions::SessionStore> store;
};

namespace {

using json = nlohmann::json;

thread_local std::string last_error;

gsqa_status status_of(gsqa::ErrorKind kind) {
  using gsqa::ErrorKind;
  switch (kind) {
    case ErrorKind::kParse: return GSQA_ERR_PARSE;
    case ErrorKind::kSchema: return GSQA_ERR_SCHEMA;
    case ErrorKind::kIo: return GSQA_ERR_IO;
    case ErrorKind::kDomain: return GSQA_ERR_DOMAIN;
    case ErrorKind::kData: return GSQA_ERR_DATA;
    case ErrorKind::kConfig: return GSQA_ERR_CONFIG;
    case ErrorKind::kContract: return GSQA_ERR_CONTRACT;
    case ErrorKind::kUndefinedMetric: return GSQA_ERR_UNDEFINED_METRIC;
    case ErrorKind::kNotFound: return GSQA_ERR_NOT_FOUND;
    case ErrorKind::kConflict: return GSQA_ERR_CONFLICT;
  }
  return GSQA_ERR_INTERNAL;
}

template <typename F>
gsqa_status guarded(F&& body) {
  try {
    body();
    last_error.clear();
    return GSQA_OK;
  } catch (const gsqa::Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return GSQA_ERR_INTERNAL;
  } catch (const std::invalid_argument& e) {
    last_error = e.what();
    return GSQA_ERR_INVALID_ARGUMENT;
  } catch (const std::filesystem::filesystem_error& e) {
    last_error = e.what();
    return GSQA_ERR_IO;
  } catch (const std::exception& e) {
    last_error = e.what();
    return GSQA_ERR_INTERNAL;
  }
}

void need(const void* p, const char* name) {
  if (p == nullptr) throw std::invalid_argument(std::string(name) + " must not be NULL");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const std::string& s) {
  if (out != nullptr) *out = dup(s);
}

json parse_options(const char* text) {
  if (text == nullptr || *text == '\0') return json::object();
  try {
    auto j = json::parse(text);
    if (!j.is_object()) gsqa::fail(gsqa::ErrorKind::kConfig, "options must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    gsqa::fail(gsqa::ErrorKind::kConfig, std::string("options are not valid JSON: ") + e.what());
  }
}

template <typename T>
T opt(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    gsqa::fail(gsqa::ErrorKind::kConfig, std::string("option '") + key + "' has the wrong type");
  }
}

gsqa::train::BenchmarkConfig benchmark_config(const json& o, const std::filesystem::path& manifest_path) {
  gsqa::train::BenchmarkConfig c;
  auto& t = c.train;
  t.epochs = opt(o, "epochs", t.epochs);
  t.batch_size = opt(o, "batch_size", t.batch_size);
  t.peak_lr = opt(o, "peak_lr", t.peak_lr);
  t.weight_decay = opt(o, "weight_decay", t.weight_decay);
  t.seed = opt(o, "seed", t.seed);
  t.loss.lambda_lin = opt(o, "lambda_lin", t.loss.lambda_lin);
  t.loss.lambda_mon = opt(o, "lambda_mon", t.loss.lambda_mon);
  t.net.d = opt(o, "d", t.net.d);
  t.net.heads = opt(o, "heads", t.net.heads);
  t.net.ffn_mult = opt(o, "ffn_mult", t.net.ffn_mult);
  t.net.k_g = opt(o, "k_g", t.net.k_g);
  t.net.blocks = opt(o, "blocks", t.net.blocks);
  t.net.relative_centroids = opt(o, "relative_centroids", t.net.relative_centroids);
  t.calibrate_head = opt(o, "calibrate_head", t.calibrate_head);
  c.regions.p_pre = opt(o, "p_pre", c.regions.p_pre);
  c.regions.n = opt(o, "n", c.regions.n);
  c.regions.k = opt(o, "k", c.regions.k);
  c.regions.seed = opt(o, "region_seed", c.regions.seed);
  c.regions.standardize = opt(o, "standardize", c.regions.standardize);
  c.folds = opt(o, "folds", c.folds);
  c.fold_seed = opt(o, "fold_seed", c.fold_seed);
  c.threads = opt(o, "threads", c.threads);
  c.per_fold_average = opt(o, "per_fold_average", c.per_fold_average);
  c.logistic_map = opt(o, "logistic_map", c.logistic_map);
  c.resample_per_epoch = opt(o, "resample_per_epoch", c.resample_per_epoch);
  c.cache_dir = opt(o, "cache_dir", std::string());
  c.manifest_dir = manifest_path.parent_path();
  return c;
}

// Attaches the line-delimited training log sink requested by the options.
struct LogSink {
  std::unique_ptr<std::ofstream> file;
  bool verbose = false;

  void attach(gsqa::train::BenchmarkConfig& c, const json& o) {
    const auto path = opt(o, "log_path", std::string());
    verbose = opt(o, "verbose", false);
    if (!path.empty()) {
      file = std::make_unique<std::ofstream>(path, std::ios::trunc);
      if (!*file) gsqa::fail(gsqa::ErrorKind::kIo, "cannot write training log '" + path + "'");
    }
    if (!file && !verbose) return;
    c.on_epoch = [this](std::size_t fold, const gsqa::train::EpochLog& log) {
      auto line = json::parse(gsqa::train::epoch_log_json(log));
      line["fold"] = fold;
      const auto text = line.dump();
      if (file) *file << text << "\n" << std::flush;
      if (verbose) std::cerr << text << "\n";
    };
  }
};

gsqa::subjective::ScreeningConfig screening_config(const json& o) {
  gsqa::subjective::ScreeningConfig c;
  c.fence = opt(o, "fence", c.fence);
  c.max_flagged_fraction = opt(o, "max_flagged_fraction", c.max_flagged_fraction);
  c.min_variance = opt(o, "min_variance", c.min_variance);
  c.extreme_fraction = opt(o, "extreme_fraction", c.extreme_fraction);
  c.min_raters = opt(o, "min_raters", c.min_raters);
  return c;
}

}  // namespace

extern "C" {

const char* gsqa_last_error(void) { return last_error.c_str(); }

const char* gsqa_status_name(gsqa_status status) {
  switch (status) {
    case GSQA_OK: return "ok";
    case GSQA_ERR_PARSE: return "parse";
    case GSQA_ERR_SCHEMA: return "schema";
    case GSQA_ERR_IO: return "io";
    case GSQA_ERR_DOMAIN: return "domain";
    case GSQA_ERR_DATA: return "data";
    case GSQA_ERR_CONFIG: return "config";
    case GSQA_ERR_CONTRACT: return "contract";
    case GSQA_ERR_UNDEFINED_METRIC: return "undefined_metric";
    case GSQA_ERR_NOT_FOUND: return "not_found";
    case GSQA_ERR_CONFLICT: return "conflict";
    case GSQA_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case GSQA_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* gsqa_version(void) { return GSQA_VERSION_STRING; }

const char* gsqa_build_info(void) {
  static const std::string info = std::string("gsqa ") + GSQA_VERSION_STRING + " (" + __DATE__ +
                                  ", " + "gcc " + __VERSION__ + ", float64 training; rng: " + gsqa::kRngAlgorithm + ")";
  return info.c_str();
}

void gsqa_string_free(char* s) { std::free(s); }

gsqa_status gsqa_cloud_read(const char* path, gsqa_cloud** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new gsqa_cloud{gsqa::read_ply(path)};
  });
}

gsqa_status gsqa_cloud_write(const gsqa_cloud* cloud, const char* path, int ascii) {
  return guarded([&] {
    need(cloud, "cloud");
    need(path, "path");
    gsqa::write_ply(cloud->cloud, path,
                    ascii != 0 ? gsqa::PlyEncoding::kAscii : gsqa::PlyEncoding::kBinaryLittleEndian);
  });
}

void gsqa_cloud_free(gsqa_cloud* cloud) { delete cloud; }

size_t gsqa_cloud_size(const gsqa_cloud* cloud) { return cloud == nullptr ? 0 : cloud->cloud.size(); }

gsqa_status gsqa_cloud_bounding_volume(const gsqa_cloud* cloud, double* out) {
  return guarded([&] {
    need(cloud, "cloud");
    need(out, "out");
    *out = gsqa::bounding_volume(cloud->cloud);
  });
}

gsqa_status gsqa_cloud_attributes(const gsqa_cloud* cloud, size_t index, float* out) {
  return guarded([&] {
    need(cloud, "cloud");
    need(out, "out");
    gsqa::require(index < cloud->cloud.size(), gsqa::ErrorKind::kDomain, "splat index out of range");
    const auto a = cloud->cloud.splats[index].attributes();
    std::memcpy(out, a.data(), sizeof(float) * a.size());
  });
}

gsqa_status gsqa_cloud_distort(const gsqa_cloud* cloud, const char* kind, double level, uint64_t seed,
                               gsqa_cloud** out) {
  return guarded([&] {
    need(cloud, "cloud");
    need(kind, "kind");
    need(out, "out");
    const gsqa::DistortionSpec spec{gsqa::parse_distortion_kind(kind), level, seed};
    *out = new gsqa_cloud{gsqa::apply_distortion(cloud->cloud, spec)};
  });
}

gsqa_status gsqa_cloud_synthetic(const char* shape, size_t count, uint64_t seed, gsqa_cloud** out) {
  return guarded([&] {
    need(shape, "shape");
    need(out, "out");
    *out = new gsqa_cloud{gsqa::synthetic_cloud(gsqa::parse_synthetic_shape(shape), count, seed)};
  });
}

gsqa_region_params gsqa_region_params_default(void) {
  const gsqa::RegionParams p;
  return {p.p_pre, p.n, p.k, p.seed, p.standardize ? 1 : 0};
}

gsqa_status gsqa_regions_build(const gsqa_cloud* cloud, const gsqa_region_params* params,
                               gsqa_regions** out) {
  return guarded([&] {
    need(cloud, "cloud");
    need(out, "out");
    const auto p = params != nullptr ? *params : gsqa_region_params_default();
    const gsqa::RegionParams rp{p.p_pre, p.n, p.k, p.seed, p.standardize != 0};
    *out = new gsqa_regions{gsqa::build_regions(cloud->cloud, rp)};
  });
}

gsqa_status gsqa_regions_write(const gsqa_regions* regions, const char* path) {
  return guarded([&] {
    need(regions, "regions");
    need(path, "path");
    gsqa::write_regions(regions->batch, path);
  });
}

gsqa_status gsqa_regions_read(const char* path, gsqa_regions** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = new gsqa_regions{gsqa::read_regions(path)};
  });
}

void gsqa_regions_free(gsqa_regions* regions) { delete regions; }

size_t gsqa_regions_count(const gsqa_regions* regions) {
  return regions == nullptr ? 0 : regions->batch.regions();
}

size_t gsqa_regions_members(const gsqa_regions* regions) {
  return regions == nullptr ? 0 : regions->batch.members();
}

gsqa_status gsqa_dataset_build(const char* bases_dir, const char* out_dir, uint64_t seed, unsigned threads,
                               char** manifest_json) {
  return guarded([&] {
    need(bases_dir, "bases_dir");
    need(out_dir, "out_dir");
    gsqa::BuildOptions options;
    options.out_dir = out_dir;
    options.seed = seed;
    options.threads = threads;
    const auto m = gsqa::build_dataset(bases_dir, options);
    put(manifest_json, gsqa::manifest_to_json(m));
  });
}

gsqa_status gsqa_train(const char* manifest_path, int fold, const char* options_json, const char* out,
                       char** summary_json) {
  return guarded([&] {
    need(manifest_path, "manifest_path");
    need(out, "out");
    const auto o = parse_options(options_json);
    auto cfg = benchmark_config(o, manifest_path);
    LogSink sink;
    sink.attach(cfg, o);
    const auto manifest = gsqa::load_manifest(manifest_path);
    json summary;
    summary["manifest"] = manifest_path;
    if (fold == -1) {
      cfg.checkpoint_dir = out;
      const auto plan = gsqa::train::make_folds(gsqa::train::base_names(manifest), cfg.fold_seed, cfg.folds);
      summary["checkpoints"] = json::array();
      for (std::size_t f = 0; f < plan.folds(); ++f) {
        const auto r = gsqa::train::train_on_manifest(manifest, cfg, f);
        summary["checkpoints"].push_back((std::filesystem::path(out) / ("fold_" + std::to_string(f) + ".ckpt")).string());
        summary["final_loss"].push_back(r.log.empty() ? 0.0 : r.log.back().loss);
      }
    } else {
      if (fold < -2) gsqa::fail(gsqa::ErrorKind::kConfig, "fold must be >= 0, -1 (all) or -2 (full)");
      const std::optional<std::size_t> f =
          fold >= 0 ? std::optional<std::size_t>(static_cast<std::size_t>(fold)) : std::nullopt;
      const auto r = gsqa::train::train_on_manifest(manifest, cfg, f);
      gsqa::train::FoldPlan plan;
      if (f) plan = gsqa::train::make_folds(gsqa::train::base_names(manifest), cfg.fold_seed, cfg.folds);
      const std::filesystem::path path(out);
      if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
      gsqa::net::save_checkpoint(r.params, path, gsqa::train::checkpoint_metadata(cfg, plan, f));
      summary["checkpoints"] = json::array({path.string()});
      summary["final_loss"] = json::array({r.log.empty() ? 0.0 : r.log.back().loss});
    }
    put(summary_json, summary.dump());
  });
}

gsqa_status gsqa_evaluate(const char* manifest_path, const char* ckpt_dir, const char* options_json,
                          char** report_json, char** table) {
  return guarded([&] {
    need(manifest_path, "manifest_path");
    need(ckpt_dir, "ckpt_dir");
    const auto o = parse_options(options_json);
    const auto cfg = benchmark_config(o, manifest_path);
    const auto report =
        gsqa::train::evaluate_checkpoints(gsqa::load_manifest(manifest_path), ckpt_dir, cfg);
    put(report_json, gsqa::train::report_to_json(report));
    put(table, gsqa::train::report_table(report));
  });
}

gsqa_status gsqa_benchmark(const char* manifest_path, const char* options_json, char** report_json,
                           char** table) {
  return guarded([&] {
    need(manifest_path, "manifest_path");
    const auto o = parse_options(options_json);
    auto cfg = benchmark_config(o, manifest_path);
    cfg.checkpoint_dir = opt(o, "checkpoint_dir", std::string());
    LogSink sink;
    sink.attach(cfg, o);
    const auto report = gsqa::train::run_benchmark(gsqa::load_manifest(manifest_path), cfg);
    put(report_json, gsqa::train::report_to_json(report));
    put(table, gsqa::train::report_table(report));
  });
}

gsqa_status gsqa_model_load(const char* ckpt_path, gsqa_model** out) {
  return guarded([&] {
    need(ckpt_path, "ckpt_path");
    need(out, "out");
    std::string meta;
    auto params = gsqa::net::load_checkpoint(ckpt_path, &meta);
    *out = new gsqa_model{std::move(params), gsqa::train::regions_from_metadata(meta)};
  });
}

void gsqa_model_free(gsqa_model* model) { delete model; }

gsqa_status gsqa_model_predict_cloud(const gsqa_model* model, const gsqa_cloud* cloud, double* score) {
  return guarded([&] {
    need(model, "model");
    need(cloud, "cloud");
    need(score, "score");
    *score = gsqa::net::forward(model->params, gsqa::build_regions(cloud->cloud, model->regions));
  });
}

gsqa_status gsqa_model_predict_regions(const gsqa_model* model, const gsqa_regions* regions, double* score) {
  return guarded([&] {
    need(model, "model");
    need(regions, "regions");
    need(score, "score");
    *score = gsqa::net::forward(model->params, regions->batch);
  });
}

gsqa_status gsqa_model_predict_tokens(const gsqa_model* model, const gsqa_regions* regions,
                                     const char* tokens_path, double* score) {
  return guarded([&] {
    need(model, "model");
    need(regions, "regions");
    need(tokens_path, "tokens_path");
    need(score, "score");
    const auto grid = gsqa::net::token_grid(gsqa::net::read_tokens(tokens_path), regions->batch,
                                            model->params.config().k_g);
    *score = gsqa::net::forward_tokens(model->params, grid);
  });
}

gsqa_status gsqa_model_describe(const gsqa_model* model, char** text) {
  return guarded([&] {
    need(model, "model");
    need(text, "text");
    const auto& r = model->regions;
    put(text, model->params.describe() + "regions: p_pre=" + std::to_string(r.p_pre) +
                  " n=" + std::to_string(r.n) + " k=" + std::to_string(r.k) +
                  " seed=" + std::to_string(r.seed) + "\n");
  });
}

gsqa_status gsqa_metrics(const double* pred, const double* target, size_t m, int logistic_map, char** json_out) {
  return guarded([&] {
    need(pred, "pred");
    need(target, "target");
    need(json_out, "json");
    const std::span<const double> p(pred, m);
    const std::span<const double> t(target, m);
    const auto set = logistic_map != 0 ? gsqa::metrics::compute_all_mapped(p, t)
                                       : gsqa::metrics::compute_all(p, t);
    put(json_out, gsqa::metrics::metrics_to_json(set, logistic_map != 0));
  });
}

gsqa_status gsqa_metrics_files(const char* pred_csv, const char* target_csv, int logistic_map, char** json_out) {
  return guarded([&] {
    need(pred_csv, "pred_csv");
    need(target_csv, "target_csv");
    need(json_out, "json");
    const auto [p, t] = gsqa::metrics::align_scores(gsqa::metrics::read_score_csv(pred_csv),
                                                    gsqa::metrics::read_score_csv(target_csv));
    const auto set = logistic_map != 0 ? gsqa::metrics::compute_all_mapped(p, t)
                                       : gsqa::metrics::compute_all(p, t);
    put(json_out, gsqa::metrics::metrics_to_json(set, logistic_map != 0));
  });
}

gsqa_status gsqa_mos(const char* ratings_csv, const char* mos_csv_out, const char* options_json,
                     char** summary_json) {
  return guarded([&] {
    need(ratings_csv, "ratings_csv");
    need(mos_csv_out, "mos_csv_out");
    const auto cfg = screening_config(parse_options(options_json));
    const auto table = gsqa::subjective::make_table(gsqa::subjective::read_ratings_csv(ratings_csv));
    const auto screened = gsqa::subjective::screen_participants(table, cfg);
    const auto mos = gsqa::subjective::compute_mos(screened);
    gsqa::subjective::write_mos_csv(mos, mos_csv_out);
    put(summary_json, gsqa::subjective::screening_summary_json(screened, mos));
  });
}

gsqa_status gsqa_manifest_attach_mos(const char* manifest_in, const char* mos_csv, const char* manifest_out,
                                     char** summary_json) {
  return guarded([&] {
    need(manifest_in, "manifest_in");
    need(mos_csv, "mos_csv");
    need(manifest_out, "manifest_out");
    const auto result = gsqa::subjective::export_manifest_mos(gsqa::subjective::read_mos_csv(mos_csv),
                                                              gsqa::load_manifest(manifest_in));
    gsqa::save_manifest(result.manifest, manifest_out);
    json s;
    s["attached"] = result.attached;
    s["warnings"] = result.warnings;
    put(summary_json, s.dump());
  });
}

gsqa_status gsqa_sessions_open(const char* config_json, gsqa_sessions** out) {
  return guarded([&] {
    need(out, "out");
    const auto o = parse_options(config_json);
    gsqa::sessions::StoreConfig c;
    c.index_path = opt(o, "index", std::string());
    c.ratings_csv = opt(o, "ratings", std::string());
    c.log_path = opt(o, "log", std::string());
    c.training_count = opt(o, "training_count", c.training_count);
    if (c.index_path.empty() || c.ratings_csv.empty()) {
      gsqa::fail(gsqa::ErrorKind::kConfig, "session config needs 'index' and 'ratings'");
    }
    *out = new gsqa_sessions{std::make_unique<gsqa::sessions::SessionStore>(c)};
  });
}

void gsqa_sessions_free(gsqa_sessions* store) { delete store; }

gsqa_status gsqa_sessions_create(gsqa_sessions* store, const char* participant, uint64_t seed, char** json_out) {
  return guarded([&] {
    need(store, "store");
    need(participant, "participant");
    put(json_out, gsqa::sessions::view_to_json(store->store->create(participant, seed)));
  });
}

gsqa_status gsqa_sessions_current(gsqa_sessions* store, const char* session_id, char** json_out) {
  return guarded([&] {
    need(store, "store");
    need(session_id, "session_id");
    put(json_out, gsqa::sessions::view_to_json(store->store->current(session_id)));
  });
}

gsqa_status gsqa_sessions_progress(gsqa_sessions* store, const char* session_id, char** json_out) {
  return guarded([&] {
    need(store, "store");
    need(session_id, "session_id");
    put(json_out, gsqa::sessions::progress_to_json(store->store->progress(session_id)));
  });
}

gsqa_status gsqa_sessions_video(gsqa_sessions* store, const char* stimulus_id, const char* session_id,
                                char** path) {
  return guarded([&] {
    need(store, "store");
    need(stimulus_id, "stimulus_id");
    const auto p = store->store->serve_video(stimulus_id, session_id == nullptr ? "" : session_id);
    put(path, p.string());
  });
}

gsqa_status gsqa_sessions_rate(gsqa_sessions* store, const char* session_id, int score, char** json_out) {
  return guarded([&] {
    need(store, "store");
    need(session_id, "session_id");
    put(json_out, gsqa::sessions::view_to_json(store->store->rate(session_id, score)));
  });
}

}  // extern "C"
