// Command-line front end. Everything goes through the C API in libgsqa.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gsqa/gsqa.h"
#include "httplib.h"
#include "json.hpp"

namespace {

using json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct ApiFailure {
  gsqa_status status;
  std::string message;
};

void check(gsqa_status s) {
  if (s != GSQA_OK) throw ApiFailure{s, gsqa_last_error()};
}

struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { gsqa_string_free(p); }
  std::string str() const { return p == nullptr ? std::string() : std::string(p); }
};

using CloudPtr = std::unique_ptr<gsqa_cloud, decltype(&gsqa_cloud_free)>;

CloudPtr read_cloud(const std::string& path) {
  gsqa_cloud* c = nullptr;
  check(gsqa_cloud_read(path.c_str(), &c));
  return {c, &gsqa_cloud_free};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ApiFailure{GSQA_ERR_IO, "cannot write '" + path + "'"};
  out << text;
}

int exit_code(gsqa_status s) {
  return (s == GSQA_ERR_CONFIG || s == GSQA_ERR_INVALID_ARGUMENT) ? kExitUsage : kExitFailure;
}

// ---------------------------------------------------------------------------
// serve

int http_status(gsqa_status s) {
  switch (s) {
    case GSQA_OK: return 200;
    case GSQA_ERR_DOMAIN: return 422;
    case GSQA_ERR_CONFLICT: return 409;
    case GSQA_ERR_NOT_FOUND: return 404;
    case GSQA_ERR_PARSE:
    case GSQA_ERR_SCHEMA:
    case GSQA_ERR_INVALID_ARGUMENT: return 400;
    default: return 500;
  }
}

void reply(httplib::Response& res, gsqa_status s, const std::string& body, int ok_status = 200) {
  if (s == GSQA_OK) {
    res.status = ok_status;
    res.set_content(body, "application/json");
    return;
  }
  res.status = http_status(s);
  res.set_content(json{{"error", gsqa_status_name(s)}, {"message", gsqa_last_error()}}.dump(),
                  "application/json");
}

std::string mime_for(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "mp4") return "video/mp4";
  if (ext == "webm") return "video/webm";
  if (ext == "mov") return "video/quicktime";
  return "application/octet-stream";
}

int serve(const std::string& stimuli_dir, const std::string& index, const std::string& ratings,
          std::size_t training_count, const std::string& host, int port, const std::string& ui_dir) {
  json cfg;
  cfg["index"] = index.empty() ? stimuli_dir + "/index.json" : index;
  cfg["ratings"] = ratings;
  cfg["training_count"] = training_count;
  gsqa_sessions* raw = nullptr;
  check(gsqa_sessions_open(cfg.dump().c_str(), &raw));
  std::unique_ptr<gsqa_sessions, decltype(&gsqa_sessions_free)> store(raw, &gsqa_sessions_free);

  httplib::Server server;
  server.Post("/v1/sessions", [&](const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      res.status = 400;
      res.set_content(R"({"error":"parse","message":"body must be JSON"})", "application/json");
      return;
    }
    const std::string participant = body.value("participant_id", std::string());
    const std::uint64_t seed = body.value("seed", std::uint64_t{0});
    OwnedString out;
    const auto s = gsqa_sessions_create(store.get(), participant.c_str(), seed, &out.p);
    if (s == GSQA_OK) {
      auto view = json::parse(out.str());
      view["playlist_length"] = view["total"];
      reply(res, s, view.dump(), 201);
    } else {
      reply(res, s, "");
    }
  });
  server.Get(R"(/v1/sessions/([^/]+)/current)", [&](const httplib::Request& req, httplib::Response& res) {
    OwnedString out;
    const auto s = gsqa_sessions_current(store.get(), req.matches[1].str().c_str(), &out.p);
    reply(res, s, out.str());
  });
  server.Get(R"(/v1/sessions/([^/]+)/progress)", [&](const httplib::Request& req, httplib::Response& res) {
    OwnedString out;
    const auto s = gsqa_sessions_progress(store.get(), req.matches[1].str().c_str(), &out.p);
    reply(res, s, out.str());
  });
  server.Post(R"(/v1/sessions/([^/]+)/rating)", [&](const httplib::Request& req, httplib::Response& res) {
    int score = 0;
    try {
      const auto body = json::parse(req.body);
      const auto& v = body.is_object() ? body.at("score") : body;
      if (!v.is_number_integer()) throw std::invalid_argument("score");
      score = v.get<int>();
    } catch (const std::exception&) {
      res.status = 422;
      res.set_content(R"({"error":"domain","message":"score must be an integer 1..5"})", "application/json");
      return;
    }
    OwnedString out;
    const auto s = gsqa_sessions_rate(store.get(), req.matches[1].str().c_str(), score, &out.p);
    reply(res, s, out.str());
  });
  server.Get(R"(/v1/stimuli/([^/]+)/video)", [&](const httplib::Request& req, httplib::Response& res) {
    const std::string session = req.get_param_value("session");
    OwnedString path;
    const auto s = gsqa_sessions_video(store.get(), req.matches[1].str().c_str(),
                                       session.empty() ? nullptr : session.c_str(), &path.p);
    if (s != GSQA_OK) {
      reply(res, s, "");
      return;
    }
    auto file = std::make_shared<std::ifstream>(path.str(), std::ios::binary);
    if (!*file) {
      res.status = 404;
      res.set_content(R"({"error":"not_found","message":"video file missing"})", "application/json");
      return;
    }
    file->seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(file->tellg());
    // Range requests are answered by httplib from the sized provider.
    res.set_content_provider(size, mime_for(path.str()),
                             [file](std::size_t offset, std::size_t length, httplib::DataSink& sink) {
                               std::string buf(std::min<std::size_t>(length, 1 << 16), '\0');
                               file->clear();
                               file->seekg(static_cast<std::streamoff>(offset));
                               file->read(buf.data(), static_cast<std::streamsize>(buf.size()));
                               sink.write(buf.data(), static_cast<std::size_t>(file->gcount()));
                               return file->gcount() > 0;
                             });
  });
  if (!ui_dir.empty() && !server.set_mount_point("/", ui_dir)) {
    throw ApiFailure{GSQA_ERR_IO, "cannot mount UI directory '" + ui_dir + "'"};
  }
  std::cerr << "gsqa: serving /v1 on " << host << ":" << port << "\n";
  if (!server.listen(host, port)) throw ApiFailure{GSQA_ERR_IO, "cannot listen on port " + std::to_string(port)};
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string manifest;
  std::string options;
  std::string log;
  std::string cache_dir;
  std::optional<std::size_t> epochs, batch_size, d, n, k, p_pre, threads, folds;
  std::optional<double> lr, weight_decay;
  std::optional<std::uint64_t> seed, fold_seed;
  bool verbose = false;
  bool per_fold_average = false;
  bool logistic_map = false;
  bool resample = false;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f, bool training) {
  cmd->add_option("--manifest", f.manifest, "Dataset manifest with MOS")->required()->check(CLI::ExistingFile);
  cmd->add_option("--options", f.options, "Extra options as a JSON object");
  cmd->add_option("--cache-dir", f.cache_dir, "Region batch cache directory");
  cmd->add_option("--p-pre", f.p_pre, "Pre-downsample count (default 8192)");
  cmd->add_option("--n", f.n, "Regions per stimulus (default 64)");
  cmd->add_option("--k", f.k, "Members per region (default 32)");
  cmd->add_option("--threads", f.threads, "Worker threads");
  cmd->add_option("--folds", f.folds, "Fold count (default 5)");
  cmd->add_option("--fold-seed", f.fold_seed, "Seed of the base-model fold split");
  cmd->add_flag("--per-fold-average", f.per_fold_average, "Average per-fold metrics instead of pooling");
  cmd->add_flag("--logistic-map", f.logistic_map, "Fit a 4-parameter logistic before PLCC/RMSE");
  if (!training) return;
  cmd->add_option("--seed", f.seed, "Training seed");
  cmd->add_option("--epochs", f.epochs, "Epochs (default 100)");
  cmd->add_option("--batch-size", f.batch_size, "Batch size (default 32)");
  cmd->add_option("--lr", f.lr, "Peak step size (default 1e-4)");
  cmd->add_option("--weight-decay", f.weight_decay, "Decoupled weight decay (default 1e-4)");
  cmd->add_option("--d", f.d, "Token width (default 128)");
  cmd->add_flag("--resample-per-epoch", f.resample, "Redraw region sampling every epoch");
  cmd->add_option("--log", f.log, "Line-delimited JSON training log");
  cmd->add_flag("--verbose", f.verbose, "Echo the training log to stderr");
}

std::string options_json(const TrainFlags& f) {
  json o = f.options.empty() ? json::object() : json::parse(f.options);
  auto set = [&](const char* key, const auto& v) {
    if (v) o[key] = *v;
  };
  set("epochs", f.epochs);
  set("batch_size", f.batch_size);
  set("d", f.d);
  set("n", f.n);
  set("k", f.k);
  set("p_pre", f.p_pre);
  set("threads", f.threads);
  set("folds", f.folds);
  set("peak_lr", f.lr);
  set("weight_decay", f.weight_decay);
  set("seed", f.seed);
  set("fold_seed", f.fold_seed);
  if (!f.cache_dir.empty()) o["cache_dir"] = f.cache_dir;
  if (!f.log.empty()) o["log_path"] = f.log;
  if (f.verbose) o["verbose"] = true;
  if (f.per_fold_average) o["per_fold_average"] = true;
  if (f.logistic_map) o["logistic_map"] = true;
  if (f.resample) o["resample_per_epoch"] = true;
  return o.dump();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quality assessment toolkit for 3D Gaussian splat models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("gsqa ") + gsqa_version() + "\n" + gsqa_build_info());

  // distort
  std::string in, out, kind;
  double level = 0.0;
  std::uint64_t seed = 0;
  bool ascii = false;
  auto* distort = app.add_subcommand("distort", "Apply one executable distortion to a PLY");
  distort->add_option("--in", in, "Input PLY")->required()->check(CLI::ExistingFile);
  distort->add_option("--out", out, "Output PLY")->required();
  distort->add_option("--kind", kind, "downsample | spatial_noise | color_noise")->required();
  distort->add_option("--level", level, "p_frac, sigma or delta")->required();
  distort->add_option("--seed", seed, "Seed");
  distort->add_flag("--ascii", ascii, "Write ASCII PLY");

  // dataset build
  std::string bases_dir, dataset_out;
  unsigned threads = 1;
  auto* dataset = app.add_subcommand("dataset", "Dataset tools");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "Generate the distortion grid for every base PLY");
  build->add_option("--bases", bases_dir, "Directory of base PLY files")->required()->check(CLI::ExistingDirectory);
  build->add_option("--out", dataset_out, "Output directory")->required();
  build->add_option("--seed", seed, "Seed");
  build->add_option("--threads", threads, "Worker threads");

  // preprocess
  gsqa_region_params rp = gsqa_region_params_default();
  bool standardize = false;
  auto* preprocess = app.add_subcommand("preprocess", "Build the region batch of a PLY");
  preprocess->add_option("--in", in, "Input PLY")->required()->check(CLI::ExistingFile);
  preprocess->add_option("--out", out, "Output region file")->required();
  preprocess->add_option("--p-pre", rp.p_pre, "Pre-downsample count");
  preprocess->add_option("--n", rp.n, "Regions");
  preprocess->add_option("--k", rp.k, "Members per region");
  preprocess->add_option("--seed", rp.seed, "Seed");
  preprocess->add_flag("--standardize", standardize, "Standardize the grouping space");

  // train / evaluate / benchmark
  TrainFlags train_flags;
  std::string fold = "all";
  auto* train = app.add_subcommand("train", "Train fold checkpoints");
  add_train_flags(train, train_flags, true);
  train->add_option("--fold", fold, "Fold index, 'all' (one checkpoint per fold) or 'full' (every stimulus)");
  train->add_option("--out", out, "Checkpoint file, or directory for --fold all")->required();

  TrainFlags eval_flags;
  std::string ckpts, report, table_path;
  auto* evaluate = app.add_subcommand("evaluate", "Score held-out stimuli with fold checkpoints");
  add_train_flags(evaluate, eval_flags, false);
  evaluate->add_option("--ckpts", ckpts, "Directory of fold_<i>.ckpt")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--report", report, "Report JSON path")->required();

  TrainFlags bench_flags;
  std::string bench_ckpts;
  auto* bench = app.add_subcommand("benchmark", "Cross-validated training and evaluation in one run");
  add_train_flags(bench, bench_flags, true);
  bench->add_option("--report", report, "Report JSON path")->required();
  bench->add_option("--ckpts", bench_ckpts, "Also save fold checkpoints here");

  // predict
  std::string ckpt, tokens;
  auto* predict = app.add_subcommand("predict", "Predict the quality score of a PLY");
  predict->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  predict->add_option("--in", in, "Input PLY, or region file with --tokens")->required()->check(CLI::ExistingFile);
  predict->add_option("--tokens", tokens, "External region tokens; --in is then a region file")
      ->check(CLI::ExistingFile);

  // metrics
  std::string pred_csv, target_csv;
  bool logistic = false;
  auto* metrics = app.add_subcommand("metrics", "PLCC, SRCC, KRCC and RMSE of two score files");
  metrics->add_option("--pred", pred_csv, "Predictions CSV")->required()->check(CLI::ExistingFile);
  metrics->add_option("--target", target_csv, "Targets CSV")->required()->check(CLI::ExistingFile);
  metrics->add_flag("--logistic-map", logistic, "Fit a 4-parameter logistic before PLCC/RMSE");

  // mos
  std::string ratings, manifest_in, manifest_out, screen_options;
  auto* mos = app.add_subcommand("mos", "Screen ratings and compute MOS");
  mos->add_option("--ratings", ratings, "Ratings CSV")->required()->check(CLI::ExistingFile);
  mos->add_option("--out", out, "MOS CSV output")->required();
  mos->add_option("--options", screen_options, "Screening thresholds as JSON");
  mos->add_option("--manifest", manifest_in, "Attach MOS to this manifest")->check(CLI::ExistingFile);
  mos->add_option("--manifest-out", manifest_out, "Where to write the updated manifest");

  // serve
  std::string stimuli_dir, index, host = "0.0.0.0", ui_dir;
  std::size_t training_count = 5;
  std::optional<int> port;
  auto* serve_cmd = app.add_subcommand("serve", "Host rating sessions over HTTP (/v1)");
  serve_cmd->add_option("--stimuli", stimuli_dir, "Stimulus directory holding index.json")->required();
  serve_cmd->add_option("--index", index, "Stimulus index JSON (default <stimuli>/index.json)");
  serve_cmd->add_option("--ratings", ratings, "Ratings CSV (appended)")->required();
  serve_cmd->add_option("--training-count", training_count, "Familiarization items when the index marks none");
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port (default $GSQA_PORT or 8080)");
  serve_cmd->add_option("--ui-dir", ui_dir, "Static UI files served at /");

  // synth
  std::string shape = "sphere";
  std::size_t count = 20000;
  auto* synth = app.add_subcommand("synth", "Write a procedural splat cloud");
  synth->add_option("--shape", shape, "sphere | torus | box | wave | helix");
  synth->add_option("--count", count, "Splat count");
  synth->add_option("--seed", seed, "Seed");
  synth->add_option("--out", out, "Output PLY")->required();
  synth->add_flag("--ascii", ascii, "Write ASCII PLY");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (distort->parsed()) {
      auto cloud = read_cloud(in);
      gsqa_cloud* result = nullptr;
      check(gsqa_cloud_distort(cloud.get(), kind.c_str(), level, seed, &result));
      CloudPtr owned(result, &gsqa_cloud_free);
      check(gsqa_cloud_write(owned.get(), out.c_str(), ascii ? 1 : 0));
      std::cout << json{{"out", out}, {"splats", gsqa_cloud_size(owned.get())}}.dump() << "\n";
    } else if (build->parsed()) {
      OwnedString m;
      check(gsqa_dataset_build(bases_dir.c_str(), dataset_out.c_str(), seed, threads, &m.p));
      const auto j = json::parse(m.str());
      std::cout << json{{"manifest", dataset_out + "/manifest.json"}, {"entries", j["entries"].size()}}.dump()
                << "\n";
    } else if (preprocess->parsed()) {
      rp.standardize = standardize ? 1 : 0;
      auto cloud = read_cloud(in);
      gsqa_regions* regions = nullptr;
      check(gsqa_regions_build(cloud.get(), &rp, &regions));
      std::unique_ptr<gsqa_regions, decltype(&gsqa_regions_free)> owned(regions, &gsqa_regions_free);
      check(gsqa_regions_write(owned.get(), out.c_str()));
      std::cout << json{{"out", out}, {"regions", gsqa_regions_count(owned.get())},
                        {"members", gsqa_regions_members(owned.get())}}
                       .dump()
                << "\n";
    } else if (train->parsed()) {
      int f = -1;
      if (fold == "full") {
        f = -2;
      } else if (fold != "all") {
        try {
          f = std::stoi(fold);
        } catch (const std::exception&) {
          std::cerr << "--fold must be an index, 'all' or 'full'\n";
          return kExitUsage;
        }
        if (f < 0) {
          std::cerr << "--fold must be non-negative\n";
          return kExitUsage;
        }
      }
      OwnedString summary;
      check(gsqa_train(train_flags.manifest.c_str(), f, options_json(train_flags).c_str(), out.c_str(), &summary.p));
      std::cout << summary.str() << "\n";
    } else if (evaluate->parsed()) {
      OwnedString rep, table;
      check(gsqa_evaluate(eval_flags.manifest.c_str(), ckpts.c_str(), options_json(eval_flags).c_str(), &rep.p,
                          &table.p));
      write_text(report, rep.str());
      std::cout << table.str();
    } else if (bench->parsed()) {
      auto o = json::parse(options_json(bench_flags));
      if (!bench_ckpts.empty()) o["checkpoint_dir"] = bench_ckpts;
      OwnedString rep, table;
      check(gsqa_benchmark(bench_flags.manifest.c_str(), o.dump().c_str(), &rep.p, &table.p));
      write_text(report, rep.str());
      std::cout << table.str();
    } else if (predict->parsed()) {
      gsqa_model* model = nullptr;
      check(gsqa_model_load(ckpt.c_str(), &model));
      std::unique_ptr<gsqa_model, decltype(&gsqa_model_free)> owned(model, &gsqa_model_free);
      double score = 0.0;
      if (tokens.empty()) {
        auto cloud = read_cloud(in);
        check(gsqa_model_predict_cloud(owned.get(), cloud.get(), &score));
      } else {
        gsqa_regions* regions = nullptr;
        check(gsqa_regions_read(in.c_str(), &regions));
        std::unique_ptr<gsqa_regions, decltype(&gsqa_regions_free)> held(regions, &gsqa_regions_free);
        check(gsqa_model_predict_tokens(owned.get(), held.get(), tokens.c_str(), &score));
      }
      std::cout << json{{"score", score}}.dump() << "\n";
    } else if (metrics->parsed()) {
      OwnedString j;
      check(gsqa_metrics_files(pred_csv.c_str(), target_csv.c_str(), logistic ? 1 : 0, &j.p));
      std::cout << j.str() << "\n";
    } else if (mos->parsed()) {
      OwnedString summary;
      check(gsqa_mos(ratings.c_str(), out.c_str(), screen_options.c_str(), &summary.p));
      auto s = json::parse(summary.str());
      if (!manifest_in.empty()) {
        const std::string target = manifest_out.empty() ? manifest_in : manifest_out;
        OwnedString attach;
        check(gsqa_manifest_attach_mos(manifest_in.c_str(), out.c_str(), target.c_str(), &attach.p));
        s["manifest"] = json::parse(attach.str());
        for (const auto& w : s["manifest"]["warnings"]) std::cerr << "warning: " << w.get<std::string>() << "\n";
      }
      std::cout << s.dump() << "\n";
    } else if (serve_cmd->parsed()) {
      int p = 8080;
      if (const char* env = std::getenv("GSQA_PORT"); env != nullptr && *env != '\0') p = std::atoi(env);
      if (port) p = *port;
      return serve(stimuli_dir, index, ratings, training_count, host, p, ui_dir);
    } else if (synth->parsed()) {
      gsqa_cloud* c = nullptr;
      check(gsqa_cloud_synthetic(shape.c_str(), count, seed, &c));
      CloudPtr owned(c, &gsqa_cloud_free);
      check(gsqa_cloud_write(owned.get(), out.c_str(), ascii ? 1 : 0));
      std::cout << json{{"out", out}, {"splats", count}}.dump() << "\n";
    }
  } catch (const ApiFailure& e) {
    std::cerr << "gsqa: " << gsqa_status_name(e.status) << " error: " << e.message << "\n";
    return exit_code(e.status);
  } catch (const json::exception& e) {
    std::cerr << "gsqa: invalid JSON option: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}
