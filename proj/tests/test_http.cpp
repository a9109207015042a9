#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>

#include <chrono>
#include <thread>

#include "support.hpp"
// After support.hpp: resolv.h defines a _res macro that collides with Eigen.
#include "doctest.h"
#include "httplib.h"
#include "json.hpp"

extern char** environ;

using gsqa::testing::TempDir;
using nlohmann::json;

namespace {

// Runs `gsqa serve` for the lifetime of the object.
class Server {
 public:
  Server(const TempDir& dir, int port) : port_(port) {
    const std::string bin = GSQA_CLI_PATH;
    const std::string stimuli = dir.path().string();
    const std::string ratings = (dir / "ratings.csv").string();
    const std::string port_s = std::to_string(port);
    std::vector<std::string> args = {bin, "serve", "--stimuli", stimuli, "--ratings", ratings,
                                     "--port", port_s, "--host", "127.0.0.1", "--training-count", "2"};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    REQUIRE(::posix_spawn(&pid_, bin.c_str(), nullptr, nullptr, argv.data(), environ) == 0);
    httplib::Client probe("127.0.0.1", port);
    for (int i = 0; i < 100; ++i) {
      if (probe.Get("/v1/sessions/none/current")) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    FAIL("server did not start");
  }
  ~Server() {
    ::kill(pid_, SIGTERM);
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

 private:
  pid_t pid_ = 0;
  int port_;
};

void write_index(const TempDir& dir) {
  json index = json::array();
  for (int i = 0; i < 10; ++i) {
    const auto id = "s" + std::to_string(i);
    gsqa::testing::spit(dir / (id + ".mp4"), std::string(1000, static_cast<char>('a' + i)));
    index.push_back({{"id", id}, {"video_path", id + ".mp4"}, {"base_model", "m"},
                     {"distortion_kind", "downsample"}, {"level", 0.5}});
  }
  gsqa::testing::spit(dir / "index.json", index.dump());
}

int pick_port() { return 20000 + static_cast<int>(::getpid() % 20000); }

}  // namespace

TEST_CASE("rating sessions over HTTP") {
  TempDir dir;
  write_index(dir);
  const int port = pick_port();
  std::string session;
  {
    Server server(dir, port);
    auto c = server.client();
    auto res = c.Post("/v1/sessions", R"({"participant_id": "web1", "seed": 4})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 201);
    auto view = json::parse(res->body);
    CHECK(view["playlist_length"] == 12);
    session = view["session_id"];
    auto twin = json::parse(c.Post("/v1/sessions", R"({"participant_id": "web2", "seed": 4})", "application/json")->body);
    CHECK(twin["stimulus"]["id"] == view["stimulus"]["id"]);

    CHECK(c.Post("/v1/sessions/" + session + "/rating", R"({"score": 3})", "application/json")->status == 409);
    CHECK(c.Post("/v1/sessions/" + session + "/rating", R"({"score": 7})", "application/json")->status == 422);
    CHECK(c.Post("/v1/sessions/nope/rating", R"({"score": 3})", "application/json")->status == 404);
    CHECK(c.Get("/v1/sessions/nope/current")->status == 404);
    CHECK(c.Get("/v1/stimuli/zzz/video")->status == 404);

    const std::string url = view["stimulus"]["video_url"];
    httplib::Headers range = {{"Range", "bytes=10-19"}};
    auto part = c.Get(url, range);
    REQUIRE(part);
    CHECK(part->status == 206);
    CHECK(part->body.size() == 10);
    for (int i = 0; i < 5; ++i) {
      auto cur = json::parse(c.Get("/v1/sessions/" + session + "/current")->body);
      const std::string u = cur["stimulus"]["video_url"];
      CHECK(c.Get(u)->status == 200);
      CHECK(c.Post("/v1/sessions/" + session + "/rating", "4", "application/json")->status == 200);
    }
    auto progress = json::parse(c.Get("/v1/sessions/" + session + "/progress")->body);
    CHECK(progress["cursor"] == 5);
  }
  // Restart: the session resumes where it stopped.
  Server server(dir, port + 1);
  auto c = server.client();
  auto cur = json::parse(c.Get("/v1/sessions/" + session + "/current")->body);
  CHECK(cur["cursor"] == 5);
  while (cur["phase"] != "done") {
    const std::string u = cur["stimulus"]["video_url"];
    c.Get(u);
    cur = json::parse(c.Post("/v1/sessions/" + session + "/rating", R"({"score": 2})", "application/json")->body);
  }
  const auto rows = gsqa::subjective::read_ratings_csv(dir / "ratings.csv");
  CHECK(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.training; }) == 10);
  CHECK(rows.size() == 12);
}
