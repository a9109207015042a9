#include "gsqa/sessions.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>
#include <utility>

#include "gsqa/error.hpp"
#include "gsqa/rng.hpp"
#include "gsqa/subjective.hpp"
#include "json.hpp"

namespace gsqa::sessions {
namespace {

using ojson = nlohmann::ordered_json;

constexpr std::uint64_t kTrainingPickStream = 11;
constexpr std::uint64_t kTrainingOrderStream = 12;
constexpr std::uint64_t kRatingOrderStream = 13;

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Appends and fsyncs; the file is created when missing.
void durable_append(const std::filesystem::path& path, const std::string& text,
                    const std::string& header_if_new = {}) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) fail(ErrorKind::kIo, "cannot open '" + path.string() + "' for appending");
  const std::string data = (fresh ? header_if_new : std::string()) + text;
  std::size_t done = 0;
  while (done < data.size()) {
    const auto n = ::write(fd, data.data() + done, data.size() - done);
    if (n < 0) {
      ::close(fd);
      fail(ErrorKind::kIo, "write failed for '" + path.string() + "'");
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
}

std::string new_session_id() {
  std::random_device rd;
  const std::uint64_t v = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
                          static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(splitmix64(v)));
  return buf;
}

}  // namespace

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::kTraining: return "training";
    case Phase::kRating: return "rating";
    case Phase::kDone: return "done";
  }
  return "done";
}

std::vector<Stimulus> load_stimulus_index(const std::filesystem::path& index_json) {
  std::ifstream in(index_json);
  if (!in) fail(ErrorKind::kIo, "cannot open stimulus index '" + index_json.string() + "'");
  ojson j;
  try {
    j = ojson::parse(in);
  } catch (const std::exception& e) {
    fail(ErrorKind::kParse, std::string("stimulus index is not valid JSON: ") + e.what());
  }
  if (!j.is_array()) fail(ErrorKind::kSchema, "stimulus index must be a JSON array");
  std::vector<Stimulus> out;
  std::map<std::string, int> seen;
  const auto dir = index_json.parent_path();
  for (const auto& o : j) {
    try {
      Stimulus s;
      s.id = o.at("id").get<std::string>();
      s.video_path = dir / o.at("video_path").get<std::string>();
      s.base_model = o.value("base_model", std::string());
      s.distortion_kind = o.value("distortion_kind", std::string());
      s.level = o.value("level", 0.0);
      s.is_training = o.value("is_training", false);
      if (seen[s.id]++ > 0) fail(ErrorKind::kSchema, "duplicate stimulus id '" + s.id + "'");
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kSchema, std::string("stimulus index entry: ") + e.what());
    }
  }
  require(!out.empty(), ErrorKind::kData, "stimulus index is empty");
  return out;
}

std::vector<PlaylistItem> make_playlist(const std::vector<Stimulus>& stimuli, std::size_t training_count,
                                        std::uint64_t seed) {
  std::vector<std::size_t> marked, rating;
  for (std::size_t i = 0; i < stimuli.size(); ++i) {
    (stimuli[i].is_training ? marked : rating).push_back(i);
  }
  std::vector<std::size_t> training = marked;
  if (training.empty() && training_count > 0) {
    // Sample familiarization items from the rating set.
    Rng pick(seed, kTrainingPickStream);
    auto pool = rating;
    const std::size_t take = std::min(training_count, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      const auto j = i + static_cast<std::size_t>(pick.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    training.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  }
  Rng order_t(seed, kTrainingOrderStream);
  order_t.shuffle(training);
  Rng order_r(seed, kRatingOrderStream);
  order_r.shuffle(rating);
  std::vector<PlaylistItem> out;
  for (const auto i : training) out.push_back({i, true});
  for (const auto i : rating) out.push_back({i, false});
  return out;
}

std::string view_to_json(const SessionView& v, const std::string& video_url_prefix) {
  ojson j;
  j["session_id"] = v.id;
  j["participant_id"] = v.participant;
  j["phase"] = to_string(v.phase);
  j["cursor"] = v.cursor;
  j["total"] = v.total;
  j["training_total"] = v.training_total;
  if (v.current != nullptr) {
    ojson s;
    s["id"] = v.current->id;
    s["base_model"] = v.current->base_model;
    s["distortion_kind"] = v.current->distortion_kind;
    s["level"] = v.current->level;
    s["is_training"] = v.current_is_training;
    s["video_url"] = video_url_prefix + v.current->id + "/video?session=" + v.id;
    j["stimulus"] = s;
  } else {
    j["stimulus"] = nullptr;
  }
  j["video_served"] = v.video_served;
  return j.dump();
}

std::string progress_to_json(const SessionView& v) {
  ojson j;
  j["session_id"] = v.id;
  j["cursor"] = v.cursor;
  j["total"] = v.total;
  j["phase"] = to_string(v.phase);
  return j.dump();
}

SessionStore::SessionStore(StoreConfig config) : config_(std::move(config)) {
  stimuli_ = load_stimulus_index(config_.index_path);
  for (std::size_t i = 0; i < stimuli_.size(); ++i) stimulus_index_[stimuli_[i].id] = i;
  training_count_ = config_.training_count;
  if (config_.log_path.empty()) {
    config_.log_path = config_.ratings_csv;
    config_.log_path += ".sessions.jsonl";
  }
  require(!config_.ratings_csv.empty(), ErrorKind::kConfig, "ratings CSV path is required");
  replay();
}

void SessionStore::replay() {
  std::ifstream in(config_.log_path);
  if (!in) return;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const std::exception&) {
      // A torn final line from a crash is ignored; anything else is corrupt.
      if (in.peek() == std::char_traits<char>::eof()) break;
      fail(ErrorKind::kParse, config_.log_path.string() + ":" + std::to_string(n) + ": corrupt session log");
    }
    const std::string event = j.value("event", "");
    if (event == "create") {
      Session s;
      s.id = j.at("session");
      s.participant = j.at("participant");
      s.seed = j.at("seed");
      for (const auto& item : j.at("playlist")) {
        const auto it = stimulus_index_.find(item.at("id").get<std::string>());
        if (it == stimulus_index_.end()) {
          fail(ErrorKind::kData, "session log references unknown stimulus " + item.at("id").dump());
        }
        s.playlist.push_back({it->second, item.at("training").get<bool>()});
      }
      sessions_[s.id] = std::move(s);
    } else if (event == "rating") {
      auto it = sessions_.find(j.at("session").get<std::string>());
      if (it == sessions_.end()) fail(ErrorKind::kData, "session log rating for an unknown session");
      it->second.cursor = j.at("position").get<std::size_t>() + 1;
      it->second.served = false;
    }
  }
}

void SessionStore::append_log(const std::string& line) { durable_append(config_.log_path, line + "\n"); }

void SessionStore::append_rating(const std::string& line) {
  durable_append(config_.ratings_csv, line, subjective::ratings_csv_header());
}

SessionView SessionStore::view_of(const Session& s) const {
  SessionView v;
  v.id = s.id;
  v.participant = s.participant;
  v.seed = s.seed;
  v.cursor = s.cursor;
  v.total = s.playlist.size();
  for (const auto& item : s.playlist) v.training_total += item.training ? 1 : 0;
  if (s.cursor >= s.playlist.size()) {
    v.phase = Phase::kDone;
  } else {
    const auto& item = s.playlist[s.cursor];
    v.phase = item.training ? Phase::kTraining : Phase::kRating;
    v.current = &stimuli_[item.stimulus];
    v.current_is_training = item.training;
    v.video_served = s.served;
  }
  return v;
}

const SessionStore::Session& SessionStore::find(const std::string& id) const {
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "unknown session '" + id + "'");
  return it->second;
}

SessionStore::Session& SessionStore::find(const std::string& id) {
  return const_cast<Session&>(std::as_const(*this).find(id));
}

SessionView SessionStore::create(const std::string& participant, std::uint64_t seed) {
  require(!participant.empty() && participant.find_first_of(",\n\r") == std::string::npos,
          ErrorKind::kDomain, "participant id must be non-empty and free of commas and newlines");
  const std::lock_guard lock(mutex_);
  Session s;
  do {
    s.id = new_session_id();
  } while (sessions_.contains(s.id));
  s.participant = participant;
  s.seed = seed;
  s.playlist = make_playlist(stimuli_, training_count_, seed);
  ojson j;
  j["event"] = "create";
  j["session"] = s.id;
  j["participant"] = participant;
  j["seed"] = seed;
  j["shuffle"] = "fisher_yates";
  j["rng"] = kRngAlgorithm;
  j["playlist"] = ojson::array();
  for (const auto& item : s.playlist) {
    j["playlist"].push_back({{"id", stimuli_[item.stimulus].id}, {"training", item.training}});
  }
  j["timestamp"] = now_iso8601();
  append_log(j.dump());
  const auto [it, inserted] = sessions_.emplace(s.id, std::move(s));
  return view_of(it->second);
}

SessionView SessionStore::current(const std::string& session_id) const {
  const std::lock_guard lock(mutex_);
  return view_of(find(session_id));
}

std::filesystem::path SessionStore::serve_video(const std::string& stimulus_id,
                                                const std::string& session_id) {
  const std::lock_guard lock(mutex_);
  const auto it = stimulus_index_.find(stimulus_id);
  if (it == stimulus_index_.end()) fail(ErrorKind::kNotFound, "unknown stimulus '" + stimulus_id + "'");
  if (!session_id.empty()) {
    auto& s = find(session_id);
    if (s.cursor < s.playlist.size() && s.playlist[s.cursor].stimulus == it->second) s.served = true;
  }
  return stimuli_[it->second].video_path;
}

SessionView SessionStore::rate(const std::string& session_id, int score) {
  const std::lock_guard lock(mutex_);
  auto& s = find(session_id);
  if (score < 1 || score > 5) fail(ErrorKind::kDomain, "rating must be an integer in 1..5");
  if (s.cursor >= s.playlist.size()) fail(ErrorKind::kConflict, "session is already complete");
  if (!s.served) fail(ErrorKind::kConflict, "the current video has not been served yet");
  const auto& item = s.playlist[s.cursor];
  subjective::Rating r;
  r.participant = s.participant;
  r.stimulus = stimuli_[item.stimulus].id;
  r.score = score;
  r.timestamp = now_iso8601();
  r.training = item.training;
  ojson j;
  j["event"] = "rating";
  j["session"] = s.id;
  j["position"] = s.cursor;
  j["stimulus"] = r.stimulus;
  j["score"] = score;
  j["training"] = item.training;
  j["timestamp"] = r.timestamp;
  append_log(j.dump());
  append_rating(subjective::rating_csv_row(r));
  ++s.cursor;
  s.served = false;
  return view_of(s);
}

std::size_t SessionStore::session_count() const {
  const std::lock_guard lock(mutex_);
  return sessions_.size();
}

}  // namespace gsqa::sessions
