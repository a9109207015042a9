#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace gsqa::sessions {

struct Stimulus {
  std::string id;
  std::filesystem::path video_path;  // resolved against the index directory
  std::string base_model;
  std::string distortion_kind;
  double level = 0.0;
  bool is_training = false;
};

// [{id, video_path, base_model, distortion_kind, level, is_training}]
std::vector<Stimulus> load_stimulus_index(const std::filesystem::path& index_json);

struct StoreConfig {
  std::filesystem::path index_path;
  std::filesystem::path ratings_csv;
  // Defaults to <ratings_csv>.sessions.jsonl.
  std::filesystem::path log_path;
  // Used only when the index marks no stimulus as training.
  std::size_t training_count = 5;
};

enum class Phase { kTraining, kRating, kDone };
const char* to_string(Phase phase);

struct PlaylistItem {
  std::size_t stimulus = 0;  // index into the stimulus list
  bool training = false;
};

struct SessionView {
  std::string id;
  std::string participant;
  std::uint64_t seed = 0;
  std::size_t cursor = 0;
  std::size_t total = 0;
  std::size_t training_total = 0;
  Phase phase = Phase::kTraining;
  const Stimulus* current = nullptr;
  bool current_is_training = false;
  bool video_served = false;
};

std::string view_to_json(const SessionView& view, const std::string& video_url_prefix = "/v1/stimuli/");
std::string progress_to_json(const SessionView& view);

// Deterministic playlist: training items first, then every rating stimulus,
// each part in seeded Fisher-Yates order.
std::vector<PlaylistItem> make_playlist(const std::vector<Stimulus>& stimuli, std::size_t training_count,
                                        std::uint64_t seed);

// Thread-safe store. Every state change is appended (and fsync'd) to a JSONL
// log; ratings also go to the ratings CSV. Reopening replays the log.
class SessionStore {
 public:
  explicit SessionStore(StoreConfig config);

  SessionView create(const std::string& participant, std::uint64_t seed);
  SessionView current(const std::string& session_id) const;
  SessionView progress(const std::string& session_id) const { return current(session_id); }

  // Returns the video file for `stimulus_id`. When the stimulus is the
  // session's current item, rating it becomes allowed.
  std::filesystem::path serve_video(const std::string& stimulus_id, const std::string& session_id);

  // kDomain for scores outside 1..5, kConflict before the video was served or
  // after completion, kNotFound for unknown sessions.
  SessionView rate(const std::string& session_id, int score);

  const std::vector<Stimulus>& stimuli() const { return stimuli_; }
  std::size_t session_count() const;

 private:
  struct Session {
    std::string id;
    std::string participant;
    std::uint64_t seed = 0;
    std::vector<PlaylistItem> playlist;
    std::size_t cursor = 0;
    bool served = false;
  };

  SessionView view_of(const Session& s) const;
  const Session& find(const std::string& id) const;
  Session& find(const std::string& id);
  void append_log(const std::string& line);
  void append_rating(const std::string& line);
  void replay();

  StoreConfig config_;
  std::vector<Stimulus> stimuli_;
  std::map<std::string, std::size_t> stimulus_index_;
  std::size_t training_count_ = 0;
  std::map<std::string, Session> sessions_;
  mutable std::mutex mutex_;
};

}  // namespace gsqa::sessions
