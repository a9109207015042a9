#include "gsqa/subjective.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "gsqa/error.hpp"
#include "json.hpp"

namespace gsqa::subjective {
namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto a = cell.find_first_not_of(" \t\r");
    const auto b = cell.find_last_not_of(" \t\r");
    out.push_back(a == std::string::npos ? std::string() : cell.substr(a, b - a + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_int(const std::string& s, int& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

bool parse_real(const std::string& s, double& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line) + ": ";
}

}  // namespace

std::vector<std::string> RatingTable::participants() const {
  std::set<std::string> s;
  for (const auto& r : ratings) s.insert(r.participant);
  return {s.begin(), s.end()};
}

std::vector<std::string> RatingTable::stimuli() const {
  std::set<std::string> s;
  for (const auto& r : ratings) s.insert(r.stimulus);
  return {s.begin(), s.end()};
}

RatingTable make_table(const std::vector<Rating>& ratings) {
  RatingTable t;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : ratings) {
    require(r.score >= 1 && r.score <= 5, ErrorKind::kData,
            "score " + std::to_string(r.score) + " by '" + r.participant + "' for '" + r.stimulus +
                "' is outside 1..5");
    if (r.training) {
      ++t.training_rows;
      continue;
    }
    if (!seen.emplace(r.participant, r.stimulus).second) {
      fail(ErrorKind::kData, "participant '" + r.participant + "' rated '" + r.stimulus + "' twice");
    }
    t.ratings.push_back(r);
  }
  t.flagged.assign(t.ratings.size(), false);
  for (const auto& p : t.participants()) t.excluded[p] = false;
  return t;
}

double quantile(std::vector<double> values, double p) {
  require(!values.empty(), ErrorKind::kDomain, "quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = static_cast<double>(values.size() - 1) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

RatingTable screen_participants(const RatingTable& table, const ScreeningConfig& cfg) {
  RatingTable out = table;
  out.flagged.assign(out.ratings.size(), false);
  out.exclusion_reason.clear();
  std::map<std::string, std::vector<std::size_t>> by_stimulus;
  std::map<std::string, std::vector<std::size_t>> by_participant;
  for (std::size_t i = 0; i < out.ratings.size(); ++i) {
    by_stimulus[out.ratings[i].stimulus].push_back(i);
    by_participant[out.ratings[i].participant].push_back(i);
  }

  std::vector<std::string> thin;
  for (const auto& [stimulus, rows] : by_stimulus) {
    if (rows.size() < cfg.min_raters) thin.push_back(stimulus);
  }
  if (!thin.empty()) {
    std::string list;
    for (const auto& s : thin) list += (list.empty() ? "" : ", ") + s;
    fail(ErrorKind::kData, "stimuli with fewer than " + std::to_string(cfg.min_raters) +
                               " raters: " + list);
  }

  for (const auto& [stimulus, rows] : by_stimulus) {
    std::vector<double> scores;
    for (const auto i : rows) scores.push_back(out.ratings[i].score);
    const double q1 = quantile(scores, 0.25);
    const double q3 = quantile(scores, 0.75);
    const double iqr = q3 - q1;
    for (const auto i : rows) {
      const double s = out.ratings[i].score;
      out.flagged[i] = s < q1 - cfg.fence * iqr || s > q3 + cfg.fence * iqr;
    }
  }

  for (const auto& [participant, rows] : by_participant) {
    const auto n = static_cast<double>(rows.size());
    double flagged = 0.0, sum = 0.0, extreme = 0.0;
    for (const auto i : rows) {
      flagged += out.flagged[i] ? 1.0 : 0.0;
      sum += out.ratings[i].score;
      extreme += (out.ratings[i].score == 1 || out.ratings[i].score == 5) ? 1.0 : 0.0;
    }
    const double mean = sum / n;
    double var = 0.0;
    for (const auto i : rows) var += (out.ratings[i].score - mean) * (out.ratings[i].score - mean);
    var /= n;
    std::string reason;
    if (flagged / n > cfg.max_flagged_fraction) {
      reason = "outlier_fraction";
    } else if (var < cfg.min_variance) {
      reason = "uniform_ratings";
    } else if (extreme / n >= cfg.extreme_fraction) {
      reason = "extreme_ratings";
    }
    out.excluded[participant] = !reason.empty();
    if (!reason.empty()) out.exclusion_reason[participant] = reason;
  }
  return out;
}

std::vector<MosRow> compute_mos(const RatingTable& screened) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& s : screened.stimuli()) acc[s] = {0.0, 0};
  for (std::size_t i = 0; i < screened.ratings.size(); ++i) {
    const auto& r = screened.ratings[i];
    const auto ex = screened.excluded.find(r.participant);
    if (screened.flagged[i] || (ex != screened.excluded.end() && ex->second)) continue;
    acc[r.stimulus].first += r.score;
    ++acc[r.stimulus].second;
  }
  std::vector<MosRow> rows;
  for (const auto& [stimulus, sc] : acc) {
    require(sc.second > 0, ErrorKind::kData, "stimulus '" + stimulus + "' has no valid scores");
    rows.push_back({stimulus, sc.first / static_cast<double>(sc.second), sc.second});
  }
  return rows;
}

std::vector<Rating> read_ratings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open ratings file '" + path.string() + "'");
  std::vector<Rating> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (n == 1 && !cells.empty() && cells[0] == "participant_id") continue;
    if (cells.size() != 4 && cells.size() != 5) {
      fail(ErrorKind::kParse, where(path, n) + "expected 4 or 5 columns, found " +
                                  std::to_string(cells.size()));
    }
    Rating r;
    r.participant = cells[0];
    r.stimulus = cells[1];
    if (r.participant.empty() || r.stimulus.empty()) {
      fail(ErrorKind::kParse, where(path, n) + "empty participant or stimulus id");
    }
    if (!parse_int(cells[2], r.score)) {
      fail(ErrorKind::kParse, where(path, n) + "score '" + cells[2] + "' is not an integer");
    }
    r.timestamp = cells[3];
    if (cells.size() == 5) {
      if (cells[4] != "0" && cells[4] != "1") {
        fail(ErrorKind::kParse, where(path, n) + "is_training must be 0 or 1");
      }
      r.training = cells[4] == "1";
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string ratings_csv_header() { return "participant_id,stimulus_id,score,timestamp_iso8601,is_training\n"; }

std::string rating_csv_row(const Rating& r) {
  return r.participant + "," + r.stimulus + "," + std::to_string(r.score) + "," + r.timestamp + "," +
         (r.training ? "1" : "0") + "\n";
}

std::vector<MosRow> read_mos_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open MOS file '" + path.string() + "'");
  std::vector<MosRow> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (n == 1 && !cells.empty() && cells[0] == "stimulus_id") continue;
    if (cells.size() != 3) fail(ErrorKind::kParse, where(path, n) + "expected 3 columns");
    MosRow row;
    row.stimulus = cells[0];
    int raters = 0;
    if (!parse_real(cells[1], row.mos) || !parse_int(cells[2], raters) || raters < 0) {
      fail(ErrorKind::kParse, where(path, n) + "malformed MOS row");
    }
    row.raters = static_cast<std::size_t>(raters);
    rows.push_back(row);
  }
  return rows;
}

void write_mos_csv(const std::vector<MosRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write MOS file '" + path.string() + "'");
  out << "stimulus_id,mos,n_raters\n";
  for (const auto& r : rows) {
    std::array<char, 32> buf;
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), r.mos);
    out << r.stimulus << "," << std::string_view(buf.data(), static_cast<std::size_t>(res.ptr - buf.data()))
        << "," << r.raters << "\n";
  }
  if (!out) fail(ErrorKind::kIo, "write failed for MOS file '" + path.string() + "'");
}

AttachResult export_manifest_mos(const std::vector<MosRow>& mos, const DatasetManifest& manifest) {
  AttachResult result{manifest, 0, {}};
  if (mos.empty()) {
    result.warnings.push_back("MOS table is empty; manifest left unchanged");
    return result;
  }
  std::map<std::string, double> by_id;
  std::vector<std::string> duplicates;
  for (const auto& row : mos) {
    if (!by_id.emplace(row.stimulus, row.mos).second) duplicates.push_back(row.stimulus);
  }
  if (!duplicates.empty()) {
    std::string list;
    for (const auto& d : duplicates) list += (list.empty() ? "" : ", ") + d;
    fail(ErrorKind::kData, "duplicate MOS stimulus ids: " + list);
  }
  std::set<std::string> ids;
  for (const auto& e : manifest.entries) ids.insert(e.id);
  std::vector<std::string> unmatched;
  for (const auto& [id, value] : by_id) {
    if (!ids.contains(id)) unmatched.push_back(id);
  }
  if (!unmatched.empty()) {
    std::string list;
    for (const auto& u : unmatched) list += (list.empty() ? "" : ", ") + u;
    fail(ErrorKind::kData, "MOS stimulus ids not in the manifest: " + list);
  }
  for (auto& e : result.manifest.entries) {
    const auto it = by_id.find(e.id);
    if (it == by_id.end()) continue;
    e.mos = it->second;
    ++result.attached;
  }
  return result;
}

std::string screening_summary_json(const RatingTable& screened, const std::vector<MosRow>& mos) {
  nlohmann::ordered_json j;
  j["ratings"] = screened.ratings.size();
  j["training_rows_ignored"] = screened.training_rows;
  j["flagged"] = std::count(screened.flagged.begin(), screened.flagged.end(), true);
  j["participants"] = screened.excluded.size();
  j["excluded"] = nlohmann::ordered_json::object();
  for (const auto& [p, reason] : screened.exclusion_reason) j["excluded"][p] = reason;
  j["stimuli"] = mos.size();
  return j.dump();
}

}  // namespace gsqa::subjective
