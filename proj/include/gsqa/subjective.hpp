#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "gsqa/distortion.hpp"

namespace gsqa::subjective {

struct Rating {
  std::string participant;
  std::string stimulus;
  int score = 0;
  std::string timestamp;
  bool training = false;
};

struct ScreeningConfig {
  double fence = 1.5;                 // IQR multiplier
  double max_flagged_fraction = 0.05;
  double min_variance = 1e-6;         // population variance over a participant's scores
  double extreme_fraction = 0.95;     // share of scores at 1 or 5
  std::size_t min_raters = 3;
};

// Non-training ratings with per-rating flags and per-participant exclusion.
struct RatingTable {
  std::vector<Rating> ratings;
  std::vector<bool> flagged;  // parallel to ratings
  std::map<std::string, bool> excluded;
  std::map<std::string, std::string> exclusion_reason;
  std::size_t training_rows = 0;  // dropped on construction

  std::vector<std::string> participants() const;
  std::vector<std::string> stimuli() const;
};

// Validates scores (1..5) and (participant, stimulus) uniqueness; drops
// training rows.
RatingTable make_table(const std::vector<Rating>& ratings);

// Quantile by linear interpolation between order statistics at h = (n-1)p.
double quantile(std::vector<double> values, double p);

RatingTable screen_participants(const RatingTable& table, const ScreeningConfig& cfg = {});

struct MosRow {
  std::string stimulus;
  double mos = 0.0;
  std::size_t raters = 0;
};

std::vector<MosRow> compute_mos(const RatingTable& screened);

// participant_id,stimulus_id,score,timestamp_iso8601[,is_training]
std::vector<Rating> read_ratings_csv(const std::filesystem::path& path);
std::string ratings_csv_header();
std::string rating_csv_row(const Rating& r);

// stimulus_id,mos,n_raters
std::vector<MosRow> read_mos_csv(const std::filesystem::path& path);
void write_mos_csv(const std::vector<MosRow>& rows, const std::filesystem::path& path);

struct AttachResult {
  DatasetManifest manifest;
  std::size_t attached = 0;
  std::vector<std::string> warnings;
};

// Unmatched or duplicate stimulus ids raise kData; an empty table leaves the
// manifest unchanged with a warning.
AttachResult export_manifest_mos(const std::vector<MosRow>& mos, const DatasetManifest& manifest);

// Screening summary for the CLI: counts, exclusions and reasons.
std::string screening_summary_json(const RatingTable& screened, const std::vector<MosRow>& mos);

}  // namespace gsqa::subjective
