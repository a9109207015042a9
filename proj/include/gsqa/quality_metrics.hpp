#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gsqa::metrics {

// All correlation metrics take (predictions, targets) of equal length m >= 2
// and raise kUndefinedMetric when a side has zero variance (or is all tied).

double plcc(std::span<const double> pred, std::span<const double> target);
double srcc(std::span<const double> pred, std::span<const double> target);
// Kendall tau-b, O(m log m).
double krcc(std::span<const double> pred, std::span<const double> target);
double rmse(std::span<const double> pred, std::span<const double> target);

// 1-based fractional ranks; ties share the mean of their positions.
std::vector<double> midranks(std::span<const double> values);

struct MetricSet {
  double plcc = 0.0;
  double srcc = 0.0;
  double krcc = 0.0;
  double rmse = 0.0;
};

MetricSet compute_all(std::span<const double> pred, std::span<const double> target);

// Monotone 4-parameter logistic mapping fitted by Levenberg-Marquardt:
// f(x) = (b1 - b2) / (1 + exp(-(x - b3) / |b4|)) + b2.
struct LogisticMap {
  double b1 = 0.0, b2 = 0.0, b3 = 0.0, b4 = 1.0;
  double operator()(double x) const;
  std::vector<double> apply(std::span<const double> xs) const;
};

LogisticMap fit_logistic(std::span<const double> pred, std::span<const double> target);

// PLCC and RMSE use the mapped predictions; ranks are unaffected.
MetricSet compute_all_mapped(std::span<const double> pred, std::span<const double> target,
                             LogisticMap* fitted = nullptr);

// Score CSV: either one value per line or "id,value" rows; an optional header
// line is skipped when its value field is not numeric.
struct ScoreColumn {
  std::vector<std::string> ids;  // empty when the file has no id column
  std::vector<double> values;
};

ScoreColumn read_score_csv(const std::filesystem::path& path);

// Aligns two score files by id when both carry ids, otherwise by row order.
std::pair<std::vector<double>, std::vector<double>> align_scores(const ScoreColumn& pred,
                                                                 const ScoreColumn& target);

std::string metrics_to_json(const MetricSet& m, bool logistic);

}  // namespace gsqa::metrics
