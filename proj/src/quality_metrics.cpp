#include "gsqa/quality_metrics.hpp"

#include <Eigen/Dense>
#include <unsupported/Eigen/NonLinearOptimization>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>

#include "gsqa/error.hpp"
#include "json.hpp"

namespace gsqa::metrics {
namespace {

void check_pair(std::span<const double> pred, std::span<const double> target, std::size_t min_len) {
  require(pred.size() == target.size(), ErrorKind::kDomain,
          "prediction and target lengths differ (" + std::to_string(pred.size()) + " vs " +
              std::to_string(target.size()) + ")");
  require(pred.size() >= min_len, ErrorKind::kDomain,
          "metric needs at least " + std::to_string(min_len) + " pairs");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(std::isfinite(pred[i]) && std::isfinite(target[i]), ErrorKind::kDomain,
            "non-finite score at position " + std::to_string(i));
  }
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pearson(std::span<const double> x, std::span<const double> y, const char* what) {
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    fail(ErrorKind::kUndefinedMetric, std::string(what) + " is undefined for a zero-variance input");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Number of tied pairs within runs of equal values of a sorted sequence.
template <typename Eq>
std::int64_t tied_pairs(std::size_t m, Eq equal) {
  std::int64_t ties = 0;
  std::int64_t run = 1;
  for (std::size_t i = 1; i < m; ++i) {
    if (equal(i - 1, i)) {
      ++run;
    } else {
      ties += run * (run - 1) / 2;
      run = 1;
    }
  }
  return ties + run * (run - 1) / 2;
}

std::int64_t merge_count(std::vector<double>& v, std::vector<double>& buf, std::size_t lo,
                         std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = merge_count(v, buf, lo, mid) + merge_count(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<std::int64_t>(mid - i);
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

struct LogisticFunctor {
  using Scalar = double;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;

  std::span<const double> x, y;

  int inputs() const { return 4; }
  int values() const { return static_cast<int>(x.size()); }

  int operator()(const Eigen::VectorXd& b, Eigen::VectorXd& f) const {
    const LogisticMap map{b(0), b(1), b(2), b(3)};
    for (std::size_t i = 0; i < x.size(); ++i) f(static_cast<Eigen::Index>(i)) = map(x[i]) - y[i];
    return 0;
  }

  int df(const Eigen::VectorXd& b, Eigen::MatrixXd& jac) const {
    const double s = std::max(std::abs(b(3)), 1e-12);
    const double sign = b(3) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double t = (x[i] - b(2)) / s;
      const double sig = 1.0 / (1.0 + std::exp(-t));
      const double dsig = sig * (1.0 - sig);
      jac(r, 0) = sig;
      jac(r, 1) = 1.0 - sig;
      jac(r, 2) = (b(0) - b(1)) * dsig * (-1.0 / s);
      jac(r, 3) = (b(0) - b(1)) * dsig * (-t / s) * sign;
    }
    return 0;
  }
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_double(const std::string& text, double& out) {
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, out);
  return r.ec == std::errc() && r.ptr == end;
}

}  // namespace

std::vector<double> midranks(std::span<const double> values) {
  const std::size_t m = values.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(m);
  std::size_t i = 0;
  while (i < m) {
    std::size_t j = i + 1;
    while (j < m && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 (0-based) share rank mean((i+1)..j).
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
    i = j;
  }
  return ranks;
}

double plcc(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 2);
  return pearson(pred, target, "PLCC");
}

double srcc(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 2);
  const auto rp = midranks(pred);
  const auto rt = midranks(target);
  return pearson(rp, rt, "SRCC");
}

double krcc(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 2);
  const std::size_t m = pred.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pred[a] != pred[b] ? pred[a] < pred[b] : target[a] < target[b];
  });
  std::vector<double> ys(m);
  for (std::size_t i = 0; i < m; ++i) ys[i] = target[order[i]];

  const auto total = static_cast<std::int64_t>(m) * static_cast<std::int64_t>(m - 1) / 2;
  const std::int64_t ties_x =
      tied_pairs(m, [&](std::size_t a, std::size_t b) { return pred[order[a]] == pred[order[b]]; });
  const std::int64_t ties_xy = tied_pairs(m, [&](std::size_t a, std::size_t b) {
    return pred[order[a]] == pred[order[b]] && ys[a] == ys[b];
  });
  std::vector<double> buf(m);
  const std::int64_t swaps = merge_count(ys, buf, 0, m);
  const std::int64_t ties_y = tied_pairs(m, [&](std::size_t a, std::size_t b) { return ys[a] == ys[b]; });

  if (ties_x == total || ties_y == total) {
    fail(ErrorKind::kUndefinedMetric, "KRCC is undefined when one side is entirely tied");
  }
  const std::int64_t s = total - ties_x - ties_y + ties_xy - 2 * swaps;
  const double denom = std::sqrt(static_cast<double>(total - ties_x)) *
                       std::sqrt(static_cast<double>(total - ties_y));
  return std::clamp(static_cast<double>(s) / denom, -1.0, 1.0);
}

double rmse(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

MetricSet compute_all(std::span<const double> pred, std::span<const double> target) {
  return {plcc(pred, target), srcc(pred, target), krcc(pred, target), rmse(pred, target)};
}

double LogisticMap::operator()(double x) const {
  const double s = std::max(std::abs(b4), 1e-12);
  return (b1 - b2) / (1.0 + std::exp(-(x - b3) / s)) + b2;
}

std::vector<double> LogisticMap::apply(std::span<const double> xs) const {
  std::vector<double> out;
  out.reserve(xs.size());
  for (const double x : xs) out.push_back((*this)(x));
  return out;
}

LogisticMap fit_logistic(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 4);
  const double mx = mean_of(pred);
  double var = 0.0;
  for (const double x : pred) var += (x - mx) * (x - mx);
  const double sd = std::sqrt(var / static_cast<double>(pred.size()));
  if (sd == 0.0) fail(ErrorKind::kUndefinedMetric, "logistic fit needs non-constant predictions");
  const auto [lo, hi] = std::minmax_element(target.begin(), target.end());
  const bool increasing = plcc(pred, target) >= 0.0;

  Eigen::VectorXd b(4);
  b << (increasing ? *hi : *lo), (increasing ? *lo : *hi), mx, sd;
  LogisticFunctor functor{pred, target};
  Eigen::LevenbergMarquardt<LogisticFunctor> lm(functor);
  lm.parameters.maxfev = 2000;
  lm.minimize(b);
  return {b(0), b(1), b(2), b(3)};
}

MetricSet compute_all_mapped(std::span<const double> pred, std::span<const double> target,
                             LogisticMap* fitted) {
  const LogisticMap map = fit_logistic(pred, target);
  if (fitted != nullptr) *fitted = map;
  const auto mapped = map.apply(pred);
  MetricSet m;
  m.plcc = plcc(mapped, target);
  m.srcc = srcc(pred, target);
  m.krcc = krcc(pred, target);
  m.rmse = rmse(mapped, target);
  return m;
}

ScoreColumn read_score_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open score file '" + path.string() + "'");
  ScoreColumn col;
  std::string line;
  std::size_t line_no = 0;
  int with_ids = -1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const std::string value_text = trim(comma == std::string::npos ? line : line.substr(comma + 1));
    double v = 0.0;
    if (!parse_double(value_text, v)) {
      if (col.values.empty() && with_ids < 0) continue;  // header
      fail(ErrorKind::kParse, path.string() + ":" + std::to_string(line_no) +
                                  ": expected a numeric score, got '" + value_text + "'");
    }
    const int has_id = comma == std::string::npos ? 0 : 1;
    if (with_ids < 0) with_ids = has_id;
    if (has_id != with_ids) {
      fail(ErrorKind::kParse, path.string() + ":" + std::to_string(line_no) + ": inconsistent column count");
    }
    if (has_id) col.ids.push_back(trim(line.substr(0, comma)));
    col.values.push_back(v);
  }
  return col;
}

std::pair<std::vector<double>, std::vector<double>> align_scores(const ScoreColumn& pred,
                                                                 const ScoreColumn& target) {
  if (pred.ids.empty() || target.ids.empty()) {
    require(pred.values.size() == target.values.size(), ErrorKind::kData,
            "score files have different row counts and no ids to join on");
    return {pred.values, target.values};
  }
  std::map<std::string, double> by_id;
  for (std::size_t i = 0; i < target.ids.size(); ++i) {
    if (!by_id.emplace(target.ids[i], target.values[i]).second) {
      fail(ErrorKind::kData, "duplicate target id '" + target.ids[i] + "'");
    }
  }
  std::vector<double> p, t;
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    const auto it = by_id.find(pred.ids[i]);
    if (it == by_id.end()) {
      missing.push_back(pred.ids[i]);
      continue;
    }
    p.push_back(pred.values[i]);
    t.push_back(it->second);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    fail(ErrorKind::kData, "predictions without a target: " + list);
  }
  return {p, t};
}

std::string metrics_to_json(const MetricSet& m, bool logistic) {
  nlohmann::ordered_json j;
  j["plcc"] = m.plcc;
  j["srcc"] = m.srcc;
  j["krcc"] = m.krcc;
  j["rmse"] = m.rmse;
  j["mapping"] = logistic ? "logistic4" : "none";
  return j.dump();
}

}  // namespace gsqa::metrics
