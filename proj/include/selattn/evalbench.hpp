#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geometry.hpp"
#include "ground_truth.hpp"
#include "model.hpp"
#include "synthdata.hpp"

namespace selattn {

// --- Dice evaluation ------------------------------------------------------

struct DiceSummary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::vector<double> values;
};

inline DiceSummary summarize(std::vector<double> values) {
  DiceSummary s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  // Sorted accumulation keeps the aggregate independent of dataset order.
  std::vector<double> sorted = s.values;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  s.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : sorted) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / n);
  return s;
}

struct EvalReport {
  DiceSummary left;
  DiceSummary right;
  DiceSummary overall;  // every (image, class) pair
  std::size_t misses = 0;
  std::size_t samples = 0;
};

/// `detect_fn(const Sample&)` returns detections (at most one per class is
/// used). A class without a detection scores Dice 0 and counts as a miss.
template <class DetectFn>
  requires std::invocable<DetectFn&, const Sample&>
EvalReport evaluate(DetectFn&& detect_fn, const std::vector<Sample>& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<double> left, right, all;
  EvalReport r;
  r.samples = data.size();
  for (const Sample& s : data) {
    const std::vector<Detection> dets = detect_fn(s);
    for (Organ organ : {Organ::left_lung, Organ::right_lung}) {
      const auto gt = std::find(s.gts.labels.begin(), s.gts.labels.end(), organ);
      if (gt == s.gts.labels.end()) continue;
      const Box& gt_box = s.gts.boxes[static_cast<std::size_t>(gt - s.gts.labels.begin())];
      const auto det = std::find_if(dets.begin(), dets.end(), [&](const Detection& d) { return d.cls == organ; });
      double v = 0.0;
      if (det == dets.end()) ++r.misses;
      else v = dice(det->box, gt_box);
      (organ == Organ::left_lung ? left : right).push_back(v);
      all.push_back(v);
    }
  }
  r.left = summarize(std::move(left));
  r.right = summarize(std::move(right));
  r.overall = summarize(std::move(all));
  return r;
}

template <FeatureExtractor Backbone>
EvalReport evaluate(const Model<Backbone>& model, const std::vector<Sample>& data) {
  return evaluate([&](const Sample& s) { return detect(s.image, model).detections; }, data);
}

inline nlohmann::json to_json(const DiceSummary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"values", s.values}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"left_lung", to_json(r.left)},
          {"right_lung", to_json(r.right)},
          {"overall", to_json(r.overall)},
          {"misses", r.misses},
          {"samples", r.samples}};
}

// --- Wilcoxon rank-sum ------------------------------------------------------

struct WilcoxonResult {
  double u = 0.0;        // U statistic of sample a
  double p_value = 1.0;  // two-sided
  bool exact = false;
  bool all_tied = false;  // every observation identical; p = 1 by convention
};

namespace detail {

/// Midranks (1-based) of the pooled sample a ++ b.
inline std::vector<double> midranks(const std::vector<double>& pooled) {
  std::vector<std::size_t> idx(pooled.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return pooled[x] < pooled[y]; });
  std::vector<double> ranks(pooled.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && pooled[idx[j + 1]] == pooled[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) ranks[idx[q]] = r;
    i = j + 1;
  }
  return ranks;
}

inline std::vector<double> pool(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> x = a;
  x.insert(x.end(), b.begin(), b.end());
  return x;
}

inline double u_from_ranks(const std::vector<double>& ranks, const std::vector<std::size_t>& members) {
  double r = 0.0;
  for (std::size_t i : members) r += ranks[i];
  const double n = static_cast<double>(members.size());
  return r - n * (n + 1.0) / 2.0;
}

inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace detail

inline double rank_sum_u(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ranks = detail::midranks(detail::pool(a, b));
  std::vector<std::size_t> members(a.size());
  std::iota(members.begin(), members.end(), std::size_t{0});
  return detail::u_from_ranks(ranks, members);
}

/// Two-sided exact p by enumerating every assignment of the pooled midranks
/// to a group of size |a|: P(|U - E[U]| >= |u_obs - E[U]|).
inline double wilcoxon_exact_p(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ranks = detail::midranks(detail::pool(a, b));
  const std::size_t n = ranks.size(), na = a.size();
  if (n > 30) throw std::invalid_argument("wilcoxon_exact_p: too many observations to enumerate");
  const double mean = static_cast<double>(na) * static_cast<double>(n - na) / 2.0;
  std::vector<std::size_t> obs(na);
  std::iota(obs.begin(), obs.end(), std::size_t{0});
  const double dev_obs = std::abs(detail::u_from_ranks(ranks, obs) - mean);
  std::uint64_t hits = 0, total = 0;
  std::vector<std::size_t> comb(na);
  std::iota(comb.begin(), comb.end(), std::size_t{0});
  while (true) {
    ++total;
    if (std::abs(detail::u_from_ranks(ranks, comb) - mean) >= dev_obs - 1e-9) ++hits;
    // next combination in lexicographic order
    std::size_t i = na;
    while (i > 0 && comb[i - 1] == n - na + i - 1) --i;
    if (i == 0) break;
    ++comb[i - 1];
    for (std::size_t j = i; j < na; ++j) comb[j] = comb[j - 1] + 1;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
inline double wilcoxon_normal_p(const std::vector<double>& a, const std::vector<double>& b) {
  const auto pooled = detail::pool(a, b);
  const double n = static_cast<double>(pooled.size());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double ties = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  const double var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
  if (!(var > 0.0)) return 1.0;
  const double dev = std::abs(rank_sum_u(a, b) - na * nb / 2.0);
  const double z = std::max(dev - 0.5, 0.0) / std::sqrt(var);
  return std::min(1.0, 2.0 * detail::normal_sf(z));
}

inline constexpr std::size_t kWilcoxonExactLimit = 12;

inline WilcoxonResult wilcoxon_rank_sum(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wilcoxon_rank_sum: both samples must be non-empty");
  WilcoxonResult r;
  r.u = rank_sum_u(a, b);
  const auto pooled = detail::pool(a, b);
  if (std::all_of(pooled.begin(), pooled.end(), [&](double v) { return v == pooled.front(); })) {
    r.all_tied = true;
    r.p_value = 1.0;
    return r;
  }
  r.exact = pooled.size() <= kWilcoxonExactLimit;
  r.p_value = r.exact ? wilcoxon_exact_p(a, b) : wilcoxon_normal_p(a, b);
  return r;
}

// --- throughput benchmark ---------------------------------------------------

struct BenchReport {
  std::string config;
  std::size_t positions = 0;
  std::size_t anchors = 0;
  std::size_t after_nms = 0;
  std::size_t proposals = 0;
  double t_propose_ms = 0.0;  // medians over repetitions, summed over images
  double t_nms_ms = 0.0;
  double t_detect_ms = 0.0;
  double dice_mean = std::nan("");
  double dice_std = std::nan("");
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Runs the full detection pipeline over `images` for each named model.
/// Counts are summed over images and are exact; timings are medians of
/// `repetitions` runs after `warmup` discarded runs.
template <FeatureExtractor Backbone>
std::vector<BenchReport> bench_configs(const std::vector<std::pair<std::string, const Model<Backbone>*>>& configs,
                                       const std::vector<Image>& images, std::size_t repetitions,
                                       std::size_t warmup = 2) {
  if (repetitions < 1) throw std::invalid_argument("bench_configs: need at least one repetition");
  std::vector<BenchReport> out;
  for (const auto& [name, model] : configs) {
    BenchReport r;
    r.config = name;
    std::vector<double> tp, tn, td;
    for (std::size_t rep = 0; rep < warmup + repetitions; ++rep) {
      PipelineStats total;
      for (const Image& img : images) {
        const DetectResult d = detect(img, *model);
        total.positions += d.stats.positions;
        total.anchors += d.stats.anchors;
        total.after_nms += d.stats.after_nms;
        total.proposals += d.stats.proposals;
        total.t_propose_ms += d.stats.t_propose_ms;
        total.t_nms_ms += d.stats.t_nms_ms;
        total.t_detect_ms += d.stats.t_detect_ms;
      }
      if (rep < warmup) continue;
      r.positions = total.positions;
      r.anchors = total.anchors;
      r.after_nms = total.after_nms;
      r.proposals = total.proposals;
      tp.push_back(total.t_propose_ms);
      tn.push_back(total.t_nms_ms);
      td.push_back(total.t_detect_ms);
    }
    r.t_propose_ms = median(tp);
    r.t_nms_ms = median(tn);
    r.t_detect_ms = median(td);
    out.push_back(r);
  }
  return out;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchReport>& reports) {
  os << "config,positions,anchors,proposals,dice_mean,dice_std,t_propose_ms,t_nms_ms,t_detect_ms\n";
  for (const BenchReport& r : reports) {
    os << r.config << "," << r.positions << "," << r.anchors << "," << r.proposals << ",";
    if (std::isnan(r.dice_mean)) os << ",";
    else os << r.dice_mean << "," << r.dice_std;
    os << "," << r.t_propose_ms << "," << r.t_nms_ms << "," << r.t_detect_ms << "\n";
  }
}

inline nlohmann::json to_json(const BenchReport& r) {
  nlohmann::json j = {{"config", r.config},       {"positions", r.positions},   {"anchors", r.anchors},
                      {"after_nms", r.after_nms}, {"proposals", r.proposals},   {"t_propose_ms", r.t_propose_ms},
                      {"t_nms_ms", r.t_nms_ms},   {"t_detect_ms", r.t_detect_ms}};
  j["dice_mean"] = std::isnan(r.dice_mean) ? nlohmann::json(nullptr) : nlohmann::json(r.dice_mean);
  j["dice_std"] = std::isnan(r.dice_std) ? nlohmann::json(nullptr) : nlohmann::json(r.dice_std);
  return j;
}

}  // namespace selattn
