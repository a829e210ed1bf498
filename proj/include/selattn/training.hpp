#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "geometry.hpp"
#include "ground_truth.hpp"
#include "tensor.hpp"

namespace selattn {

using Rng = std::mt19937_64;

enum class LossNormalization { none, mean };

struct LossConfig {
  double lambda = 10.0;
  double iou_pos = 0.8;
  double iou_neg = 0.3;
  LossNormalization normalization = LossNormalization::mean;

  void validate() const {
    if (!(iou_neg >= 0.0 && iou_neg < iou_pos && iou_pos <= 1.0))
      throw std::invalid_argument("LossConfig: need 0 <= iou_neg < iou_pos <= 1");
    if (!(lambda > 0.0)) throw std::invalid_argument("LossConfig: lambda must be positive");
  }
};

struct OptimizerConfig {
  double learning_rate = 0.001;
  double weight_decay = 0.0005;
  double momentum = 0.85;
  double init_std = 0.01;

  void validate() const {
    if (!(learning_rate > 0.0) || !(weight_decay >= 0.0) || !(momentum >= 0.0) || !(init_std > 0.0))
      throw std::invalid_argument("OptimizerConfig: values must be positive");
  }
};

enum class LabelStatus { positive, negative, neutral };

struct AnchorLabel {
  LabelStatus status = LabelStatus::neutral;
  std::optional<RegressionTarget> t_star;  // positives only
  int matched_gt = -1;
  bool promoted = false;  // positive only through the best-anchor fallback

  int p_star() const { return status == LabelStatus::positive ? 1 : status == LabelStatus::negative ? 0 : -1; }
  bool positive() const { return status == LabelStatus::positive; }
  bool negative() const { return status == LabelStatus::negative; }
};

/// IoU-threshold labelling. Positive above iou_pos (matched to the best
/// ground truth), negative below iou_neg against every ground truth,
/// neutral in between. A ground truth left without a positive promotes its
/// highest-IoU anchor(s).
inline std::vector<AnchorLabel> assign_labels(std::span<const Box> anchors, const GroundTruth& gts,
                                              const LossConfig& cfg) {
  cfg.validate();
  std::vector<AnchorLabel> out(anchors.size());
  if (gts.size() == 0) {
    for (auto& l : out) l.status = LabelStatus::negative;
    return out;
  }
  const std::size_t G = gts.size();
  std::vector<double> overlaps(anchors.size() * G);
  for (std::size_t a = 0; a < anchors.size(); ++a)
    for (std::size_t g = 0; g < G; ++g) overlaps[a * G + g] = iou(anchors[a], gts.boxes[g]);

  std::vector<bool> gt_has_positive(G, false);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < G; ++g)
      if (overlaps[a * G + g] > overlaps[a * G + best]) best = g;
    const double v = overlaps[a * G + best];
    AnchorLabel& l = out[a];
    if (v > cfg.iou_pos) {
      l.status = LabelStatus::positive;
      l.matched_gt = static_cast<int>(best);
      l.t_star = encode(anchors[a], gts.boxes[best]);
      gt_has_positive[best] = true;
    } else if (v < cfg.iou_neg) {
      l.status = LabelStatus::negative;
    }
  }
  for (std::size_t g = 0; g < G; ++g) {
    if (gt_has_positive[g]) continue;
    double best = 0.0;
    for (std::size_t a = 0; a < anchors.size(); ++a) best = std::max(best, overlaps[a * G + g]);
    if (best <= 0.0) continue;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      if (overlaps[a * G + g] != best || out[a].positive()) continue;
      out[a].status = LabelStatus::positive;
      out[a].matched_gt = static_cast<int>(g);
      out[a].t_star = encode(anchors[a], gts.boxes[g]);
      out[a].promoted = true;
    }
  }
  return out;
}

enum class SampleStatus { ok, empty };

struct SampledBatch {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  SampleStatus status = SampleStatus::ok;

  std::size_t size() const { return positives.size() + negatives.size(); }
};

/// Strict 1:1 sampling without replacement: min(|pos|, |neg|, batch/2) of
/// each class. Neutrals are never drawn.
inline SampledBatch balanced_sample(std::span<const AnchorLabel> labels, std::size_t batch_size, Rng& rng) {
  if (batch_size % 2 != 0) throw std::invalid_argument("balanced_sample: batch size must be even");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].positive()) pos.push_back(i);
    else if (labels[i].negative()) neg.push_back(i);
  }
  const std::size_t n = std::min({pos.size(), neg.size(), batch_size / 2});
  SampledBatch out;
  if (n == 0) {
    out.status = SampleStatus::empty;
    return out;
  }
  std::sample(pos.begin(), pos.end(), std::back_inserter(out.positives), n, rng);
  std::sample(neg.begin(), neg.end(), std::back_inserter(out.negatives), n, rng);
  return out;
}

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

inline constexpr double kProbEpsilon = 1e-12;

inline double log_loss(double p, int p_star) {
  const double q = std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon);
  return p_star == 1 ? -std::log(q) : -std::log(1.0 - q);
}

/// d log_loss / dp; zero where the clamp is active.
inline double log_loss_grad(double p, int p_star) {
  if (p < kProbEpsilon || p > 1.0 - kProbEpsilon) return 0.0;
  return p_star == 1 ? -1.0 / p : 1.0 / (1.0 - p);
}

/// One proposal's inputs to the objectness/regression loss.
struct LossTerm {
  double p = 0.5;
  RegressionTarget t;
  AnchorLabel label;
  bool in_region = true;
  bool sampled = true;
};

struct RpnLossResult {
  double loss = 0.0;
  double cls_loss = 0.0;
  double reg_loss = 0.0;  // already weighted by lambda
  std::vector<double> contributions;  // per term, summing (in order) to `loss`
  std::vector<double> dp;
  std::vector<RegressionTarget> dt;
  std::size_t cls_terms = 0;
  std::size_t reg_terms = 0;
};

/// Masked two-task objective. A term contributes to the classification sum
/// when it is inside the attention region, sampled and not neutral; it
/// contributes to the regression sum only when it is also positive. Every
/// other term gets exactly zero loss and zero gradient.
inline RpnLossResult rpn_loss(std::span<const LossTerm> terms, const LossConfig& cfg) {
  RpnLossResult r;
  r.contributions.assign(terms.size(), 0.0);
  r.dp.assign(terms.size(), 0.0);
  r.dt.assign(terms.size(), RegressionTarget{});
  auto cls_active = [](const LossTerm& t) { return t.in_region && t.sampled && t.label.p_star() >= 0; };
  auto reg_active = [&](const LossTerm& t) { return cls_active(t) && t.label.positive() && t.label.t_star; };
  for (const LossTerm& t : terms) {
    if (cls_active(t)) ++r.cls_terms;
    if (reg_active(t)) ++r.reg_terms;
  }
  const bool mean = cfg.normalization == LossNormalization::mean;
  const double cls_scale = mean && r.cls_terms ? 1.0 / r.cls_terms : 1.0;
  const double reg_scale = cfg.lambda * (mean && r.reg_terms ? 1.0 / r.reg_terms : 1.0);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const LossTerm& t = terms[i];
    if (!cls_active(t)) continue;
    const int ps = t.label.p_star();
    const double lc = cls_scale * log_loss(t.p, ps);
    r.dp[i] = cls_scale * log_loss_grad(t.p, ps);
    double lr = 0.0;
    if (reg_active(t)) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) {
        const double d = t.t[c] - (*t.label.t_star)[c];
        s += smooth_l1(d);
        r.dt[i][c] = reg_scale * smooth_l1_grad(d);
      }
      lr = reg_scale * s;
    }
    r.cls_loss += lc;
    r.reg_loss += lr;
    r.contributions[i] = lc + lr;
    r.loss += r.contributions[i];
  }
  return r;
}

enum class StepStatus { ok, rejected_non_finite };

/// Momentum SGD with L2 weight decay:
///   v <- momentum * v - lr * (g + weight_decay * w);  w <- w + v
/// Nothing is modified when any gradient is non-finite.
template <ParamGroup P>
StepStatus sgd_step(P& params, P& grads, P& velocity, const OptimizerConfig& cfg) {
  bool finite = true;
  grads.visit([&](auto, Tensor& g) { finite = finite && g.all_finite(); });
  if (!finite) return StepStatus::rejected_non_finite;
  std::vector<Tensor*> gs, vs;
  grads.visit([&](auto, Tensor& g) { gs.push_back(&g); });
  velocity.visit([&](auto, Tensor& v) { vs.push_back(&v); });
  std::size_t i = 0;
  params.visit([&](auto name, Tensor& w) {
    Tensor& g = *gs.at(i);
    Tensor& v = *vs.at(i);
    ++i;
    if (!w.same_shape(g) || !w.same_shape(v))
      throw std::invalid_argument("sgd_step: shape mismatch for " + std::string(name));
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = cfg.momentum * v[j] - cfg.learning_rate * (g[j] + cfg.weight_decay * w[j]);
      w[j] += v[j];
    }
  });
  return StepStatus::ok;
}

inline bool is_bias(std::string_view name) { return name.ends_with(".bias"); }

/// Weights ~ N(0, init_std^2), biases zero.
template <ParamGroup P>
void init_params(P& params, Rng& rng, const OptimizerConfig& cfg) {
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  params.visit([&](auto name, Tensor& t) {
    if (is_bias(name)) {
      t.fill(0.0);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal(rng);
    }
  });
}

}  // namespace selattn
