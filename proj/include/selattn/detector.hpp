#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "ground_truth.hpp"
#include "tensor.hpp"

namespace selattn {

/// Max-pooled G x G x C grid for one proposal plus, per cell, the flat
/// feature-map index that won the max (for routing gradients back).
struct PooledFeature {
  int grid = 0;
  int channels = 0;
  std::vector<double> values;       // [by][bx][c]
  std::vector<std::size_t> argmax;  // same layout, index into FeatureMap::data
};

/// Maps a pixel box to feature cells (floor start, ceil end, at least one
/// cell) and max-pools it into G x G bins. Returns nothing when the box
/// maps outside the feature map.
inline std::optional<PooledFeature> roi_pool(const FeatureMap& fm, const Box& box, int G, int stride) {
  if (G < 1 || stride < 1) throw std::invalid_argument("roi_pool: grid and stride must be >= 1");
  if (box.is_degenerate()) return std::nullopt;
  auto axis = [&](double lo, double hi, int n) -> std::optional<std::pair<int, int>> {
    int a = static_cast<int>(std::floor(lo / stride));
    int b = static_cast<int>(std::ceil(hi / stride));
    a = std::clamp(a, 0, n);
    b = std::clamp(b, 0, n);
    if (b <= a) {
      if (a >= n) return std::nullopt;
      b = a + 1;
    }
    return std::pair{a, b};
  };
  const auto xs = axis(box.x(), box.right(), fm.width);
  const auto ys = axis(box.y(), box.bottom(), fm.height);
  if (!xs || !ys) return std::nullopt;
  const auto [x0, x1] = *xs;
  const auto [y0, y1] = *ys;
  const int nx = x1 - x0, ny = y1 - y0;
  const int C = fm.channels;

  PooledFeature out;
  out.grid = G;
  out.channels = C;
  out.values.assign(static_cast<std::size_t>(G) * G * C, 0.0);
  out.argmax.assign(out.values.size(), 0);
  for (int by = 0; by < G; ++by) {
    const int ys0 = y0 + (by * ny) / G;
    const int ys1 = y0 + ((by + 1) * ny + G - 1) / G;
    for (int bx = 0; bx < G; ++bx) {
      const int xs0 = x0 + (bx * nx) / G;
      const int xs1 = x0 + ((bx + 1) * nx + G - 1) / G;
      const std::size_t base = (static_cast<std::size_t>(by) * G + bx) * C;
      for (int c = 0; c < C; ++c) {
        std::size_t best = fm.index(xs0, ys0, c);
        for (int y = ys0; y < ys1; ++y)
          for (int x = xs0; x < xs1; ++x) {
            const std::size_t idx = fm.index(x, y, c);
            if (fm.data[idx] > fm.data[best]) best = idx;
          }
        out.values[base + c] = fm.data[best];
        out.argmax[base + c] = best;
      }
    }
  }
  return out;
}

/// Routes pooled-value gradients to the winning feature cells.
inline void roi_pool_backward(const PooledFeature& pooled, std::span<const double> grad, FeatureMap& fm_grad) {
  if (grad.size() < pooled.values.size()) throw std::invalid_argument("roi_pool_backward: gradient too short");
  for (std::size_t i = 0; i < pooled.values.size(); ++i) fm_grad.data[pooled.argmax[i]] += grad[i];
}

inline constexpr std::size_t kContextSize = 4;

/// Normalized (x, y, w, h) of a box in an image, each clamped to [0,1].
inline std::array<double, kContextSize> box_context(const Box& box, double image_w, double image_h) {
  return {std::clamp(box.x() / image_w, 0.0, 1.0), std::clamp(box.y() / image_h, 0.0, 1.0),
          std::clamp(box.w() / image_w, 0.0, 1.0), std::clamp(box.h() / image_h, 0.0, 1.0)};
}

/// Pooled values followed, when `with_context`, by the normalized box.
inline std::vector<double> append_context(const PooledFeature& pooled, const Box& box, double image_w,
                                          double image_h, bool with_context = true) {
  std::vector<double> v = pooled.values;
  if (with_context) {
    const auto ctx = box_context(box, image_w, image_h);
    v.insert(v.end(), ctx.begin(), ctx.end());
  }
  return v;
}

/// Two rectified fully connected layers (hidden-layer gain) and a 3-way
/// softmax. The first layer scales the pooled block and the trailing
/// context block by their own fan-in gains, so four coordinates are not
/// drowned out by G*G*C appearance features.
struct DetectorParams {
  Tensor fc1_weight;  // [H1, in]
  Tensor fc1_bias;
  Tensor fc2_weight;  // [H2, H1]
  Tensor fc2_bias;
  Tensor out_weight;  // [3, H2]
  Tensor out_bias;
  std::size_t context_inputs = 0;  // trailing fc1 inputs that form the context block

  static DetectorParams zeros(std::size_t input, std::size_t hidden1 = 128, std::size_t hidden2 = 128,
                              std::size_t context = 0) {
    if (context > input) throw std::invalid_argument("DetectorParams: context block larger than input");
    return {Tensor({hidden1, input}),       Tensor({hidden1}),          Tensor({hidden2, hidden1}), Tensor({hidden2}),
            Tensor({kNumClasses, hidden2}), Tensor({kNumClasses}), context};
  }

  std::size_t input_size() const { return fc1_weight.dim(1); }
  std::size_t pooled_inputs() const { return input_size() - context_inputs; }

  template <class F>
  void visit(F&& f) {
    f(std::string_view("detector.fc1.weight"), fc1_weight);
    f(std::string_view("detector.fc1.bias"), fc1_bias);
    f(std::string_view("detector.fc2.weight"), fc2_weight);
    f(std::string_view("detector.fc2.bias"), fc2_bias);
    f(std::string_view("detector.out.weight"), out_weight);
    f(std::string_view("detector.out.bias"), out_bias);
  }
};

using ClassProbs = std::array<double, kNumClasses>;

struct DetectorCache {
  std::vector<double> input;
  std::vector<double> pre1, h1, pre2, h2;
  ClassProbs probs{};
};

namespace detail {
// Inputs [0, split) are scaled by the gain of their own fan-in, inputs
// [split, m) by theirs.
inline std::pair<double, double> block_gains(std::size_t m, std::size_t split) {
  return {split ? hidden_gain(split) : 0.0, split < m ? hidden_gain(m - split) : 0.0};
}

inline void dense_relu(const Tensor& w, const Tensor& b, const std::vector<double>& x, std::vector<double>& pre,
                       std::vector<double>& out, std::size_t tail = 0) {
  const std::size_t n = w.dim(0), m = w.dim(1), split = m - tail;
  const auto [g_head, g_tail] = block_gains(m, split);
  pre.resize(n);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = w.data() + i * m;
    double head = 0.0, rest = 0.0;
    for (std::size_t j = 0; j < split; ++j) head += row[j] * x[j];
    for (std::size_t j = split; j < m; ++j) rest += row[j] * x[j];
    const double acc = g_head * head + g_tail * rest + b[i];
    pre[i] = acc;
    out[i] = acc > 0.0 ? acc : 0.0;
  }
}
}  // namespace detail

inline ClassProbs softmax(const std::array<double, kNumClasses>& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  ClassProbs p{};
  double z = 0.0;
  for (int i = 0; i < kNumClasses; ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

inline ClassProbs detector_forward(std::span<const double> vec, const DetectorParams& p,
                                   DetectorCache* cache = nullptr) {
  if (vec.size() != p.input_size())
    throw std::invalid_argument("detector_forward: input length " + std::to_string(vec.size()) +
                                " does not match expected " + std::to_string(p.input_size()));
  DetectorCache local;
  DetectorCache& c = cache ? *cache : local;
  c.input.assign(vec.begin(), vec.end());
  detail::dense_relu(p.fc1_weight, p.fc1_bias, c.input, c.pre1, c.h1, p.context_inputs);
  detail::dense_relu(p.fc2_weight, p.fc2_bias, c.h1, c.pre2, c.h2);
  std::array<double, kNumClasses> logits{};
  const std::size_t H2 = p.out_weight.dim(1);
  for (int i = 0; i < kNumClasses; ++i) {
    const double* row = p.out_weight.data() + i * H2;
    double acc = p.out_bias[i];
    for (std::size_t j = 0; j < H2; ++j) acc += row[j] * c.h2[j];
    logits[i] = acc;
  }
  c.probs = softmax(logits);
  return c.probs;
}

struct DetectorLoss {
  double loss = 0.0;
  std::vector<double> input_grad;
};

/// Cross-entropy -log p_true for the cached forward pass. Parameter
/// gradients, scaled by `weight`, are accumulated into `grads`; the
/// returned input gradient carries the same scale.
inline DetectorLoss detector_loss_and_backward(Organ true_class, const DetectorCache& c, const DetectorParams& p,
                                               DetectorParams& grads, double weight = 1.0) {
  const int y = static_cast<int>(true_class);
  DetectorLoss r;
  r.loss = -std::log(std::max(c.probs[y], 1e-300));
  std::array<double, kNumClasses> gl{};
  for (int i = 0; i < kNumClasses; ++i) gl[i] = weight * (c.probs[i] - (i == y ? 1.0 : 0.0));

  const std::size_t H2 = p.out_weight.dim(1), H1 = p.fc2_weight.dim(1), in = p.fc1_weight.dim(1);
  std::vector<double> gh2(H2, 0.0), gh1(H1, 0.0);
  for (int i = 0; i < kNumClasses; ++i) {
    grads.out_bias[i] += gl[i];
    double* gw = grads.out_weight.data() + i * H2;
    const double* w = p.out_weight.data() + i * H2;
    for (std::size_t j = 0; j < H2; ++j) {
      gw[j] += gl[i] * c.h2[j];
      gh2[j] += gl[i] * w[j];
    }
  }
  const double gn2 = hidden_gain(H1);
  const std::size_t split = p.pooled_inputs();
  const auto [gn1_head, gn1_tail] = detail::block_gains(in, split);
  for (std::size_t i = 0; i < H2; ++i) {
    if (!(c.pre2[i] > 0.0)) continue;
    grads.fc2_bias[i] += gh2[i];
    const double g = gn2 * gh2[i];
    double* gw = grads.fc2_weight.data() + i * H1;
    const double* w = p.fc2_weight.data() + i * H1;
    for (std::size_t j = 0; j < H1; ++j) {
      gw[j] += g * c.h1[j];
      gh1[j] += g * w[j];
    }
  }
  r.input_grad.assign(in, 0.0);
  for (std::size_t i = 0; i < H1; ++i) {
    if (!(c.pre1[i] > 0.0) || gh1[i] == 0.0) continue;
    grads.fc1_bias[i] += gh1[i];
    double* gw = grads.fc1_weight.data() + i * in;
    const double* w = p.fc1_weight.data() + i * in;
    for (std::size_t j = 0; j < in; ++j) {
      const double g = (j < split ? gn1_head : gn1_tail) * gh1[i];
      gw[j] += g * c.input[j];
      r.input_grad[j] += g * w[j];
    }
  }
  return r;
}

/// Class of the best-overlapping ground truth if that IoU reaches the
/// threshold, background otherwise.
inline Organ assign_detector_label(const Box& proposal, const GroundTruth& gts, double threshold = 0.5) {
  double best = -1.0;
  Organ label = Organ::background;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const double v = iou(proposal, gts.boxes[g]);
    if (v > best) {
      best = v;
      label = gts.labels[g];
    }
  }
  return best >= threshold ? label : Organ::background;
}

inline std::vector<Organ> assign_detector_labels(std::span<const Box> proposals, const GroundTruth& gts,
                                                 double threshold = 0.5) {
  std::vector<Organ> out;
  out.reserve(proposals.size());
  for (const Box& b : proposals) out.push_back(assign_detector_label(b, gts, threshold));
  return out;
}

}  // namespace selattn
