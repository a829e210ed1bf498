#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "anchors.hpp"
#include "backbone.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "tensor.hpp"

namespace selattn {

/// Sliding-window head: 3x3xC window -> D rectified hidden units (with the
/// hidden-layer gain) -> 2k objectness logits (background, object per
/// anchor) and 4k box offsets.
struct RpnParams {
  Tensor window_weight;  // [D, 9C]
  Tensor window_bias;    // [D]
  Tensor cls_weight;     // [2k, D]
  Tensor cls_bias;       // [2k]
  Tensor reg_weight;     // [4k, D]
  Tensor reg_bias;       // [4k]

  static RpnParams zeros(int channels, int hidden, std::size_t k) {
    const auto C = static_cast<std::size_t>(channels);
    const auto D = static_cast<std::size_t>(hidden);
    return {Tensor({D, 9 * C}), Tensor({D}), Tensor({2 * k, D}), Tensor({2 * k}), Tensor({4 * k, D}),
            Tensor({4 * k})};
  }

  std::size_t channels() const { return window_weight.dim(1) / 9; }
  std::size_t hidden() const { return window_weight.dim(0); }
  std::size_t k() const { return cls_bias.size() / 2; }

  template <class F>
  void visit(F&& f) {
    f(std::string_view("rpn.window.weight"), window_weight);
    f(std::string_view("rpn.window.bias"), window_bias);
    f(std::string_view("rpn.cls.weight"), cls_weight);
    f(std::string_view("rpn.cls.bias"), cls_bias);
    f(std::string_view("rpn.reg.weight"), reg_weight);
    f(std::string_view("rpn.reg.bias"), reg_bias);
  }
};

struct Proposal {
  Box box;         // decoded and clipped; degenerate if it fell outside the image
  double score = 0.0;  // objectness probability
  RegressionTarget t;  // raw regression output
  Box anchor;
  int anchor_index = 0;  // index into the forward pass's anchor/proposal order
  int shape_index = 0;
  GridPos position;
};

struct ProposalSet {
  std::vector<Proposal> proposals;
  GridGeometry geometry;
  AttentionRegion region;
  AnchorSpec spec;

  std::size_t size() const { return proposals.size(); }
  bool empty() const { return proposals.empty(); }
};

struct RpnCache {
  int map_w = 0;
  int map_h = 0;
  int channels = 0;
  std::size_t k = 0;
  std::vector<GridPos> positions;
  std::vector<double> windows;     // [P][9C]
  std::vector<double> hidden_pre;  // [P][D]
  std::vector<double> hidden;      // [P][D]
};

/// Gradients of a scalar loss with respect to the head outputs, laid out
/// like the proposals of the forward pass: 2 logits and 4 offsets each.
struct RpnOutputGrad {
  std::vector<double> logits;   // [N][2] (background, object)
  std::vector<double> offsets;  // [N][4]

  explicit RpnOutputGrad(std::size_t n = 0) : logits(2 * n, 0.0), offsets(4 * n, 0.0) {}
};

struct RpnBackwardResult {
  RpnParams params;
  FeatureMap features;
};

namespace detail {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline void gather_window(const FeatureMap& fm, int gx, int gy, double* out) {
  const int C = fm.channels;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      const int x = gx + dx, y = gy + dy;
      double* dst = out + ((dy + 1) * 3 + (dx + 1)) * C;
      if (x < 0 || y < 0 || x >= fm.width || y >= fm.height) {
        std::fill(dst, dst + C, 0.0);
      } else {
        const double* src = &fm.data[fm.index(x, y, 0)];
        std::copy(src, src + C, dst);
      }
    }
  }
}

}  // namespace detail

/// Evaluates the head at every in-region grid position only. Output order
/// is row-major over positions, then anchor shape; the count is exactly
/// |positions| * k before any filtering.
inline ProposalSet rpn_forward(const FeatureMap& fm, const RpnParams& p, const AttentionRegion& region,
                               const AnchorSpec& spec, double image_w, double image_h,
                               RpnCache* cache = nullptr) {
  const std::size_t k = spec.k();
  if (p.k() != k) throw StateError("rpn_forward: head has " + std::to_string(p.k()) +
                                   " anchors per position but the anchor spec has " + std::to_string(k));
  if (p.channels() != static_cast<std::size_t>(fm.channels))
    throw StateError("rpn_forward: feature channels do not match head input");
  const GridGeometry geom{fm.width, fm.height};
  const auto anchors = generate_anchors(geom, region, spec, image_w, image_h);
  const std::size_t P = anchors.size() / k;
  const std::size_t D = p.hidden();
  const std::size_t in = 9 * static_cast<std::size_t>(fm.channels);

  RpnCache local;
  RpnCache& c = cache ? *cache : local;
  c.map_w = fm.width;
  c.map_h = fm.height;
  c.channels = fm.channels;
  c.k = k;
  c.positions.resize(P);
  c.windows.assign(P * in, 0.0);
  c.hidden_pre.assign(P * D, 0.0);
  c.hidden.assign(P * D, 0.0);

  ProposalSet out;
  out.geometry = geom;
  out.region = region;
  out.spec = spec;
  out.proposals.reserve(anchors.size());

  std::vector<double> logits(2 * k), offsets(4 * k);
  const double gn = hidden_gain(in);
  for (std::size_t pi = 0; pi < P; ++pi) {
    const GridPos pos = anchors[pi * k].position;
    c.positions[pi] = pos;
    double* win = &c.windows[pi * in];
    detail::gather_window(fm, pos.gx, pos.gy, win);
    double* hp = &c.hidden_pre[pi * D];
    double* h = &c.hidden[pi * D];
    for (std::size_t d = 0; d < D; ++d) {
      const double* w = p.window_weight.data() + d * in;
      double acc = 0.0;
      for (std::size_t q = 0; q < in; ++q) acc += w[q] * win[q];
      acc = gn * acc + p.window_bias[d];
      hp[d] = acc;
      h[d] = acc > 0.0 ? acc : 0.0;
    }
    for (std::size_t o = 0; o < 2 * k; ++o) {
      const double* w = p.cls_weight.data() + o * D;
      double acc = p.cls_bias[o];
      for (std::size_t d = 0; d < D; ++d) acc += w[d] * h[d];
      logits[o] = acc;
    }
    for (std::size_t o = 0; o < 4 * k; ++o) {
      const double* w = p.reg_weight.data() + o * D;
      double acc = p.reg_bias[o];
      for (std::size_t d = 0; d < D; ++d) acc += w[d] * h[d];
      offsets[o] = acc;
    }
    for (std::size_t a = 0; a < k; ++a) {
      const AnchorRecord& rec = anchors[pi * k + a];
      Proposal prop;
      prop.score = detail::sigmoid(logits[2 * a + 1] - logits[2 * a]);
      prop.t = {offsets[4 * a], offsets[4 * a + 1], offsets[4 * a + 2], offsets[4 * a + 3]};
      prop.anchor = rec.box;
      prop.box = clip(decode(rec.box, prop.t), image_w, image_h);
      prop.anchor_index = static_cast<int>(pi * k + a);
      prop.shape_index = rec.shape_index;
      prop.position = pos;
      out.proposals.push_back(prop);
    }
  }
  return out;
}

/// Exact gradients of the head for upstream gradients on its raw outputs.
/// Positions outside the region were never evaluated and get nothing.
inline RpnBackwardResult rpn_backward(const RpnOutputGrad& upstream, const RpnCache& c, const RpnParams& p) {
  const std::size_t P = c.positions.size();
  const std::size_t k = c.k;
  if (upstream.logits.size() != 2 * k * P || upstream.offsets.size() != 4 * k * P)
    throw std::invalid_argument("rpn_backward: upstream gradient does not match forward cache");
  const std::size_t D = p.hidden();
  const std::size_t in = 9 * static_cast<std::size_t>(c.channels);

  RpnBackwardResult r{zeros_like(p), FeatureMap(c.map_w, c.map_h, c.channels)};
  RpnParams& g = r.params;
  std::vector<double> gh(D), gwin(in);
  const double gn = hidden_gain(in);
  for (std::size_t pi = 0; pi < P; ++pi) {
    const double* gl = &upstream.logits[pi * 2 * k];
    const double* go = &upstream.offsets[pi * 4 * k];
    const bool any = std::any_of(gl, gl + 2 * k, [](double v) { return v != 0.0; }) ||
                     std::any_of(go, go + 4 * k, [](double v) { return v != 0.0; });
    if (!any) continue;
    const double* h = &c.hidden[pi * D];
    const double* hp = &c.hidden_pre[pi * D];
    std::fill(gh.begin(), gh.end(), 0.0);
    for (std::size_t o = 0; o < 2 * k; ++o) {
      if (gl[o] == 0.0) continue;
      g.cls_bias[o] += gl[o];
      double* gw = g.cls_weight.data() + o * D;
      const double* w = p.cls_weight.data() + o * D;
      for (std::size_t d = 0; d < D; ++d) {
        gw[d] += gl[o] * h[d];
        gh[d] += gl[o] * w[d];
      }
    }
    for (std::size_t o = 0; o < 4 * k; ++o) {
      if (go[o] == 0.0) continue;
      g.reg_bias[o] += go[o];
      double* gw = g.reg_weight.data() + o * D;
      const double* w = p.reg_weight.data() + o * D;
      for (std::size_t d = 0; d < D; ++d) {
        gw[d] += go[o] * h[d];
        gh[d] += go[o] * w[d];
      }
    }
    const double* win = &c.windows[pi * in];
    std::fill(gwin.begin(), gwin.end(), 0.0);
    for (std::size_t d = 0; d < D; ++d) {
      if (!(hp[d] > 0.0) || gh[d] == 0.0) continue;
      g.window_bias[d] += gh[d];
      const double gd = gn * gh[d];
      double* gw = g.window_weight.data() + d * in;
      const double* w = p.window_weight.data() + d * in;
      for (std::size_t q = 0; q < in; ++q) {
        gw[q] += gd * win[q];
        gwin[q] += gd * w[q];
      }
    }
    const GridPos pos = c.positions[pi];
    const int C = c.channels;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = pos.gx + dx, y = pos.gy + dy;
        if (x < 0 || y < 0 || x >= c.map_w || y >= c.map_h) continue;
        const double* src = &gwin[((dy + 1) * 3 + (dx + 1)) * C];
        double* dst = &r.features.data[r.features.index(x, y, 0)];
        for (int ch = 0; ch < C; ++ch) dst[ch] += src[ch];
      }
    }
  }
  return r;
}

namespace detail {
// Descending score; ties broken by position (row-major) then anchor shape.
inline bool ranks_before(const Proposal& a, const Proposal& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.position != b.position) return a.position < b.position;
  return a.shape_index < b.shape_index;
}
}  // namespace detail

/// Greedy suppression by descending score: a proposal is dropped iff its
/// IoU with an already kept one exceeds the threshold. Degenerate boxes are
/// dropped.
inline ProposalSet nms(const ProposalSet& ps, double iou_threshold) {
  std::vector<std::size_t> order(ps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detail::ranks_before(ps.proposals[a], ps.proposals[b]);
  });
  ProposalSet out{{}, ps.geometry, ps.region, ps.spec};
  for (std::size_t idx : order) {
    const Proposal& cand = ps.proposals[idx];
    if (cand.box.is_degenerate()) continue;
    bool suppressed = false;
    for (const Proposal& kept : out.proposals) {
      if (iou(kept.box, cand.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) out.proposals.push_back(cand);
  }
  return out;
}

/// The n best proposals in score order (stable for equal scores).
inline ProposalSet select_top(const ProposalSet& ps, std::size_t n) {
  ProposalSet out{ps.proposals, ps.geometry, ps.region, ps.spec};
  std::stable_sort(out.proposals.begin(), out.proposals.end(),
                   [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  if (out.proposals.size() > n) out.proposals.resize(n);
  return out;
}

}  // namespace selattn
