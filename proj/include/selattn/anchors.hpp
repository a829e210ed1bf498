#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"

namespace selattn {

/// Reference-box pyramid: one anchor shape per (area, ratio) pair, with
/// ratio = width / height.
struct AnchorSpec {
  std::vector<double> areas{66.0 * 66.0, 150.0 * 150.0};
  std::vector<double> ratios{1.0 / 2.0, 3.0 / 4.0};
  int stride = 16;

  std::size_t k() const { return areas.size() * ratios.size(); }

  void validate() const {
    if (areas.empty() || ratios.empty()) throw std::invalid_argument("AnchorSpec: empty areas or ratios");
    for (double a : areas)
      if (!(a > 0.0) || !std::isfinite(a)) throw std::invalid_argument("AnchorSpec: areas must be positive");
    for (double r : ratios)
      if (!(r > 0.0) || !std::isfinite(r)) throw std::invalid_argument("AnchorSpec: ratios must be positive");
    if (stride < 1) throw std::invalid_argument("AnchorSpec: stride must be >= 1");
  }

  /// Six-shape pyramid used as the unrestricted comparison configuration.
  static AnchorSpec baseline() {
    AnchorSpec s;
    s.ratios = {1.0 / 2.0, 1.0, 2.0};
    return s;
  }

  friend bool operator==(const AnchorSpec&, const AnchorSpec&) = default;
};

/// Fractional bounds of the restricted search space on the feature grid.
struct AttentionRegion {
  double alpha1 = 0.15;
  double alpha2 = 0.85;
  double beta1 = 0.15;
  double beta2 = 0.85;

  static AttentionRegion identity() { return {0.0, 1.0, 0.0, 1.0}; }

  void validate() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in01(alpha1) || !in01(alpha2) || !in01(beta1) || !in01(beta2))
      throw std::invalid_argument("AttentionRegion: bounds must lie in [0,1]");
    if (!(alpha1 < alpha2) || !(beta1 < beta2))
      throw std::invalid_argument("AttentionRegion: lower bound must be below upper bound");
  }

  friend bool operator==(const AttentionRegion&, const AttentionRegion&) = default;
};

struct GridGeometry {
  int width = 1;   // W, positions along x
  int height = 1;  // H, positions along y

  void validate() const {
    if (width < 1 || height < 1) throw std::invalid_argument("GridGeometry: W and H must be >= 1");
  }
  std::size_t size() const { return static_cast<std::size_t>(width) * height; }

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

struct GridPos {
  int gx = 0;
  int gy = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
  friend auto operator<=>(const GridPos& a, const GridPos& b) {
    if (auto c = a.gy <=> b.gy; c != 0) return c;
    return a.gx <=> b.gx;
  }
};

struct AnchorShape {
  double w = 0.0;
  double h = 0.0;
};

inline std::vector<AnchorShape> anchor_shapes(const AnchorSpec& spec) {
  spec.validate();
  std::vector<AnchorShape> out;
  out.reserve(spec.k());
  for (double area : spec.areas) {
    for (double ratio : spec.ratios) {
      out.push_back({std::sqrt(area * ratio), std::sqrt(area / ratio)});
    }
  }
  return out;
}

/// Inclusive integer index range [lo, hi] along one axis.
struct AxisRange {
  int lo = 0;
  int hi = -1;
  bool empty() const { return hi < lo; }
  int count() const { return empty() ? 0 : hi - lo + 1; }
  bool contains(int v) const { return v >= lo && v <= hi; }
};

namespace detail {
// Products like 0.15 * 20 land a few ulps off the integer; snap before rounding.
constexpr double kBoundSnap = 1e-9;

inline AxisRange axis_range(double lo_frac, double hi_frac, int n) {
  const double span = static_cast<double>(n - 1);
  return {static_cast<int>(std::ceil(lo_frac * span - kBoundSnap)),
          static_cast<int>(std::floor(hi_frac * span + kBoundSnap))};
}
}  // namespace detail

inline AxisRange region_columns(const GridGeometry& geom, const AttentionRegion& region) {
  return detail::axis_range(region.alpha1, region.alpha2, geom.width);
}

inline AxisRange region_rows(const GridGeometry& geom, const AttentionRegion& region) {
  return detail::axis_range(region.beta1, region.beta2, geom.height);
}

enum class RegionStatus { ok, empty };

struct GridPositions {
  std::vector<GridPos> positions;  // row-major
  RegionStatus status = RegionStatus::ok;
};

inline GridPositions grid_positions(const GridGeometry& geom, const AttentionRegion& region) {
  geom.validate();
  region.validate();
  const AxisRange cols = region_columns(geom, region);
  const AxisRange rows = region_rows(geom, region);
  GridPositions out;
  if (cols.empty() || rows.empty()) {
    out.status = RegionStatus::empty;
    return out;
  }
  out.positions.reserve(static_cast<std::size_t>(cols.count()) * rows.count());
  for (int gy = rows.lo; gy <= rows.hi; ++gy)
    for (int gx = cols.lo; gx <= cols.hi; ++gx) out.positions.push_back({gx, gy});
  return out;
}

inline bool indicator(GridPos pos, const GridGeometry& geom, const AttentionRegion& region) {
  return region_columns(geom, region).contains(pos.gx) && region_rows(geom, region).contains(pos.gy);
}

struct AnchorRecord {
  Box box;
  GridPos position;
  int shape_index = 0;
  bool cross_boundary = false;
};

/// Anchors for every in-region position, position-major then shape order.
/// Centers sit at cell centers; boxes may extend past the image and are
/// flagged rather than removed.
inline std::vector<AnchorRecord> generate_anchors(const GridGeometry& geom, const AttentionRegion& region,
                                                  const AnchorSpec& spec, double image_w, double image_h) {
  const auto shapes = anchor_shapes(spec);
  const auto grid = grid_positions(geom, region);
  std::vector<AnchorRecord> out;
  out.reserve(grid.positions.size() * shapes.size());
  for (const GridPos& p : grid.positions) {
    const double cx = (p.gx + 0.5) * spec.stride;
    const double cy = (p.gy + 0.5) * spec.stride;
    for (std::size_t s = 0; s < shapes.size(); ++s) {
      const auto [w, h] = shapes[s];
      Box b(cx - 0.5 * w, cy - 0.5 * h, w, h);
      const bool cross = b.x() < 0.0 || b.y() < 0.0 || b.right() > image_w || b.bottom() > image_h;
      out.push_back({b, p, static_cast<int>(s), cross});
    }
  }
  return out;
}

struct ReductionStats {
  std::size_t positions_full = 0;
  std::size_t positions_restricted = 0;
  std::size_t anchors_full = 0;
  std::size_t anchors_restricted = 0;
  double position_reduction = 0.0;  // fraction in [0,1]
  double anchor_reduction = 0.0;
};

/// Counts for `region` with `spec_restricted` against the identity region
/// with `spec_full` on the same grid.
inline ReductionStats reduction_stats(const GridGeometry& geom, const AttentionRegion& region,
                                      const AnchorSpec& spec_restricted, const AnchorSpec& spec_full) {
  spec_restricted.validate();
  spec_full.validate();
  ReductionStats s;
  geom.validate();
  region.validate();
  auto count = [&](const AttentionRegion& r) {
    return static_cast<std::size_t>(region_columns(geom, r).count()) * region_rows(geom, r).count();
  };
  s.positions_full = count(AttentionRegion::identity());
  s.positions_restricted = count(region);
  s.anchors_full = s.positions_full * spec_full.k();
  s.anchors_restricted = s.positions_restricted * spec_restricted.k();
  s.position_reduction = 1.0 - static_cast<double>(s.positions_restricted) / s.positions_full;
  s.anchor_reduction = 1.0 - static_cast<double>(s.anchors_restricted) / s.anchors_full;
  return s;
}

/// Fits a region from ground-truth placement: the min/max normalized box
/// centers over a training set, widened by `margin` and mapped to grid
/// fractions. Boxes are in pixels on images of the given size.
inline AttentionRegion fit_region(const std::vector<Box>& boxes, double image_w, double image_h,
                                  double margin = 0.05) {
  if (boxes.empty()) return AttentionRegion::identity();
  double x0 = std::numeric_limits<double>::max(), y0 = x0;
  double x1 = std::numeric_limits<double>::lowest(), y1 = x1;
  for (const Box& b : boxes) {
    x0 = std::min(x0, b.cx() / image_w);
    x1 = std::max(x1, b.cx() / image_w);
    y0 = std::min(y0, b.cy() / image_h);
    y1 = std::max(y1, b.cy() / image_h);
  }
  AttentionRegion r{std::clamp(x0 - margin, 0.0, 1.0), std::clamp(x1 + margin, 0.0, 1.0),
                    std::clamp(y0 - margin, 0.0, 1.0), std::clamp(y1 + margin, 0.0, 1.0)};
  r.validate();
  return r;
}

}  // namespace selattn
