#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace selattn {

/// Axis-aligned rectangle in continuous pixel coordinates: top-left corner
/// plus size. Valid boxes have w > 0 and h > 0; `degenerate()` produces the
/// one permitted exception, an empty marker that only ever acts as an IoU
/// operand.
class Box {
 public:
  Box() = default;

  Box(double x, double y, double w, double h) : x_(x), y_(y), w_(w), h_(h) {
    if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(x) || !std::isfinite(y) ||
        !std::isfinite(w) || !std::isfinite(h)) {
      throw std::invalid_argument("Box: width and height must be positive and finite");
    }
  }

  static Box degenerate(double x = 0.0, double y = 0.0) {
    Box b;
    b.x_ = x;
    b.y_ = y;
    return b;
  }

  static Box from_corners(double x0, double y0, double x1, double y1) {
    return Box(x0, y0, x1 - x0, y1 - y0);
  }

  double x() const { return x_; }
  double y() const { return y_; }
  double w() const { return w_; }
  double h() const { return h_; }
  double right() const { return x_ + w_; }
  double bottom() const { return y_ + h_; }
  double cx() const { return x_ + 0.5 * w_; }
  double cy() const { return y_ + 0.5 * h_; }
  double area() const { return w_ * h_; }
  bool is_degenerate() const { return !(w_ > 0.0 && h_ > 0.0); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  double x_ = 0.0;
  double y_ = 0.0;
  double w_ = 0.0;
  double h_ = 0.0;
};

/// Center-offset / log-size parameterization of a box relative to an anchor.
struct RegressionTarget {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;

  double& operator[](int i) { return i == 0 ? tx : i == 1 ? ty : i == 2 ? tw : th; }
  double operator[](int i) const { return i == 0 ? tx : i == 1 ? ty : i == 2 ? tw : th; }

  friend bool operator==(const RegressionTarget&, const RegressionTarget&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  if (a.is_degenerate() || b.is_degenerate()) return 0.0;
  const double iw = std::min(a.right(), b.right()) - std::max(a.x(), b.x());
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y(), b.y());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

inline double dice(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return 2.0 * inter / (a.area() + b.area());
}

inline RegressionTarget encode(const Box& anchor, const Box& gt) {
  if (anchor.is_degenerate() || gt.is_degenerate()) {
    throw std::invalid_argument("encode: degenerate box");
  }
  return {(gt.cx() - anchor.cx()) / anchor.w(), (gt.cy() - anchor.cy()) / anchor.h(),
          std::log(gt.w() / anchor.w()), std::log(gt.h() / anchor.h())};
}

inline Box decode(const Box& anchor, const RegressionTarget& t) {
  const double cx = anchor.cx() + t.tx * anchor.w();
  const double cy = anchor.cy() + t.ty * anchor.h();
  const double w = anchor.w() * std::exp(t.tw);
  const double h = anchor.h() * std::exp(t.th);
  if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(w) || !std::isfinite(h) ||
      !std::isfinite(cx) || !std::isfinite(cy)) {
    return Box::degenerate(cx, cy);
  }
  return Box(cx - 0.5 * w, cy - 0.5 * h, w, h);
}

/// Intersect with [0,width]x[0,height]; a box fully outside becomes degenerate.
inline Box clip(const Box& b, double width, double height) {
  if (b.is_degenerate()) return b;
  const double x0 = std::clamp(b.x(), 0.0, width);
  const double y0 = std::clamp(b.y(), 0.0, height);
  const double x1 = std::clamp(b.right(), 0.0, width);
  const double y1 = std::clamp(b.bottom(), 0.0, height);
  if (x1 <= x0 || y1 <= y0) return Box::degenerate(x0, y0);
  return Box::from_corners(x0, y0, x1, y1);
}

}  // namespace selattn
