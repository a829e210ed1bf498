#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace selattn {

/// Grayscale image, intensities in [0,1], row-major.
class Image {
 public:
  Image() = default;
  Image(int width, int height, std::vector<double> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1) throw std::invalid_argument("Image: non-positive size");
    if (pixels_.size() != static_cast<std::size_t>(width) * height)
      throw std::invalid_argument("Image: pixel count does not match size");
    for (double v : pixels_)
      if (!std::isfinite(v) || v < 0.0 || v > 1.0)
        throw std::invalid_argument("Image: intensities must be finite and in [0,1]");
  }
  Image(int width, int height, double fill)
      : Image(width, height, std::vector<double>(static_cast<std::size_t>(width) * height, fill)) {}

  int width() const { return width_; }
  int height() const { return height_; }
  double at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  double& at(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  const std::vector<double>& pixels() const { return pixels_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> pixels_;
};

/// W x H x C activations, stored [gy][gx][c].
struct FeatureMap {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int w, int h, int c)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0) {}

  std::size_t index(int gx, int gy, int c) const {
    return (static_cast<std::size_t>(gy) * width + gx) * channels + c;
  }
  double at(int gx, int gy, int c) const { return data[index(gx, gy, c)]; }
  double& at(int gx, int gy, int c) { return data[index(gx, gy, c)]; }
  bool same_shape(const FeatureMap& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// Contract for a feature extractor producing a stride-aligned map. The
/// rest of the pipeline only relies on this surface.
template <class B>
concept FeatureExtractor = requires(const B& b, const Image& img, const typename B::Params& p,
                                    typename B::Params& g, typename B::Cache& cache, const FeatureMap& fm) {
  { b.stride() } -> std::convertible_to<int>;
  { b.channels() } -> std::convertible_to<int>;
  { b.make_params() } -> std::same_as<typename B::Params>;
  { b.forward(img, p, &cache) } -> std::same_as<FeatureMap>;
  { b.backward(fm, cache, g) };
} && ParamGroup<typename B::Params>;

/// Reference extractor: each non-overlapping 16x16 patch is linearly
/// projected to C channels, biased and rectified.
class PatchBackbone {
 public:
  static constexpr int kPatch = 16;
  static constexpr int kPatchSize = kPatch * kPatch;

  struct Params {
    Tensor weight;  // [C, 256]
    Tensor bias;    // [C]

    template <class F>
    void visit(F&& f) {
      f(std::string_view("backbone.weight"), weight);
      f(std::string_view("backbone.bias"), bias);
    }
  };

  struct Cache {
    int grid_w = 0;
    int grid_h = 0;
    std::vector<double> patches;  // [gy][gx][256]
    std::vector<double> pre;      // [gy][gx][C]
  };

  explicit PatchBackbone(int channels = 32) : channels_(channels) {
    if (channels < 1) throw std::invalid_argument("PatchBackbone: channels must be >= 1");
  }

  /// Pre-activation = gain * (W . patch) + bias.
  static double gain() { return hidden_gain(kPatchSize); }

  int stride() const { return kPatch; }
  int channels() const { return channels_; }

  Params make_params() const {
    return {Tensor({static_cast<std::size_t>(channels_), kPatchSize}),
            Tensor({static_cast<std::size_t>(channels_)})};
  }

  FeatureMap forward(const Image& img, const Params& p, Cache* cache) const {
    check_params(p);
    if (img.width() < kPatch || img.height() < kPatch)
      throw std::invalid_argument("backbone_forward: image smaller than one 16x16 patch");
    const int gw = img.width() / kPatch;
    const int gh = img.height() / kPatch;
    const int C = channels_;
    FeatureMap fm(gw, gh, C);
    std::vector<double> patch(kPatchSize);
    Cache local;
    Cache& c = cache ? *cache : local;
    c.grid_w = gw;
    c.grid_h = gh;
    c.patches.assign(static_cast<std::size_t>(gw) * gh * kPatchSize, 0.0);
    c.pre.assign(fm.data.size(), 0.0);
    const double* W = p.weight.data();
    const double gn = gain();
    for (int gy = 0; gy < gh; ++gy) {
      for (int gx = 0; gx < gw; ++gx) {
        double* dst = &c.patches[(static_cast<std::size_t>(gy) * gw + gx) * kPatchSize];
        for (int i = 0; i < kPatch; ++i)
          for (int j = 0; j < kPatch; ++j) dst[i * kPatch + j] = img.at(gx * kPatch + j, gy * kPatch + i);
        for (int ch = 0; ch < C; ++ch) {
          const double* w = W + static_cast<std::size_t>(ch) * kPatchSize;
          double acc = 0.0;
          for (int q = 0; q < kPatchSize; ++q) acc += w[q] * dst[q];
          acc = gn * acc + p.bias[ch];
          const std::size_t idx = fm.index(gx, gy, ch);
          c.pre[idx] = acc;
          fm.data[idx] = acc > 0.0 ? acc : 0.0;
        }
      }
    }
    return fm;
  }

  /// Accumulates parameter gradients into `grads`. Images are inputs, so
  /// nothing flows further upstream.
  void backward(const FeatureMap& grad, const Cache& cache, Params& grads) const {
    if (grad.width != cache.grid_w || grad.height != cache.grid_h || grad.channels != channels_)
      throw std::invalid_argument("backbone_backward: gradient shape does not match forward cache");
    check_params(grads);
    double* gW = grads.weight.data();
    const double gn = gain();
    for (int gy = 0; gy < cache.grid_h; ++gy) {
      for (int gx = 0; gx < cache.grid_w; ++gx) {
        const double* x = &cache.patches[(static_cast<std::size_t>(gy) * cache.grid_w + gx) * kPatchSize];
        for (int ch = 0; ch < channels_; ++ch) {
          const std::size_t idx = grad.index(gx, gy, ch);
          if (!(cache.pre[idx] > 0.0)) continue;
          const double g = grad.data[idx];
          if (g == 0.0) continue;
          grads.bias[ch] += g;
          const double gw = gn * g;
          double* w = gW + static_cast<std::size_t>(ch) * kPatchSize;
          for (int q = 0; q < kPatchSize; ++q) w[q] += gw * x[q];
        }
      }
    }
  }

 private:
  void check_params(const Params& p) const {
    if (p.weight.shape() != std::vector<std::size_t>{static_cast<std::size_t>(channels_), kPatchSize} ||
        p.bias.shape() != std::vector<std::size_t>{static_cast<std::size_t>(channels_)})
      throw StateError("backbone: parameter shapes do not match channel count");
  }

  int channels_;
};

static_assert(FeatureExtractor<PatchBackbone>);

inline FeatureMap backbone_forward(const Image& img, const PatchBackbone::Params& p,
                                   PatchBackbone::Cache* cache = nullptr) {
  return PatchBackbone(static_cast<int>(p.bias.size())).forward(img, p, cache);
}

inline PatchBackbone::Params backbone_backward(const FeatureMap& grad, const PatchBackbone::Cache& cache) {
  PatchBackbone bb(grad.channels);
  auto g = bb.make_params();
  bb.backward(grad, cache, g);
  return g;
}

}  // namespace selattn
