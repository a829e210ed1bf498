#include <gtest/gtest.h>

#include <random>

#include <selattn/backbone.hpp>
#include <selattn/training.hpp>

#include "oracles.hpp"

using namespace selattn;

namespace {

Image random_image(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(static_cast<std::size_t>(w) * h);
  for (double& v : px) v = u(rng);
  return Image(w, h, std::move(px));
}

void randomize(Tensor& t, std::mt19937_64& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
}

}  // namespace

TEST(Image, Validation) {
  EXPECT_THROW(Image(2, 2, std::vector<double>{0, 0, 0}), std::invalid_argument);
  EXPECT_THROW(Image(1, 1, std::vector<double>{1.5}), std::invalid_argument);
  EXPECT_THROW(Image(0, 3, 0.0), std::invalid_argument);
}

TEST(Backbone, ZeroParamsGiveZeroMap) {
  PatchBackbone bb(8);
  const auto p = bb.make_params();
  const FeatureMap fm = bb.forward(Image(64, 48, 0.7), p, nullptr);
  EXPECT_EQ(fm.width, 4);
  EXPECT_EQ(fm.height, 3);
  for (double v : fm.data) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, ShapeLaw) {
  PatchBackbone bb(3);
  const auto p = bb.make_params();
  EXPECT_EQ(bb.forward(Image(320, 320, 0.0), p, nullptr).width, 20);
  for (int w : {16, 17, 31, 32, 100})
    for (int h : {16, 47, 48}) {
      const FeatureMap fm = bb.forward(Image(w, h, 0.0), p, nullptr);
      EXPECT_EQ(fm.width, w / 16);
      EXPECT_EQ(fm.height, h / 16);
      EXPECT_EQ(fm.channels, 3);
    }
  EXPECT_THROW(bb.forward(Image(15, 40, 0.0), p, nullptr), std::invalid_argument);
}

TEST(Backbone, PreActivationIsLinearWithoutBias) {
  std::mt19937_64 rng(1);
  PatchBackbone bb(5);
  auto p = bb.make_params();
  randomize(p.weight, rng, 0.05);
  std::uniform_real_distribution<double> u(0.0, 0.5);
  std::vector<double> px(48 * 32), px2(48 * 32);
  for (std::size_t i = 0; i < px.size(); ++i) px2[i] = 2.0 * (px[i] = u(rng));
  PatchBackbone::Cache c1, c2;
  bb.forward(Image(48, 32, px), p, &c1);
  bb.forward(Image(48, 32, px2), p, &c2);
  for (std::size_t i = 0; i < c1.pre.size(); ++i) EXPECT_EQ(c2.pre[i], 2.0 * c1.pre[i]);
}

TEST(Backbone, Deterministic) {
  std::mt19937_64 rng(2);
  PatchBackbone bb(4);
  auto p = bb.make_params();
  randomize(p.weight, rng, 0.05);
  randomize(p.bias, rng, 0.1);
  const Image img = random_image(64, 64, rng);
  EXPECT_EQ(bb.forward(img, p, nullptr), bb.forward(img, p, nullptr));
}

TEST(Backbone, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(3);
  PatchBackbone bb(4);
  auto p = bb.make_params();
  randomize(p.weight, rng, 0.05);
  PatchBackbone::Cache cache;
  const FeatureMap fm = bb.forward(random_image(48, 48, rng), p, &cache);
  const auto g = backbone_backward(FeatureMap(fm.width, fm.height, fm.channels), cache);
  for (std::size_t i = 0; i < g.weight.size(); ++i) EXPECT_EQ(g.weight[i], 0.0);
  for (std::size_t i = 0; i < g.bias.size(); ++i) EXPECT_EQ(g.bias[i], 0.0);
}

TEST(Backbone, BiasGradientIsGatedUpstreamSum) {
  std::mt19937_64 rng(4);
  PatchBackbone bb(6);
  auto p = bb.make_params();
  randomize(p.weight, rng, 0.05);
  randomize(p.bias, rng, 0.3);
  PatchBackbone::Cache cache;
  const FeatureMap fm = bb.forward(random_image(64, 48, rng), p, &cache);
  FeatureMap up(fm.width, fm.height, fm.channels);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : up.data) v = n(rng);
  const auto g = backbone_backward(up, cache);
  for (int c = 0; c < fm.channels; ++c) {
    double expect = 0.0;
    for (int y = 0; y < fm.height; ++y)
      for (int x = 0; x < fm.width; ++x)
        if (cache.pre[fm.index(x, y, c)] > 0.0) expect += up.at(x, y, c);
    EXPECT_NEAR(g.bias[c], expect, 1e-12);
  }
}

TEST(Backbone, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  PatchBackbone bb(4);
  auto p = bb.make_params();
  randomize(p.weight, rng, 0.05);
  randomize(p.bias, rng, 0.2);
  const Image img = random_image(48, 48, rng);
  FeatureMap up(3, 3, 4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : up.data) v = n(rng);
  auto loss = [&] {
    const FeatureMap fm = bb.forward(img, p, nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < fm.data.size(); ++i) s += up.data[i] * fm.data[i];
    return s;
  };
  PatchBackbone::Cache cache;
  bb.forward(img, p, &cache);
  auto g = bb.make_params();
  bb.backward(up, cache, g);
  EXPECT_LE(oracle::relative_error(g.weight.values(), oracle::numeric_grad(p.weight, loss)), 1e-4);
  EXPECT_LE(oracle::relative_error(g.bias.values(), oracle::numeric_grad(p.bias, loss)), 1e-4);
}

TEST(Backbone, BackwardRejectsShapeMismatch) {
  PatchBackbone bb(2);
  const auto p = bb.make_params();
  PatchBackbone::Cache cache;
  bb.forward(Image(32, 32, 0.5), p, &cache);
  auto g = bb.make_params();
  EXPECT_THROW(bb.backward(FeatureMap(3, 2, 2), cache, g), std::invalid_argument);
}

TEST(Backbone, ChannelMismatchIsAStateError) {
  PatchBackbone bb(2);
  EXPECT_THROW(bb.forward(Image(32, 32, 0.5), PatchBackbone(3).make_params(), nullptr), StateError);
}
