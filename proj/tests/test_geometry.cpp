#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <selattn/geometry.hpp>

#include "oracles.hpp"

using namespace selattn;

TEST(Box, RejectsNonPositiveSize) {
  EXPECT_THROW(Box(0, 0, 0, 5), std::invalid_argument);
  EXPECT_THROW(Box(0, 0, 5, -1), std::invalid_argument);
  EXPECT_THROW(Box(0, 0, NAN, 1), std::invalid_argument);
  EXPECT_TRUE(Box::degenerate().is_degenerate());
}

TEST(Iou, Examples) {
  const Box b(3, 4, 10, 7);
  EXPECT_DOUBLE_EQ(iou(b, b), 1.0);
  EXPECT_NEAR(iou(Box(0, 0, 10, 10), Box(5, 0, 10, 10)), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(iou(Box(0, 0, 10, 10), Box(20, 20, 5, 5)), 0.0);
  EXPECT_EQ(iou(Box(0, 0, 10, 10), Box::degenerate(1, 1)), 0.0);
  // Touching edges share no area.
  EXPECT_EQ(iou(Box(0, 0, 10, 10), Box(10, 0, 10, 10)), 0.0);
}

TEST(Dice, Examples) {
  const Box b(3, 4, 10, 7);
  EXPECT_DOUBLE_EQ(dice(b, b), 1.0);
  EXPECT_NEAR(dice(Box(0, 0, 10, 10), Box(5, 0, 10, 10)), 0.5, 1e-15);
  EXPECT_EQ(dice(Box::degenerate(), b), 0.0);
}

TEST(Iou, MatchesRasterizationOracle) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const auto a = oracle::random_int_box(rng), b = oracle::random_int_box(rng);
    EXPECT_NEAR(iou(a.box(), b.box()), oracle::raster_iou(a, b), 1e-9);
    EXPECT_NEAR(dice(a.box(), b.box()), oracle::raster_dice(a, b), 1e-9);
  }
}

TEST(Iou, SymmetryAndRange) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 2000; ++i) {
    const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
    EXPECT_EQ(iou(a, b), iou(b, a));
    EXPECT_EQ(dice(a, b), dice(b, a));
    const double u = iou(a, b), d = dice(a, b);
    EXPECT_GE(u, 0.0);
    EXPECT_LE(u, d);
    EXPECT_LE(d, 1.0);
  }
}

TEST(Dice, IouIdentity) {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 10000; ++i) {
    const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
    const double u = iou(a, b);
    EXPECT_NEAR(dice(a, b), 2.0 * u / (1.0 + u), 1e-12);
  }
}

TEST(Encode, Examples) {
  const Box b(1, 2, 3, 4);
  EXPECT_EQ(encode(b, b), (RegressionTarget{0, 0, 0, 0}));
  // Anchor centered (50,50), 20x20; target centered (60,50).
  const Box anchor(40, 40, 20, 20), gt(50, 40, 20, 20);
  const auto t = encode(anchor, gt);
  EXPECT_DOUBLE_EQ(t.tx, 0.5);
  EXPECT_DOUBLE_EQ(t.ty, 0.0);
  EXPECT_DOUBLE_EQ(t.tw, 0.0);
  EXPECT_DOUBLE_EQ(t.th, 0.0);
  const Box back = decode(anchor, t);
  EXPECT_NEAR(back.x(), gt.x(), 1e-12);
  EXPECT_NEAR(back.w(), gt.w(), 1e-12);
  EXPECT_THROW(encode(Box::degenerate(), gt), std::invalid_argument);
}

TEST(Decode, Examples) {
  const Box b(7, 8, 9, 10);
  EXPECT_EQ(decode(b, {}), b);
  const Box wide = decode(Box(0, 0, 20, 20), {0, 0, std::log(2.0), 0});
  EXPECT_NEAR(wide.w(), 40.0, 1e-12);
  EXPECT_NEAR(wide.cx(), 10.0, 1e-12);
  EXPECT_TRUE(decode(b, {0, 0, 1e6, 0}).is_degenerate());
}

TEST(Encode, RoundtripProperty) {
  std::mt19937_64 rng(14);
  for (int i = 0; i < 1000; ++i) {
    const Box a = oracle::random_box(rng), g = oracle::random_box(rng);
    const Box r = decode(a, encode(a, g));
    EXPECT_NEAR(r.x(), g.x(), 1e-9 * std::max(1.0, std::abs(g.x())));
    EXPECT_NEAR(r.y(), g.y(), 1e-9 * std::max(1.0, std::abs(g.y())));
    EXPECT_NEAR(r.w(), g.w(), 1e-9 * g.w());
    EXPECT_NEAR(r.h(), g.h(), 1e-9 * g.h());
  }
}

TEST(Clip, Examples) {
  EXPECT_EQ(clip(Box(-5, 0, 10, 10), 100, 100), Box(0, 0, 5, 10));
  const Box inner(10, 20, 30, 40);
  EXPECT_EQ(clip(inner, 100, 100), inner);
  EXPECT_TRUE(clip(Box(200, 200, 10, 10), 100, 100).is_degenerate());
  EXPECT_EQ(clip(Box(-10, -10, 200, 200), 100, 50), Box(0, 0, 100, 50));
}
