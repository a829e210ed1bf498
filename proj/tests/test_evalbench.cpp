#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include <selattn/evalbench.hpp>

using namespace selattn;

namespace {

std::vector<Detection> truth(const Sample& s) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < s.gts.size(); ++i) out.push_back({s.gts.labels[i], s.gts.boxes[i], 1.0});
  return out;
}

Sample hand_sample(Box left, Box right) {
  Sample s{Image(100, 100, 0.0), {}, "h"};
  s.gts.add(left, Organ::left_lung);
  s.gts.add(right, Organ::right_lung);
  return s;
}

}  // namespace

TEST(Evaluate, OracleAndNeverDetect) {
  const auto data = generate_dataset(SceneConfig{}, 6, 4);
  const EvalReport perfect = evaluate(truth, data);
  // Identical boxes score 1 up to rounding in the overlap arithmetic.
  EXPECT_NEAR(perfect.overall.mean, 1.0, 1e-12);
  EXPECT_NEAR(perfect.overall.std, 0.0, 1e-12);
  EXPECT_EQ(perfect.misses, 0u);
  EXPECT_EQ(perfect.samples, 6u);
  EXPECT_EQ(perfect.overall.values.size(), 12u);

  const EvalReport none = evaluate([](const Sample&) { return std::vector<Detection>{}; }, data);
  EXPECT_EQ(none.overall.mean, 0.0);
  EXPECT_EQ(none.misses, 12u);
  EXPECT_THROW(evaluate(truth, {}), std::invalid_argument);
}

TEST(Evaluate, HandComputedPair) {
  // Image 1: left exact, right half-overlapping (IoU 1/3 -> Dice 1/2).
  // Image 2: left missed, right exact.
  std::vector<Sample> data = {hand_sample(Box(0, 0, 10, 20), Box(50, 0, 10, 20)),
                              hand_sample(Box(0, 0, 10, 20), Box(50, 0, 10, 20))};
  data[1].id = "h2";
  auto fn = [](const Sample& s) {
    if (s.id == "h") {
      return std::vector<Detection>{{Organ::left_lung, Box(0, 0, 10, 20), 0.9},
                                    {Organ::right_lung, Box(55, 0, 10, 20), 0.8}};
    }
    return std::vector<Detection>{{Organ::right_lung, Box(50, 0, 10, 20), 0.7}};
  };
  const EvalReport r = evaluate(fn, data);
  EXPECT_NEAR(r.left.mean, 0.5, 1e-12);
  EXPECT_NEAR(r.right.mean, 0.75, 1e-12);
  EXPECT_NEAR(r.overall.mean, 2.5 / 4.0, 1e-12);
  EXPECT_NEAR(r.left.std, 0.5, 1e-12);
  EXPECT_EQ(r.misses, 1u);
}

TEST(Evaluate, OrderDoesNotMatter) {
  auto data = generate_dataset(SceneConfig{}, 20, 5);
  auto shifted = [](const Sample& s) {
    auto d = truth(s);
    for (auto& det : d) det.box = Box(det.box.x() + s.image.at(0, 0) * 7.0, det.box.y(), det.box.w(), det.box.h());
    return d;
  };
  const auto a = evaluate(shifted, data);
  std::mt19937_64 rng(1);
  std::shuffle(data.begin(), data.end(), rng);
  const auto b = evaluate(shifted, data);
  EXPECT_EQ(a.overall.mean, b.overall.mean);
  EXPECT_EQ(a.overall.std, b.overall.std);
  EXPECT_EQ(a.left.mean, b.left.mean);
}

TEST(Evaluate, ReportJson) {
  const auto j = to_json(evaluate(truth, generate_dataset(SceneConfig{}, 2, 1)));
  EXPECT_NEAR(j["overall"]["mean"].get<double>(), 1.0, 1e-12);
  EXPECT_EQ(j["samples"], 2);
  EXPECT_TRUE(j.contains("left_lung"));
  EXPECT_TRUE(j.contains("right_lung"));
}

TEST(Wilcoxon, SmallExamples) {
  auto r = wilcoxon_rank_sum({1, 2}, {3, 4});
  EXPECT_EQ(r.u, 0.0);
  EXPECT_TRUE(r.exact);
  EXPECT_NEAR(r.p_value, 1.0 / 3.0, 1e-12);
  r = wilcoxon_rank_sum({3, 4}, {1, 2});
  EXPECT_EQ(r.u, 4.0);
  EXPECT_NEAR(r.p_value, 1.0 / 3.0, 1e-12);
  r = wilcoxon_rank_sum({1, 2, 3}, {1, 2, 3});
  EXPECT_GE(r.p_value, 0.99);
  r = wilcoxon_rank_sum({0.5, 0.5}, {0.5, 0.5, 0.5});
  EXPECT_TRUE(r.all_tied);
  EXPECT_EQ(r.p_value, 1.0);
  EXPECT_THROW(wilcoxon_rank_sum({}, {1.0}), std::invalid_argument);
}

TEST(Wilcoxon, UIsRankSumMinusOffset) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> v(0, 5), len(1, 8);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> a(len(rng)), b(len(rng));
    for (double& x : a) x = v(rng);
    for (double& x : b) x = v(rng);
    // Brute-force U: pairs where a wins, ties count one half.
    double u = 0.0;
    for (double x : a)
      for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
    EXPECT_DOUBLE_EQ(rank_sum_u(a, b), u);
    EXPECT_DOUBLE_EQ(rank_sum_u(a, b) + rank_sum_u(b, a), static_cast<double>(a.size() * b.size()));
    const double p = wilcoxon_rank_sum(a, b).p_value;
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    EXPECT_DOUBLE_EQ(p, wilcoxon_rank_sum(b, a).p_value);
  }
}

TEST(Wilcoxon, LargeSamplesUseNormalApproximation) {
  std::vector<double> a, b;
  for (int i = 0; i < 20; ++i) {
    a.push_back(i);
    b.push_back(i + 30);
  }
  const auto r = wilcoxon_rank_sum(a, b);
  EXPECT_FALSE(r.exact);
  EXPECT_LT(r.p_value, 1e-6);
  // Exact and normal agree closely once samples are moderate.
  std::vector<double> c = {1, 4, 5, 8, 9, 12, 13, 16}, d = {2, 3, 6, 7, 10, 11, 14, 15};
  EXPECT_NEAR(wilcoxon_exact_p(c, d), wilcoxon_normal_p(c, d), 0.02);
}

TEST(Bench, CountsAndCsv) {
  ModelConfig restricted, baseline;
  baseline.region = AttentionRegion::identity();
  baseline.anchors = AnchorSpec::baseline();
  baseline.top_n = 300;
  const Model<PatchBackbone> mr(restricted), mb(baseline);
  const std::vector<Image> images = {Image(640, 640, 0.4)};
  const auto reports = bench_configs<PatchBackbone>({{"restricted", &mr}, {"baseline", &mb}}, images, 2, 0);
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].positions, 784u);
  EXPECT_EQ(reports[1].positions, 1600u);
  EXPECT_EQ(reports[0].anchors, 3136u);
  EXPECT_EQ(reports[1].anchors, 9600u);
  const auto again = bench_configs<PatchBackbone>({{"restricted", &mr}, {"baseline", &mb}}, images, 1, 0);
  EXPECT_EQ(again[0].anchors, reports[0].anchors);
  EXPECT_EQ(again[1].proposals, reports[1].proposals);

  std::ostringstream os;
  write_bench_csv(os, reports);
  std::istringstream is(os.str());
  std::string header, row;
  std::getline(is, header);
  EXPECT_EQ(header, "config,positions,anchors,proposals,dice_mean,dice_std,t_propose_ms,t_nms_ms,t_detect_ms");
  std::getline(is, row);
  EXPECT_EQ(row.rfind("restricted,784,3136,", 0), 0u) << row;
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 8);
  EXPECT_THROW(bench_configs<PatchBackbone>({{"r", &mr}}, images, 0), std::invalid_argument);
  EXPECT_TRUE(to_json(reports[0])["dice_mean"].is_null());
}
