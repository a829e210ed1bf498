#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include <selattn/model.hpp>

#include "oracles.hpp"

using namespace selattn;

namespace {

ModelConfig mini_config(AttentionRegion region) {
  ModelConfig m;
  m.anchors.areas = {20.0 * 20.0, 30.0 * 30.0};
  m.anchors.ratios = {0.5, 1.0};
  m.region = region;
  m.channels = 2;
  m.rpn_hidden = 4;
  m.pool_grid = 2;
  m.detector_hidden = 4;
  m.top_n = 6;
  m.short_side = 48;
  return m;
}

TrainConfig mini_train() {
  TrainConfig t;
  t.rpn_batch = 8;
  t.images_per_step = 2;
  t.detector_batch = 6;
  t.loss.iou_pos = 0.5;
  t.loss.iou_neg = 0.2;
  return t;
}

std::vector<Sample> mini_data(std::size_t n, std::uint64_t seed) {
  SceneConfig s;
  s.width = s.height = 48;
  return generate_dataset(s, n, seed);
}

std::vector<Tensor*> tensors(ModelParams<PatchBackbone>& p, std::vector<std::string>* names = nullptr) {
  std::vector<Tensor*> out;
  p.visit([&](auto name, Tensor& t) {
    out.push_back(&t);
    if (names) names->emplace_back(name);
  });
  return out;
}

}  // namespace

class JointGradient : public ::testing::TestWithParam<bool> {};

TEST_P(JointGradient, EveryTensorMatchesFiniteDifferences) {
  const AttentionRegion region = GetParam() ? AttentionRegion::identity() : AttentionRegion{0.3, 1.0, 0.0, 0.7};
  Trainer<PatchBackbone> trainer(Model<PatchBackbone>(mini_config(region)), mini_train(), mini_data(4, 21), 5);
  // Larger weights than the reference init so every layer carries signal.
  Rng rng(17);
  std::normal_distribution<double> n(0.0, 0.05);
  trainer.model().params.visit([&](auto, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  });

  const std::vector<std::size_t> batch = {0, 3};
  StepDraws draws;
  auto analytic = trainer.objective(batch, &draws);
  ASSERT_FALSE(draws.rpn.empty());
  ASSERT_GT(analytic.report.detector_rois, 0u);
  auto loss = [&] { return trainer.objective(batch, &draws).loss; };
  EXPECT_EQ(loss(), analytic.loss);

  std::vector<std::string> names;
  auto params = tensors(trainer.model().params, &names);
  auto grads = tensors(analytic.grads);
  ASSERT_EQ(params.size(), grads.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto numeric = oracle::numeric_grad(*params[i], loss);
    EXPECT_LE(oracle::relative_error(grads[i]->values(), numeric), 1e-4) << names[i];
  }
}

INSTANTIATE_TEST_SUITE_P(Regions, JointGradient, ::testing::Bool());

TEST(Trainer, LossDropsOnTinySet) {
  ModelConfig mc;
  TrainConfig tc;
  Trainer<PatchBackbone> trainer(Model<PatchBackbone>(mc), tc, generate_dataset(SceneConfig{}, 5, 3), 7);
  const StepReport first = trainer.step();
  EXPECT_GT(first.loss, 0.0);
  EXPECT_EQ(first.step, 1u);
  double tail = 0.0;
  for (int s = 2; s <= 200; ++s) {
    const StepReport r = trainer.step();
    ASSERT_FALSE(r.rejected);
    ASSERT_TRUE(std::isfinite(r.loss));
    if (s > 190) tail += r.loss / 10.0;
  }
  EXPECT_LE(tail, 0.5 * first.loss);
  EXPECT_EQ(trainer.steps_done(), 200u);
}

TEST(Trainer, BaselineEvaluatesMoreAnchors) {
  const auto data = generate_dataset(SceneConfig{}, 2, 1);
  ModelConfig restricted, baseline;
  baseline.region = AttentionRegion::identity();
  baseline.anchors = AnchorSpec::baseline();
  Trainer<PatchBackbone> a(Model<PatchBackbone>(restricted), TrainConfig{}, data, 1);
  Trainer<PatchBackbone> b(Model<PatchBackbone>(baseline), TrainConfig{}, data, 1);
  const auto ra = a.step(), rb = b.step();
  // 320x320 -> 20x20 grid: 14x14 positions x 4 shapes vs 20x20 x 6, two images.
  EXPECT_EQ(ra.anchors_evaluated, 2u * 196u * 4u);
  EXPECT_EQ(rb.anchors_evaluated, 2u * 400u * 6u);
  EXPECT_LE(static_cast<double>(ra.anchors_evaluated), 0.33 * static_cast<double>(rb.anchors_evaluated));
}

TEST(Trainer, SameSeedSameRun) {
  const auto data = mini_data(6, 2);
  auto run = [&] {
    Trainer<PatchBackbone> t(Model<PatchBackbone>(mini_config(AttentionRegion::identity())), mini_train(), data, 9);
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(t.step().loss);
    return std::pair{losses, t.model().params.detector.fc1_weight};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Trainer, EmptyDatasetIsRejected) {
  Trainer<PatchBackbone> t(Model<PatchBackbone>(ModelConfig{}), TrainConfig{}, {}, 1);
  EXPECT_THROW(t.step(), std::invalid_argument);
  TrainConfig odd;
  odd.rpn_batch = 7;
  EXPECT_THROW(Trainer<PatchBackbone>(Model<PatchBackbone>(ModelConfig{}), odd, {}, 1), std::invalid_argument);
}

TEST(Pipeline, DetectReturnsProposalBoxes) {
  ModelConfig mc;
  Trainer<PatchBackbone> t(Model<PatchBackbone>(mc), TrainConfig{}, generate_dataset(SceneConfig{}, 4, 1), 3);
  for (int i = 0; i < 20; ++i) t.step();
  const Sample s = generate_dataset(SceneConfig{}, 1, 99)[0];
  PipelineStats stats;
  const ProposalSet ps = propose(s.image, t.model(), &stats);
  EXPECT_EQ(stats.anchors, 196u * 4u);
  EXPECT_EQ(stats.positions, 196u);
  EXPECT_LE(ps.size(), mc.top_n);
  EXPECT_EQ(stats.proposals, ps.size());
  EXPECT_LE(stats.proposals, stats.after_nms);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = i + 1; j < ps.size(); ++j) EXPECT_LE(iou(ps.proposals[i].box, ps.proposals[j].box), 0.7);

  const DetectResult r = detect(s.image, t.model());
  EXPECT_EQ(r.status, DetectStatus::ok);
  EXPECT_EQ(r.detections.size(), 2u);
  for (const Detection& d : r.detections) {
    EXPECT_NE(d.cls, Organ::background);
    EXPECT_GE(d.confidence, 0.0);
    EXPECT_LE(d.confidence, 1.0);
    EXPECT_TRUE(std::any_of(ps.proposals.begin(), ps.proposals.end(),
                            [&](const Proposal& p) { return p.box == d.box; }));
  }
}

TEST(Pipeline, ModelRejectsMismatchedStride) {
  ModelConfig mc;
  mc.anchors.stride = 8;
  EXPECT_THROW(Model<PatchBackbone>{mc}, std::invalid_argument);
}
