#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "anchors.hpp"
#include "backbone.hpp"
#include "detector.hpp"
#include "ground_truth.hpp"
#include "rpn.hpp"
#include "synthdata.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace selattn {

/// Architecture and inference settings.
struct ModelConfig {
  AnchorSpec anchors;
  AttentionRegion region;
  int channels = 32;        // backbone output C
  int rpn_hidden = 64;      // sliding-window dimension D
  int pool_grid = 7;        // ROI pooling G
  int detector_hidden = 128;
  bool context = true;      // append normalized proposal coordinates
  double nms_threshold = 0.7;
  std::size_t top_n = 154;
  int short_side = 600;     // inputs are downscaled so the shorter side is at most this

  std::size_t detector_input() const {
    return static_cast<std::size_t>(pool_grid) * pool_grid * channels + (context ? kContextSize : 0);
  }

  void validate() const {
    anchors.validate();
    region.validate();
    if (channels < 1 || rpn_hidden < 1 || pool_grid < 1 || detector_hidden < 1)
      throw std::invalid_argument("ModelConfig: layer sizes must be >= 1");
    if (short_side < 16) throw std::invalid_argument("ModelConfig: short_side must be >= 16");
    if (!(nms_threshold >= 0.0)) throw std::invalid_argument("ModelConfig: nms threshold must be >= 0");
  }
};

/// All learnable tensors, grouped by stage.
template <FeatureExtractor Backbone = PatchBackbone>
struct ModelParams {
  typename Backbone::Params backbone;
  RpnParams rpn;
  DetectorParams detector;

  template <class F>
  void visit(F&& f) {
    backbone.visit(f);
    rpn.visit(f);
    detector.visit(f);
  }
};

template <FeatureExtractor Backbone = PatchBackbone>
ModelParams<Backbone> make_params(const Backbone& bb, const ModelConfig& cfg) {
  return {bb.make_params(), RpnParams::zeros(bb.channels(), cfg.rpn_hidden, cfg.anchors.k()),
          DetectorParams::zeros(cfg.detector_input(), cfg.detector_hidden, cfg.detector_hidden,
                                cfg.context ? kContextSize : 0)};
}

template <FeatureExtractor Backbone = PatchBackbone>
struct Model {
  ModelConfig config;
  Backbone backbone;
  ModelParams<Backbone> params;

  explicit Model(ModelConfig cfg) : Model(cfg, Backbone(cfg.channels)) {}
  Model(ModelConfig cfg, Backbone bb) : config(std::move(cfg)), backbone(std::move(bb)) {
    config.validate();
    if (backbone.stride() != config.anchors.stride)
      throw std::invalid_argument("Model: backbone stride does not match anchor stride");
    params = make_params(backbone, config);
  }
};

struct PipelineStats {
  std::size_t positions = 0;  // grid positions evaluated
  std::size_t anchors = 0;    // anchor hypotheses evaluated
  std::size_t after_nms = 0;
  std::size_t proposals = 0;  // after top-N
  double t_propose_ms = 0.0;  // backbone + RPN head
  double t_nms_ms = 0.0;      // suppression + top-N
  double t_detect_ms = 0.0;   // pooling + fully connected + softmax
};

namespace detail {
using Clock = std::chrono::steady_clock;
inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// nms followed by select_top(n), stopping once n proposals are kept.
inline ProposalSet nms_top(const ProposalSet& ps, double threshold, std::size_t n) {
  std::vector<std::size_t> order(ps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return ranks_before(ps.proposals[a], ps.proposals[b]); });
  ProposalSet out{{}, ps.geometry, ps.region, ps.spec};
  for (std::size_t idx : order) {
    if (out.size() >= n) break;
    const Proposal& cand = ps.proposals[idx];
    if (cand.box.is_degenerate()) continue;
    const bool suppressed = std::any_of(out.proposals.begin(), out.proposals.end(),
                                        [&](const Proposal& k) { return iou(k.box, cand.box) > threshold; });
    if (!suppressed) out.proposals.push_back(cand);
  }
  return out;
}
}  // namespace detail

/// backbone -> restricted RPN -> NMS -> top-N.
template <FeatureExtractor Backbone>
ProposalSet propose(const Image& img, const Model<Backbone>& m, PipelineStats* stats = nullptr,
                    FeatureMap* features = nullptr) {
  auto t0 = detail::Clock::now();
  FeatureMap fm = m.backbone.forward(img, m.params.backbone, nullptr);
  ProposalSet all = rpn_forward(fm, m.params.rpn, m.config.region, m.config.anchors, img.width(), img.height());
  const double t_prop = detail::ms_since(t0);
  t0 = detail::Clock::now();
  ProposalSet kept = nms(all, m.config.nms_threshold);
  ProposalSet top = select_top(kept, m.config.top_n);
  if (stats) {
    stats->t_propose_ms = t_prop;
    stats->t_nms_ms = detail::ms_since(t0);
    stats->anchors = all.size();
    stats->positions = m.config.anchors.k() ? all.size() / m.config.anchors.k() : 0;
    stats->after_nms = kept.size();
    stats->proposals = top.size();
  }
  if (features) *features = std::move(fm);
  return top;
}

struct Detection {
  Organ cls = Organ::background;
  Box box;
  double confidence = 0.0;
};

enum class DetectStatus { ok, no_proposals };

struct DetectResult {
  std::vector<Detection> detections;
  PipelineStats stats;
  DetectStatus status = DetectStatus::ok;
};

/// Scores every proposal with the detector head and keeps, per organ
/// class, the most confident one. Boxes are the proposal boxes unchanged.
template <FeatureExtractor Backbone>
DetectResult detect(const Image& img, const Model<Backbone>& m) {
  DetectResult r;
  FeatureMap fm;
  const ProposalSet ps = propose(img, m, &r.stats, &fm);
  const auto t0 = detail::Clock::now();
  std::array<std::optional<Detection>, kNumClasses> best;
  for (const Proposal& p : ps.proposals) {
    const auto pooled = roi_pool(fm, p.box, m.config.pool_grid, m.backbone.stride());
    if (!pooled) continue;
    const auto vec = append_context(*pooled, p.box, img.width(), img.height(), m.config.context);
    const ClassProbs probs = detector_forward(vec, m.params.detector);
    for (int c = 1; c < kNumClasses; ++c) {
      if (!best[c] || probs[c] > best[c]->confidence) best[c] = Detection{static_cast<Organ>(c), p.box, probs[c]};
    }
  }
  r.stats.t_detect_ms = detail::ms_since(t0);
  for (int c = 1; c < kNumClasses; ++c)
    if (best[c]) r.detections.push_back(*best[c]);
  if (r.detections.empty()) r.status = DetectStatus::no_proposals;
  return r;
}

// --- joint training ---------------------------------------------------------

struct TrainConfig {
  LossConfig loss;
  OptimizerConfig optimizer;
  std::size_t rpn_batch = 64;        // sampled anchors per step, pooled over images
  std::size_t images_per_step = 2;
  std::size_t detector_batch = 32;   // sampled ROIs per image
  double detector_fg_fraction = 0.25;
  double detector_iou = 0.5;
  bool detector_gt_rois = true;      // ground-truth boxes join the ROI pool

  void validate() const {
    loss.validate();
    optimizer.validate();
    if (rpn_batch == 0 || rpn_batch % 2) throw std::invalid_argument("TrainConfig: rpn_batch must be even and > 0");
    if (images_per_step == 0) throw std::invalid_argument("TrainConfig: images_per_step must be > 0");
    if (detector_fg_fraction < 0.0 || detector_fg_fraction > 1.0)
      throw std::invalid_argument("TrainConfig: detector_fg_fraction must lie in [0,1]");
  }
};

struct StepReport {
  std::size_t step = 0;
  double loss = 0.0;
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double detector = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t promoted = 0;  // positives that came from the best-anchor fallback
  std::size_t detector_rois = 0;
  std::size_t anchors_evaluated = 0;
  bool empty_rpn_batch = false;
  bool empty_detector_batch = false;
  bool rejected = false;  // non-finite gradients, no update applied
};

/// Per-image state the joint step needs between the forward and backward
/// passes.
template <FeatureExtractor Backbone>
struct ImagePass {
  typename Backbone::Cache backbone_cache;
  FeatureMap features;
  RpnCache rpn_cache;
  ProposalSet proposals;
  const std::vector<AnchorLabel>* labels = nullptr;
};

/// Loss and gradients of one joint step for a fixed batch and fixed
/// sampling draws. Exposed separately from the optimizer so it can be
/// checked against finite differences.
template <FeatureExtractor Backbone>
struct JointObjective {
  double loss = 0.0;
  StepReport report;
  ModelParams<Backbone> grads;
};

/// Sampling decisions of a step, drawn once and then held fixed.
struct StepDraws {
  std::vector<std::pair<std::size_t, std::size_t>> rpn;  // (image, proposal)
  std::vector<std::vector<std::pair<Box, Organ>>> rois;  // per image
  bool rpn_empty = false;
};

template <FeatureExtractor Backbone>
class Trainer {
 public:
  Trainer(Model<Backbone> model, TrainConfig cfg, std::vector<Sample> data, std::uint64_t seed)
      : model_(std::move(model)), cfg_(cfg), data_(std::move(data)), rng_(seed), labels_(data_.size()) {
    cfg_.validate();
    Rng init_rng(seed ^ 0x9e3779b97f4a7c15ULL);
    init_params(model_.params, init_rng, cfg_.optimizer);
    velocity_ = zeros_like(model_.params);
    order_.resize(data_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  const Model<Backbone>& model() const { return model_; }
  Model<Backbone>& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_done() const { return step_; }

  /// One approximate-joint step over the next images_per_step samples.
  StepReport step() {
    if (data_.empty()) throw std::invalid_argument("Trainer: empty training set");
    std::vector<std::size_t> batch;
    for (std::size_t i = 0; i < cfg_.images_per_step; ++i) {
      if (cursor_ == 0) std::shuffle(order_.begin(), order_.end(), rng_);
      batch.push_back(order_[cursor_]);
      cursor_ = (cursor_ + 1) % order_.size();
    }
    auto obj = objective(batch, nullptr);
    obj.report.step = ++step_;
    if (sgd_step(model_.params, obj.grads, velocity_, cfg_.optimizer) != StepStatus::ok) obj.report.rejected = true;
    return obj.report;
  }

  /// Forward + backward for the given samples. Sampling uses the trainer's
  /// generator unless `draws` already holds a fixed draw (it is filled in
  /// when empty).
  JointObjective<Backbone> objective(const std::vector<std::size_t>& batch, StepDraws* draws) {
    JointObjective<Backbone> out{0.0, {}, zeros_like(model_.params)};
    StepReport& rep = out.report;
    const ModelConfig& mc = model_.config;
    std::vector<ImagePass<Backbone>> passes(batch.size());

    // Forward passes and anchor labels.
    std::vector<LossTerm> terms;
    std::vector<std::pair<std::size_t, std::size_t>> term_owner;
    std::vector<AnchorLabel> pooled_labels;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Sample& s = data_.at(batch[b]);
      auto& pass = passes[b];
      pass.features = model_.backbone.forward(s.image, model_.params.backbone, &pass.backbone_cache);
      pass.proposals = rpn_forward(pass.features, model_.params.rpn, mc.region, mc.anchors, s.image.width(),
                                   s.image.height(), &pass.rpn_cache);
      pass.labels = &anchor_labels(batch[b], pass.proposals);
      rep.anchors_evaluated += pass.proposals.size();
      for (std::size_t i = 0; i < pass.proposals.size(); ++i) {
        const Proposal& p = pass.proposals.proposals[i];
        const AnchorLabel& l = (*pass.labels)[i];
        terms.push_back({p.score, p.t, l, indicator(p.position, pass.proposals.geometry, mc.region), false});
        term_owner.emplace_back(b, i);
        pooled_labels.push_back(l);
      }
    }

    // Balanced anchor sample pooled over the images.
    StepDraws local_draws;
    StepDraws& d = draws ? *draws : local_draws;
    const bool fresh = d.rpn.empty() && d.rois.empty() && !d.rpn_empty;
    if (fresh) {
      const SampledBatch sb = balanced_sample(pooled_labels, cfg_.rpn_batch, rng_);
      d.rpn_empty = sb.status == SampleStatus::empty;
      for (std::size_t idx : sb.positives) d.rpn.push_back(term_owner[idx]);
      for (std::size_t idx : sb.negatives) d.rpn.push_back(term_owner[idx]);
    }
    rep.empty_rpn_batch = d.rpn_empty;
    {
      std::vector<std::size_t> offset(batch.size() + 1, 0);
      for (std::size_t b = 0; b < batch.size(); ++b) offset[b + 1] = offset[b] + passes[b].proposals.size();
      for (const auto& [b, i] : d.rpn) terms[offset[b] + i].sampled = true;
    }
    for (const LossTerm& t : terms) {
      if (!t.sampled) continue;
      if (t.label.positive()) {
        ++rep.positives;
        if (t.label.promoted) ++rep.promoted;
      } else if (t.label.negative()) {
        ++rep.negatives;
      }
    }
    const RpnLossResult rl = rpn_loss(terms, cfg_.loss);
    rep.rpn_cls = rl.cls_loss;
    rep.rpn_reg = rl.reg_loss;

    // ROI sets for the detector: current proposals (post NMS, top-N) plus
    // ground truth, labelled by overlap, then subsampled.
    if (fresh) {
      d.rois.resize(batch.size());
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const Sample& s = data_.at(batch[b]);
        const ProposalSet top = detail::nms_top(passes[b].proposals, mc.nms_threshold, mc.top_n);
        std::vector<Box> boxes;
        for (const Proposal& p : top.proposals) boxes.push_back(p.box);
        if (cfg_.detector_gt_rois) boxes.insert(boxes.end(), s.gts.boxes.begin(), s.gts.boxes.end());
        std::vector<std::size_t> fg, bg;
        for (std::size_t i = 0; i < boxes.size(); ++i)
          (assign_detector_label(boxes[i], s.gts, cfg_.detector_iou) == Organ::background ? bg : fg).push_back(i);
        const auto n_fg = std::min(fg.size(), static_cast<std::size_t>(
                                                  std::lround(cfg_.detector_fg_fraction * cfg_.detector_batch)));
        const auto n_bg = std::min(bg.size(), cfg_.detector_batch - n_fg);
        std::vector<std::size_t> pick;
        std::sample(fg.begin(), fg.end(), std::back_inserter(pick), n_fg, rng_);
        std::sample(bg.begin(), bg.end(), std::back_inserter(pick), n_bg, rng_);
        for (std::size_t i : pick) d.rois[b].emplace_back(boxes[i], assign_detector_label(boxes[i], s.gts, cfg_.detector_iou));
      }
    }

    // Detector forward/backward; box coordinates are constants.
    std::size_t n_rois = 0;
    for (const auto& r : d.rois) n_rois += r.size();
    rep.detector_rois = n_rois;
    rep.empty_detector_batch = n_rois == 0;
    const double det_weight =
        cfg_.loss.normalization == LossNormalization::mean && n_rois ? 1.0 / static_cast<double>(n_rois) : 1.0;
    std::vector<FeatureMap> fm_grads;
    fm_grads.reserve(batch.size());
    DetectorCache dc;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Sample& s = data_.at(batch[b]);
      FeatureMap g(passes[b].features.width, passes[b].features.height, passes[b].features.channels);
      for (const auto& [box, label] : d.rois[b]) {
        const auto pooled = roi_pool(passes[b].features, box, mc.pool_grid, model_.backbone.stride());
        if (!pooled) continue;
        const auto vec = append_context(*pooled, box, s.image.width(), s.image.height(), mc.context);
        detector_forward(vec, model_.params.detector, &dc);
        const DetectorLoss dl = detector_loss_and_backward(label, dc, model_.params.detector, out.grads.detector,
                                                           det_weight);
        rep.detector += det_weight * dl.loss;
        roi_pool_backward(*pooled, dl.input_grad, g);
      }
      fm_grads.push_back(std::move(g));
    }

    // RPN backward per image, then the shared backbone.
    std::size_t base = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      auto& pass = passes[b];
      const std::size_t n = pass.proposals.size();
      RpnOutputGrad og(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double p = pass.proposals.proposals[i].score;
        const double dl = rl.dp[base + i] * p * (1.0 - p);
        og.logits[2 * i] = -dl;
        og.logits[2 * i + 1] = dl;
        for (int c = 0; c < 4; ++c) og.offsets[4 * i + c] = rl.dt[base + i][c];
      }
      base += n;
      RpnBackwardResult rb = rpn_backward(og, pass.rpn_cache, model_.params.rpn);
      visit_pair(out.grads.rpn, rb.params, [](auto, Tensor& acc, Tensor& g) {
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
      });
      FeatureMap& fg = fm_grads[b];
      for (std::size_t j = 0; j < fg.data.size(); ++j) fg.data[j] += rb.features.data[j];
      model_.backbone.backward(fg, pass.backbone_cache, out.grads.backbone);
    }
    rep.loss = rep.rpn_cls + rep.rpn_reg + rep.detector;
    out.loss = rep.loss;
    return out;
  }

 private:
  const std::vector<AnchorLabel>& anchor_labels(std::size_t sample, const ProposalSet& ps) {
    auto& slot = labels_[sample];
    if (!slot) {
      std::vector<Box> anchors;
      anchors.reserve(ps.size());
      for (const Proposal& p : ps.proposals) anchors.push_back(p.anchor);
      slot = assign_labels(anchors, data_[sample].gts, cfg_.loss);
    }
    return *slot;
  }

  Model<Backbone> model_;
  TrainConfig cfg_;
  std::vector<Sample> data_;
  Rng rng_;
  std::vector<std::optional<std::vector<AnchorLabel>>> labels_;
  ModelParams<Backbone> velocity_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
};

}  // namespace selattn
