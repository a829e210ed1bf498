#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "config.hpp"
#include "evalbench.hpp"
#include "model.hpp"

namespace selattn {

inline nlohmann::json to_json(const StepReport& r) {
  return {{"step", r.step},
          {"loss", r.loss},
          {"rpn_cls", r.rpn_cls},
          {"rpn_reg", r.rpn_reg},
          {"detector", r.detector},
          {"positives", r.positives},
          {"negatives", r.negatives},
          {"promoted", r.promoted},
          {"detector_rois", r.detector_rois},
          {"anchors_evaluated", r.anchors_evaluated},
          {"empty_rpn_batch", r.empty_rpn_batch},
          {"empty_detector_batch", r.empty_detector_batch},
          {"rejected", r.rejected}};
}

inline Model<PatchBackbone> build_model(const RunConfig& cfg) { return Model<PatchBackbone>(cfg.model); }

inline std::vector<Sample> prepare(std::vector<Sample> data, int short_side) {
  for (Sample& s : data) s = rescale_sample(s, short_side);
  return data;
}

struct TrainHooks {
  std::ostream* log = nullptr;                      // one JSON line per step
  std::filesystem::path checkpoint_dir;             // empty: no periodic checkpoints
  std::function<void(const StepReport&)> on_step;  // optional progress callback
};

/// Trains a fresh model for cfg.steps steps and returns it. The loss log
/// and checkpoints depend only on the config, the data and the seed.
inline Model<PatchBackbone> train_run(const RunConfig& cfg, const std::vector<Sample>& data,
                                      const TrainHooks& hooks = {}) {
  Trainer<PatchBackbone> trainer(build_model(cfg), cfg.train, prepare(data, cfg.model.short_side), cfg.seed);
  const nlohmann::json snapshot = to_json(cfg);
  for (std::size_t s = 1; s <= cfg.steps; ++s) {
    const StepReport r = trainer.step();
    if (hooks.log) *hooks.log << to_json(r).dump() << '\n';
    if (hooks.on_step) hooks.on_step(r);
    if (!hooks.checkpoint_dir.empty() && (s % cfg.checkpoint_every == 0 || s == cfg.steps)) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu", s);
      save_checkpoint(make_checkpoint(trainer.model().params, snapshot), hooks.checkpoint_dir / name);
    }
  }
  if (hooks.log) hooks.log->flush();
  return trainer.model();
}

/// The oracle fixture answers every image with its own ground truth.
struct OracleModel {};

using LoadedModel = std::variant<Model<PatchBackbone>, OracleModel>;

inline LoadedModel load_model(const std::filesystem::path& dir) {
  const Checkpoint ck = load_checkpoint(dir);
  if (ck.kind == "oracle") return OracleModel{};
  RunConfig cfg;
  try {
    cfg = parse_run_config(ck.config);
  } catch (const InputError& e) {
    throw StateError(std::string("checkpoint config: ") + e.what());
  }
  Model<PatchBackbone> m = build_model(cfg);
  restore(m.params, ck);
  return m;
}

inline Checkpoint oracle_checkpoint() {
  Checkpoint ck;
  ck.kind = "oracle";
  return ck;
}

inline std::vector<Detection> oracle_detections(const Sample& s) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < s.gts.boxes.size(); ++i) out.push_back({s.gts.labels[i], s.gts.boxes[i], 1.0});
  return out;
}

inline EvalReport evaluate(const LoadedModel& m, const std::vector<Sample>& data) {
  if (std::holds_alternative<OracleModel>(m)) return evaluate(oracle_detections, data);
  const auto& model = std::get<Model<PatchBackbone>>(m);
  return evaluate(model, prepare(data, model.config.short_side));
}

}  // namespace selattn
