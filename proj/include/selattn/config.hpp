#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <type_traits>
#include <string>

#include <nlohmann/json.hpp>

#include "anchors.hpp"
#include "error.hpp"
#include "model.hpp"
#include "synthdata.hpp"
#include "training.hpp"

namespace selattn {

/// Everything a run needs, loaded from one JSON document layered over a
/// named preset ("paper" unless the document sets "defaults").
struct RunConfig {
  std::string defaults = "paper";
  ModelConfig model;
  TrainConfig train;
  SceneConfig scene;
  std::size_t steps = 5000;
  std::size_t checkpoint_every = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    train.validate();
    scene.validate();
  }
};

/// "paper": attention region with 15% shrink per side, four tailored
/// anchors, top 154 proposals. "baseline": full grid, six anchors, top 300.
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.defaults = name;
  if (name == "paper") return c;
  if (name == "baseline") {
    c.model.region = AttentionRegion::identity();
    c.model.anchors = AnchorSpec::baseline();
    c.model.top_n = 300;
    return c;
  }
  throw InputError("config.defaults: unknown preset '" + name + "' (expected paper or baseline)");
}

namespace detail {

using Json = nlohmann::json;

/// Reads declared keys of one JSON object, rejecting anything undeclared.
class FieldReader {
 public:
  FieldReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw InputError(where() + " must be an object");
  }

  template <class T, class Check>
  void read(const char* key, T& out, Check check, const char* requirement) {
    seen_.emplace(key);
    if (!obj_.contains(key)) return;
    const Json& v = obj_.at(key);
    T value{};
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw InputError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw InputError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw InputError("");
      }
      value = v.get<T>();
    } catch (const std::exception&) {
      throw InputError(field(key) + ": wrong type (" + requirement + ")");
    }
    if (!check(value)) throw InputError(field(key) + ": must be " + requirement);
    out = value;
  }

  template <class T>
  void read(const char* key, T& out) {
    read(key, out, [](const T&) { return true; }, type_name<T>());
  }

  std::optional<FieldReader> child(const char* key) {
    seen_.emplace(key);
    if (!obj_.contains(key)) return std::nullopt;
    return FieldReader(obj_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [k, _] : obj_.items())
      if (!seen_.count(k)) throw InputError(field(k.c_str()) + ": unknown key");
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <class T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else return "an array of numbers";
  }
  std::string where() const { return path_.empty() ? "config" : path_; }

  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

inline auto positive = [](auto v) { return v > 0; };
inline auto non_negative = [](auto v) { return v >= 0; };
inline auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
inline auto open_unit = [](double v) { return v > 0.0 && v < 1.0; };
inline auto all_positive = [](const std::vector<double>& v) {
  return !v.empty() && std::all_of(v.begin(), v.end(), [](double x) { return x > 0.0; });
};

// Rethrow component-level validation failures with the record path.
inline void checked(const std::string& path, const std::function<void()>& validate) {
  try {
    validate();
  } catch (const std::invalid_argument& e) {
    throw InputError(path + ": " + e.what());
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::FieldReader;
  if (!j.is_object()) throw InputError("config: top level must be an object");
  std::string base = "paper";
  if (j.contains("defaults")) {
    if (!j["defaults"].is_string()) throw InputError("defaults: must be a string");
    base = j["defaults"].get<std::string>();
  }
  RunConfig c = preset(base);
  FieldReader top(j, "");
  top.read("defaults", c.defaults);
  top.read("steps", c.steps, detail::positive, "a positive integer");
  top.read("checkpoint_every", c.checkpoint_every, detail::positive, "a positive integer");
  top.read("seed", c.seed);
  top.read("short_side", c.model.short_side, detail::positive, "a positive integer");
  top.read("top_n", c.model.top_n, detail::positive, "a positive integer");
  top.read("nms_threshold", c.model.nms_threshold, detail::unit, "in [0,1]");
  top.read("batch", c.train.rpn_batch, [](std::size_t v) { return v > 0 && v % 2 == 0; }, "a positive even integer");
  top.read("context_enabled", c.model.context);

  if (auto a = top.child("anchors")) {
    a->read("areas", c.model.anchors.areas, detail::all_positive, "a non-empty array of positive numbers");
    a->read("ratios", c.model.anchors.ratios, detail::all_positive, "a non-empty array of positive numbers");
    a->read("stride", c.model.anchors.stride, detail::positive, "a positive integer");
    a->finish();
  }
  if (auto r = top.child("region")) {
    r->read("alpha1", c.model.region.alpha1, detail::unit, "in [0,1]");
    r->read("alpha2", c.model.region.alpha2, detail::unit, "in [0,1]");
    r->read("beta1", c.model.region.beta1, detail::unit, "in [0,1]");
    r->read("beta2", c.model.region.beta2, detail::unit, "in [0,1]");
    r->finish();
    detail::checked("region", [&] { c.model.region.validate(); });
  }
  if (auto m = top.child("model")) {
    m->read("channels", c.model.channels, detail::positive, "a positive integer");
    m->read("rpn_hidden", c.model.rpn_hidden, detail::positive, "a positive integer");
    m->read("pool_grid", c.model.pool_grid, detail::positive, "a positive integer");
    m->read("detector_hidden", c.model.detector_hidden, detail::positive, "a positive integer");
    m->finish();
  }
  if (auto l = top.child("loss")) {
    l->read("lambda", c.train.loss.lambda, detail::positive, "positive");
    l->read("iou_pos", c.train.loss.iou_pos, detail::unit, "in [0,1]");
    l->read("iou_neg", c.train.loss.iou_neg, detail::unit, "in [0,1]");
    std::string norm = c.train.loss.normalization == LossNormalization::none ? "none" : "mean";
    l->read("normalization", norm, [](const std::string& s) { return s == "none" || s == "mean"; },
            "\"none\" or \"mean\"");
    c.train.loss.normalization = norm == "none" ? LossNormalization::none : LossNormalization::mean;
    l->finish();
    detail::checked("loss", [&] { c.train.loss.validate(); });
  }
  if (auto o = top.child("optimizer")) {
    o->read("learning_rate", c.train.optimizer.learning_rate, detail::positive, "positive");
    o->read("weight_decay", c.train.optimizer.weight_decay, detail::non_negative, "non-negative");
    o->read("momentum", c.train.optimizer.momentum, detail::non_negative, "non-negative");
    o->read("init_std", c.train.optimizer.init_std, detail::positive, "positive");
    o->finish();
  }
  if (auto t = top.child("train")) {
    t->read("images_per_step", c.train.images_per_step, detail::positive, "a positive integer");
    t->read("detector_batch", c.train.detector_batch, detail::positive, "a positive integer");
    t->read("detector_fg_fraction", c.train.detector_fg_fraction, detail::unit, "in [0,1]");
    t->read("detector_iou", c.train.detector_iou, detail::unit, "in [0,1]");
    t->read("detector_gt_rois", c.train.detector_gt_rois);
    t->finish();
  }
  if (auto s = top.child("scene")) {
    s->read("width", c.scene.width, [](int v) { return v >= 16; }, "an integer >= 16");
    s->read("height", c.scene.height, [](int v) { return v >= 16; }, "an integer >= 16");
    s->read("left_cx", c.scene.left_cx, detail::open_unit, "in (0,1)");
    s->read("left_cy", c.scene.left_cy, detail::open_unit, "in (0,1)");
    s->read("right_cx", c.scene.right_cx, detail::open_unit, "in (0,1)");
    s->read("right_cy", c.scene.right_cy, detail::open_unit, "in (0,1)");
    s->read("center_std", c.scene.center_std, detail::non_negative, "non-negative");
    s->read("height_mean", c.scene.height_mean, detail::open_unit, "in (0,1)");
    s->read("height_std", c.scene.height_std, detail::non_negative, "non-negative");
    s->read("aspect_mean", c.scene.aspect_mean, detail::positive, "positive");
    s->read("aspect_std", c.scene.aspect_std, detail::non_negative, "non-negative");
    s->read("foreground", c.scene.foreground, detail::unit, "in [0,1]");
    s->read("background", c.scene.background, detail::unit, "in [0,1]");
    s->read("noise_std", c.scene.noise_std, detail::non_negative, "non-negative");
    s->read("distractors", c.scene.distractors, detail::non_negative, "a non-negative integer");
    s->finish();
  }
  top.finish();
  detail::checked("anchors", [&] { c.model.anchors.validate(); });
  detail::checked("config", [&] { c.validate(); });
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& s = c.scene;
  return {
      {"defaults", c.defaults},
      {"steps", c.steps},
      {"checkpoint_every", c.checkpoint_every},
      {"seed", c.seed},
      {"short_side", m.short_side},
      {"top_n", m.top_n},
      {"nms_threshold", m.nms_threshold},
      {"batch", t.rpn_batch},
      {"context_enabled", m.context},
      {"anchors", {{"areas", m.anchors.areas}, {"ratios", m.anchors.ratios}, {"stride", m.anchors.stride}}},
      {"region",
       {{"alpha1", m.region.alpha1}, {"alpha2", m.region.alpha2}, {"beta1", m.region.beta1}, {"beta2", m.region.beta2}}},
      {"model",
       {{"channels", m.channels}, {"rpn_hidden", m.rpn_hidden}, {"pool_grid", m.pool_grid},
        {"detector_hidden", m.detector_hidden}}},
      {"loss",
       {{"lambda", t.loss.lambda}, {"iou_pos", t.loss.iou_pos}, {"iou_neg", t.loss.iou_neg},
        {"normalization", t.loss.normalization == LossNormalization::none ? "none" : "mean"}}},
      {"optimizer",
       {{"learning_rate", t.optimizer.learning_rate}, {"weight_decay", t.optimizer.weight_decay},
        {"momentum", t.optimizer.momentum}, {"init_std", t.optimizer.init_std}}},
      {"train",
       {{"images_per_step", t.images_per_step}, {"detector_batch", t.detector_batch},
        {"detector_fg_fraction", t.detector_fg_fraction}, {"detector_iou", t.detector_iou},
        {"detector_gt_rois", t.detector_gt_rois}}},
      {"scene",
       {{"width", s.width}, {"height", s.height}, {"left_cx", s.left_cx}, {"left_cy", s.left_cy},
        {"right_cx", s.right_cx}, {"right_cy", s.right_cy}, {"center_std", s.center_std},
        {"height_mean", s.height_mean}, {"height_std", s.height_std}, {"aspect_mean", s.aspect_mean},
        {"aspect_std", s.aspect_std}, {"foreground", s.foreground}, {"background", s.background},
        {"noise_std", s.noise_std}, {"distractors", s.distractors}}},
  };
}

/// Seed precedence: explicit flag, then SELATTN_SEED, then the config.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SELATTN_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw InputError("SELATTN_SEED: not an unsigned integer: '" + std::string(env) + "'");
    }
  }
  return config_seed;
}

}  // namespace selattn
