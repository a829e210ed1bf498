#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "geometry.hpp"

namespace selattn {

/// Detector classes; index 0 is background.
enum class Organ : int { background = 0, left_lung = 1, right_lung = 2 };

inline constexpr int kNumClasses = 3;

inline std::string_view organ_name(Organ o) {
  switch (o) {
    case Organ::left_lung: return "left_lung";
    case Organ::right_lung: return "right_lung";
    default: return "background";
  }
}

inline std::optional<Organ> parse_organ(std::string_view s) {
  if (s == "left_lung") return Organ::left_lung;
  if (s == "right_lung") return Organ::right_lung;
  return std::nullopt;
}

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<Organ> labels;

  std::size_t size() const { return boxes.size(); }

  void add(const Box& b, Organ label) {
    if (b.is_degenerate()) throw std::invalid_argument("GroundTruth: degenerate box");
    if (label == Organ::background) throw std::invalid_argument("GroundTruth: background is not an object class");
    boxes.push_back(b);
    labels.push_back(label);
  }

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

}  // namespace selattn
