#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "backbone.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "ground_truth.hpp"
#include "training.hpp"

namespace selattn {

/// Pose and appearance statistics of the procedural scenes. Positions and
/// sizes are fractions of the image extent.
struct SceneConfig {
  int width = 320;
  int height = 320;
  double left_cx = 0.33, left_cy = 0.45;
  double right_cx = 0.67, right_cy = 0.45;
  double center_std = 0.03;
  double height_mean = 0.45, height_std = 0.05;
  double aspect_mean = 0.5, aspect_std = 0.05;  // width / height
  double foreground = 0.65;
  double background = 0.35;
  double noise_std = 0.08;
  int distractors = 1;

  void validate() const {
    auto frac = [](double v) { return v > 0.0 && v < 1.0; };
    if (width < 16 || height < 16) throw std::invalid_argument("SceneConfig: image must be at least 16x16");
    if (!frac(left_cx) || !frac(left_cy) || !frac(right_cx) || !frac(right_cy) || !frac(height_mean) ||
        !(aspect_mean > 0.0))
      throw std::invalid_argument("SceneConfig: means must lie in (0,1)");
    if (center_std < 0.0 || height_std < 0.0 || aspect_std < 0.0 || noise_std < 0.0)
      throw std::invalid_argument("SceneConfig: standard deviations must be >= 0");
    if (foreground < 0.0 || foreground > 1.0 || background < 0.0 || background > 1.0)
      throw std::invalid_argument("SceneConfig: intensities must lie in [0,1]");
    if (distractors < 0) throw std::invalid_argument("SceneConfig: distractors must be >= 0");
  }
};

struct Sample {
  Image image;
  GroundTruth gts;
  std::string id;

  friend bool operator==(const Sample&, const Sample&) = default;
};

namespace detail {

inline constexpr int kMaxResample = 100;

inline void fill_ellipse(Image& img, const Box& b, double value) {
  const double cx = b.cx(), cy = b.cy(), a = 0.5 * b.w(), c = 0.5 * b.h();
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y())));
  const int y1 = std::min(img.height() - 1, static_cast<int>(std::ceil(b.bottom())));
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x())));
  const int x1 = std::min(img.width() - 1, static_cast<int>(std::ceil(b.right())));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double u = (x + 0.5 - cx) / a, v = (y + 0.5 - cy) / c;
      if (u * u + v * v <= 1.0) img.at(x, y) = value;
    }
}

}  // namespace detail

inline std::string sample_id(std::size_t index) {
  std::ostringstream os;
  os << "sample_" << std::setw(5) << std::setfill('0') << index;
  return os.str();
}

/// Noise field with two bright ellipses (left/right lung fields) whose
/// bounding boxes are the ground truth, plus optional small distractor
/// blobs that overlap neither target by more than 0.1 IoU.
inline Sample generate_sample(const SceneConfig& cfg, Rng& rng, std::string id = "sample") {
  cfg.validate();
  const double W = cfg.width, H = cfg.height;
  std::normal_distribution<double> unit(0.0, 1.0);

  auto draw_box = [&](double mx, double my) {
    for (int attempt = 0; attempt < detail::kMaxResample; ++attempt) {
      const double cx = (mx + cfg.center_std * unit(rng)) * W;
      const double cy = (my + cfg.center_std * unit(rng)) * H;
      const double h = (cfg.height_mean + cfg.height_std * unit(rng)) * H;
      const double w = (cfg.aspect_mean + cfg.aspect_std * unit(rng)) * h;
      if (!(w > 1.0) || !(h > 1.0)) continue;
      const double x = cx - 0.5 * w, y = cy - 0.5 * h;
      if (x < 0.0 || y < 0.0 || x + w > W || y + h > H) continue;
      return Box(x, y, w, h);
    }
    throw std::runtime_error("generate_sample: could not place a target inside the image after 100 attempts");
  };

  Box left, right;
  int attempt = 0;
  do {
    if (++attempt > detail::kMaxResample)
      throw std::runtime_error("generate_sample: could not order left/right targets after 100 attempts");
    left = draw_box(cfg.left_cx, cfg.left_cy);
    right = draw_box(cfg.right_cx, cfg.right_cy);
  } while (!(left.cx() < right.cx()));

  std::vector<double> px(static_cast<std::size_t>(cfg.width) * cfg.height, cfg.background);
  Image img(cfg.width, cfg.height, std::move(px));

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int d = 0; d < cfg.distractors; ++d) {
    bool placed = false;
    for (int a = 0; a < detail::kMaxResample && !placed; ++a) {
      const double w = (0.05 + 0.1 * uni(rng)) * W;
      const double h = (0.05 + 0.1 * uni(rng)) * H;
      const double x = uni(rng) * (W - w), y = uni(rng) * (H - h);
      const Box blob(x, y, w, h);
      if (iou(blob, left) > 0.1 || iou(blob, right) > 0.1) continue;
      detail::fill_ellipse(img, blob, cfg.foreground);
      placed = true;
    }
    if (!placed) throw std::runtime_error("generate_sample: could not place a distractor after 100 attempts");
  }
  detail::fill_ellipse(img, left, cfg.foreground);
  detail::fill_ellipse(img, right, cfg.foreground);

  if (cfg.noise_std > 0.0) {
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        img.at(x, y) = std::clamp(img.at(x, y) + cfg.noise_std * unit(rng), 0.0, 1.0);
  }

  Sample s{std::move(img), {}, std::move(id)};
  s.gts.add(left, Organ::left_lung);
  s.gts.add(right, Organ::right_lung);
  return s;
}

/// `count` samples; sample i uses its own generator seeded with seed ^ i.
inline std::vector<Sample> generate_dataset(const SceneConfig& cfg, std::size_t count, std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed ^ static_cast<std::uint64_t>(i));
    out.push_back(generate_sample(cfg, rng, sample_id(i)));
  }
  return out;
}

// --- PGM (P5, maxval 255) -------------------------------------------------

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<unsigned char> bytes(img.pixels().size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.pixels()[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw InputError("failed writing " + path.string());
}

inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  auto bad = [&](const std::string& why) { return InputError(path.string() + ": malformed PGM header: " + why); };
  auto next_token = [&]() {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
      if (ch == '#') {
        while ((ch = is.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  if (next_token() != "P5") throw bad("expected magic P5");
  auto number = [&](const char* what) {
    const std::string tok = next_token();
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); }))
      throw bad(std::string("invalid ") + what);
    return std::stol(tok);
  };
  const long w = number("width");
  const long h = number("height");
  const long maxval = number("maxval");
  if (w < 1 || h < 1) throw bad("non-positive size");
  if (maxval < 1 || maxval > 255) throw bad("maxval must be in [1,255]");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(is.gcount()) != bytes.size())
    throw InputError(path.string() + ": truncated PGM payload");
  std::vector<double> px(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) px[i] = static_cast<double>(bytes[i]) / maxval;
  return Image(static_cast<int>(w), static_cast<int>(h), std::move(px));
}

// --- annotations.jsonl ----------------------------------------------------

inline nlohmann::json annotation_json(const Sample& s) {
  nlohmann::json boxes = nlohmann::json::array();
  for (std::size_t i = 0; i < s.gts.size(); ++i) {
    const Box& b = s.gts.boxes[i];
    boxes.push_back({{"class", organ_name(s.gts.labels[i])}, {"x", b.x()}, {"y", b.y()}, {"w", b.w()}, {"h", b.h()}});
  }
  return {{"id", s.id}, {"width", s.image.width()}, {"height", s.image.height()}, {"boxes", boxes}};
}

struct Annotation {
  std::string id;
  int width = 0;
  int height = 0;
  GroundTruth gts;
};

/// Parses one annotation line; errors name the line (1-based).
inline Annotation parse_annotation(const std::string& line, std::size_t line_no) {
  const std::string where = "annotations.jsonl:" + std::to_string(line_no) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(where + "invalid JSON: " + e.what());
  }
  auto require = [&](const nlohmann::json& obj, const char* key, auto check, const char* type) -> const nlohmann::json& {
    if (!obj.is_object() || !obj.contains(key)) throw InputError(where + "missing field '" + key + "'");
    const auto& v = obj.at(key);
    if (!check(v)) throw InputError(where + "field '" + key + "' must be " + type);
    return v;
  };
  auto is_str = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_int = [](const nlohmann::json& v) { return v.is_number_integer(); };
  auto is_num = [](const nlohmann::json& v) { return v.is_number(); };
  auto is_arr = [](const nlohmann::json& v) { return v.is_array(); };

  Annotation a;
  a.id = require(j, "id", is_str, "a string").get<std::string>();
  a.width = require(j, "width", is_int, "an integer").get<int>();
  a.height = require(j, "height", is_int, "an integer").get<int>();
  for (const auto& jb : require(j, "boxes", is_arr, "an array")) {
    const std::string cls = require(jb, "class", is_str, "a string").get<std::string>();
    const auto organ = parse_organ(cls);
    if (!organ) throw InputError(where + "unknown class '" + cls + "'");
    const double x = require(jb, "x", is_num, "a number").get<double>();
    const double y = require(jb, "y", is_num, "a number").get<double>();
    const double w = require(jb, "w", is_num, "a number").get<double>();
    const double h = require(jb, "h", is_num, "a number").get<double>();
    if (!(w > 0.0) || !(h > 0.0)) throw InputError(where + "box width and height must be positive");
    a.gts.add(Box(x, y, w, h), *organ);
  }
  return a;
}

inline void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream ann(dir / "annotations.jsonl", std::ios::binary);
  if (!ann) throw InputError("cannot write " + (dir / "annotations.jsonl").string());
  for (const Sample& s : samples) {
    write_pgm(dir / (s.id + ".pgm"), s.image);
    ann << annotation_json(s).dump() << "\n";
  }
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InputError("dataset directory not found: " + dir.string());
  const auto ann_path = dir / "annotations.jsonl";
  std::vector<Sample> out;
  if (!std::filesystem::exists(ann_path)) {
    if (std::filesystem::is_empty(dir)) return out;
    throw InputError("missing " + ann_path.string());
  }
  std::ifstream is(ann_path, std::ios::binary);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    Annotation a = parse_annotation(line, line_no);
    const auto pgm = dir / (a.id + ".pgm");
    if (!std::filesystem::exists(pgm))
      throw InputError("annotations.jsonl:" + std::to_string(line_no) + ": no image for id '" + a.id + "'");
    Image img = read_pgm(pgm);
    if (img.width() != a.width || img.height() != a.height)
      throw InputError("annotations.jsonl:" + std::to_string(line_no) + ": size of " + pgm.filename().string() +
                       " does not match annotation");
    out.push_back({std::move(img), std::move(a.gts), std::move(a.id)});
  }
  return out;
}

// --- rescaling ------------------------------------------------------------

/// Bilinear rescale so the shorter side becomes min(short_side, current).
inline std::pair<Image, double> rescale_image(const Image& img, int short_side) {
  if (short_side < 1) throw std::invalid_argument("rescale_image: short side must be >= 1");
  const int shorter = std::min(img.width(), img.height());
  const double factor = static_cast<double>(std::min(short_side, shorter)) / shorter;
  if (factor == 1.0) return {img, 1.0};
  const int nw = std::max(1, static_cast<int>(std::lround(img.width() * factor)));
  const int nh = std::max(1, static_cast<int>(std::lround(img.height() * factor)));
  std::vector<double> px(static_cast<std::size_t>(nw) * nh);
  for (int y = 0; y < nh; ++y) {
    const double sy = std::clamp((y + 0.5) / factor - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double fy = sy - y0;
    for (int x = 0; x < nw; ++x) {
      const double sx = std::clamp((x + 0.5) / factor - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double fx = sx - x0;
      const double top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
      const double bot = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
      px[static_cast<std::size_t>(y) * nw + x] = std::clamp(top * (1.0 - fy) + bot * fy, 0.0, 1.0);
    }
  }
  return {Image(nw, nh, std::move(px)), factor};
}

inline Box scale_box(const Box& b, double factor) {
  return Box(b.x() * factor, b.y() * factor, b.w() * factor, b.h() * factor);
}

inline Sample rescale_sample(const Sample& s, int short_side) {
  auto [img, factor] = rescale_image(s.image, short_side);
  if (factor == 1.0) return s;
  Sample out{std::move(img), {}, s.id};
  for (std::size_t i = 0; i < s.gts.size(); ++i) out.gts.add(scale_box(s.gts.boxes[i], factor), s.gts.labels[i]);
  return out;
}

}  // namespace selattn
