#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include <selattn/synthdata.hpp>

using namespace selattn;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("selattn_synth_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

}  // namespace

TEST(Generate, NoiselessSceneHasTwoLevels) {
  SceneConfig cfg;
  cfg.noise_std = 0.0;
  cfg.distractors = 0;
  Rng rng(3);
  const Sample s = generate_sample(cfg, rng);
  std::set<double> levels(s.image.pixels().begin(), s.image.pixels().end());
  EXPECT_EQ(levels, (std::set<double>{cfg.background, cfg.foreground}));
  ASSERT_EQ(s.gts.size(), 2u);
  EXPECT_EQ(s.gts.labels[0], Organ::left_lung);
  EXPECT_EQ(s.gts.labels[1], Organ::right_lung);
  // Each target's center pixel is foreground.
  for (const Box& b : s.gts.boxes) EXPECT_EQ(s.image.at(int(b.cx()), int(b.cy())), cfg.foreground);
}

TEST(Generate, PoseStatistics) {
  SceneConfig cfg;
  const auto data = generate_dataset(cfg, 1000, 11);
  double left = 0.0, right = 0.0;
  for (const Sample& s : data) {
    ASSERT_EQ(s.gts.size(), 2u);
    const Box& l = s.gts.boxes[0];
    const Box& r = s.gts.boxes[1];
    EXPECT_LT(l.cx(), r.cx());
    for (const Box& b : s.gts.boxes) {
      EXPECT_GE(b.x(), 0.0);
      EXPECT_GE(b.y(), 0.0);
      EXPECT_LE(b.right(), cfg.width);
      EXPECT_LE(b.bottom(), cfg.height);
    }
    left += l.cx() / cfg.width;
    right += r.cx() / cfg.width;
    for (double v : s.image.pixels()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
  EXPECT_NEAR(left / data.size(), 0.33, 0.01);
  EXPECT_NEAR(right / data.size(), 0.67, 0.01);
}

TEST(Generate, DeterministicPerSeed) {
  SceneConfig cfg;
  const auto a = generate_dataset(cfg, 5, 42);
  const auto b = generate_dataset(cfg, 5, 42);
  const auto c = generate_dataset(cfg, 5, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a[0].id, "sample_00000");
  EXPECT_EQ(a[4].id, "sample_00004");
}

TEST(Generate, RejectsBadConfig) {
  SceneConfig cfg;
  cfg.width = 8;
  Rng rng(1);
  EXPECT_THROW(generate_sample(cfg, rng), std::invalid_argument);
  cfg = SceneConfig{};
  cfg.noise_std = -1;
  EXPECT_THROW(generate_sample(cfg, rng), std::invalid_argument);
}

TEST(Pgm, RoundtripIsQuantizationExact) {
  TempDir tmp;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> px(37 * 23);
  for (double& v : px) v = u(rng);
  const Image img(37, 23, px);
  write_pgm(tmp.path / "a.pgm", img);
  const Image back = read_pgm(tmp.path / "a.pgm");
  ASSERT_EQ(back.width(), 37);
  ASSERT_EQ(back.height(), 23);
  for (std::size_t i = 0; i < px.size(); ++i) {
    EXPECT_LE(std::abs(back.pixels()[i] - px[i]), 0.5 / 255.0 + 1e-12);
    EXPECT_EQ(back.pixels()[i], std::round(px[i] * 255.0) / 255.0);
  }
  // A second pass is a fixed point.
  write_pgm(tmp.path / "b.pgm", back);
  EXPECT_EQ(read_pgm(tmp.path / "b.pgm"), back);
}

TEST(Pgm, MalformedHeadersAreInputErrors) {
  TempDir tmp;
  write_text(tmp.path / "magic.pgm", "P2\n2 2\n255\n\1\2\3\4");
  EXPECT_THROW(read_pgm(tmp.path / "magic.pgm"), InputError);
  write_text(tmp.path / "maxval.pgm", "P5\n2 2\n70000\n\1\2\3\4");
  EXPECT_THROW(read_pgm(tmp.path / "maxval.pgm"), InputError);
  write_text(tmp.path / "short.pgm", "P5\n4 4\n255\n\1\2");
  EXPECT_THROW(read_pgm(tmp.path / "short.pgm"), InputError);
  EXPECT_THROW(read_pgm(tmp.path / "missing.pgm"), InputError);
  write_text(tmp.path / "comment.pgm", std::string("P5\n# made by hand\n2 1\n255\n") + char(0) + char(255));
  const Image img = read_pgm(tmp.path / "comment.pgm");
  EXPECT_EQ(img.pixels(), (std::vector<double>{0.0, 1.0}));
}

TEST(Dataset, RoundtripKeepsBoxesExactly) {
  TempDir tmp;
  const auto data = generate_dataset(SceneConfig{}, 4, 8);
  write_dataset(data, tmp.path / "d");
  const auto back = read_dataset(tmp.path / "d");
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].gts, data[i].gts);
    for (std::size_t p = 0; p < data[i].image.pixels().size(); ++p)
      ASSERT_LE(std::abs(back[i].image.pixels()[p] - data[i].image.pixels()[p]), 1.0 / 255.0);
  }
}

TEST(Dataset, EmptyDirectoryIsEmptyDataset) {
  TempDir tmp;
  EXPECT_TRUE(read_dataset(tmp.path).empty());
  write_dataset({}, tmp.path / "zero");
  EXPECT_TRUE(read_dataset(tmp.path / "zero").empty());
  EXPECT_THROW(read_dataset(tmp.path / "nope"), InputError);
}

TEST(Dataset, AnnotationErrorsNameTheLine) {
  TempDir tmp;
  write_dataset(generate_dataset(SceneConfig{}, 1, 1), tmp.path);
  std::ofstream(tmp.path / "annotations.jsonl", std::ios::app)
      << R"({"id":"sample_00000","width":320,"height":320,"boxes":[{"class":"heart","x":1,"y":1,"w":2,"h":2}]})"
      << "\n";
  try {
    read_dataset(tmp.path);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("annotations.jsonl:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("heart"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_annotation("{not json", 7), InputError);
  EXPECT_THROW(parse_annotation(R"({"id":"a","width":1,"height":1})", 1), InputError);
  EXPECT_THROW(parse_annotation(R"({"id":"a","width":1,"height":1,"boxes":[{"class":"left_lung","x":0,"y":0,"w":0,"h":1}]})", 1),
               InputError);
}

TEST(Dataset, MissingImageIsInputError) {
  TempDir tmp;
  write_dataset(generate_dataset(SceneConfig{}, 2, 1), tmp.path);
  fs::remove(tmp.path / "sample_00001.pgm");
  EXPECT_THROW(read_dataset(tmp.path), InputError);
}

TEST(Rescale, Examples) {
  const Image big(1800, 1200, 0.5);
  const auto [small, factor] = rescale_image(big, 600);
  EXPECT_EQ(factor, 0.5);
  EXPECT_EQ(small.width(), 900);
  EXPECT_EQ(small.height(), 600);
  for (double v : small.pixels()) EXPECT_NEAR(v, 0.5, 1e-12);
  // Never upsamples.
  const Image tiny(320, 320, 0.25);
  const auto [same, f1] = rescale_image(tiny, 600);
  EXPECT_EQ(f1, 1.0);
  EXPECT_EQ(same, tiny);
  EXPECT_THROW(rescale_image(tiny, 0), std::invalid_argument);

  Sample s{Image(1800, 1200, 0.3), {}, "x"};
  s.gts.add(Box(100, 200, 300, 400), Organ::left_lung);
  const Sample r = rescale_sample(s, 600);
  EXPECT_EQ(r.gts.boxes[0], Box(50, 100, 150, 200));
  EXPECT_EQ(r.gts.labels[0], Organ::left_lung);
  EXPECT_EQ(rescale_sample(s, 5000), s);
}
