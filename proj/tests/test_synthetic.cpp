#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "ftd/synthetic.hpp"
#include "ftd/text_encoder.hpp"

using namespace ftd;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Pgm, HeaderAndRoundTrip) {
  const auto dir = fresh_dir("ftd_pgm");
  GrayImage img{3, 2, {0, 1, 2, 128, 254, 255}};
  write_pgm(dir / "a.pgm", img);
  const std::string bytes = slurp(dir / "a.pgm");
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 6);
  EXPECT_EQ(read_pgm(dir / "a.pgm"), img);
}

TEST(Pgm, MalformedFilesNamePath) {
  const auto dir = fresh_dir("ftd_pgm_bad");
  auto expect_error = [](const fs::path& p) {
    try {
      read_pgm(p);
      FAIL() << "no error for " << p;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
    }
  };
  expect_error(dir / "missing.pgm");
  std::ofstream(dir / "p2.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  expect_error(dir / "p2.pgm");
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n2 2\n255\nabc";
  expect_error(dir / "short.pgm");
  std::ofstream(dir / "long.pgm", std::ios::binary) << "P5\n2 2\n255\nabcde";
  expect_error(dir / "long.pgm");
  std::ofstream(dir / "maxval.pgm", std::ios::binary) << "P5\n2 2\n65535\nabcdefgh";
  expect_error(dir / "maxval.pgm");
}

TEST(Rasterizer, CircleMatchesDistanceOracle) {
  SceneSpec spec{32, {ShapeSpec{ShapeKind::circle, Quadrant::top_left, 16, 16, 5, 200}}};
  const GrayImage mask = render_mask(spec, 0);
  std::size_t count = 0, oracle = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      count += mask.pixels[static_cast<std::size_t>(y * 32 + x)] == 255;
      const int dx = x - 16, dy = y - 16;
      oracle += dx * dx + dy * dy <= 25;
    }
  EXPECT_EQ(count, oracle);
  EXPECT_EQ(oracle, 81u);  // lattice points with x^2 + y^2 <= 25
}

TEST(Rasterizer, SquareAndTriangleCounts) {
  SceneSpec sq{16, {ShapeSpec{ShapeKind::square, Quadrant::top_left, 5, 5, 2, 200}}};
  std::size_t c = 0;
  for (auto v : render_mask(sq, 0).pixels) c += v == 255;
  EXPECT_EQ(c, 25u);
  // Rows dy = -2..2 hold 1, 1, 3, 3, 5 pixels under 2|dx| <= dy + 2.
  SceneSpec tri{16, {ShapeSpec{ShapeKind::triangle, Quadrant::top_left, 5, 5, 2, 200}}};
  c = 0;
  for (auto v : render_mask(tri, 0).pixels) c += v == 255;
  EXPECT_EQ(c, 13u);
}

TEST(References, MinimalFormAndParsing) {
  SceneSpec spec{64,
                 {ShapeSpec{ShapeKind::circle, Quadrant::top_left, 10, 10, 5, 200},
                  ShapeSpec{ShapeKind::circle, Quadrant::bottom_right, 50, 50, 5, 200},
                  ShapeSpec{ShapeKind::square, Quadrant::top_right, 50, 10, 5, 200}}};
  EXPECT_EQ(describe_target(spec, 0), "segment the circle in the top-left");
  EXPECT_EQ(describe_target(spec, 2), "segment the square");
  const auto r = parse_reference("segment the circle in the bottom-right");
  EXPECT_EQ(r.kind, ShapeKind::circle);
  EXPECT_EQ(resolve_reference(spec, r), std::vector<std::size_t>{1});
  EXPECT_EQ(resolve_reference(spec, parse_reference("segment the circle")).size(), 2u);
  EXPECT_THROW(parse_reference("find the circle"), std::invalid_argument);
  EXPECT_THROW(parse_reference("segment the circle in the middle"), std::invalid_argument);
}

TEST(Scenes, InvariantsOverManyScenes) {
  const auto scenes = generate_scenes(0, 300, 64);
  std::size_t paired = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& sc = scenes[i];
    ASSERT_GE(sc.spec.shapes.size(), 2u);
    EXPECT_FALSE(shapes_overlap(sc.spec));
    EXPECT_EQ(resolve_reference(sc.spec, parse_reference(sc.text)), std::vector<std::size_t>{sc.target}) << sc.text;
    const GrayImage img = render_image(sc.spec), mask = render_mask(sc.spec, sc.target);
    for (std::size_t p = 0; p < img.pixels.size(); ++p)
      if (mask.pixels[p]) {
        ASSERT_GT(img.pixels[p], 0);
      }
    if (i > 0 && sc.spec.shapes.size() == scenes[i - 1].spec.shapes.size() &&
        render_image(scenes[i - 1].spec) == img && render_mask(scenes[i - 1].spec, scenes[i - 1].target) != mask) {
      EXPECT_NE(scenes[i - 1].text, sc.text);
      paired += 2;
    }
  }
  EXPECT_GE(paired * 10, scenes.size());
}

TEST(Scenes, SmallSplitStillHasAPair) {
  const auto scenes = generate_scenes(7, 2, 32);
  EXPECT_EQ(render_image(scenes[0].spec), render_image(scenes[1].spec));
  EXPECT_NE(scenes[0].target, scenes[1].target);
}

TEST(Scenes, VocabularyIsClosed) {
  const Vocab v = Vocab::from_words(grammar_words());
  EXPECT_LE(grammar_words().size(), 32u);
  for (const auto& sc : generate_scenes(3, 100, 64))
    for (int id : tokenize(sc.text, v, 16)) EXPECT_NE(id, Vocab::kUnk) << sc.text;
}

TEST(Scenes, RetryLimitReported) {
  RngState rng{1, 0};
  EXPECT_THROW(random_layout(rng, 64, 0), DataError);
  EXPECT_THROW(random_layout(rng, 8, 10), std::invalid_argument);
}

TEST(Dataset, DeterministicBytes) {
  const auto a = fresh_dir("ftd_ds_a"), b = fresh_dir("ftd_ds_b");
  generate_dataset(5, 12, 32, a);
  generate_dataset(5, 12, 32, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_EQ(files, 25u);
  const auto c = fresh_dir("ftd_ds_c");
  generate_dataset(6, 12, 32, c);
  EXPECT_NE(slurp(a / "manifest.json"), slurp(c / "manifest.json"));
}

TEST(Dataset, LoadRoundTrip) {
  const auto dir = fresh_dir("ftd_ds_load");
  const Manifest m = generate_dataset(2, 6, 32, dir, "train.json");
  const auto j = nlohmann::json::parse(slurp(dir / "train.json"));
  EXPECT_EQ(j.at("version"), kGeneratorVersion);
  EXPECT_EQ(j.at("seed"), 2u);
  const auto samples = load_dataset(dir / "train.json");
  ASSERT_EQ(samples.size(), 6u);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(samples[i].id, i);
    EXPECT_EQ(samples[i].text, m.samples[i].text);
    const GrayImage img = read_pgm(dir / m.samples[i].image);
    for (std::size_t p = 0; p < img.pixels.size(); ++p)
      ASSERT_EQ(samples[i].image[p], static_cast<float>(img.pixels[p]) / 255.0f);
    const GrayImage mask = read_pgm(dir / m.samples[i].mask);
    for (std::size_t p = 0; p < mask.pixels.size(); ++p) ASSERT_EQ(samples[i].mask.bits[p], mask.pixels[p] == 255 ? 1 : 0);
  }
}

TEST(Dataset, LoadErrors) {
  const auto dir = fresh_dir("ftd_ds_err");
  const Manifest m = generate_dataset(1, 3, 32, dir);
  fs::remove(dir / m.samples[1].mask);
  try {
    load_dataset(dir / "manifest.json");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(m.samples[1].mask), std::string::npos);
  }
  write_pgm(dir / m.samples[1].mask, GrayImage{16, 16, std::vector<std::uint8_t>(256)});
  EXPECT_THROW(load_dataset(dir / "manifest.json"), DataError);
  EXPECT_THROW(load_dataset(dir / "nope.json"), DataError);
  EXPECT_THROW(generate_dataset(1, 3, 30, dir), std::invalid_argument);
  EXPECT_THROW(generate_dataset(1, 0, 32, dir), std::invalid_argument);
}
