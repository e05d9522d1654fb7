#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "eyeseg/dataset.hpp"
#include "support/filter_cases.hpp"

using namespace eyeseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("eyeseg_dataset_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

std::string format_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

// Every regular file under root, keyed by relative path.
std::map<std::string, std::vector<std::uint8_t>> tree(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

}  // namespace

TEST(Pgm, ImageRoundTripWithinQuantization) {
  const auto dir = temp_dir("image");
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GrayImage img(400, 640);
  for (auto& v : img.pixels) v = u(rng);
  save_image(img, dir / "a.pgm");
  const GrayImage back = load_image(dir / "a.pgm");
  ASSERT_EQ(back.height, 400u);
  ASSERT_EQ(back.width, 640u);
  double worst = 0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) worst = std::max(worst, std::abs(img.pixels[i] - back.pixels[i]));
  EXPECT_LE(worst, 1.0 / 255.0);
}

TEST(Pgm, HeaderErrors) {
  const auto dir = temp_dir("header");
  write_bytes(dir / "png.pgm", "\x89PNG\r\n\x1a\n");
  EXPECT_NE(format_error([&] { load_image(dir / "png.pgm"); }).find("P5"), std::string::npos);
  write_bytes(dir / "ascii.pgm", "P2\n2 2\n255\n0 0 0 0\n");
  EXPECT_THROW(load_image(dir / "ascii.pgm"), FormatError);
  write_bytes(dir / "short.pgm", std::string("P5\n4 4\n255\n") + std::string(10, '\0'));
  EXPECT_NE(format_error([&] { load_image(dir / "short.pgm"); }).find("truncated"), std::string::npos);
  write_bytes(dir / "deep.pgm", std::string("P5\n1 1\n65535\n") + std::string(2, '\0'));
  EXPECT_THROW(load_image(dir / "deep.pgm"), FormatError);
  write_bytes(dir / "mask.pgm", std::string("P5\n1 1\n3\n") + std::string(1, '\0'));
  EXPECT_NE(format_error([&] { load_image(dir / "mask.pgm"); }).find("maxval must be 255"), std::string::npos);
  write_bytes(dir / "comment.pgm", std::string("P5\n# made by hand\n2 1\n255\n") + std::string("\x00\xff", 2));
  const GrayImage c = load_image(dir / "comment.pgm");
  EXPECT_EQ(c.pixels, (std::vector<double>{0.0, 1.0}));
  EXPECT_THROW(load_image(dir / "missing.pgm"), std::runtime_error);
}

TEST(Pgm, MaskRoundTripIsExact) {
  const auto dir = temp_dir("mask");
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> l(0, 3);
  Mask m(37, 23);
  for (auto& v : m.labels) v = static_cast<std::uint8_t>(l(rng));
  save_mask(m, dir / "raw.pgm");
  EXPECT_EQ(load_mask(dir / "raw.pgm"), m);
  save_mask_visual(m, dir / "vis.pgm");
  EXPECT_EQ(load_mask(dir / "vis.pgm"), m);
  const PgmData vis = read_pgm(dir / "vis.pgm");
  EXPECT_EQ(vis.maxval, 255u);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m.labels[i] == pupil) {
      ASSERT_EQ(vis.values[i], 255);
    }
  }
}

TEST(Pgm, MaskValueErrorsNamePixel) {
  const auto dir = temp_dir("mask_errors");
  write_pgm(dir / "four.pgm", {2, 3, 3, {0, 1, 2, 3, 4, 0}});
  const std::string msg = format_error([&] { load_mask(dir / "four.pgm"); });
  EXPECT_NE(msg.find("pixel 4"), std::string::npos) << msg;
  write_pgm(dir / "maxval.pgm", {1, 2, 7, {0, 1}});
  EXPECT_NE(format_error([&] { load_mask(dir / "maxval.pgm"); }).find("3 or 255"), std::string::npos);
  write_pgm(dir / "level.pgm", {1, 2, 255, {85, 100}});
  EXPECT_NE(format_error([&] { load_mask(dir / "level.pgm"); }).find("pixel 1"), std::string::npos);
  Mask bad(1, 1);
  bad.labels[0] = 9;
  EXPECT_THROW(save_mask(bad, dir / "bad.pgm"), FormatError);
}

TEST(Manifest, RoundTripAndValidation) {
  const auto dir = temp_dir("manifest");
  fs::create_directories(dir / "img");
  save_image(GrayImage(4, 4, 0.5), dir / "img/a.pgm");
  save_mask(Mask(4, 4), dir / "img/a_mask.pgm");
  Manifest m;
  m.entries = {{"a", "img/a.pgm", "img/a_mask.pgm", Split::val}};
  write_manifest(m, dir / "m.jsonl");
  const Manifest back = load_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.entries.size(), 1u);
  EXPECT_EQ(back.entries[0].id, "a");
  EXPECT_EQ(back.entries[0].split, Split::val);
  EXPECT_EQ(load_split(back, Split::val).size(), 1u);
  EXPECT_TRUE(load_split(back, Split::train).empty());

  m.entries.push_back({"a", "img/a.pgm", "img/a_mask.pgm", Split::train});
  write_manifest(m, dir / "dup.jsonl");
  EXPECT_NE(format_error([&] { load_manifest(dir / "dup.jsonl"); }).find("duplicate id a"), std::string::npos);
  m.entries = {{"b", "img/b.pgm", "img/a_mask.pgm", Split::test}};
  write_manifest(m, dir / "missing.jsonl");
  EXPECT_NE(format_error([&] { load_manifest(dir / "missing.jsonl"); }).find("img/b.pgm"), std::string::npos);
  write_bytes(dir / "split.jsonl", R"({"id":"c","image_path":"img/a.pgm","mask_path":"img/a_mask.pgm","split":"dev"})");
  EXPECT_NE(format_error([&] { load_manifest(dir / "split.jsonl"); }).find("dev"), std::string::npos);
  write_bytes(dir / "json.jsonl", "{not json}\n");
  EXPECT_NE(format_error([&] { load_manifest(dir / "json.jsonl"); }).find(":1:"), std::string::npos);

  save_mask(Mask(4, 5), dir / "img/wide.pgm");
  m.entries = {{"w", "img/a.pgm", "img/wide.pgm", Split::train}};
  write_manifest(m, dir / "size.jsonl");
  EXPECT_THROW(load_split(load_manifest(dir / "size.jsonl"), Split::train), ShapeError);
}

TEST(Synth, ConcentricCircles) {
  EyeParams p;
  p.sclera = {32, 32, 15, 15, 0};
  p.iris = {32, 32, 10, 10, 0};
  p.pupil = {32, 32, 5, 5, 0};
  std::mt19937_64 rng(0);
  const Sample s = synth_sample(p, 64, 64, rng);
  EXPECT_EQ(s.mask.at(32, 32), pupil);
  EXPECT_EQ(s.mask.at(32, 44), sclera);
  EXPECT_EQ(s.mask.at(32, 40), iris);
  EXPECT_EQ(s.mask.at(0, 0), background);
  EXPECT_EQ(filter_mask(s.mask), s.mask);
  for (std::size_t i = 0; i < s.mask.size(); ++i) EXPECT_EQ(s.image.pixels[i], p.intensity[s.mask.labels[i]]);
}

TEST(Synth, EyelidsClipToBackground) {
  EyeParams p;
  p.sclera = {32, 32, 15, 15, 0};
  p.iris = {32, 32, 10, 10, 0};
  p.pupil = {32, 32, 5, 5, 0};
  p.lids = {8, 0, 8, 0};
  std::mt19937_64 rng(0);
  const Sample s = synth_sample(p, 64, 64, rng);
  // rows_long: u runs along rows, v along columns.
  EXPECT_EQ(s.mask.at(32, 32 + 12), background);
  EXPECT_EQ(s.mask.at(32 + 12, 32), sclera);
}

TEST(Synth, DegenerateGeometryRejected) {
  EyeParams p;
  p.sclera = {32, 32, 15, 15, 0};
  p.iris = {32, 32, 10, 10, 0};
  p.pupil = {32, 32, 0, 5, 0};
  std::mt19937_64 rng(0);
  EXPECT_THROW(synth_sample(p, 64, 64, rng), ShapeError);
  p.pupil = {32, 32, 12, 5, 0};
  EXPECT_THROW(synth_sample(p, 64, 64, rng), ShapeError);
}

TEST(Synth, DatasetIsDeterministicAndWellFormed) {
  const auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
  EXPECT_EQ(synth_dataset(20, 64, 40, 7, a).entries.size(), 20u);
  synth_dataset(20, 64, 40, 7, b);
  EXPECT_EQ(tree(a), tree(b));
  const Manifest loaded = load_manifest(a / "manifest.jsonl");
  ASSERT_EQ(loaded.entries.size(), 20u);
  EXPECT_EQ(loaded.split(Split::train).size(), 14u);
  EXPECT_EQ(loaded.split(Split::val).size(), 3u);
  EXPECT_EQ(loaded.split(Split::test).size(), 3u);
  for (const auto& e : loaded.entries) {
    const Sample s = load_sample(loaded, e);
    EXPECT_EQ(s.image.height, 64u);
    EXPECT_EQ(s.image.width, 40u);
    EXPECT_TRUE(is_well_formed_eye(s.mask)) << e.id;
    EXPECT_EQ(cases::invariant_violation(s.mask, filter_mask(s.mask)), "") << e.id;
    EXPECT_EQ(filter_mask(s.mask), s.mask) << e.id;
  }
  const auto other = temp_dir("synth_c");
  synth_dataset(20, 64, 40, 8, other);
  EXPECT_NE(tree(a), tree(other));
}

TEST(Synth, ClassRatiosAreImbalanced) {
  std::array<double, 4> share{};
  const std::size_t n = 30;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = synth_indexed(3, i, 400, 640, "x");
    for (auto l : s.mask.labels) share[l] += 1.0 / static_cast<double>(s.mask.size() * n);
  }
  EXPECT_GT(share[background], share[sclera]);
  EXPECT_GT(share[iris], share[pupil]);
  EXPECT_LT(share[pupil], 0.05);
  EXPECT_GT(share[pupil], 0.002);
}

TEST(Synth, SplitSizes) {
  EXPECT_EQ(split_sizes(20), (std::array<std::size_t, 3>{14, 3, 3}));
  EXPECT_EQ(split_sizes(16), (std::array<std::size_t, 3>{11, 2, 3}));
  EXPECT_EQ(split_sizes(1), (std::array<std::size_t, 3>{0, 0, 1}));
}
