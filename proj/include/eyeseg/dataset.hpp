#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eyeseg/error.hpp"
#include "eyeseg/filter.hpp"
#include "eyeseg/mask.hpp"

namespace eyeseg {

// Grayscale image, row-major, values in [0,1].
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}
  double& at(std::size_t r, std::size_t c) { return pixels[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
};

struct Sample {
  std::string id;
  GrayImage image;
  Mask mask;
};

// ---------------------------------------------------------------------------
// Binary PGM (P5, 8-bit)

struct PgmData {
  std::size_t height = 0;
  std::size_t width = 0;
  unsigned maxval = 0;
  std::vector<std::uint8_t> values;
};

inline void write_pgm(const std::filesystem::path& path, const PgmData& pgm) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << pgm.width << ' ' << pgm.height << '\n' << pgm.maxval << '\n';
  out.write(reinterpret_cast<const char*>(pgm.values.data()), static_cast<std::streamsize>(pgm.values.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline PgmData parse_pgm(std::span<const std::uint8_t> bytes, const std::string& source) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> FormatError {
    return FormatError(source + ": " + what);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("not a binary PGM (expected P5 magic)");
  pos = 2;
  auto next_uint = [&]() -> unsigned long {
    // whitespace and '#' comments
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw fail("malformed PGM header");
    unsigned long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1000000) throw fail("PGM header value too large");
    }
    return v;
  };
  PgmData pgm;
  pgm.width = next_uint();
  pgm.height = next_uint();
  pgm.maxval = static_cast<unsigned>(next_uint());
  if (pgm.width == 0 || pgm.height == 0) throw fail("PGM dimensions must be positive");
  if (pgm.maxval == 0 || pgm.maxval > 255) throw fail("only 8-bit PGM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("malformed PGM header");
  ++pos;
  const std::size_t n = pgm.width * pgm.height;
  if (bytes.size() - pos < n) throw fail("PGM pixel data truncated");
  pgm.values.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
  return pgm;
}

inline PgmData read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_pgm(bytes, path.string());
}

inline void save_image(const GrayImage& img, const std::filesystem::path& path) {
  PgmData pgm{img.height, img.width, 255, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    pgm.values[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
  }
  write_pgm(path, pgm);
}

inline GrayImage load_image(const std::filesystem::path& path) {
  const PgmData pgm = read_pgm(path);
  if (pgm.maxval != 255) {
    throw FormatError(path.string() + ": image maxval must be 255, got " + std::to_string(pgm.maxval));
  }
  GrayImage img(pgm.height, pgm.width);
  for (std::size_t i = 0; i < pgm.values.size(); ++i) img.pixels[i] = pgm.values[i] / 255.0;
  return img;
}

inline constexpr unsigned kVisualLabelScale = 85;

// Raw labels with maxval 3.
inline void save_mask(const Mask& mask, const std::filesystem::path& path) {
  mask.validate();
  write_pgm(path, {mask.height, mask.width, 3, mask.labels});
}

// Labels scaled by 85 (maxval 255) for viewing.
inline void save_mask_visual(const Mask& mask, const std::filesystem::path& path) {
  mask.validate();
  PgmData pgm{mask.height, mask.width, 255, mask.labels};
  for (auto& v : pgm.values) v = static_cast<std::uint8_t>(v * kVisualLabelScale);
  write_pgm(path, pgm);
}

// Accepts raw (maxval 3) or visual (maxval 255, multiples of 85) masks.
inline Mask load_mask(const std::filesystem::path& path) {
  const PgmData pgm = read_pgm(path);
  if (pgm.maxval != 3 && pgm.maxval != 255) {
    throw FormatError(path.string() + ": mask maxval must be 3 or 255, got " + std::to_string(pgm.maxval));
  }
  Mask m(pgm.height, pgm.width);
  for (std::size_t i = 0; i < pgm.values.size(); ++i) {
    unsigned v = pgm.values[i];
    if (v > pgm.maxval) {
      throw FormatError(path.string() + ": pixel " + std::to_string(i) + " has value " + std::to_string(v) +
                        " above maxval " + std::to_string(pgm.maxval));
    }
    if (pgm.maxval == 255) {
      if (v % kVisualLabelScale != 0) {
        throw FormatError(path.string() + ": pixel " + std::to_string(i) + " value " + std::to_string(v) +
                          " is not a visual label level");
      }
      v /= kVisualLabelScale;
    }
    m.labels[i] = static_cast<std::uint8_t>(v);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Manifest: one JSON object per line {id, image_path, mask_path, split},
// paths relative to the manifest's directory.

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;
  Split split;
};

struct Manifest {
  std::filesystem::path root;  // directory the relative paths resolve against
  std::vector<ManifestEntry> entries;

  std::filesystem::path image_file(const ManifestEntry& e) const { return root / e.image_path; }
  std::filesystem::path mask_file(const ManifestEntry& e) const { return root / e.mask_path; }

  std::vector<ManifestEntry> split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }
};

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& e : m.entries) {
    nlohmann::ordered_json j{{"id", e.id}, {"image_path", e.image_path}, {"mask_path", e.mask_path},
                             {"split", to_string(e.split)}};
    out << j.dump() << '\n';
  }
}

// Parses and checks ids are unique and every referenced file exists.
inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestEntry e;
    try {
      const auto j = nlohmann::json::parse(line);
      e.id = j.at("id").get<std::string>();
      e.image_path = j.at("image_path").get<std::string>();
      e.mask_path = j.at("mask_path").get<std::string>();
      e.split = parse_split(j.at("split").get<std::string>());
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
    if (!ids.insert(e.id).second) throw FormatError(path.string() + ": duplicate id " + e.id);
    for (const auto* p : {&e.image_path, &e.mask_path}) {
      if (!std::filesystem::exists(m.root / *p)) {
        throw FormatError(path.string() + ": sample " + e.id + " references missing file " + *p);
      }
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Sample load_sample(const Manifest& m, const ManifestEntry& e) {
  Sample s{e.id, load_image(m.image_file(e)), load_mask(m.mask_file(e))};
  if (s.image.height != s.mask.height || s.image.width != s.mask.width) {
    throw ShapeError("sample " + e.id + ": image and mask sizes differ");
  }
  return s;
}

inline std::vector<Sample> load_split(const Manifest& m, Split split) {
  std::vector<Sample> out;
  for (const auto& e : m.split(split)) out.push_back(load_sample(m, e));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic eyes. Geometry lives in an eye frame where u runs along the
// longer image side and v along the shorter one.

struct Ellipse {
  double cu = 0, cv = 0;  // center
  double au = 0, av = 0;  // semi-axes
  double angle = 0;       // radians

  bool contains(double u, double v) const {
    const double du = u - cu, dv = v - cv;
    const double c = std::cos(angle), s = std::sin(angle);
    const double x = c * du + s * dv, y = -s * du + c * dv;
    return (x * x) / (au * au) + (y * y) / (av * av) <= 1.0;
  }
};

// Upper lid v = cv - upper_offset + upper_curvature (u - cu)^2, lower lid
// v = cv + lower_offset - lower_curvature (u - cu)^2; visible between them.
struct Eyelids {
  double upper_offset = 1e9, upper_curvature = 0;
  double lower_offset = 1e9, lower_curvature = 0;
};

struct EyeParams {
  Ellipse sclera, iris, pupil;
  Eyelids lids;
  std::array<double, kNumClasses> intensity{0.5, 0.85, 0.35, 0.1};
  double noise_sigma = 0.0;
};

inline void validate(const EyeParams& p) {
  for (const Ellipse* e : {&p.sclera, &p.iris, &p.pupil}) {
    if (!(e->au > 0.0) || !(e->av > 0.0)) throw ShapeError("eye ellipse semi-axes must be positive");
  }
  auto nested = [](const Ellipse& inner, const Ellipse& outer) {
    return inner.cu == outer.cu && inner.cv == outer.cv && inner.angle == outer.angle &&
           inner.au < outer.au && inner.av < outer.av;
  };
  if (!nested(p.pupil, p.iris) || !nested(p.iris, p.sclera)) {
    throw ShapeError("eye ellipses must share center and rotation with strictly decreasing axes");
  }
}

inline Sample synth_sample(const EyeParams& p, std::size_t height, std::size_t width, std::mt19937_64& rng,
                           std::string id = {}) {
  validate(p);
  Sample s{std::move(id), GrayImage(height, width), Mask(height, width)};
  const bool rows_long = height >= width;
  std::normal_distribution<double> noise(0.0, p.noise_sigma > 0 ? p.noise_sigma : 1.0);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double u = rows_long ? r : c;
      const double v = rows_long ? c : r;
      const double du = u - p.sclera.cu;
      const double top = p.sclera.cv - p.lids.upper_offset + p.lids.upper_curvature * du * du;
      const double bottom = p.sclera.cv + p.lids.lower_offset - p.lids.lower_curvature * du * du;
      std::uint8_t label = background;
      if (v >= top && v <= bottom) {
        if (p.pupil.contains(u, v)) label = pupil;
        else if (p.iris.contains(u, v)) label = iris;
        else if (p.sclera.contains(u, v)) label = sclera;
      }
      s.mask.at(r, c) = label;
      double value = p.intensity[label];
      if (p.noise_sigma > 0) value += noise(rng);
      s.image.at(r, c) = std::clamp(value, 0.0, 1.0);
    }
  }
  return s;
}

// Draws eye geometry from fixed ranges relative to the image size. With L
// the longer and S the shorter side:
//   center        L*[0.45,0.55], S*[0.45,0.55]
//   sclera axes   L*[0.30,0.38], S*[0.32,0.40], rotation [-0.15,0.15] rad
//   iris axes     r, r*[0.92,1.0] with r = min(sclera axes)*[0.60,0.75]
//   pupil axes    iris axes*[0.40,0.55]
//   lid offsets   sclera v-axis*[0.75,1.05] (upper), *[0.85,1.15] (lower),
//                 curvature offset / (sclera u-axis*[1.0,1.3])^2
//   intensities   bg [0.45,0.60], sclera [0.75,0.90], iris [0.28,0.42],
//                 pupil [0.05,0.15]; noise sigma [0.01,0.04]
inline EyeParams random_eye_params(std::size_t height, std::size_t width, std::mt19937_64& rng) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const double L = static_cast<double>(std::max(height, width));
  const double S = static_cast<double>(std::min(height, width));
  EyeParams p;
  Ellipse sc;
  sc.cu = L * uni(0.45, 0.55);
  sc.cv = S * uni(0.45, 0.55);
  sc.au = L * uni(0.30, 0.38);
  sc.av = S * uni(0.32, 0.40);
  sc.angle = uni(-0.15, 0.15);
  Ellipse ir = sc;
  const double r = std::min(sc.au, sc.av) * uni(0.60, 0.75);
  ir.au = r;
  ir.av = r * uni(0.92, 1.0);
  Ellipse pu = ir;
  const double k = uni(0.40, 0.55);
  pu.au = ir.au * k;
  pu.av = ir.av * k;
  p.sclera = sc;
  p.iris = ir;
  p.pupil = pu;
  p.lids.upper_offset = sc.av * uni(0.75, 1.05);
  p.lids.upper_curvature = p.lids.upper_offset / std::pow(sc.au * uni(1.0, 1.3), 2);
  p.lids.lower_offset = sc.av * uni(0.85, 1.15);
  p.lids.lower_curvature = p.lids.lower_offset / std::pow(sc.au * uni(1.0, 1.3), 2);
  p.intensity = {uni(0.45, 0.60), uni(0.75, 0.90), uni(0.28, 0.42), uni(0.05, 0.15)};
  p.noise_sigma = uni(0.01, 0.04);
  return p;
}

// Every class present and the mask already a fixed point of the filter.
inline bool is_well_formed_eye(const Mask& m) {
  std::array<bool, kNumClasses> seen{};
  for (auto l : m.labels) seen[l] = true;
  for (bool s : seen)
    if (!s) return false;
  return filter_mask(m) == m;
}

// Sample index i of a dataset seeded with seed; redraws geometry until the
// mask is well formed.
inline Sample synth_indexed(std::uint64_t seed, std::size_t index, std::size_t height, std::size_t width,
                            std::string id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  std::mt19937_64 rng(seq);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const EyeParams p = random_eye_params(height, width, rng);
    Sample s = synth_sample(p, height, width, rng, id);
    if (is_well_formed_eye(s.mask)) return s;
  }
  throw std::runtime_error("could not draw a well-formed synthetic eye at " + std::to_string(height) + "x" +
                           std::to_string(width));
}

// Split sizes: train = floor(0.7 n), val = floor(0.15 n), test = remainder.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const std::size_t train = n * 70 / 100;
  const std::size_t val = n * 15 / 100;
  return {train, val, n - train - val};
}

// Writes images/<id>.pgm, masks/<id>.pgm and manifest.jsonl under out_dir.
inline Manifest synth_dataset(std::size_t n, std::size_t height, std::size_t width, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  if (n == 0) throw std::invalid_argument("synth_dataset: n must be positive");
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "masks");
  const auto sizes = split_sizes(n);
  Manifest m;
  m.root = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    std::ostringstream id;
    id << "eye_" << std::setw(5) << std::setfill('0') << i;
    const Sample s = synth_indexed(seed, i, height, width, id.str());
    const std::string img_rel = "images/" + s.id + ".pgm";
    const std::string mask_rel = "masks/" + s.id + ".pgm";
    save_image(s.image, out_dir / img_rel);
    save_mask(s.mask, out_dir / mask_rel);
    const Split split = i < sizes[0] ? Split::train : (i < sizes[0] + sizes[1] ? Split::val : Split::test);
    m.entries.push_back({s.id, img_rel, mask_rel, split});
  }
  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace eyeseg
