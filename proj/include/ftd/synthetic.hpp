#pragma once

// Synthetic referring-segmentation scenes: 2-3 hard-rasterized shapes, one
// per quadrant, a target shape, and the minimal unambiguous text naming it.
// Images and masks are 8-bit binary PGM; the manifest is JSON.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftd/metrics.hpp"
#include "ftd/rng.hpp"
#include "ftd/tensor.hpp"

namespace ftd {

inline constexpr const char* kGeneratorVersion = "ftd-synth-1";

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw DataError("write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing or unreadable file: " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (!is || magic != "P5" || w == 0 || h == 0 || maxval != 255) {
    throw DataError("malformed PGM header: " + path.string());
  }
  if (is.get() != '\n') throw DataError("malformed PGM header: " + path.string());
  GrayImage img{w, h, std::vector<std::uint8_t>(w * h)};
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw DataError("truncated PGM payload: " + path.string());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in PGM: " + path.string());
  return img;
}

// ---------------------------------------------------------------------------
// Scenes

enum class ShapeKind { circle, square, triangle };
enum class Quadrant { top_left, top_right, bottom_left, bottom_right };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

inline std::string to_string(Quadrant q) {
  switch (q) {
    case Quadrant::top_left: return "top-left";
    case Quadrant::top_right: return "top-right";
    case Quadrant::bottom_left: return "bottom-left";
    case Quadrant::bottom_right: return "bottom-right";
  }
  return "?";
}

struct ShapeSpec {
  ShapeKind kind;
  Quadrant quadrant;
  int cx, cy;     // center pixel
  int radius;     // radius or half-width in pixels
  std::uint8_t intensity;

  /// Hard rasterization: circle dx^2 + dy^2 <= r^2; square max(|dx|,|dy|) <= r;
  /// upward triangle with apex (cx, cy - r) and base row cy + r spanning
  /// cx +- r, i.e. -r <= dy <= r and 2|dx| <= dy + r.
  bool covers(int x, int y) const {
    const int dx = x - cx, dy = y - cy;
    switch (kind) {
      case ShapeKind::circle: return dx * dx + dy * dy <= radius * radius;
      case ShapeKind::square: return std::abs(dx) <= radius && std::abs(dy) <= radius;
      case ShapeKind::triangle: return dy >= -radius && dy <= radius && 2 * std::abs(dx) <= dy + radius;
    }
    return false;
  }
};

struct SceneSpec {
  std::size_t size = 0;
  std::vector<ShapeSpec> shapes;
};

struct Scene {
  SceneSpec spec;
  std::size_t target = 0;
  std::string text;
};

struct Reference {
  ShapeKind kind;
  std::optional<Quadrant> quadrant;
};

/// Minimal unambiguous reference to shape `target`.
inline std::string describe_target(const SceneSpec& spec, std::size_t target) {
  const ShapeSpec& s = spec.shapes.at(target);
  std::size_t same_kind = 0;
  for (const auto& o : spec.shapes) same_kind += o.kind == s.kind;
  std::string text = "segment the " + to_string(s.kind);
  if (same_kind > 1) text += " in the " + to_string(s.quadrant);
  return text;
}

inline Reference parse_reference(const std::string& text) {
  std::istringstream is(text);
  std::string w1, w2, kind, in, the, quad;
  is >> w1 >> w2 >> kind;
  if (w1 != "segment" || w2 != "the") throw std::invalid_argument("unparseable reference: " + text);
  Reference r{};
  if (kind == "circle") r.kind = ShapeKind::circle;
  else if (kind == "square") r.kind = ShapeKind::square;
  else if (kind == "triangle") r.kind = ShapeKind::triangle;
  else throw std::invalid_argument("unknown shape kind in: " + text);
  if (is >> in >> the >> quad) {
    for (Quadrant q : {Quadrant::top_left, Quadrant::top_right, Quadrant::bottom_left, Quadrant::bottom_right})
      if (quad == to_string(q)) r.quadrant = q;
    if (in != "in" || the != "the" || !r.quadrant) throw std::invalid_argument("bad quadrant phrase in: " + text);
  }
  return r;
}

/// Indices of shapes satisfying a reference.
inline std::vector<std::size_t> resolve_reference(const SceneSpec& spec, const Reference& ref) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    if (s.kind == ref.kind && (!ref.quadrant || *ref.quadrant == s.quadrant)) out.push_back(i);
  }
  return out;
}

inline GrayImage render_image(const SceneSpec& spec) {
  GrayImage img{spec.size, spec.size, std::vector<std::uint8_t>(spec.size * spec.size, 0)};
  for (const auto& s : spec.shapes)
    for (std::size_t y = 0; y < spec.size; ++y)
      for (std::size_t x = 0; x < spec.size; ++x)
        if (s.covers(static_cast<int>(x), static_cast<int>(y))) img.pixels[y * spec.size + x] = s.intensity;
  return img;
}

inline GrayImage render_mask(const SceneSpec& spec, std::size_t target) {
  GrayImage img{spec.size, spec.size, std::vector<std::uint8_t>(spec.size * spec.size, 0)};
  const auto& s = spec.shapes.at(target);
  for (std::size_t y = 0; y < spec.size; ++y)
    for (std::size_t x = 0; x < spec.size; ++x)
      if (s.covers(static_cast<int>(x), static_cast<int>(y))) img.pixels[y * spec.size + x] = 255;
  return img;
}

inline bool shapes_overlap(const SceneSpec& spec) {
  for (std::size_t y = 0; y < spec.size; ++y)
    for (std::size_t x = 0; x < spec.size; ++x) {
      int hits = 0;
      for (const auto& s : spec.shapes) hits += s.covers(static_cast<int>(x), static_cast<int>(y));
      if (hits > 1) return true;
    }
  return false;
}

struct GeneratorLimits {
  std::size_t max_retries = 64;
  std::size_t pair_period = 5;  // scene i with i % period == 1 reuses scene i-1's geometry
};

/// Random layout: 2 or 3 shapes in distinct quadrants, radius in
/// [size/12, 3*size/16], intensity in [100, 255]. Retries on pixel overlap and
/// throws after `max_retries` failed attempts.
inline SceneSpec random_layout(RngState& rng, std::size_t size, std::size_t max_retries) {
  const int half = static_cast<int>(size / 2);
  const int r_min = std::max(2, static_cast<int>(size / 12));
  const int r_max = std::max(r_min, static_cast<int>(3 * size / 16));
  if (2 * r_max + 3 > half) throw std::invalid_argument("image size too small for synthetic scenes");
  for (std::size_t attempt = 0; attempt < max_retries; ++attempt) {
    SceneSpec spec{size, {}};
    std::array<Quadrant, 4> quads{Quadrant::top_left, Quadrant::top_right, Quadrant::bottom_left,
                                  Quadrant::bottom_right};
    for (std::size_t i = 3; i > 0; --i) std::swap(quads[i], quads[rng.next_index(i + 1)]);
    const std::size_t n = 2 + rng.next_index(2);
    for (std::size_t i = 0; i < n; ++i) {
      ShapeSpec s{};
      s.quadrant = quads[i];
      s.kind = static_cast<ShapeKind>(rng.next_index(3));
      s.radius = r_min + static_cast<int>(rng.next_index(static_cast<std::uint64_t>(r_max - r_min + 1)));
      const int qx = (s.quadrant == Quadrant::top_right || s.quadrant == Quadrant::bottom_right) ? half : 0;
      const int qy = (s.quadrant == Quadrant::bottom_left || s.quadrant == Quadrant::bottom_right) ? half : 0;
      const int lo = s.radius + 1, hi = half - s.radius - 2;
      s.cx = qx + lo + static_cast<int>(rng.next_index(static_cast<std::uint64_t>(hi - lo + 1)));
      s.cy = qy + lo + static_cast<int>(rng.next_index(static_cast<std::uint64_t>(hi - lo + 1)));
      s.intensity = static_cast<std::uint8_t>(100 + rng.next_index(156));
      spec.shapes.push_back(s);
    }
    if (!shapes_overlap(spec)) return spec;
  }
  throw DataError("could not place non-overlapping shapes after " + std::to_string(max_retries) + " attempts");
}

/// Scenes for (seed, n, size). Every `pair_period` scenes, one scene repeats
/// the previous geometry with a different target, so the split always holds
/// same-image / different-text pairs when n >= 2.
inline std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t n, std::size_t size,
                                          const GeneratorLimits& limits = {}) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < n; ++i) {
    RngState rng = RngState::derive(seed, {0x7363656E /* "scen" */, i});
    Scene sc;
    if (i % limits.pair_period == 1) {
      sc.spec = scenes.back().spec;
      const std::size_t k = sc.spec.shapes.size();
      sc.target = (scenes.back().target + 1 + rng.next_index(k - 1)) % k;
    } else {
      sc.spec = random_layout(rng, size, limits.max_retries);
      sc.target = rng.next_index(sc.spec.shapes.size());
    }
    sc.text = describe_target(sc.spec, sc.target);
    scenes.push_back(std::move(sc));
  }
  return scenes;
}

struct ManifestRecord {
  std::size_t id;
  std::string image;  // relative to the manifest's directory
  std::string mask;
  std::string text;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::string version = kGeneratorVersion;
  std::vector<ManifestRecord> samples;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["version"] = version;
    j["samples"] = nlohmann::json::array();
    for (const auto& r : samples)
      j["samples"].push_back({{"id", r.id}, {"image", r.image}, {"mask", r.mask}, {"text", r.text}});
    return j;
  }

  static Manifest from_json(const nlohmann::json& j) {
    Manifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.version = j.at("version").get<std::string>();
    for (const auto& s : j.at("samples")) {
      m.samples.push_back({s.at("id").get<std::size_t>(), s.at("image").get<std::string>(),
                           s.at("mask").get<std::string>(), s.at("text").get<std::string>()});
    }
    return m;
  }
};

/// Writes images/NNNNNN.pgm, masks/NNNNNN.pgm and `manifest_name` under out_dir.
inline Manifest generate_dataset(std::uint64_t seed, std::size_t n, std::size_t image_size,
                                 const std::filesystem::path& out_dir,
                                 const std::string& manifest_name = "manifest.json",
                                 std::size_t size_multiple = 4) {
  if (image_size == 0 || image_size % size_multiple != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_size) + " must be divisible by " +
                                std::to_string(size_multiple));
  }
  const auto scenes = generate_scenes(seed, n, image_size);
  const std::string stem = std::filesystem::path(manifest_name).stem().string();
  std::filesystem::create_directories(out_dir / stem / "images");
  std::filesystem::create_directories(out_dir / stem / "masks");
  Manifest m;
  m.seed = seed;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.pgm", i);
    const std::string img_rel = stem + "/images/" + name;
    const std::string mask_rel = stem + "/masks/" + name;
    write_pgm(out_dir / img_rel, render_image(scenes[i].spec));
    write_pgm(out_dir / mask_rel, render_mask(scenes[i].spec, scenes[i].target));
    m.samples.push_back({i, img_rel, mask_rel, scenes[i].text});
  }
  std::ofstream os(out_dir / manifest_name);
  if (!os) throw DataError("cannot write manifest in " + out_dir.string());
  os << m.to_json().dump(2) << '\n';
  return m;
}

struct Sample {
  std::size_t id = 0;
  Tensor<float> image;  // [1, H, W], value / 255
  SegMask mask;         // pixel >= 128
  std::string text;
};

inline Manifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("missing manifest: " + manifest_path.string());
  try {
    return Manifest::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  std::vector<Sample> out;
  for (const auto& r : m.samples) {
    const GrayImage img = read_pgm(root / r.image);
    const GrayImage mask = read_pgm(root / r.mask);
    if (img.width != mask.width || img.height != mask.height) {
      throw DataError("image/mask size mismatch for sample " + std::to_string(r.id) + ": " + r.image);
    }
    Sample s;
    s.id = r.id;
    std::vector<float> px(img.pixels.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    s.image = Tensor<float>(Shape{1, img.height, img.width}, std::move(px));
    std::vector<std::uint8_t> bits(mask.pixels.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = mask.pixels[i] >= 128 ? 1 : 0;
    s.mask = SegMask(mask.height, mask.width, std::move(bits));
    s.text = r.text;
    out.push_back(std::move(s));
  }
  return out;
}

/// Closed grammar vocabulary (no UNK on generated text).
inline std::vector<std::string> grammar_words() {
  return {"segment", "the", "circle", "square", "triangle", "in", "top", "bottom", "left", "right"};
}

}  // namespace ftd
