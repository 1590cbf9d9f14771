// Procedural multi-condition corpus: simple shape scenes, closed-form
// condition images and prompts over a small synthetic vocabulary.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "unigen/image.hpp"
#include "unigen/rng.hpp"

namespace unigen {

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };

/// Shapes are described by a center and a half-extent `radius`; every kind
/// fits the box [cx - r, cx + r] x [cy - r, cy + r].
struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  int color = 0;
  double cx = 0.0, cy = 0.0, radius = 1.0;
};

struct SceneSpec {
  std::vector<ShapeSpec> shapes;
  int background = 0;
  std::uint64_t seed = 0;
};

using Rgb = std::array<double, 3>;

inline constexpr std::array<Rgb, 8> kPalette = {{
    {0.0, 0.0, 0.0},  // black
    {1.0, 1.0, 1.0},  // white
    {1.0, 0.0, 0.0},  // red
    {0.0, 1.0, 0.0},  // green
    {0.0, 0.0, 1.0},  // blue
    {1.0, 1.0, 0.0},  // yellow
    {0.0, 1.0, 1.0},  // cyan
    {1.0, 0.0, 1.0},  // magenta
}};

// Segmentation colors per shape index; black is background.
inline constexpr std::array<Rgb, 6> kSegPalette = {{
    {1.0, 0.0, 0.0},
    {0.0, 1.0, 0.0},
    {0.0, 0.0, 1.0},
    {1.0, 1.0, 0.0},
    {0.0, 1.0, 1.0},
    {1.0, 0.0, 1.0},
}};

// Vocabulary. 0 is the null prompt; ids above kVocabUsed are unused.
namespace vocab {
inline constexpr int null_token = 0;
inline constexpr int shape_base = 1;   // circle, square, triangle
inline constexpr int color_base = 4;   // 8 palette colors
inline constexpr int count_base = 12;  // one, two, three
inline constexpr int on_token = 15;
inline constexpr int bg_base = 16;     // 8 background colors
inline constexpr int used = 24;
inline constexpr int size = 64;
}  // namespace vocab

/// Rec.601 luma.
inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

/// Pixel-center inside test.
inline bool shape_contains(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy, r = s.radius;
  switch (s.kind) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle:
      // Apex at (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r).
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
  }
  return false;
}

struct RenderedScene {
  SceneSpec spec;
  Image image;
  std::vector<int> owner;  // topmost shape index per pixel, -1 for background
};

/// Hard-edged rasterization; later shapes paint over earlier ones.
inline RenderedScene render_scene(const SceneSpec& spec, int height, int width) {
  for (const auto& s : spec.shapes) {
    if (!(s.radius > 0.0) || s.cx - s.radius < 0.0 || s.cy - s.radius < 0.0 || s.cx + s.radius > width || s.cy + s.radius > height)
      throw std::invalid_argument("render_scene: shape at (" + std::to_string(s.cx) + "," + std::to_string(s.cy) + ") radius " +
                                  std::to_string(s.radius) + " leaves the " + std::to_string(height) + "x" + std::to_string(width) + " canvas");
    if (s.color < 0 || std::size_t(s.color) >= kPalette.size()) throw std::invalid_argument("render_scene: color index out of range");
  }
  if (spec.background < 0 || std::size_t(spec.background) >= kPalette.size()) throw std::invalid_argument("render_scene: background index out of range");

  RenderedScene out{spec, Image(height, width), std::vector<int>(std::size_t(height) * std::size_t(width), -1)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      int who = -1;
      for (std::size_t k = 0; k < spec.shapes.size(); ++k)
        if (shape_contains(spec.shapes[k], x + 0.5, y + 0.5)) who = int(k);
      out.owner[std::size_t(y * width + x)] = who;
      const Rgb& c = kPalette[std::size_t(who < 0 ? spec.background : spec.shapes[std::size_t(who)].color)];
      for (int ch = 0; ch < 3; ++ch) out.image.at(y, x, ch) = c[std::size_t(ch)];
    }
  return out;
}

/// 1-3 shapes fully inside the canvas, colors distinct from the background.
inline SceneSpec random_scene(std::uint64_t seed, int height, int width) {
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  std::uniform_int_distribution<int> color(0, int(kPalette.size()) - 1);
  s.background = color(rng);
  const int n = std::uniform_int_distribution<int>(1, 3)(rng);
  const double lo = 0.15 * std::min(height, width), hi = 0.35 * std::min(height, width);
  for (int i = 0; i < n; ++i) {
    ShapeSpec sh;
    sh.kind = ShapeKind(std::uniform_int_distribution<int>(0, 2)(rng));
    do sh.color = color(rng);
    while (sh.color == s.background);
    sh.radius = std::uniform_real_distribution<double>(lo, hi)(rng);
    sh.cx = std::uniform_real_distribution<double>(sh.radius, width - sh.radius)(rng);
    sh.cy = std::uniform_real_distribution<double>(sh.radius, height - sh.radius)(rng);
    s.shapes.push_back(sh);
  }
  return s;
}

/// count, then (color, shape) per shape, then "on" and the background color.
inline std::vector<int> make_prompt(const SceneSpec& s) {
  std::vector<int> p;
  p.push_back(vocab::count_base + int(s.shapes.size()) - 1);
  for (const auto& sh : s.shapes) {
    p.push_back(vocab::color_base + sh.color);
    p.push_back(vocab::shape_base + int(sh.kind));
  }
  p.push_back(vocab::on_token);
  p.push_back(vocab::bg_base + s.background);
  return p;
}

// ---------------------------------------------------------------------------
// Condition generators

/// Fixed constants of the condition surrogates.
struct ConditionConstants {
  double edge_threshold = 0.1;
  int blur_size = 5;
};
inline constexpr ConditionConstants kConditionConstants{};

namespace conditions {

inline Image gray_map(int h, int w, const std::function<double(int, int)>& f) {
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double v = f(y, x);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
    }
  return out;
}

/// Binary map of pixels whose forward-difference luma gradient exceeds the threshold.
inline Image edge(const RenderedScene& s, std::uint64_t) {
  const Image& im = s.image;
  auto Y = [&](int y, int x) { return luma(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2)); };
  return gray_map(im.height, im.width, [&](int y, int x) {
    const double gx = Y(y, std::min(x + 1, im.width - 1)) - Y(y, x);
    const double gy = Y(std::min(y + 1, im.height - 1), x) - Y(y, x);
    return std::sqrt(gx * gx + gy * gy) > kConditionConstants.edge_threshold ? 1.0 : 0.0;
  });
}

/// Inside a shape: distance to the nearest pixel not owned by that shape
/// (off-canvas counts), normalized by the image maximum. Zero outside.
inline Image depth(const RenderedScene& s, std::uint64_t) {
  const int h = s.image.height, w = s.image.width;
  std::vector<double> dist(std::size_t(h * w), 0.0);
  double mx = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int k = s.owner[std::size_t(y * w + x)];
      if (k < 0) continue;
      double best = std::min({double(x + 1), double(w - x), double(y + 1), double(h - y)});
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
          if (s.owner[std::size_t(yy * w + xx)] != k) best = std::min(best, std::hypot(double(xx - x), double(yy - y)));
      dist[std::size_t(y * w + x)] = best;
      mx = std::max(mx, best);
    }
  return gray_map(h, w, [&](int y, int x) { return mx > 0.0 ? dist[std::size_t(y * w + x)] / mx : 0.0; });
}

inline Image seg(const RenderedScene& s, std::uint64_t) {
  Image out(s.image.height, s.image.width);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const int k = s.owner[std::size_t(y * out.width + x)];
      if (k < 0) continue;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = kSegPalette[std::size_t(k) % kSegPalette.size()][std::size_t(c)];
    }
  return out;
}

inline Image bbox(const RenderedScene& s, std::uint64_t) {
  Image out(s.image.height, s.image.width);
  for (std::size_t k = 0; k < s.spec.shapes.size(); ++k) {
    const ShapeSpec& sh = s.spec.shapes[k];
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x)
        if (std::abs(x + 0.5 - sh.cx) <= sh.radius && std::abs(y + 0.5 - sh.cy) <= sh.radius)
          for (int c = 0; c < 3; ++c) out.at(y, x, c) = kSegPalette[k % kSegPalette.size()][std::size_t(c)];
  }
  return out;
}

/// Box filter with clamped borders.
inline Image blur(const RenderedScene& s, std::uint64_t) {
  const Image& im = s.image;
  const int r = kConditionConstants.blur_size / 2;
  const double inv = 1.0 / double(kConditionConstants.blur_size * kConditionConstants.blur_size);
  Image out(im.height, im.width);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) acc += im.at(std::clamp(y + dy, 0, im.height - 1), std::clamp(x + dx, 0, im.width - 1), c);
        out.at(y, x, c) = acc * inv;
      }
  return out;
}

inline Image grayscale(const RenderedScene& s, std::uint64_t) {
  const Image& im = s.image;
  return gray_map(im.height, im.width, [&](int y, int x) { return luma(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2)); });
}

/// Target with a seeded rectangle of 1/4..1/2 of each side zeroed.
inline Image inpainting(const RenderedScene& s, std::uint64_t seed) {
  Image out = s.image;
  Rng rng(seed);
  const int h = out.height, w = out.width;
  const int rh = std::uniform_int_distribution<int>(std::max(1, h / 4), std::max(1, h / 2))(rng);
  const int rw = std::uniform_int_distribution<int>(std::max(1, w / 4), std::max(1, w / 2))(rng);
  const int y0 = std::uniform_int_distribution<int>(0, h - rh)(rng);
  const int x0 = std::uniform_int_distribution<int>(0, w - rw)(rng);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.0;
  return out;
}

/// Keeps a centered crop; a seeded border of 1..min(h,w)/4 pixels is zeroed.
inline Image outpainting(const RenderedScene& s, std::uint64_t seed) {
  Image out = s.image;
  Rng rng(seed);
  const int h = out.height, w = out.width;
  const int m = std::uniform_int_distribution<int>(1, std::max(1, std::min(h, w) / 4))(rng);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (y < m || y >= h - m || x < m || x >= w - m)
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.0;
  return out;
}

}  // namespace conditions

using ConditionGenerator = std::function<Image(const RenderedScene&, std::uint64_t seed)>;

/// Twelve condition-type slots. The first eight have closed-form generators;
/// the rest are reserved names that accept a generator via set().
class ConditionRegistry {
 public:
  static ConditionRegistry standard() {
    ConditionRegistry r;
    r.slots_ = {{"edge", conditions::edge},
                {"depth", conditions::depth},
                {"seg", conditions::seg},
                {"bbox", conditions::bbox},
                {"blur", conditions::blur},
                {"grayscale", conditions::grayscale},
                {"inpainting", conditions::inpainting},
                {"outpainting", conditions::outpainting},
                {"pose", {}},
                {"hed", {}},
                {"hedsketch", {}},
                {"normal", {}}};
    return r;
  }

  std::size_t slots() const noexcept { return slots_.size(); }

  /// Number of leading slots with a generator; these form the corpus types.
  std::size_t implemented() const noexcept {
    std::size_t n = 0;
    while (n < slots_.size() && slots_[n].generate) ++n;
    return n;
  }

  const std::string& name(int id) const { return slot(id).name; }

  std::optional<int> find(const std::string& name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
      if (slots_[i].name == name) return int(i);
    return std::nullopt;
  }

  void set(int id, ConditionGenerator g) { slot(id).generate = std::move(g); }

  Image generate(int id, const RenderedScene& scene, std::uint64_t seed) const {
    const Slot& s = slot(id);
    if (!s.generate) throw std::invalid_argument("derive_condition: no generator registered for condition type '" + s.name + "'");
    return s.generate(scene, seed);
  }

 private:
  struct Slot {
    std::string name;
    ConditionGenerator generate;
  };

  const Slot& slot(int id) const {
    if (id < 0 || std::size_t(id) >= slots_.size()) throw std::invalid_argument("unknown condition type id " + std::to_string(id));
    return slots_[std::size_t(id)];
  }
  Slot& slot(int id) { return const_cast<Slot&>(std::as_const(*this).slot(id)); }

  std::vector<Slot> slots_;
};

inline Image derive_condition(const RenderedScene& scene, int type_id, std::uint64_t seed) {
  static const ConditionRegistry registry = ConditionRegistry::standard();
  return registry.generate(type_id, scene, seed);
}

// ---------------------------------------------------------------------------
// Corpus

struct ConditionSample {
  Image target;
  Image condition;
  int type_id = 0;
  std::vector<int> prompt_ids;
};

struct Dataset {
  int height = 0, width = 0, n_types = 0;
  std::vector<ConditionSample> samples;

  std::vector<std::size_t> type_histogram() const {
    std::vector<std::size_t> h(std::size_t(n_types), 0);
    for (const auto& s : samples) ++h.at(std::size_t(s.type_id));
    return h;
  }
};

inline void round_to_float(Image& img) {
  for (double& v : img.pixels) v = double(float(v));
}

/// Sample i has type i mod n_types; its scene and condition streams derive
/// from (seed, i), so any sample can be regenerated on its own.
inline ConditionSample make_sample(std::uint64_t seed, std::size_t i, int n_types, int height, int width,
                                   const ConditionRegistry& reg = ConditionRegistry::standard()) {
  const SceneSpec spec = random_scene(derive_seed(seed, {i, 0}), height, width);
  RenderedScene scene = render_scene(spec, height, width);
  ConditionSample s;
  s.type_id = int(i % std::size_t(n_types));
  s.condition = reg.generate(s.type_id, scene, derive_seed(seed, {i, 1}));
  s.target = std::move(scene.image);
  s.prompt_ids = make_prompt(spec);
  // Pixels are stored as 32-bit floats; keep memory and disk identical.
  round_to_float(s.target);
  round_to_float(s.condition);
  return s;
}

inline Dataset build_corpus(int n_per_type, std::uint64_t seed, int height = 16, int width = 16,
                            const ConditionRegistry& reg = ConditionRegistry::standard()) {
  if (n_per_type < 1) throw std::invalid_argument("build_corpus: need at least one sample per type");
  Dataset ds{height, width, int(reg.implemented()), {}};
  const std::size_t total = std::size_t(n_per_type) * std::size_t(ds.n_types);
  ds.samples.reserve(total);
  for (std::size_t i = 0; i < total; ++i) ds.samples.push_back(make_sample(seed, i, ds.n_types, height, width, reg));
  return ds;
}

// Dataset file: ASCII header "UNIGEN-DS v1 H W n_types n_samples\n", then per
// sample: u32 type_id, u32 prompt length, u32 ids..., H*W*3 f32 target,
// H*W*3 f32 condition. All binary fields little-endian.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {char(v & 0xFF), char((v >> 8) & 0xFF), char((v >> 16) & 0xFF), char((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("unexpected end of file");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(float(v))); }
inline double get_f32(std::istream& is) { return double(std::bit_cast<float>(get_u32(is))); }

}  // namespace detail

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os << "UNIGEN-DS v1 " << ds.height << ' ' << ds.width << ' ' << ds.n_types << ' ' << ds.samples.size() << '\n';
  for (const auto& s : ds.samples) {
    detail::put_u32(os, std::uint32_t(s.type_id));
    detail::put_u32(os, std::uint32_t(s.prompt_ids.size()));
    for (int id : s.prompt_ids) detail::put_u32(os, std::uint32_t(id));
    for (double v : s.target.pixels) detail::put_f32(os, v);
    for (double v : s.condition.pixels) detail::put_f32(os, v);
  }
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write dataset file " + path.string());
  write_dataset(os, ds);
  if (!os) throw std::runtime_error("I/O error writing dataset file " + path.string());
}

inline Dataset read_dataset(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw std::runtime_error("dataset: missing header");
  std::istringstream hs(header);
  std::string magic, version;
  std::size_t n = 0;
  Dataset ds;
  hs >> magic >> version >> ds.height >> ds.width >> ds.n_types >> n;
  if (!hs || magic != "UNIGEN-DS" || version != "v1") throw std::runtime_error("dataset: bad header '" + header + "'");
  const std::size_t px = std::size_t(ds.height) * std::size_t(ds.width) * 3;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ConditionSample s;
    s.type_id = int(detail::get_u32(is));
    if (s.type_id >= ds.n_types) throw std::runtime_error("dataset: record " + std::to_string(i) + " has type " + std::to_string(s.type_id));
    const std::uint32_t len = detail::get_u32(is);
    for (std::uint32_t k = 0; k < len; ++k) s.prompt_ids.push_back(int(detail::get_u32(is)));
    s.target = Image(ds.height, ds.width);
    s.condition = Image(ds.height, ds.width);
    for (std::size_t k = 0; k < px; ++k) s.target.pixels[k] = detail::get_f32(is);
    for (std::size_t k = 0; k < px; ++k) s.condition.pixels[k] = detail::get_f32(is);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset file " + path.string());
  try {
    return read_dataset(is);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace unigen
