#pragma once

#include "rfb/detector.hpp"
#include "rfb/image.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace rfb {

/// splitmix64: a small, portable generator whose output sequence does not
/// depend on the standard library implementation.
class SplitMix64 {
public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next() % span);
  }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal() {
    const double u1 = 1.0 - uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

private:
  std::uint64_t state_;
};

/// Child seed for item `index` of stream `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index,
                                 std::uint64_t stream = 0) {
  SplitMix64 g(seed ^ (0xD1B54A32D192ED03ULL * (index + 1)) ^ (0x8CB92BA72F3D8DD7ULL * stream));
  return g.next();
}

struct SceneSpec {
  std::size_t image_size = 64;
  std::vector<std::string> classes{"disk", "square", "triangle"};
  std::size_t min_objects = 1, max_objects = 3;
  double min_size = 0.15, max_size = 0.45; // box side as a fraction of the image
  double max_pair_iou = 0.3;
  std::uint64_t seed = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneSpec, image_size, classes, min_objects,
                                                max_objects, min_size, max_size, max_pair_iou,
                                                seed)

inline void validate(const SceneSpec &s) {
  static const std::vector<std::string> known{"disk", "square", "triangle"};
  if (s.classes.empty())
    throw ShapeError("scene spec: no classes");
  for (const auto &c : s.classes)
    if (std::find(known.begin(), known.end(), c) == known.end())
      throw ShapeError("scene spec: unknown shape '" + c + "' (disk|square|triangle)");
  if (s.image_size < 16 || s.min_objects == 0 || s.min_objects > s.max_objects)
    throw ShapeError("scene spec: bad image size or object count range");
  if (s.min_size <= 0 || s.min_size > s.max_size || s.max_size > 1)
    throw ShapeError("scene spec: size range must satisfy 0 < min <= max <= 1");
  if (static_cast<double>(s.image_size) * s.min_size < 4)
    throw ShapeError("scene spec: minimum box side below 4 px");
}

struct Sample {
  std::string image_file;
  Image image;
  std::vector<BoxXYXY> boxes; // pixel units
};

namespace detail {

inline bool inside_shape(const std::string &kind, double u, double v) {
  // u, v in [0,1) relative to the box.
  if (kind == "disk")
    return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
  if (kind == "square")
    return true;
  // Triangle: apex at top center, base along the bottom edge.
  return std::abs(u - 0.5) <= 0.5 * v;
}

// Class-specific texture: disks solid, squares striped, triangles checkered.
inline bool texture_on(const std::string &kind, std::size_t x, std::size_t y) {
  if (kind == "square")
    return (y / 2) % 2 == 0;
  if (kind == "triangle")
    return ((x / 2) + (y / 2)) % 2 == 0;
  return true;
}

} // namespace detail

/// Renders one scene. Placement uses integer arithmetic only.
inline Sample render_scene(const SceneSpec &spec, std::uint64_t index) {
  SplitMix64 rng(derive_seed(spec.seed, index));
  const std::size_t S = spec.image_size;
  Sample s;
  s.image = Image(S, S);
  // Background: dim base color with a smooth gradient and per-pixel noise.
  std::array<std::int64_t, 3> base;
  for (auto &b : base)
    b = rng.uniform_int(30, 110);
  const std::int64_t gx = rng.uniform_int(-20, 20), gy = rng.uniform_int(-20, 20);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::int64_t v = base[c] + gx * static_cast<std::int64_t>(x) / static_cast<std::int64_t>(S) +
                               gy * static_cast<std::int64_t>(y) / static_cast<std::int64_t>(S) +
                               rng.uniform_int(-12, 12);
        s.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
      }

  const auto lo = static_cast<std::int64_t>(std::ceil(spec.min_size * static_cast<double>(S)));
  const auto hi = static_cast<std::int64_t>(std::floor(spec.max_size * static_cast<double>(S)));
  const auto count = static_cast<std::size_t>(rng.uniform_int(
      static_cast<std::int64_t>(spec.min_objects), static_cast<std::int64_t>(spec.max_objects)));
  for (std::size_t k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const std::int64_t side = rng.uniform_int(lo, std::max(lo, hi));
      const std::int64_t x0 = rng.uniform_int(0, static_cast<std::int64_t>(S) - side);
      const std::int64_t y0 = rng.uniform_int(0, static_cast<std::int64_t>(S) - side);
      const auto label = static_cast<int>(
          rng.uniform_int(0, static_cast<std::int64_t>(spec.classes.size()) - 1));
      BoxXYXY box{static_cast<double>(x0), static_cast<double>(y0),
                  static_cast<double>(x0 + side), static_cast<double>(y0 + side), label};
      bool ok = true;
      for (const auto &b : s.boxes)
        ok = ok && iou(b, box) <= spec.max_pair_iou;
      if (!ok)
        continue;
      // Bright saturated fill so objects stand out from the dim background.
      std::array<std::int64_t, 3> color;
      for (auto &c : color)
        c = rng.uniform_int(60, 255);
      color[static_cast<std::size_t>(rng.uniform_int(0, 2))] = rng.uniform_int(200, 255);
      const std::string &kind = spec.classes[static_cast<std::size_t>(label)];
      for (std::int64_t y = y0; y < y0 + side; ++y)
        for (std::int64_t x = x0; x < x0 + side; ++x) {
          const double u = (static_cast<double>(x - x0) + 0.5) / static_cast<double>(side);
          const double v = (static_cast<double>(y - y0) + 0.5) / static_cast<double>(side);
          if (!detail::inside_shape(kind, u, v))
            continue;
          const bool on = detail::texture_on(kind, static_cast<std::size_t>(x - x0),
                                             static_cast<std::size_t>(y - y0));
          for (std::size_t c = 0; c < 3; ++c)
            s.image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) =
                static_cast<std::uint8_t>(on ? color[c] : color[c] / 3);
        }
      s.boxes.push_back(box);
      break;
    }
  }
  return s;
}

inline std::string image_name(std::uint64_t index) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << index << ".ppm";
  return os.str();
}

inline nlohmann::json boxes_to_json(const std::vector<BoxXYXY> &boxes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto &b : boxes)
    arr.push_back({{"xmin", b.xmin}, {"ymin", b.ymin}, {"xmax", b.xmax}, {"ymax", b.ymax},
                   {"label", b.label}});
  return arr;
}

/// Writes images/NNNNNN.ppm, annotations.jsonl and manifest.json under `dir`
/// for scene indices [first_index, first_index + count).
inline void generate(const SceneSpec &spec, std::size_t count, const std::filesystem::path &dir,
                     std::uint64_t first_index = 0) {
  validate(spec);
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec)
    throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::ofstream ann(dir / "annotations.jsonl", std::ios::binary);
  if (!ann)
    throw IoError("cannot write annotations in " + dir.string());
  std::size_t n_boxes = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = first_index + i;
    Sample s = render_scene(spec, index);
    const std::string name = image_name(index);
    write_ppm(dir / name, s.image);
    ann << nlohmann::json{{"image", name}, {"boxes", boxes_to_json(s.boxes)}}.dump() << '\n';
    n_boxes += s.boxes.size();
  }
  if (!ann)
    throw IoError("write failed: annotations in " + dir.string());
  std::ofstream man(dir / "manifest.json", std::ios::binary);
  man << nlohmann::json{{"spec", spec},
                        {"first_index", first_index},
                        {"images", count},
                        {"boxes", n_boxes}}
             .dump(2)
      << '\n';
  if (!man)
    throw IoError("cannot write manifest in " + dir.string());
}

/// Reads annotations.jsonl and every referenced image.
inline std::vector<Sample> load_dataset(const std::filesystem::path &dir) {
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann)
    throw IoError("no annotations.jsonl in " + dir.string());
  std::vector<Sample> out;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty())
      continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception &e) {
      throw IoError("bad annotation line in " + dir.string() + ": " + e.what());
    }
    Sample s;
    s.image_file = j.at("image").get<std::string>();
    s.image = read_ppm(dir / s.image_file);
    for (const auto &b : j.at("boxes")) {
      BoxXYXY box{b.at("xmin").get<double>(), b.at("ymin").get<double>(),
                  b.at("xmax").get<double>(), b.at("ymax").get<double>(),
                  b.at("label").get<int>()};
      box.difficult = b.value("difficult", false);
      s.boxes.push_back(box);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool photometric = true;
  double expand_prob = 0.5;
  double max_expand = 4.0;
  bool random_crop = true;
  bool flip = true;
  double min_box_px = 2.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, photometric, expand_prob,
                                                max_expand, random_crop, flip, min_box_px)

struct Augmented {
  Image image;
  std::vector<BoxXYXY> boxes;
};

inline std::array<std::uint8_t, 3> mean_color(const Image &img) {
  std::array<std::uint64_t, 3> acc{0, 0, 0};
  for (std::size_t i = 0; i < img.width * img.height; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      acc[c] += img.rgb[i * 3 + c];
  const std::uint64_t n = std::max<std::uint64_t>(1, img.width * img.height);
  return {static_cast<std::uint8_t>(acc[0] / n), static_cast<std::uint8_t>(acc[1] / n),
          static_cast<std::uint8_t>(acc[2] / n)};
}

/// Places `img` at (left, top) on a canvas of (w, h) filled with `fill`.
inline Augmented expand(const Image &img, const std::vector<BoxXYXY> &boxes, std::size_t w,
                        std::size_t h, std::size_t left, std::size_t top,
                        std::array<std::uint8_t, 3> fill) {
  if (left + img.width > w || top + img.height > h)
    throw ShapeError("expand: image does not fit on canvas");
  Augmented out{Image(w, h, fill), {}};
  for (std::size_t y = 0; y < img.height; ++y)
    std::copy_n(&img.rgb[y * img.width * 3], img.width * 3,
                &out.image.rgb[((y + top) * w + left) * 3]);
  for (auto b : boxes) {
    b.xmin += static_cast<double>(left);
    b.xmax += static_cast<double>(left);
    b.ymin += static_cast<double>(top);
    b.ymax += static_cast<double>(top);
    out.boxes.push_back(b);
  }
  return out;
}

inline Augmented hflip(const Image &img, const std::vector<BoxXYXY> &boxes) {
  Augmented out{img, {}};
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.image.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  const auto W = static_cast<double>(img.width);
  for (auto b : boxes) {
    const double xmin = W - b.xmax, xmax = W - b.xmin;
    b.xmin = xmin;
    b.xmax = xmax;
    out.boxes.push_back(b);
  }
  return out;
}

/// Bilinear resize with half-pixel centers; boxes are scaled to match.
inline Augmented resize(const Image &img, const std::vector<BoxXYXY> &boxes, std::size_t w,
                        std::size_t h) {
  Augmented out{Image(w, h), {}};
  const double sx = static_cast<double>(img.width) / static_cast<double>(w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(h);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double ax = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - ay) * ((1 - ax) * img.at(x0, y0, c) + ax * img.at(x1, y0, c)) +
                         ay * ((1 - ax) * img.at(x0, y1, c) + ax * img.at(x1, y1, c));
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  for (const auto &b : boxes)
    out.boxes.push_back(b.scaled(1.0 / sx, 1.0 / sy));
  return out;
}

/// Crops to [x0, x0+w) x [y0, y0+h); keeps boxes whose centers fall inside,
/// clipped to the crop.
inline Augmented crop(const Image &img, const std::vector<BoxXYXY> &boxes, std::size_t x0,
                      std::size_t y0, std::size_t w, std::size_t h) {
  Augmented out{Image(w, h), {}};
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(&img.rgb[((y + y0) * img.width + x0) * 3], w * 3, &out.image.rgb[y * w * 3]);
  const auto fx0 = static_cast<double>(x0), fy0 = static_cast<double>(y0);
  const auto fx1 = fx0 + static_cast<double>(w), fy1 = fy0 + static_cast<double>(h);
  for (auto b : boxes) {
    const double cx = (b.xmin + b.xmax) / 2, cy = (b.ymin + b.ymax) / 2;
    if (cx < fx0 || cx >= fx1 || cy < fy0 || cy >= fy1)
      continue;
    b.xmin = std::max(b.xmin, fx0) - fx0;
    b.ymin = std::max(b.ymin, fy0) - fy0;
    b.xmax = std::min(b.xmax, fx1) - fx0;
    b.ymax = std::min(b.ymax, fy1) - fy0;
    out.boxes.push_back(b);
  }
  return out;
}

/// Brightness, contrast and per-channel gain; results rounded to nearest
/// (half away from zero) and clamped to [0, 255].
inline Image photometric_jitter(const Image &img, SplitMix64 &rng) {
  const double brightness = rng.uniform(-24, 24), contrast = rng.uniform(0.7, 1.3);
  std::array<double, 3> gain{rng.uniform(0.85, 1.15), rng.uniform(0.85, 1.15),
                             rng.uniform(0.85, 1.15)};
  Image out = img;
  for (std::size_t i = 0; i < img.width * img.height; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = ((img.rgb[i * 3 + c] - 127.5) * contrast + 127.5 + brightness) * gain[c];
      out.rgb[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  return out;
}

/// Photometric jitter, zoom-out, min-IoU random crop and horizontal flip,
/// returned at the input size. Boxes narrower than min_box_px are dropped.
inline Augmented augment(const Image &image, const std::vector<BoxXYXY> &boxes,
                         std::uint64_t seed, const AugmentConfig &cfg = {}) {
  SplitMix64 rng(seed);
  const std::size_t W = image.width, H = image.height;
  Augmented cur{image, boxes};
  if (cfg.photometric && rng.uniform() < 0.5)
    cur.image = photometric_jitter(cur.image, rng);
  if (cfg.max_expand > 1 && rng.uniform() < cfg.expand_prob) {
    const double f = rng.uniform(1.0, cfg.max_expand);
    const auto cw = static_cast<std::size_t>(std::lround(f * static_cast<double>(W)));
    const auto ch = static_cast<std::size_t>(std::lround(f * static_cast<double>(H)));
    const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cw - W)));
    const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ch - H)));
    cur = expand(cur.image, cur.boxes, cw, ch, left, top, mean_color(image));
  }
  if (cfg.random_crop && !cur.boxes.empty()) {
    static constexpr double modes[] = {-1.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.0};
    const double min_iou = modes[rng.uniform_int(0, 6)];
    if (min_iou >= 0) {
      const std::size_t cw = cur.image.width, ch = cur.image.height;
      for (int trial = 0; trial < 50; ++trial) {
        const auto w = static_cast<std::size_t>(rng.uniform(0.3, 1.0) * static_cast<double>(cw));
        const auto h = static_cast<std::size_t>(rng.uniform(0.3, 1.0) * static_cast<double>(ch));
        if (w == 0 || h == 0 || 2 * h < w || 2 * w < h)
          continue;
        const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cw - w)));
        const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ch - h)));
        const BoxXYXY rect{static_cast<double>(x0), static_cast<double>(y0),
                           static_cast<double>(x0 + w), static_cast<double>(y0 + h)};
        double lowest = 1.0;
        for (const auto &b : cur.boxes)
          lowest = std::min(lowest, iou(b, rect));
        if (lowest < min_iou)
          continue;
        Augmented c = crop(cur.image, cur.boxes, x0, y0, w, h);
        if (c.boxes.empty())
          continue;
        cur = std::move(c);
        break;
      }
    }
  }
  if (cfg.flip && rng.uniform() < 0.5)
    cur = hflip(cur.image, cur.boxes);
  if (cur.image.width != W || cur.image.height != H)
    cur = resize(cur.image, cur.boxes, W, H);
  std::vector<BoxXYXY> kept;
  for (auto b : cur.boxes) {
    b.xmin = std::clamp(b.xmin, 0.0, static_cast<double>(W));
    b.xmax = std::clamp(b.xmax, 0.0, static_cast<double>(W));
    b.ymin = std::clamp(b.ymin, 0.0, static_cast<double>(H));
    b.ymax = std::clamp(b.ymax, 0.0, static_cast<double>(H));
    if (b.width() >= cfg.min_box_px && b.height() >= cfg.min_box_px)
      kept.push_back(b);
  }
  cur.boxes = std::move(kept);
  return cur;
}

} // namespace rfb
