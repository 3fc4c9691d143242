#pragma once

// Synthetic multi-object scenes and the on-disk dataset layout:
//
//   <dir>/manifest.txt              one image id per line
//   <dir>/images/<id>.png           8-bit RGB, lossless
//   <dir>/annotations/<id>.txt      first line: image id
//                                   then one line per object: class_id l t r b
//
// Coordinates are written in shortest round-trip decimal form.

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "mdod/diffcore.hpp"
#include "mdod/geometry.hpp"
#include "mdod/random.hpp"

namespace mdod {

struct Scene {
  std::string image_id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // HxWx3, values k/255
  std::vector<Box> annotations;

  diff::Tensor image() const { return diff::Tensor::from({height, width, 3}, pixels); }

  friend bool operator==(const Scene&, const Scene&) = default;
};

enum class ShapeKind { rectangle = 0, disc = 1, triangle = 2 };

struct DataGenConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 3;
  std::size_t min_objects = 1;
  std::size_t max_objects = 5;
  double min_object_size = 12.0;
  double max_object_size = 28.0;
  double color_jitter = 0.1;
  double noise = 0.05;
  double max_overlap = 0.3;  // placement retries while IoU with an earlier object exceeds this
  std::uint64_t seed = 0;

  void validate() const {
    if (min_objects > max_objects) throw std::invalid_argument("min_objects > max_objects");
    if (num_classes < 1 || num_classes > 3) throw std::invalid_argument("num_classes must be in [1, 3] (rectangle, disc, triangle)");
    if (!(min_object_size >= 2.0) || min_object_size > max_object_size ||
        max_object_size > static_cast<double>(image_size)) {
      throw std::invalid_argument("object size range does not fit the image");
    }
  }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool shape_covers(ShapeKind kind, double l, double t, double w, double h, double px, double py) {
  const double u = (px - l) / w, v = (py - t) / h;  // normalized position in the bounding frame
  if (u < 0.0 || u >= 1.0 || v < 0.0 || v >= 1.0) return false;
  switch (kind) {
    case ShapeKind::rectangle: return true;
    case ShapeKind::disc: {
      const double du = u - 0.5, dv = v - 0.5;
      return du * du + dv * dv <= 0.25;
    }
    case ShapeKind::triangle:  // apex top-center, base along the bottom
      return std::abs(u - 0.5) <= 0.5 * v;
  }
  return false;
}

inline double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace detail

/// Renders one scene. Objects of random class, size, position and color are
/// painted in order over a noisy background; each annotation is the tight
/// box of that object's own rasterized mask.
inline Scene generate_scene(const DataGenConfig& cfg, Rng& rng, std::string image_id = "scene") {
  cfg.validate();
  const std::size_t H = cfg.image_size, W = cfg.image_size;
  Scene s;
  s.image_id = std::move(image_id);
  s.height = H;
  s.width = W;
  s.pixels.resize(H * W * 3);
  const double base = uniform(rng, 0.05, 0.35);
  for (double& v : s.pixels) v = base + cfg.noise * normal01(rng);

  const auto count = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(cfg.min_objects),
                                                          static_cast<std::int64_t>(cfg.max_objects)));
  std::vector<Box> placed;
  while (s.annotations.size() < count) {
    const auto cls = static_cast<int>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.num_classes) - 1));
    double w = 0, h = 0, l = 0, t = 0;
    for (int attempt = 0; attempt < 20; ++attempt) {
      w = uniform(rng, cfg.min_object_size, cfg.max_object_size);
      h = uniform(rng, cfg.min_object_size, cfg.max_object_size);
      l = uniform(rng, 0.0, static_cast<double>(W) - w);
      t = uniform(rng, 0.0, static_cast<double>(H) - h);
      const Box cand{l, t, l + w, t + h};
      if (std::none_of(placed.begin(), placed.end(), [&](const Box& b) { return iou(b, cand) > cfg.max_overlap; })) break;
    }
    double color[3];
    const double hue_base = uniform(rng, 0.55, 1.0);
    for (double& c : color) c = std::clamp(hue_base + cfg.color_jitter * uniform(rng, -1.0, 1.0) - uniform(rng, 0.0, 0.4), 0.0, 1.0);

    std::size_t minx = W, miny = H, maxx = 0, maxy = 0;
    bool any = false;
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        if (!detail::shape_covers(static_cast<ShapeKind>(cls), l, t, w, h, static_cast<double>(j) + 0.5,
                                  static_cast<double>(i) + 0.5)) {
          continue;
        }
        any = true;
        minx = std::min(minx, j);
        maxx = std::max(maxx, j);
        miny = std::min(miny, i);
        maxy = std::max(maxy, i);
        for (std::size_t c = 0; c < 3; ++c) s.pixels[(i * W + j) * 3 + c] = color[c];
      }
    }
    if (!any) continue;
    Box ann{static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx + 1),
            static_cast<double>(maxy + 1), cls, std::nullopt};
    placed.push_back(Box{l, t, l + w, t + h});
    s.annotations.push_back(ann);
  }
  for (double& v : s.pixels) v = detail::quantize8(v);
  return s;
}

/// Scenes `prefix_00000`... with per-scene seeds derived from cfg.seed.
inline std::vector<Scene> generate_dataset(const DataGenConfig& cfg, std::size_t n, const std::string& prefix,
                                           std::uint64_t stream = 0) {
  std::vector<Scene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.seed ^ splitmix64(stream), i));
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%05zu", prefix.c_str(), i);
    out.push_back(generate_scene(cfg, rng, id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG

inline void write_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                      std::span<const double> pixels) {
  std::vector<std::uint8_t> buf(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pixels[i], 0.0, 1.0) * 255.0));
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw DatasetError(path.string() + ": PNG write failed: " + img.message);
  }
}

struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;
};

inline RgbImage read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DatasetError(path.string() + ": cannot read PNG: " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DatasetError(path.string() + ": PNG decode failed: " + img.message);
  }
  RgbImage out{img.height, img.width, std::vector<double>(buf.size())};
  for (std::size_t i = 0; i < buf.size(); ++i) out.pixels[i] = static_cast<double>(buf[i]) / 255.0;
  return out;
}

// ---------------------------------------------------------------------------
// Annotation text

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string format_annotations(const Scene& s) {
  std::string out = s.image_id + "\n";
  for (const Box& b : s.annotations) {
    out += std::to_string(b.class_id.value_or(-1)) + " " + format_double(b.l) + " " + format_double(b.t) + " " +
           format_double(b.r) + " " + format_double(b.b) + "\n";
  }
  return out;
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t j = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

template <class T>
bool parse_number(std::string_view tok, T& out) {
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return res.ec == std::errc{} && res.ptr == tok.data() + tok.size();
}

}  // namespace detail

/// Parses an annotation record. `source` names the file in error messages.
inline std::pair<std::string, std::vector<Box>> parse_annotations(std::string_view text, const std::string& source) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t nl = text.find('\n', start);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  auto fail = [&](std::size_t lineno, const std::string& msg) {
    return DatasetError(source + ":" + std::to_string(lineno) + ": " + msg);
  };
  if (lines.empty() || detail::split_ws(lines[0]).size() != 1) throw fail(1, "expected image id on the first line");
  std::string id(detail::split_ws(lines[0])[0]);
  std::vector<Box> boxes;
  for (std::size_t n = 1; n < lines.size(); ++n) {
    const auto toks = detail::split_ws(lines[n]);
    if (toks.empty()) continue;
    if (toks.size() != 5) {
      throw fail(n + 1, "expected 'class_id l t r b', got " + std::to_string(toks.size()) + " fields (record " +
                            std::to_string(boxes.size()) + ")");
    }
    int cls = 0;
    double c[4];
    if (!detail::parse_number(toks[0], cls) || cls < 0) throw fail(n + 1, "bad class id '" + std::string(toks[0]) + "'");
    for (int k = 0; k < 4; ++k) {
      if (!detail::parse_number(toks[k + 1], c[k]) || !std::isfinite(c[k])) {
        throw fail(n + 1, "bad coordinate '" + std::string(toks[k + 1]) + "'");
      }
    }
    Box b{c[0], c[1], c[2], c[3], cls, std::nullopt};
    if (!b.valid()) throw fail(n + 1, "box has l > r or t > b");
    boxes.push_back(b);
  }
  return {id, boxes};
}

inline void save_dataset(std::span<const Scene> scenes, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "annotations", ec);
  if (ec) throw DatasetError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw DatasetError("cannot write " + (dir / "manifest.txt").string());
  for (const Scene& s : scenes) {
    write_png(dir / "images" / (s.image_id + ".png"), s.height, s.width, s.pixels);
    const auto ann_path = dir / "annotations" / (s.image_id + ".txt");
    std::ofstream ann(ann_path, std::ios::trunc);
    ann << format_annotations(s);
    if (!ann) throw DatasetError("cannot write " + ann_path.string());
    manifest << s.image_id << "\n";
  }
  if (!manifest) throw DatasetError("write failed for " + (dir / "manifest.txt").string());
}

inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DatasetError("dataset directory " + dir.string() + " does not exist");
  const auto manifest_path = dir / "manifest.txt";
  std::vector<std::string> ids;
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    std::string line;
    while (std::getline(in, line)) {
      const auto toks = detail::split_ws(line);
      if (!toks.empty()) ids.emplace_back(toks[0]);
    }
  }
  if (ids.empty()) {
    std::cerr << "warning: dataset " << dir.string() << " is empty\n";
    return {};
  }
  std::vector<Scene> scenes;
  scenes.reserve(ids.size());
  for (const auto& id : ids) {
    const auto ann_path = dir / "annotations" / (id + ".txt");
    std::ifstream in(ann_path, std::ios::binary);
    if (!in) throw DatasetError(ann_path.string() + ": missing annotation file");
    std::stringstream ss;
    ss << in.rdbuf();
    auto [file_id, boxes] = parse_annotations(ss.str(), ann_path.string());
    if (file_id != id) throw DatasetError(ann_path.string() + ":1: image id '" + file_id + "' does not match manifest '" + id + "'");
    auto img = read_png(dir / "images" / (id + ".png"));
    Scene s{id, img.height, img.width, std::move(img.pixels), std::move(boxes)};
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace mdod
