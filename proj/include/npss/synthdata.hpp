#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "npss/errors.hpp"
#include "npss/np_head.hpp"
#include "npss/rng.hpp"
#include "npss/tensor.hpp"

namespace npss {

enum class Split { kLabeled, kUnlabeled, kVal };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kLabeled: return "labeled";
    case Split::kUnlabeled: return "unlabeled";
    case Split::kVal: return "val";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::kLabeled;
  if (s == "unlabeled") return Split::kUnlabeled;
  if (s == "val") return Split::kVal;
  throw DataError("unknown split '" + s + "'");
}

enum class ShapeKind { kDisk, kRectangle, kCross };

/// Which foreground classes a scene may contain and how its background looks.
struct SceneSpec {
  int scene_type = 0;
  std::vector<int> allowed_classes;  // subset of 1..K; 0 is background
  std::array<double, 3> background{};
};

struct Sample {
  Tensor image;  // 3 x H x W, values k/255
  LabelMap mask;  // H x W
  int scene_type = 0;
  Split split = Split::kLabeled;
  bool operator==(const Sample&) const = default;
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  int n_labeled = 32;
  int n_unlabeled = 256;
  int n_val = 64;
  int height = 32;
  int width = 32;
  int n_foreground = 3;  // K
  int n_scene_types = 2;
  double noise_sigma = 0.05;

  int n_class() const { return n_foreground + 1; }
};

struct Dataset {
  DatasetConfig config;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(Split s) const {
    std::vector<const Sample*> out;
    for (const auto& x : samples)
      if (x.split == s) out.push_back(&x);
    return out;
  }
  int n_class() const { return config.n_class(); }
};

inline ShapeKind shape_for_class(int cls) { return static_cast<ShapeKind>((cls - 1) % 3); }

/// Scene s allows the K-1 consecutive classes starting at s (mod K), so two scene types
/// never share the same class subset when K >= 2.
inline std::vector<SceneSpec> make_scenes(const DatasetConfig& cfg) {
  static constexpr std::array<std::array<double, 3>, 6> kTints{{{0.10, 0.15, 0.35},
                                                               {0.35, 0.15, 0.10},
                                                               {0.12, 0.32, 0.12},
                                                               {0.30, 0.30, 0.10},
                                                               {0.28, 0.10, 0.30},
                                                               {0.10, 0.30, 0.30}}};
  const int k = cfg.n_foreground;
  const int width = std::max(1, k - 1);
  std::vector<SceneSpec> scenes;
  for (int s = 0; s < cfg.n_scene_types; ++s) {
    SceneSpec spec;
    spec.scene_type = s;
    for (int j = 0; j < width; ++j) spec.allowed_classes.push_back((s + j) % k + 1);
    std::sort(spec.allowed_classes.begin(), spec.allowed_classes.end());
    spec.background = kTints[static_cast<std::size_t>(s) % kTints.size()];
    scenes.push_back(std::move(spec));
  }
  return scenes;
}

namespace detail {

inline bool shape_contains(ShapeKind kind, int dy, int dx, int ry, int rx, int thick) {
  switch (kind) {
    case ShapeKind::kDisk: return dy * dy * rx * rx + dx * dx * ry * ry <= rx * rx * ry * ry;
    case ShapeKind::kRectangle: return std::abs(dy) <= ry && std::abs(dx) <= rx;
    case ShapeKind::kCross:
      return (std::abs(dx) <= thick && std::abs(dy) <= ry) || (std::abs(dy) <= thick && std::abs(dx) <= rx);
  }
  return false;
}

inline float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

}  // namespace detail

/// Draws one image of the given scene. Objects get class-independent colors, so classes
/// are told apart by shape and by the scene's class prior.
inline Sample generate_sample(const DatasetConfig& cfg, const SceneSpec& scene, Rng rng) {
  const int h = cfg.height, w = cfg.width;
  constexpr int kMaxAttempts = 200;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    LabelMap mask({h, w});
    std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
    std::array<std::vector<double>, 3> color;
    for (auto& ch : color) ch.assign(static_cast<std::size_t>(h) * w, 0.0);
    for (int c = 0; c < 3; ++c) {
      const double bg = scene.background[static_cast<std::size_t>(c)] + rng.uniform(-0.05, 0.05);
      std::fill(color[static_cast<std::size_t>(c)].begin(), color[static_cast<std::size_t>(c)].end(), bg);
    }
    const int n_objects = rng.uniform_int(2, 4);
    const int max_r = std::max(3, std::min(h, w) / 5);
    std::vector<int> area(static_cast<std::size_t>(n_objects), 0);
    std::vector<int> object_class(static_cast<std::size_t>(n_objects));
    for (int o = 0; o < n_objects; ++o) {
      const int cls = scene.allowed_classes[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(scene.allowed_classes.size()) - 1))];
      object_class[static_cast<std::size_t>(o)] = cls;
      const ShapeKind kind = shape_for_class(cls);
      const int ry = rng.uniform_int(3, max_r);
      const int rx = kind == ShapeKind::kRectangle ? rng.uniform_int(2, max_r) : ry;
      const int thick = std::max(1, std::min(rx, ry) / 3);
      const int cy = rng.uniform_int(ry, h - 1 - ry);
      const int cx = rng.uniform_int(rx, w - 1 - rx);
      std::array<double, 3> obj{};
      for (auto& v : obj) v = rng.uniform(0.45, 1.0);
      for (int y = cy - ry; y <= cy + ry; ++y)
        for (int x = cx - rx; x <= cx + rx; ++x) {
          if (!detail::shape_contains(kind, y - cy, x - cx, ry, rx, thick)) continue;
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          owner[i] = o;
          mask[i] = cls;
          ++area[static_cast<std::size_t>(o)];
          for (int c = 0; c < 3; ++c) color[static_cast<std::size_t>(c)][i] = obj[static_cast<std::size_t>(c)];
        }
    }
    // every object keeps at least half of its pixels visible
    std::vector<int> visible(static_cast<std::size_t>(n_objects), 0);
    for (int o : owner)
      if (o >= 0) ++visible[static_cast<std::size_t>(o)];
    bool ok = true;
    for (int o = 0; o < n_objects; ++o) ok = ok && 2 * visible[static_cast<std::size_t>(o)] >= area[static_cast<std::size_t>(o)];
    if (!ok) continue;

    Tensor image({3, h, w});
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < h * w; ++i)
        image[static_cast<std::size_t>(c) * h * w + i] =
            detail::quantize(color[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] + rng.normal(0.0, cfg.noise_sigma));
    return Sample{std::move(image), std::move(mask), scene.scene_type, Split::kLabeled};
  }
  throw DataError("could not place shapes without occlusion after " + std::to_string(kMaxAttempts) + " attempts");
}

/// Labeled, unlabeled and validation samples, each drawn from its own substream.
inline Dataset generate(const DatasetConfig& cfg) {
  if (cfg.n_foreground < 1 || cfg.n_foreground + 1 < 2) throw ConfigError("need at least 2 classes including background");
  if (cfg.height < 8 || cfg.width < 8) throw ConfigError("image extents must be at least 8");
  if (cfg.n_labeled < 0 || cfg.n_unlabeled < 0 || cfg.n_val < 0) throw ConfigError("split sizes must be non-negative");
  if (cfg.n_scene_types < 1) throw ConfigError("need at least one scene type");
  if (cfg.n_foreground + 1 > kIgnoreLabel) throw ConfigError("too many classes for 8-bit masks");
  const auto scenes = make_scenes(cfg);
  Dataset ds{cfg, {}};
  Rng root(cfg.seed, "synthdata");
  const int total = cfg.n_labeled + cfg.n_unlabeled + cfg.n_val;
  for (int i = 0; i < total; ++i) {
    Rng r = root.split("sample", static_cast<std::uint64_t>(i));
    const int scene = r.uniform_int(0, cfg.n_scene_types - 1);
    Sample s = generate_sample(cfg, scenes[static_cast<std::size_t>(scene)], r.split("draw"));
    s.split = i < cfg.n_labeled ? Split::kLabeled : (i < cfg.n_labeled + cfg.n_unlabeled ? Split::kUnlabeled : Split::kVal);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline Sample flip_horizontal(const Sample& s) {
  Sample out = s;
  const int c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.image.at(ch, y, x) = s.image.at(ch, y, w - 1 - x);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.mask.at(y, x) = s.mask.at(y, w - 1 - x);
  return out;
}

enum class AugmentStrength { kWeak, kStrong };

/// Brightness shift in +-0.2 plus pixel noise (sigma 0.05), clamped to [0, 1].
inline Tensor photometric_jitter(const Tensor& image, Rng& rng) {
  Tensor out = image;
  const double shift = rng.uniform(-0.2, 0.2);
  for (auto& v : out.data()) v = std::clamp(static_cast<float>(v + shift + rng.normal(0.0, 0.05)), 0.f, 1.f);
  return out;
}

/// weak: horizontal flip with probability 0.5; strong: flip, brightness jitter +-0.2 and
/// extra pixel noise (sigma 0.05). The mask only follows the geometric part.
inline Sample augment(const Sample& s, AugmentStrength strength, Rng& rng) {
  Sample out = rng.bernoulli(0.5) ? flip_horizontal(s) : s;
  if (strength == AugmentStrength::kStrong) out.image = photometric_jitter(out.image, rng);
  return out;
}

/// Axis-aligned box pasted from image `source` of the same batch.
struct MixBox {
  int source = 0;
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

/// Box covering half the image area at a uniform position.
inline MixBox random_mix_box(int source, int height, int width, Rng& rng) {
  MixBox b;
  b.source = source;
  b.h = std::max(1, static_cast<int>(std::lround(height * std::sqrt(0.5))));
  b.w = std::max(1, static_cast<int>(std::lround(width * std::sqrt(0.5))));
  b.y0 = rng.uniform_int(0, height - b.h);
  b.x0 = rng.uniform_int(0, width - b.w);
  return b;
}

/// Copies the box region of `src` into `dst` for CHW images or HW label maps.
template <class T>
void paste_box(BasicTensor<T>& dst, const BasicTensor<T>& src, const MixBox& b) {
  if (dst.shape() != src.shape()) throw ShapeError("paste_box: shape mismatch");
  const int rank = static_cast<int>(dst.shape().size());
  const int c = rank == 3 ? dst.dim(0) : 1, h = dst.dim(rank - 2), w = dst.dim(rank - 1);
  if (b.y0 < 0 || b.x0 < 0 || b.y0 + b.h > h || b.x0 + b.w > w) throw ShapeError("paste_box: box outside image");
  for (int ch = 0; ch < c; ++ch)
    for (int y = b.y0; y < b.y0 + b.h; ++y)
      for (int x = b.x0; x < b.x0 + b.w; ++x) {
        const std::size_t i = (static_cast<std::size_t>(ch) * h + y) * w + x;
        dst[i] = src[i];
      }
}

// ---------------------------------------------------------------------------
// Netpbm I/O and the on-disk dataset layout
// ---------------------------------------------------------------------------

namespace detail {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + p.string());
}

struct NetpbmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline NetpbmHeader parse_netpbm(const std::string& bytes, const std::string& what) {
  NetpbmHeader hdr;
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_ws();
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t += bytes[pos++];
    return t;
  };
  try {
    hdr.magic = token();
    hdr.width = std::stoi(token());
    hdr.height = std::stoi(token());
    hdr.maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw DataError(what + ": malformed netpbm header");
  }
  ++pos;  // single whitespace before raster
  hdr.data_offset = pos;
  if (hdr.maxval != 255 || hdr.width <= 0 || hdr.height <= 0) throw DataError(what + ": only 8-bit images are supported");
  return hdr;
}

}  // namespace detail

/// Binary PPM (P6) from a 3 x H x W tensor with values in [0, 1].
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected 3 x H x W");
  const int h = image.dim(1), w = image.dim(2);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        bytes.push_back(static_cast<char>(std::lround(std::clamp(image.at(c, y, x), 0.f, 1.f) * 255.f)));
  detail::write_file(path, bytes);
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto hdr = detail::parse_netpbm(bytes, path.string());
  if (hdr.magic != "P6") throw DataError(path.string() + ": not a binary PPM");
  const std::size_t n = static_cast<std::size_t>(hdr.width) * hdr.height * 3;
  if (bytes.size() < hdr.data_offset + n) throw DataError(path.string() + ": truncated raster");
  Tensor image({3, hdr.height, hdr.width});
  std::size_t i = hdr.data_offset;
  for (int y = 0; y < hdr.height; ++y)
    for (int x = 0; x < hdr.width; ++x)
      for (int c = 0; c < 3; ++c) image.at(c, y, x) = static_cast<float>(static_cast<unsigned char>(bytes[i++])) / 255.0f;
  return image;
}

/// Binary PGM (P5) of 8-bit values.
inline void write_pgm(const std::filesystem::path& path, const BasicTensor<int>& values) {
  if (values.rank() != 2) throw ShapeError("write_pgm: expected H x W");
  std::string bytes = "P5\n" + std::to_string(values.dim(1)) + " " + std::to_string(values.dim(0)) + "\n255\n";
  for (int v : values.data()) {
    if (v < 0 || v > 255) throw DataError("write_pgm: value out of 8-bit range");
    bytes.push_back(static_cast<char>(v));
  }
  detail::write_file(path, bytes);
}

inline BasicTensor<int> read_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto hdr = detail::parse_netpbm(bytes, path.string());
  if (hdr.magic != "P5") throw DataError(path.string() + ": not a binary PGM");
  const std::size_t n = static_cast<std::size_t>(hdr.width) * hdr.height;
  if (bytes.size() < hdr.data_offset + n) throw DataError(path.string() + ": truncated raster");
  BasicTensor<int> out({hdr.height, hdr.width});
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<unsigned char>(bytes[hdr.data_offset + i]);
  return out;
}

inline constexpr const char* kManifestName = "manifest.txt";
inline constexpr const char* kDatasetMetaName = "dataset.txt";

/// Writes <dir>/NNNNNN.ppm, NNNNNN.pgm per sample, manifest.txt ("image split scene" per
/// line) and dataset.txt with the generation parameters.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%06zu", i);
    const auto& s = ds.samples[i];
    write_ppm(dir / (std::string(stem) + ".ppm"), s.image);
    write_pgm(dir / (std::string(stem) + ".pgm"), s.mask);
    manifest << stem << ".ppm " << to_string(s.split) << ' ' << s.scene_type << '\n';
  }
  detail::write_file(dir / kManifestName, manifest.str());
  const auto& c = ds.config;
  std::ostringstream meta;
  meta << "seed=" << c.seed << "\nn_labeled=" << c.n_labeled << "\nn_unlabeled=" << c.n_unlabeled
       << "\nn_val=" << c.n_val << "\nheight=" << c.height << "\nwidth=" << c.width
       << "\nn_foreground=" << c.n_foreground << "\nn_scene_types=" << c.n_scene_types << std::setprecision(17)
       << "\nnoise_sigma=" << c.noise_sigma << '\n';
  detail::write_file(dir / kDatasetMetaName, meta.str());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  {
    std::istringstream meta(detail::read_file(dir / kDatasetMetaName));
    std::string line;
    while (std::getline(meta, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      auto& c = ds.config;
      try {
        if (key == "seed") c.seed = std::stoull(val);
        else if (key == "n_labeled") c.n_labeled = std::stoi(val);
        else if (key == "n_unlabeled") c.n_unlabeled = std::stoi(val);
        else if (key == "n_val") c.n_val = std::stoi(val);
        else if (key == "height") c.height = std::stoi(val);
        else if (key == "width") c.width = std::stoi(val);
        else if (key == "n_foreground") c.n_foreground = std::stoi(val);
        else if (key == "n_scene_types") c.n_scene_types = std::stoi(val);
        else if (key == "noise_sigma") c.noise_sigma = std::stod(val);
      } catch (const std::logic_error&) {
        throw DataError("dataset.txt: bad value for " + key);
      }
    }
  }
  std::istringstream manifest(detail::read_file(dir / kManifestName));
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string image, split;
    int scene = 0;
    if (!(ls >> image >> split >> scene)) throw DataError("malformed manifest line: " + line);
    Sample s;
    s.image = read_ppm(dir / image);
    s.mask = read_pgm(dir / (std::filesystem::path(image).replace_extension(".pgm")));
    if (s.mask.dim(0) != s.image.dim(1) || s.mask.dim(1) != s.image.dim(2)) throw DataError(image + ": mask size differs from image");
    for (int v : s.mask.data())
      if (v != kIgnoreLabel && v >= ds.config.n_class()) throw DataError(image + ": mask label " + std::to_string(v) + " out of range");
    s.scene_type = scene;
    s.split = parse_split(split);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace npss
