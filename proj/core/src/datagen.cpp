#include "normshift/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "normshift/error.hpp"
#include "normshift/parallel.hpp"
#include "normshift/rng.hpp"

namespace normshift {

using nlohmann::json;

namespace {

constexpr std::size_t kPixels = kImageSize * kImageSize;
constexpr std::size_t kImageFloats = kImageChannels * kPixels;

// Stroke endpoints in glyph units: x in [-0.5, 0.5], y in [-0.8, 0.8], y down.
struct Segment {
  double x0, y0, x1, y1;
};

constexpr std::array<Segment, 11> kSegments{{
    {-0.5, -0.8, 0.5, -0.8},  // 0 top
    {0.5, -0.8, 0.5, 0.0},    // 1 upper right
    {0.5, 0.0, 0.5, 0.8},     // 2 lower right
    {-0.5, 0.8, 0.5, 0.8},    // 3 bottom
    {-0.5, 0.0, -0.5, 0.8},   // 4 lower left
    {-0.5, -0.8, -0.5, 0.0},  // 5 upper left
    {-0.5, 0.0, 0.5, 0.0},    // 6 middle
    {-0.5, -0.8, 0.5, 0.8},   // 7 diagonal down
    {0.5, -0.8, -0.5, 0.8},   // 8 diagonal up
    {0.0, -0.8, 0.0, 0.0},    // 9 upper centre
    {0.0, 0.0, 0.0, 0.8},     // 10 lower centre
}};

// Stroke sets per class; every pair differs in at least two strokes.
const std::array<std::vector<int>, kMaxClasses> kTemplates{{
    {0, 1, 2, 3, 4, 5},
    {9, 10},
    {0, 1, 6, 4, 3},
    {0, 1, 6, 2, 3},
    {5, 6, 1, 2},
    {0, 5, 6, 2, 3},
    {5, 4, 3, 2, 6},
    {0, 8},
    {7, 8},
    {0, 1, 5, 6, 10},
}};

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = px - (ax + t * dx), ey = py - (ay + t * dy);
  return std::sqrt(ex * ex + ey * ey);
}

void render_glyph(int label, Rng& rng, float* out) {
  const double angle = uniform(rng, -12.0, 12.0) * std::numbers::pi / 180.0;
  const double scale = 8.0 * uniform(rng, 0.9, 1.1);
  const double cx = 12.0 + uniform(rng, -1.5, 1.5);
  const double cy = 12.0 + uniform(rng, -1.5, 1.5);
  const double half = 0.5 * uniform(rng, 1.6, 2.4);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<Segment> strokes;
  for (int s : kTemplates[static_cast<std::size_t>(label)]) {
    const auto& g = kSegments[static_cast<std::size_t>(s)];
    strokes.push_back({cx + scale * (ca * g.x0 - sa * g.y0), cy + scale * (sa * g.x0 + ca * g.y0),
                       cx + scale * (ca * g.x1 - sa * g.y1), cy + scale * (sa * g.x1 + ca * g.y1)});
  }
  for (std::size_t y = 0; y < kImageSize; ++y) {
    for (std::size_t x = 0; x < kImageSize; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double d = 1e9;
      for (const auto& s : strokes) d = std::min(d, segment_distance(px, py, s.x0, s.y0, s.x1, s.y1));
      const auto v = static_cast<float>(std::clamp(half + 0.5 - d, 0.0, 1.0));
      for (std::size_t c = 0; c < kImageChannels; ++c) out[c * kPixels + y * kImageSize + x] = v;
    }
  }
}

void check_images(const Tensor<float>& images, const char* op) {
  if (images.rank() != 4 || images.h() == 0 || images.w() == 0) {
    throw ShapeError(std::string(op) + ": expected (N,C,H,W) images, got " + shape_str(images.shape()));
  }
}

// 3x3 mean with replicated borders, one plane.
void box3(const float* in, float* out, std::size_t h, std::size_t w) {
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      float acc = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(h) - 1));
        for (int dx = -1; dx <= 1; ++dx) {
          const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(w) - 1));
          acc += in[yy * w + xx];
        }
      }
      out[y * w + x] = acc / 9.0f;
    }
  }
}

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

const std::array<double, 5> kGaussian{0.04, 0.08, 0.12, 0.18, 0.26};
const std::array<double, 5> kImpulse{0.03, 0.06, 0.09, 0.17, 0.27};
const std::array<double, 5> kBlurPasses{1, 2, 3, 5, 8};
const std::array<double, 5> kContrast{0.75, 0.5, 0.4, 0.3, 0.2};
const std::array<double, 5> kBrightness{0.1, 0.2, 0.3, 0.4, 0.5};
const std::array<double, 5> kPixelate{2, 3, 4, 6, 8};

bool known(std::string_view name, const auto& names) {
  return std::find(names.begin(), names.end(), name) != names.end();
}

int parse_level(std::string_view text) {
  int level = -1;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), level);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ValidationError("corruption level '" + std::string(text) + "' is not an integer");
  }
  return level;
}

}  // namespace

const std::array<double, 5>& corruption_table(std::string_view type) {
  if (type == "gaussian_noise") return kGaussian;
  if (type == "impulse_noise") return kImpulse;
  if (type == "box_blur") return kBlurPasses;
  if (type == "contrast") return kContrast;
  if (type == "brightness") return kBrightness;
  if (type == "pixelate") return kPixelate;
  throw ValidationError("unknown corruption type '" + std::string(type) + "'");
}

std::string DomainSpec::tag() const {
  switch (kind) {
    case DomainKind::Source: return "source";
    case DomainKind::Corruption: return "corruption:" + name + ":" + std::to_string(level);
    case DomainKind::Style: return "style:" + name;
  }
  return "source";
}

DomainSpec parse_domain_spec(std::string_view text, std::uint64_t seed) {
  DomainSpec spec;
  spec.seed = seed;
  if (text == "source") return spec;
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(':', start);
    parts.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (parts.size() == 3 && parts[0] == "corruption") {
    if (!known(parts[1], kCorruptionTypes)) throw ValidationError("unknown corruption type '" + std::string(parts[1]) + "'");
    spec.kind = DomainKind::Corruption;
    spec.name = std::string(parts[1]);
    spec.level = parse_level(parts[2]);
    if (spec.level < 1 || spec.level > 5) {
      throw ValidationError("corruption level " + std::to_string(spec.level) + " outside 1..5");
    }
    return spec;
  }
  if (parts.size() == 2 && parts[0] == "style") {
    if (!known(parts[1], kStyleNames)) throw ValidationError("unknown style '" + std::string(parts[1]) + "'");
    spec.kind = DomainKind::Style;
    spec.name = std::string(parts[1]);
    return spec;
  }
  throw ValidationError("malformed domain spec '" + std::string(text) +
                        "' (expected source, corruption:<type>:<level> or style:<name>)");
}

Dataset gen_source(std::uint64_t seed, std::size_t n, std::size_t classes) {
  if (classes < 2 || classes > kMaxClasses) {
    throw ValidationError("classes must lie in 2.." + std::to_string(kMaxClasses) + ", got " + std::to_string(classes));
  }
  if (n < classes) throw ValidationError("need at least one image per class: n=" + std::to_string(n) + " < K=" + std::to_string(classes));
  Dataset ds;
  ds.images = Tensor<float>(Shape{n, kImageChannels, kImageSize, kImageSize});
  ds.labels.resize(n);
  parallel_for(n, [&](std::size_t i) {
    const auto label = static_cast<std::int32_t>(i % classes);
    ds.labels[i] = label;
    Rng rng(derive_seed(seed, "glyph", i));
    render_glyph(label, rng, ds.images.ptr() + i * kImageFloats);
  });
  ds.manifest = json{{"domain", "source"},
                     {"seed", seed},
                     {"n", n},
                     {"classes", classes},
                     {"image", {kImageChannels, kImageSize, kImageSize}},
                     {"generator", "glyph-strokes/1"}};
  return ds;
}

Tensor<float> apply_corruption(const Tensor<float>& images, std::string_view type, int level, std::uint64_t seed) {
  check_images(images, "apply_corruption");
  const auto& table = corruption_table(type);
  if (level == 0) return images;
  if (level < 1 || level > 5) throw ValidationError("corruption level " + std::to_string(level) + " outside 0..5");
  const double v = table[static_cast<std::size_t>(level - 1)];
  Tensor<float> out = images;
  const std::size_t n = images.n(), ch = images.c(), h = images.h(), w = images.w();
  const std::size_t per = ch * h * w;

  parallel_for(n, [&](std::size_t i) {
    float* img = out.ptr() + i * per;
    Rng rng(derive_seed(seed, type, i));
    if (type == "gaussian_noise") {
      for (std::size_t k = 0; k < per; ++k) img[k] = static_cast<float>(img[k] + v * normal(rng));
    } else if (type == "impulse_noise") {
      for (std::size_t k = 0; k < per; ++k) {
        const double u = uniform01(rng);
        const double salt = uniform01(rng);
        if (u < v) img[k] = salt < 0.5 ? 0.0f : 1.0f;
      }
    } else if (type == "box_blur") {
      std::vector<float> tmp(h * w);
      for (std::size_t c = 0; c < ch; ++c) {
        float* plane = img + c * h * w;
        for (int pass = 0; pass < static_cast<int>(v); ++pass) {
          box3(plane, tmp.data(), h, w);
          std::copy(tmp.begin(), tmp.end(), plane);
        }
      }
    } else if (type == "contrast") {
      double mean = 0;
      for (std::size_t k = 0; k < per; ++k) mean += img[k];
      mean /= static_cast<double>(per);
      for (std::size_t k = 0; k < per; ++k) img[k] = clip01((img[k] - mean) * v + mean);
    } else if (type == "brightness") {
      for (std::size_t k = 0; k < per; ++k) img[k] = clip01(img[k] + v);
    } else {  // pixelate
      const auto b = static_cast<std::size_t>(v);
      for (std::size_t c = 0; c < ch; ++c) {
        float* plane = img + c * h * w;
        for (std::size_t by = 0; by < h; by += b) {
          for (std::size_t bx = 0; bx < w; bx += b) {
            const std::size_t ye = std::min(h, by + b), xe = std::min(w, bx + b);
            double acc = 0;
            for (std::size_t y = by; y < ye; ++y)
              for (std::size_t x = bx; x < xe; ++x) acc += plane[y * w + x];
            const auto mean = static_cast<float>(acc / static_cast<double>((ye - by) * (xe - bx)));
            for (std::size_t y = by; y < ye; ++y)
              for (std::size_t x = bx; x < xe; ++x) plane[y * w + x] = mean;
          }
        }
      }
    }
  });
  return out;
}

Tensor<float> apply_style(const Tensor<float>& images, std::string_view name, std::uint64_t seed) {
  check_images(images, "apply_style");
  if (!known(name, kStyleNames)) throw ValidationError("unknown style '" + std::string(name) + "'");
  Tensor<float> out = images;
  const std::size_t n = images.n(), ch = images.c(), h = images.h(), w = images.w();
  const std::size_t per = ch * h * w;

  parallel_for(n, [&](std::size_t i) {
    float* img = out.ptr() + i * per;
    const float* src = images.ptr() + i * per;
    if (name == "invert") {
      for (std::size_t k = 0; k < per; ++k) img[k] = 1.0f - src[k];
    } else if (name == "texture_bg") {
      // Smooth colour noise: a 4x4 control grid per channel, bilinearly upsampled.
      constexpr std::size_t grid = 4;
      Rng rng(derive_seed(seed, "texture", i));
      for (std::size_t c = 0; c < ch; ++c) {
        double ctrl[grid][grid];
        for (auto& row : ctrl)
          for (auto& cell : row) cell = uniform(rng, 0.1, 0.7);
        for (std::size_t y = 0; y < h; ++y) {
          const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * (grid - 1);
          const auto y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), grid - 2);
          const double ty = gy - static_cast<double>(y0);
          for (std::size_t x = 0; x < w; ++x) {
            const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * (grid - 1);
            const auto x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), grid - 2);
            const double tx = gx - static_cast<double>(x0);
            const double bg = (1 - ty) * ((1 - tx) * ctrl[y0][x0] + tx * ctrl[y0][x0 + 1]) +
                              ty * ((1 - tx) * ctrl[y0 + 1][x0] + tx * ctrl[y0 + 1][x0 + 1]);
            const std::size_t k = c * h * w + y * w + x;
            img[k] = clip01(src[k] + (1.0 - src[k]) * bg);
          }
        }
      }
    } else {  // dilate: 3x3 max filter
      for (std::size_t c = 0; c < ch; ++c) {
        const float* plane = src + c * h * w;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            float m = plane[y * w + x];
            for (std::size_t yy = y > 0 ? y - 1 : 0; yy <= std::min(h - 1, y + 1); ++yy)
              for (std::size_t xx = x > 0 ? x - 1 : 0; xx <= std::min(w - 1, x + 1); ++xx) m = std::max(m, plane[yy * w + xx]);
            img[c * h * w + y * w + x] = m;
          }
        }
      }
    }
  });
  return out;
}

Dataset apply_domain(const Dataset& clean, const DomainSpec& spec) {
  Dataset ds;
  ds.labels = clean.labels;
  ds.manifest = clean.manifest;
  const std::uint64_t seed = derive_seed(spec.seed, "domain");
  switch (spec.kind) {
    case DomainKind::Source: ds.images = clean.images; break;
    case DomainKind::Corruption: ds.images = apply_corruption(clean.images, spec.name, spec.level, seed); break;
    case DomainKind::Style: ds.images = apply_style(clean.images, spec.name, seed); break;
  }
  ds.manifest["domain"] = spec.tag();
  ds.manifest["domain_seed"] = spec.seed;
  return ds;
}

Dataset generate_domain(const DomainSpec& spec, std::size_t n, std::size_t classes) {
  return apply_domain(gen_source(spec.seed, n, classes), spec);
}

// Dataset layout (little-endian):
//   "NSDS" | u32 version | u32 len + JSON manifest | u32 n | u32 C,H,W |
//   f32 images[n*C*H*W] | u32 labels[n]
void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  check_images(ds.images, "write_dataset");
  if (ds.images.n() != ds.labels.size()) {
    throw ValidationError("dataset has " + std::to_string(ds.images.n()) + " images but " +
                          std::to_string(ds.labels.size()) + " labels");
  }
  const std::string manifest = ds.manifest.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open dataset for writing: " + path.string());
  os.write("NSDS", 4);
  io::put<std::uint32_t>(os, kDatasetVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(manifest.size()));
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.n()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.c()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.h()));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.w()));
  io::put_f32_array(os, ds.images.ptr(), ds.images.size());
  for (auto l : ds.labels) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(l));
  if (!os) throw IoError("failed writing dataset: " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset: " + path.string());
  if (io::get_bytes(is, 4, "magic") != "NSDS") throw FormatError("not a dataset file (bad magic): " + path.string());
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  const auto mlen = io::get<std::uint32_t>(is, "manifest length");
  Dataset ds;
  try {
    ds.manifest = json::parse(io::get_bytes(is, mlen, "manifest"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset manifest is not valid JSON: ") + e.what());
  }
  const auto n = io::get<std::uint32_t>(is, "image count");
  Shape shape{n, 0, 0, 0};
  for (std::size_t k = 1; k < 4; ++k) shape[k] = io::get<std::uint32_t>(is, "image dims");
  if (shape[1] == 0 || shape[2] == 0 || shape[3] == 0) throw FormatError("dataset has a zero image dimension");
  if (ds.manifest.contains("n") && ds.manifest["n"].is_number_unsigned() && ds.manifest["n"].get<std::size_t>() != n) {
    throw FormatError("count mismatch: manifest says " + ds.manifest["n"].dump() + ", header says " + std::to_string(n));
  }
  ds.images = Tensor<float>(shape);
  io::get_f32_array(is, ds.images.ptr(), ds.images.size(), "image payload");
  ds.labels.resize(n);
  for (auto& l : ds.labels) {
    const auto v = io::get<std::uint32_t>(is, "labels");
    if (v > static_cast<std::uint32_t>(INT32_MAX)) throw FormatError("label out of range");
    l = static_cast<std::int32_t>(v);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("count mismatch: trailing bytes after labels");
  return ds;
}

}  // namespace normshift
