#include "dael/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dael/errors.hpp"

namespace dael::augment {

namespace {

using Pixels = std::vector<std::uint8_t>;

std::uint8_t clamp_round(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

int luminance(const Image& img, std::size_t pixel) {
  const auto* p = img.pixels.data() + pixel * Image::channels;
  return (p[0] * 299 + p[1] * 587 + p[2] * 114 + 500) / 1000;
}

// out = degenerate + factor * (img - degenerate)
Image blend(const Image& degenerate, const Image& img, double factor) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double d = degenerate.pixels[i];
    out.pixels[i] = clamp_round(d + factor * (img.pixels[i] - d));
  }
  return out;
}

Image map_pixels(const Image& img, const std::array<std::uint8_t, 256>& lut) {
  Image out = img;
  for (auto& v : out.pixels) v = lut[v];
  return out;
}

Image autocontrast(const Image& img) {
  Image out = img;
  for (int c = 0; c < Image::channels; ++c) {
    int lo = 255, hi = 0;
    for (std::size_t i = c; i < img.pixels.size(); i += Image::channels) {
      lo = std::min<int>(lo, img.pixels[i]);
      hi = std::max<int>(hi, img.pixels[i]);
    }
    if (hi <= lo) continue;
    const double scale = 255.0 / (hi - lo);
    for (std::size_t i = c; i < out.pixels.size(); i += Image::channels)
      out.pixels[i] = clamp_round((img.pixels[i] - lo) * scale);
  }
  return out;
}

// Histogram equalization; the lowest occupied level always maps to 0.
Image equalize(const Image& img) {
  Image out = img;
  for (int c = 0; c < Image::channels; ++c) {
    std::array<long, 256> hist{};
    for (std::size_t i = c; i < img.pixels.size(); i += Image::channels) ++hist[img.pixels[i]];
    long total = 0, last = 0, occupied = 0;
    for (const long h : hist)
      if (h) {
        total += h;
        last = h;
        ++occupied;
      }
    if (occupied <= 1) continue;
    const long step = (total - last) / 255;
    if (step == 0) continue;
    std::array<std::uint8_t, 256> lut{};
    long n = step / 2;
    for (int v = 0; v < 256; ++v) {
      lut[v] = static_cast<std::uint8_t>(std::min(255L, n / step));
      n += hist[v];
    }
    for (std::size_t i = c; i < out.pixels.size(); i += Image::channels)
      out.pixels[i] = lut[img.pixels[i]];
  }
  return out;
}

Image smooth(const Image& img) {
  // 3x3 kernel [1 1 1; 1 5 1; 1 1 1] / 13, border pixels kept.
  Image out = img;
  for (int y = 1; y + 1 < img.height; ++y)
    for (int x = 1; x + 1 < img.width; ++x)
      for (int c = 0; c < Image::channels; ++c) {
        int acc = 4 * img.at(y, x, c);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) acc += img.at(y + dy, x + dx, c);
        out.at(y, x, c) = clamp_round(acc / 13.0);
      }
  return out;
}

/// Resamples with a map from output offsets (relative to the image centre)
/// to source offsets. Bilinear, out-of-bounds reads return the fill value.
template <typename Map>
Image resample(const Image& img, Map map) {
  Image out(img.height, img.width);
  const double cx = img.width / 2.0, cy = img.height / 2.0;
  auto fetch = [&](int y, int x, int c) -> double {
    if (y < 0 || x < 0 || y >= img.height || x >= img.width) return kFill;
    return img.at(y, x, c);
  };
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const auto [su, sv] = map(x + 0.5 - cx, y + 0.5 - cy);
      const double sx = su + cx - 0.5, sy = sv + cy - 0.5;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      for (int c = 0; c < Image::channels; ++c) {
        const double v = (1 - fy) * ((1 - fx) * fetch(y0, x0, c) + fx * fetch(y0, x0 + 1, c)) +
                         fy * ((1 - fx) * fetch(y0 + 1, x0, c) + fx * fetch(y0 + 1, x0 + 1, c));
        out.at(y, x, c) = clamp_round(v);
      }
    }
  return out;
}

}  // namespace

const std::array<TransformSpec, 15>& transform_table() {
  static const std::array<TransformSpec, 15> table{{
      {Transform::AutoContrast, "AutoContrast", false, 0, 0, false},
      {Transform::Brightness, "Brightness", true, 0.1, 1.9, false},
      {Transform::Colour, "Colour", true, 0.1, 1.9, false},
      {Transform::Contrast, "Contrast", true, 0.1, 1.9, false},
      {Transform::Equalize, "Equalize", false, 0, 0, false},
      {Transform::Identity, "Identity", false, 0, 0, false},
      {Transform::Invert, "Invert", false, 0, 0, false},
      {Transform::Posterize, "Posterize", true, 4, 8, true},
      {Transform::Rotate, "Rotate", true, -30, 30, false},
      {Transform::Sharpness, "Sharpness", true, 0.1, 1.9, false},
      {Transform::ShearX, "ShearX", true, -0.3, 0.3, false},
      {Transform::ShearY, "ShearY", true, -0.3, 0.3, false},
      {Transform::Solarize, "Solarize", true, 0, 256, false},
      {Transform::TranslateX, "TranslateX", true, -0.3, 0.3, false},
      {Transform::TranslateY, "TranslateY", true, -0.3, 0.3, false},
  }};
  return table;
}

const TransformSpec& spec_of(Transform kind) {
  return transform_table()[static_cast<std::size_t>(kind)];
}

std::optional<Transform> transform_from_name(std::string_view name) {
  for (const auto& s : transform_table())
    if (s.name == name) return s.kind;
  return std::nullopt;
}

Image apply_transform(const TransformSpec& spec, double m, const Image& img) {
  if (spec.has_magnitude && !(m >= spec.lo && m <= spec.hi))
    throw ContractError(std::string(spec.name) + ": magnitude " + std::to_string(m) +
                        " outside [" + std::to_string(spec.lo) + ", " +
                        std::to_string(spec.hi) + "]");
  const std::size_t pixel_count = static_cast<std::size_t>(img.height) * img.width;
  switch (spec.kind) {
    case Transform::Identity:
      return img;
    case Transform::AutoContrast:
      return autocontrast(img);
    case Transform::Equalize:
      return equalize(img);
    case Transform::Invert: {
      std::array<std::uint8_t, 256> lut{};
      for (int v = 0; v < 256; ++v) lut[v] = static_cast<std::uint8_t>(255 - v);
      return map_pixels(img, lut);
    }
    case Transform::Posterize: {
      const int bits = static_cast<int>(std::lround(m));
      const auto mask = static_cast<std::uint8_t>(0xFF << (8 - bits));
      std::array<std::uint8_t, 256> lut{};
      for (int v = 0; v < 256; ++v) lut[v] = static_cast<std::uint8_t>(v & mask);
      return map_pixels(img, lut);
    }
    case Transform::Solarize: {
      std::array<std::uint8_t, 256> lut{};
      for (int v = 0; v < 256; ++v)
        lut[v] = static_cast<std::uint8_t>(v < m ? v : 255 - v);
      return map_pixels(img, lut);
    }
    case Transform::Brightness:
      return blend(Image(img.height, img.width, 0), img, m);
    case Transform::Colour: {
      Image gray(img.height, img.width);
      for (std::size_t p = 0; p < pixel_count; ++p) {
        const auto l = static_cast<std::uint8_t>(luminance(img, p));
        for (int c = 0; c < Image::channels; ++c) gray.pixels[p * Image::channels + c] = l;
      }
      return blend(gray, img, m);
    }
    case Transform::Contrast: {
      double total = 0;
      for (std::size_t p = 0; p < pixel_count; ++p) total += luminance(img, p);
      const auto mean = static_cast<std::uint8_t>(
          pixel_count ? static_cast<int>(total / static_cast<double>(pixel_count) + 0.5) : 0);
      return blend(Image(img.height, img.width, mean), img, m);
    }
    case Transform::Sharpness:
      return blend(smooth(img), img, m);
    case Transform::Rotate: {
      const double rad = m * std::numbers::pi / 180.0;
      const double cs = std::cos(rad), sn = std::sin(rad);
      return resample(img, [cs, sn](double u, double v) {
        return std::pair{cs * u - sn * v, sn * u + cs * v};
      });
    }
    case Transform::ShearX:
      return resample(img, [m](double u, double v) { return std::pair{u + m * v, v}; });
    case Transform::ShearY:
      return resample(img, [m](double u, double v) { return std::pair{u, v + m * u}; });
    case Transform::TranslateX: {
      const double shift = m * img.width;
      return resample(img, [shift](double u, double v) { return std::pair{u - shift, v}; });
    }
    case Transform::TranslateY: {
      const double shift = m * img.height;
      return resample(img, [shift](double u, double v) { return std::pair{u, v - shift}; });
    }
  }
  throw ContractError("apply_transform: unknown transform");
}

WeakParams sample_weak(Rng& rng) {
  WeakParams p;
  p.flip = uniform01(rng) < 0.5;
  p.shift_x = uniform_int(rng, -kWeakShift, kWeakShift);
  p.shift_y = uniform_int(rng, -kWeakShift, kWeakShift);
  return p;
}

Image weak_augment(const Image& img, const WeakParams& p) {
  Image out(img.height, img.width, kFill);
  for (int y = 0; y < img.height; ++y) {
    const int sy = y - p.shift_y;
    if (sy < 0 || sy >= img.height) continue;
    for (int x = 0; x < img.width; ++x) {
      int sx = x - p.shift_x;
      if (sx < 0 || sx >= img.width) continue;
      if (p.flip) sx = img.width - 1 - sx;
      for (int c = 0; c < Image::channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

Image weak_augment(const Image& img, Rng& rng) { return weak_augment(img, sample_weak(rng)); }

int default_cutout_side(const Image& img) {
  return std::max(1, std::min(img.height, img.width) / 2);
}

Image cutout(const Image& img, const CutoutParams& p) {
  if (p.side < 1) throw ContractError("cutout: side must be >= 1");
  Image out = img;
  const int y0 = std::max(0, p.center_y - p.side / 2);
  const int x0 = std::max(0, p.center_x - p.side / 2);
  const int y1 = std::min(img.height, p.center_y - p.side / 2 + p.side);
  const int x1 = std::min(img.width, p.center_x - p.side / 2 + p.side);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      for (int c = 0; c < Image::channels; ++c) out.at(y, x, c) = kFill;
  return out;
}

Image cutout(const Image& img, int side, Rng& rng) {
  CutoutParams p;
  p.side = side;
  p.center_y = uniform_int(rng, 0, img.height - 1);
  p.center_x = uniform_int(rng, 0, img.width - 1);
  return cutout(img, p);
}

StrongPlan sample_strong(Rng& rng, int height, int width) {
  StrongPlan plan;
  const auto& table = transform_table();
  for (auto& d : plan.draws) {
    const auto& spec = table[static_cast<std::size_t>(uniform_int(rng, 0, 14))];
    d.kind = spec.kind;
    d.executed = uniform01(rng) < kStrongExecProb;
    double m = uniform(rng, spec.lo, spec.hi);
    if (spec.integer) m = std::round(m);
    d.magnitude = spec.has_magnitude ? m : 0.0;
  }
  plan.cutout.side = std::max(1, std::min(height, width) / 2);
  plan.cutout.center_y = uniform_int(rng, 0, height - 1);
  plan.cutout.center_x = uniform_int(rng, 0, width - 1);
  return plan;
}

Image strong_augment(const Image& img, const StrongPlan& plan) {
  Image out = img;
  for (const auto& d : plan.draws)
    if (d.executed) out = apply_transform(d.kind, d.magnitude, out);
  return cutout(out, plan.cutout);
}

Image strong_augment(const Image& img, Rng& rng) {
  return strong_augment(img, sample_strong(rng, img.height, img.width));
}

std::vector<Image> augment_batch(std::span<const Image* const> images,
                                 std::span<const std::uint64_t> seeds, Kind kind,
                                 int workers) {
  if (images.size() != seeds.size())
    throw ContractError("augment_batch: one seed per image required");
  std::vector<Image> out(images.size());
  const auto n = static_cast<std::ptrdiff_t>(images.size());
#pragma omp parallel for schedule(static) num_threads(std::max(1, workers)) if (workers > 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& img = *images[static_cast<std::size_t>(i)];
    Rng rng(seeds[static_cast<std::size_t>(i)]);
    switch (kind) {
      case Kind::none:
        out[static_cast<std::size_t>(i)] = img;
        break;
      case Kind::weak:
        out[static_cast<std::size_t>(i)] = weak_augment(img, rng);
        break;
      case Kind::strong:
        out[static_cast<std::size_t>(i)] = strong_augment(img, rng);
        break;
    }
  }
  return out;
}

}  // namespace dael::augment
