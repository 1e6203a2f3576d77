#pragma once

// Weak (flip-and-shift) and strong (RandAugment followed by Cutout) image
// augmentation. Every stochastic entry point has a parametric twin taking the
// already-drawn parameters, so tests can force any outcome.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dael/image.hpp"
#include "dael/rng.hpp"

namespace dael::augment {

inline constexpr std::uint8_t kFill = 127;
inline constexpr int kWeakShift = 4;
inline constexpr int kStrongDraws = 2;
inline constexpr double kStrongExecProb = 0.6;

enum class Transform {
  AutoContrast,
  Brightness,
  Colour,
  Contrast,
  Equalize,
  Identity,
  Invert,
  Posterize,
  Rotate,
  Sharpness,
  ShearX,
  ShearY,
  Solarize,
  TranslateX,
  TranslateY,
};

struct TransformSpec {
  Transform kind;
  std::string_view name;
  bool has_magnitude;
  double lo;
  double hi;
  bool integer;
};

/// The 15 strong-augmentation transforms with their magnitude ranges.
const std::array<TransformSpec, 15>& transform_table();
const TransformSpec& spec_of(Transform kind);
std::optional<Transform> transform_from_name(std::string_view name);

/// Applies one transform. Magnitudes outside the transform's range raise
/// ContractError; parameterless transforms ignore the magnitude.
Image apply_transform(const TransformSpec& spec, double magnitude, const Image& img);
inline Image apply_transform(Transform kind, double magnitude, const Image& img) {
  return apply_transform(spec_of(kind), magnitude, img);
}

struct WeakParams {
  bool flip = false;
  int shift_x = 0;
  int shift_y = 0;
};

WeakParams sample_weak(Rng& rng);
Image weak_augment(const Image& img, const WeakParams& params);
Image weak_augment(const Image& img, Rng& rng);

struct CutoutParams {
  int center_y = 0;
  int center_x = 0;
  int side = 1;
};

/// Half the shorter image side: 16 for 32x32 inputs.
int default_cutout_side(const Image& img);
Image cutout(const Image& img, const CutoutParams& params);
Image cutout(const Image& img, int side, Rng& rng);

struct StrongDraw {
  Transform kind = Transform::Identity;
  bool executed = false;
  double magnitude = 0.0;
};

struct StrongPlan {
  std::array<StrongDraw, kStrongDraws> draws;
  CutoutParams cutout;
};

StrongPlan sample_strong(Rng& rng, int height, int width);
Image strong_augment(const Image& img, const StrongPlan& plan);
Image strong_augment(const Image& img, Rng& rng);

enum class Kind { none, weak, strong };

/// Augments each image with its own stream seeded from `seeds[i]`. Output is
/// independent of `workers`.
std::vector<Image> augment_batch(std::span<const Image* const> images,
                                 std::span<const std::uint64_t> seeds, Kind kind,
                                 int workers = 1);

}  // namespace dael::augment
