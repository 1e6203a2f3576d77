#pragma once

// Shared convolutional backbone with K linear expert heads.
//
//   x (B x 3 x S x S)
//     -> [conv3x3 + relu + maxpool2x2] x 3   (widths w1, w2, w3)
//     -> flatten -> linear(d) -> relu        (features, B x d)
//     -> head_i: linear(C) -> softmax        (expert i)

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dael/tensor.hpp"

namespace dael {

struct Architecture {
  int image_side = 32;
  std::array<int, 3> widths{32, 64, 128};
  int feature_dim = 128;
  int num_experts = 3;
  int num_classes = 5;

  void validate() const;
  /// Flattened size of the last feature map.
  std::size_t flat_dim() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

template <typename T>
struct ModelParams {
  Architecture arch;
  std::array<Tensor<T>, 3> conv_w;  // O x I x 3 x 3
  std::array<Tensor<T>, 3> conv_b;  // O
  Tensor<T> fc_w;                   // flat x d
  Tensor<T> fc_b;                   // d
  std::vector<Tensor<T>> head_w;    // d x C
  std::vector<Tensor<T>> head_b;    // C

  int num_experts() const { return static_cast<int>(head_w.size()); }
  int num_classes() const { return arch.num_classes; }

  /// Every parameter tensor in checkpoint order.
  std::vector<Tensor<T>> all() const;
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;
  void zero_grad();
};

/// Conv and linear weights ~ N(0, 2 / fan_in), biases zero.
template <typename T>
ModelParams<T> init_params(const Architecture& arch, std::uint64_t seed);

/// B x d feature matrix.
template <typename T>
Tensor<T> backbone(const ModelParams<T>& p, const Tensor<T>& x);

template <typename T>
Tensor<T> head_probs(const ModelParams<T>& p, int expert, const Tensor<T>& features);

/// softmax(head_i(backbone(x))).
template <typename T>
Tensor<T> expert_forward(const ModelParams<T>& p, int expert, const Tensor<T>& x);

/// Arithmetic mean of probability tensors of equal shape.
template <typename T>
Tensor<T> average(std::span<const Tensor<T>> probs);

/// Mean of the listed experts' outputs on one shared feature matrix.
template <typename T>
Tensor<T> ensemble_from_features(const ModelParams<T>& p, const Tensor<T>& features,
                                 std::span<const int> subset);

template <typename T>
Tensor<T> ensemble_predict(const ModelParams<T>& p, const Tensor<T>& x,
                           std::span<const int> subset);

/// Row-wise argmax; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& probs);

/// Argmax of the all-expert ensemble.
template <typename T>
std::vector<int> predict_class(const ModelParams<T>& p, const Tensor<T>& x);

std::vector<int> all_experts(int k);

// ---- checkpoint (DAELCK1) ------------------------------------------------------

void save_checkpoint(const ModelParams<float>& p, const std::filesystem::path& path);
ModelParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace dael
