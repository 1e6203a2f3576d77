#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dael/dataset.hpp"
#include "dael/losses.hpp"
#include "dael/model.hpp"

namespace dael {

/// Augmentation applied to the view feeding the prediction path.
enum class PredictionView { strong, weak };

struct TrainConfig {
  LossConfig loss;
  int epochs = 30;
  int iters_per_epoch = 0;  // 0: floor(smallest source / per_domain_batch)
  double lr0 = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int per_domain_batch = 16;
  int target_batch = 16;
  std::uint64_t seed = 0;
  PredictionView prediction_view = PredictionView::strong;
  std::array<int, 3> widths{32, 64, 128};
  int feature_dim = 128;
  int augment_workers = 1;

  void validate() const;
};

struct OptimState {
  std::vector<std::vector<float>> velocity;
};

double cosine_lr(std::size_t t, std::size_t total, double lr0);

/// g = grad + wd * param; v = momentum * v + g; param -= lr * v. Zeroes grads.
template <typename T>
void sgd_momentum_step(std::span<Tensor<T>> params, std::vector<std::vector<T>>& velocity,
                       double lr, double momentum, double weight_decay);

void sgd_momentum_step(ModelParams<float>& params, OptimState& state, double lr, double momentum,
                       double weight_decay);

struct EpochRecord {
  int epoch = 0;
  double l_ce = 0, l_cr = 0, l_u = 0, total = 0;
  double lr = 0;
  double accepted_fraction = 0;
  std::optional<double> target_accuracy;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  double seconds = 0;
};

std::string to_json_line(const EpochRecord& record);
void write_history(const RunHistory& history, const std::filesystem::path& path);

struct TrainResult {
  ModelParams<float> params;
  RunHistory history;
};

/// Sources are the labeled domains in expert order. `target_unlabeled` is
/// required in UDA mode when the unlabeled loss is enabled and forbidden in DG
/// mode. `target_test` only feeds per-epoch accuracy.
TrainResult train(const TrainConfig& cfg, std::span<const DomainDataset> sources,
                  std::optional<UnlabeledView> target_unlabeled = std::nullopt,
                  const DomainDataset* target_test = nullptr);

}  // namespace dael
