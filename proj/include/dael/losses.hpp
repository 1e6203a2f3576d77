#pragma once

// DAEL training objectives.
//
//   L_ce = 1/K sum_i  CE(y(x_i), E_i(a(x_i)))
//   L_cr = 1/K sum_i  || E_i(a(x_i)) - 1/(K-1) sum_{j != i} E_j(A(x_i)) ||^2
//   L_u  = E_t [ 1(max p_{i*} >= eps) CE(yhat(x_t), 1/K sum_i E_i(A(x_t))) ]
//   L    = L_ce + L_cr + lambda_u L_u        (L_u dropped for domain generalization)
//
// Targets (the expert's weak-view prediction and the pseudo-labels) are
// detached: gradients flow only through the prediction path.

#include <optional>
#include <span>
#include <vector>

#include "dael/model.hpp"
#include "dael/tensor.hpp"

namespace dael {

enum class Mode { uda, dg };
/// Collaborative: one squared error against the non-expert ensemble.
/// Individual: mean of per-non-expert squared errors.
enum class Aggregation { collaborative, individual };
enum class ConsistencyTarget { expert, real_label };
enum class PseudoLabelSource { confident_expert, ensemble };

struct LossConfig {
  Mode mode = Mode::uda;
  bool use_consistency = true;
  bool use_unlabeled = true;
  double lambda_u = 0.5;
  double epsilon = 0.95;
  Aggregation aggregation = Aggregation::collaborative;
  ConsistencyTarget consistency_target = ConsistencyTarget::expert;
  PseudoLabelSource pseudo_source = PseudoLabelSource::confident_expert;
};

template <typename T>
struct PseudoLabels {
  Tensor<T> onehot;                 // B x C constant
  std::vector<int> label;           // argmax class per sample
  std::vector<char> mask;           // confidence >= epsilon
  std::vector<T> confidence;        // max class probability of the chosen distribution
  std::vector<int> chosen_expert;   // i*, or -1 for the ensemble source

  std::size_t size() const { return label.size(); }
  double accepted_fraction() const;
};

/// Labeled views of one source domain's mini-batch. `prediction` is the view
/// fed to the prediction path (strongly augmented by default).
template <typename T>
struct SourceViews {
  Tensor<T> weak;
  Tensor<T> prediction;
  std::vector<int> labels;
};

template <typename T>
struct TargetViews {
  Tensor<T> weak;
  Tensor<T> prediction;
};

/// Detached targets used by one objective evaluation. Passing them back into
/// total_loss holds them fixed, e.g. for finite-difference checks.
template <typename T>
struct FrozenTargets {
  std::vector<Tensor<T>> consistency;
  std::optional<PseudoLabels<T>> pseudo;
};

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double l_ce = 0;
  double l_cr = 0;
  double l_u = 0;
  double total_value = 0;
  double accepted_fraction = 0;
  FrozenTargets<T> targets;
};

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, int num_classes);

/// Mean over the full batch of -sum_c target * log(max(pred, 1e-12)). Masked
/// rows contribute zero but still count in the denominator.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& pred, const Tensor<T>& target,
                        std::span<const char> mask = {});

template <typename T>
Tensor<T> expert_ce_loss(const ModelParams<T>& p, std::span<const Tensor<T>> weak_batches,
                         std::span<const std::vector<int>> labels);

/// Domain-i term of L_cr: batch mean of the squared error between `target`
/// and the non-experts' predictions on `prediction_features`.
template <typename T>
Tensor<T> consistency_term(const ModelParams<T>& p, int domain,
                           const Tensor<T>& prediction_features, const Tensor<T>& target,
                           Aggregation aggregation);

template <typename T>
Tensor<T> consistency_loss(const ModelParams<T>& p, std::span<const SourceViews<T>> views,
                           ConsistencyTarget target_kind, Aggregation aggregation);

/// Pseudo-labels from per-expert probability matrices (each B x C).
template <typename T>
PseudoLabels<T> pseudo_labels_from_probs(std::span<const Tensor<T>> expert_probs,
                                         double epsilon, PseudoLabelSource source);

template <typename T>
PseudoLabels<T> make_pseudo_labels(const ModelParams<T>& p, const Tensor<T>& weak_target,
                                   double epsilon, PseudoLabelSource source);

template <typename T>
Tensor<T> unlabeled_from_features(const ModelParams<T>& p, const Tensor<T>& features,
                                  const PseudoLabels<T>& pl, Aggregation aggregation);

template <typename T>
Tensor<T> unlabeled_loss(const ModelParams<T>& p, const Tensor<T>& prediction_target,
                         const PseudoLabels<T>& pl,
                         Aggregation aggregation = Aggregation::collaborative);

/// l_ce + l_cr + lambda_u * l_u; undefined components are omitted.
template <typename T>
Tensor<T> weighted_total(const Tensor<T>& l_ce, const Tensor<T>& l_cr, const Tensor<T>& l_u,
                         double lambda_u);

/// Full objective for one step. All views share one backbone pass.
template <typename T>
LossBreakdown<T> total_loss(const ModelParams<T>& p, std::span<const SourceViews<T>> sources,
                            const std::optional<TargetViews<T>>& target, const LossConfig& cfg,
                            const FrozenTargets<T>* frozen = nullptr);

/// Gradient of the collaborative ||mean_j p_j - t||^2 or individual
/// 1/K sum_j ||p_j - t||^2 objective with respect to p_i.
std::vector<double> analytic_grad(std::span<const std::vector<double>> probs,
                                  std::span<const double> target, int i, Aggregation mode);

}  // namespace dael
