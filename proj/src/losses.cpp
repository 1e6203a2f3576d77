#include "dael/losses.hpp"

#include <algorithm>
#include <string>

#include "dael/errors.hpp"

namespace dael {

namespace {

template <typename T>
Tensor<T> sum_all(const std::vector<Tensor<T>>& terms) {
  Tensor<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

/// Stacks constant image batches along the first axis.
template <typename T>
Tensor<T> concat_inputs(const std::vector<Tensor<T>>& parts) {
  Shape shape = parts.front().shape();
  std::size_t rows = 0;
  std::vector<T> values;
  for (const auto& t : parts) {
    if (t.rank() != shape.size() ||
        !std::equal(t.shape().begin() + 1, t.shape().end(), shape.begin() + 1))
      throw DimensionError("total_loss: views differ in image shape");
    rows += t.dim(0);
    values.insert(values.end(), t.values().begin(), t.values().end());
  }
  shape[0] = rows;
  return Tensor<T>::constant(std::move(shape), std::move(values));
}

std::vector<int> others(int k, int i) {
  std::vector<int> out;
  for (int j = 0; j < k; ++j)
    if (j != i) out.push_back(j);
  return out;
}

}  // namespace

template <typename T>
double PseudoLabels<T>::accepted_fraction() const {
  if (mask.empty()) return 0.0;
  return static_cast<double>(std::count(mask.begin(), mask.end(), char{1})) /
         static_cast<double>(mask.size());
}

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, int num_classes) {
  const auto c = static_cast<std::size_t>(num_classes);
  std::vector<T> v(labels.size() * c, T(0));
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || labels[b] >= num_classes)
      throw ContractError("one_hot: label " + std::to_string(labels[b]) + " out of range");
    v[b * c + static_cast<std::size_t>(labels[b])] = T(1);
  }
  return Tensor<T>::constant({labels.size(), c}, std::move(v));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& pred, const Tensor<T>& target,
                        std::span<const char> mask) {
  if (pred.rank() != 2 || pred.shape() != target.shape())
    throw DimensionError("cross_entropy: prediction " + shape_str(pred.shape()) +
                         " vs target " + shape_str(target.shape()));
  const auto rows = pred.dim(0), cols = pred.dim(1);
  Tensor<T> weights = target;
  if (!mask.empty()) {
    if (mask.size() != rows) throw DimensionError("cross_entropy: mask length mismatch");
    std::vector<T> w(target.values().begin(), target.values().end());
    for (std::size_t r = 0; r < rows; ++r)
      if (!mask[r]) std::fill_n(w.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, T(0));
    weights = Tensor<T>::constant(target.shape(), std::move(w));
  }
  return scale(sum(mul(log(pred), weights)), T(-1) / static_cast<T>(rows));
}

template <typename T>
Tensor<T> expert_ce_loss(const ModelParams<T>& p, std::span<const Tensor<T>> weak_batches,
                         std::span<const std::vector<int>> labels) {
  const auto k = static_cast<std::size_t>(p.num_experts());
  if (weak_batches.size() != k || labels.size() != k)
    throw ContractError("expert_ce_loss: expected " + std::to_string(k) + " domain batches, got " +
                        std::to_string(weak_batches.size()));
  std::vector<Tensor<T>> terms;
  for (std::size_t i = 0; i < k; ++i) {
    const auto probs = expert_forward(p, static_cast<int>(i), weak_batches[i]);
    terms.push_back(cross_entropy(probs, one_hot<T>(labels[i], p.num_classes())));
  }
  return scale(sum_all(terms), T(1) / static_cast<T>(k));
}

template <typename T>
Tensor<T> consistency_term(const ModelParams<T>& p, int domain,
                           const Tensor<T>& prediction_features, const Tensor<T>& target,
                           Aggregation aggregation) {
  const int k = p.num_experts();
  if (k < 2) throw ContractError("consistency loss needs at least two experts");
  const auto non_experts = others(k, domain);
  if (aggregation == Aggregation::collaborative) {
    const auto ensemble = ensemble_from_features(p, prediction_features,
                                                 std::span<const int>(non_experts));
    return mean(sq_l2_rowwise(sub(target, ensemble)));
  }
  std::vector<Tensor<T>> terms;
  for (const int j : non_experts)
    terms.push_back(mean(sq_l2_rowwise(sub(target, head_probs(p, j, prediction_features)))));
  return scale(sum_all(terms), T(1) / static_cast<T>(non_experts.size()));
}

template <typename T>
Tensor<T> consistency_loss(const ModelParams<T>& p, std::span<const SourceViews<T>> views,
                           ConsistencyTarget target_kind, Aggregation aggregation) {
  const int k = p.num_experts();
  if (k < 2) throw ContractError("consistency loss needs at least two experts");
  if (views.size() != static_cast<std::size_t>(k))
    throw ContractError("consistency_loss: expected " + std::to_string(k) + " domains");
  std::vector<Tensor<T>> terms;
  for (int i = 0; i < k; ++i) {
    const auto& v = views[static_cast<std::size_t>(i)];
    const Tensor<T> target = target_kind == ConsistencyTarget::expert
                                 ? stop_gradient(expert_forward(p, i, v.weak))
                                 : one_hot<T>(v.labels, p.num_classes());
    terms.push_back(consistency_term(p, i, backbone(p, v.prediction), target, aggregation));
  }
  return scale(sum_all(terms), T(1) / static_cast<T>(k));
}

template <typename T>
PseudoLabels<T> pseudo_labels_from_probs(std::span<const Tensor<T>> expert_probs,
                                         double epsilon, PseudoLabelSource source) {
  if (!(epsilon > 0.0 && epsilon <= 1.0))
    throw ContractError("pseudo-labels: epsilon must lie in (0, 1]");
  if (expert_probs.empty()) throw ContractError("pseudo-labels: no experts");
  const auto rows = expert_probs[0].dim(0), cols = expert_probs[0].dim(1);
  for (const auto& t : expert_probs)
    if (t.shape() != expert_probs[0].shape())
      throw DimensionError("pseudo-labels: expert outputs differ in shape");

  // The ensemble distribution uses the same arithmetic as average().
  Tensor<T> mixed;
  if (source == PseudoLabelSource::ensemble) {
    NoGradGuard no_grad;
    std::vector<Tensor<T>> detached;
    for (const auto& t : expert_probs) detached.push_back(stop_gradient(t));
    mixed = average<T>(detached);
  }

  PseudoLabels<T> pl;
  std::vector<T> onehot(rows * cols, T(0));
  const T eps = static_cast<T>(epsilon);
  for (std::size_t b = 0; b < rows; ++b) {
    const T* dist = nullptr;
    int chosen = -1;
    if (source == PseudoLabelSource::confident_expert) {
      T best_conf = T(-1);
      for (std::size_t i = 0; i < expert_probs.size(); ++i) {
        const T* row = expert_probs[i].values().data() + b * cols;
        const T conf = *std::max_element(row, row + cols);
        if (conf > best_conf) {
          best_conf = conf;
          chosen = static_cast<int>(i);
          dist = row;
        }
      }
    } else {
      dist = mixed.values().data() + b * cols;
    }
    std::size_t cls = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (dist[c] > dist[cls]) cls = c;
    onehot[b * cols + cls] = T(1);
    pl.label.push_back(static_cast<int>(cls));
    pl.confidence.push_back(dist[cls]);
    pl.mask.push_back(dist[cls] >= eps ? 1 : 0);
    pl.chosen_expert.push_back(chosen);
  }
  pl.onehot = Tensor<T>::constant({rows, cols}, std::move(onehot));
  return pl;
}

template <typename T>
PseudoLabels<T> make_pseudo_labels(const ModelParams<T>& p, const Tensor<T>& weak_target,
                                   double epsilon, PseudoLabelSource source) {
  NoGradGuard no_grad;
  const auto features = backbone(p, weak_target);
  std::vector<Tensor<T>> probs;
  for (int i = 0; i < p.num_experts(); ++i) probs.push_back(head_probs(p, i, features));
  return pseudo_labels_from_probs<T>(probs, epsilon, source);
}

template <typename T>
Tensor<T> unlabeled_from_features(const ModelParams<T>& p, const Tensor<T>& features,
                                  const PseudoLabels<T>& pl, Aggregation aggregation) {
  if (features.dim(0) != pl.size())
    throw DimensionError("unlabeled_loss: " + std::to_string(features.dim(0)) +
                         " strong samples vs " + std::to_string(pl.size()) + " pseudo-labels");
  const auto experts = all_experts(p.num_experts());
  if (aggregation == Aggregation::collaborative)
    return cross_entropy(ensemble_from_features(p, features, std::span<const int>(experts)),
                         pl.onehot, pl.mask);
  std::vector<Tensor<T>> terms;
  for (const int i : experts)
    terms.push_back(cross_entropy(head_probs(p, i, features), pl.onehot, pl.mask));
  return scale(sum_all(terms), T(1) / static_cast<T>(experts.size()));
}

template <typename T>
Tensor<T> unlabeled_loss(const ModelParams<T>& p, const Tensor<T>& prediction_target,
                         const PseudoLabels<T>& pl, Aggregation aggregation) {
  if (prediction_target.dim(0) != pl.size())
    throw DimensionError("unlabeled_loss: batch-size mismatch between views");
  return unlabeled_from_features(p, backbone(p, prediction_target), pl, aggregation);
}

template <typename T>
Tensor<T> weighted_total(const Tensor<T>& l_ce, const Tensor<T>& l_cr, const Tensor<T>& l_u,
                         double lambda_u) {
  Tensor<T> total = l_ce;
  if (l_cr.defined()) total = add(total, l_cr);
  if (l_u.defined()) total = add(total, scale(l_u, static_cast<T>(lambda_u)));
  return total;
}

template <typename T>
LossBreakdown<T> total_loss(const ModelParams<T>& p, std::span<const SourceViews<T>> sources,
                            const std::optional<TargetViews<T>>& target, const LossConfig& cfg,
                            const FrozenTargets<T>* frozen) {
  const int k = p.num_experts();
  if (sources.size() != static_cast<std::size_t>(k))
    throw ContractError("total_loss: " + std::to_string(sources.size()) +
                        " source batches for " + std::to_string(k) + " experts");
  if (cfg.mode == Mode::uda && cfg.use_unlabeled && !target)
    throw ContractError("total_loss: UDA mode requires a target batch");
  if (cfg.mode == Mode::dg && target)
    throw ContractError("total_loss: DG mode must not receive target data");
  if (cfg.use_consistency && k < 2)
    throw ContractError("total_loss: consistency loss needs at least two experts");
  const bool use_cr = cfg.use_consistency;
  const bool use_u = cfg.mode == Mode::uda && cfg.use_unlabeled;

  // One backbone pass over [weak_0..K-1 | prediction_0..K-1 | target prediction].
  std::vector<Tensor<T>> inputs;
  for (const auto& s : sources) inputs.push_back(s.weak);
  if (use_cr)
    for (const auto& s : sources) inputs.push_back(s.prediction);
  if (use_u) inputs.push_back(target->prediction);
  const auto features = backbone(p, concat_inputs(inputs));
  std::vector<std::size_t> offsets{0};
  for (const auto& t : inputs) offsets.push_back(offsets.back() + t.dim(0));
  auto rows_of = [&](std::size_t slot) {
    return slice_rows(features, offsets[slot], offsets[slot + 1]);
  };

  LossBreakdown<T> out;
  std::vector<Tensor<T>> ce_terms, cr_terms;
  for (int i = 0; i < k; ++i) {
    const auto& s = sources[static_cast<std::size_t>(i)];
    const auto weak_probs = head_probs(p, i, rows_of(static_cast<std::size_t>(i)));
    const auto labels = one_hot<T>(s.labels, p.num_classes());
    ce_terms.push_back(cross_entropy(weak_probs, labels));
    if (!use_cr) continue;
    Tensor<T> cr_target;
    if (frozen)
      cr_target = frozen->consistency.at(static_cast<std::size_t>(i));
    else if (cfg.consistency_target == ConsistencyTarget::expert)
      cr_target = stop_gradient(weak_probs);
    else
      cr_target = labels;
    out.targets.consistency.push_back(cr_target);
    cr_terms.push_back(consistency_term(p, i, rows_of(static_cast<std::size_t>(k + i)),
                                        cr_target, cfg.aggregation));
  }
  const T inv_k = T(1) / static_cast<T>(k);
  const auto l_ce = scale(sum_all(ce_terms), inv_k);
  Tensor<T> l_cr, l_u;
  if (use_cr) l_cr = scale(sum_all(cr_terms), inv_k);
  if (use_u) {
    PseudoLabels<T> pl = frozen && frozen->pseudo
                             ? *frozen->pseudo
                             : make_pseudo_labels(p, target->weak, cfg.epsilon, cfg.pseudo_source);
    l_u = unlabeled_from_features(p, rows_of(inputs.size() - 1), pl, cfg.aggregation);
    out.accepted_fraction = pl.accepted_fraction();
    out.targets.pseudo = std::move(pl);
  }
  out.total = weighted_total(l_ce, l_cr, l_u, cfg.lambda_u);
  out.l_ce = static_cast<double>(l_ce.item());
  out.l_cr = l_cr.defined() ? static_cast<double>(l_cr.item()) : 0.0;
  out.l_u = l_u.defined() ? static_cast<double>(l_u.item()) : 0.0;
  out.total_value = static_cast<double>(out.total.item());
  return out;
}

std::vector<double> analytic_grad(std::span<const std::vector<double>> probs,
                                  std::span<const double> target, int i, Aggregation mode) {
  if (probs.empty() || i < 0 || static_cast<std::size_t>(i) >= probs.size())
    throw ContractError("analytic_grad: expert index out of range");
  const auto n = target.size();
  for (const auto& v : probs)
    if (v.size() != n) throw DimensionError("analytic_grad: vectors differ in length");
  const double k = static_cast<double>(probs.size());
  std::vector<double> g(n);
  for (std::size_t c = 0; c < n; ++c) {
    double x;
    if (mode == Aggregation::collaborative) {
      double s = 0;
      for (const auto& v : probs) s += v[c];
      x = s / k;
    } else {
      x = probs[static_cast<std::size_t>(i)][c];
    }
    g[c] = 2.0 / k * (x - target[c]);
  }
  return g;
}

#define DAEL_INSTANTIATE(T)                                                                    \
  template struct PseudoLabels<T>;                                                             \
  template Tensor<T> one_hot(std::span<const int>, int);                                       \
  template Tensor<T> cross_entropy(const Tensor<T>&, const Tensor<T>&, std::span<const char>); \
  template Tensor<T> expert_ce_loss(const ModelParams<T>&, std::span<const Tensor<T>>,         \
                                    std::span<const std::vector<int>>);                        \
  template Tensor<T> consistency_term(const ModelParams<T>&, int, const Tensor<T>&,            \
                                      const Tensor<T>&, Aggregation);                          \
  template Tensor<T> consistency_loss(const ModelParams<T>&, std::span<const SourceViews<T>>,  \
                                      ConsistencyTarget, Aggregation);                         \
  template PseudoLabels<T> pseudo_labels_from_probs(std::span<const Tensor<T>>, double,        \
                                                    PseudoLabelSource);                        \
  template PseudoLabels<T> make_pseudo_labels(const ModelParams<T>&, const Tensor<T>&, double, \
                                              PseudoLabelSource);                              \
  template Tensor<T> unlabeled_from_features(const ModelParams<T>&, const Tensor<T>&,          \
                                             const PseudoLabels<T>&, Aggregation);             \
  template Tensor<T> unlabeled_loss(const ModelParams<T>&, const Tensor<T>&,                   \
                                    const PseudoLabels<T>&, Aggregation);                      \
  template Tensor<T> weighted_total(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    double);                                                   \
  template LossBreakdown<T> total_loss(const ModelParams<T>&, std::span<const SourceViews<T>>, \
                                       const std::optional<TargetViews<T>>&, const LossConfig&, \
                                       const FrozenTargets<T>*);

DAEL_INSTANTIATE(float)
DAEL_INSTANTIATE(double)

#undef DAEL_INSTANTIATE

}  // namespace dael
