#include "dael/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "dael/augment.hpp"
#include "dael/errors.hpp"
#include "dael/evalbench.hpp"

namespace dael {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kSamplerStream = 2;
constexpr std::uint64_t kAugmentStream = 3;
constexpr std::uint64_t kTargetSlot = 1000;

enum ViewTag : std::uint64_t { kWeakView = 0, kPredictionView = 1 };

struct ViewBuilder {
  const TrainConfig& cfg;
  std::size_t epoch, iteration;

  Tensor<float> operator()(std::span<const Image* const> images, std::uint64_t slot,
                           ViewTag view, augment::Kind kind) const {
    std::vector<std::uint64_t> seeds(images.size());
    for (std::size_t b = 0; b < images.size(); ++b)
      seeds[b] = derive_seed(cfg.seed, {kAugmentStream, epoch, iteration, slot, b, view});
    const auto out = augment::augment_batch(images, seeds, kind, cfg.augment_workers);
    return images_to_tensor<float>(out);
  }
};

void check_finite(const LossBreakdown<float>& lb, std::size_t epoch, std::size_t iteration) {
  const std::pair<const char*, double> parts[] = {
      {"l_ce", lb.l_ce}, {"l_cr", lb.l_cr}, {"l_u", lb.l_u}, {"total", lb.total_value}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v))
      throw NumericError("training diverged: " + std::string(name) + " is not finite at epoch " +
                         std::to_string(epoch) + ", iteration " + std::to_string(iteration));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 >= 0.0)) throw ContractError("TrainConfig: lr0 must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw ContractError("TrainConfig: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ContractError("TrainConfig: weight_decay must be non-negative");
  if (epochs < 1) throw ContractError("TrainConfig: epochs must be at least 1");
  if (iters_per_epoch < 0) throw ContractError("TrainConfig: iters_per_epoch must be >= 0");
  if (per_domain_batch < 1 || target_batch < 1)
    throw ContractError("TrainConfig: batch sizes must be positive");
  if (!(loss.lambda_u >= 0.0)) throw ContractError("TrainConfig: lambda_u must be non-negative");
  if (!(loss.epsilon > 0.0 && loss.epsilon <= 1.0))
    throw ContractError("TrainConfig: epsilon must lie in (0, 1]");
  if (augment_workers < 1) throw ContractError("TrainConfig: augment_workers must be positive");
}

double cosine_lr(std::size_t t, std::size_t total, double lr0) {
  if (total == 0 || t > total) throw ContractError("cosine_lr: need 0 <= t <= T and T >= 1");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

template <typename T>
void sgd_momentum_step(std::span<Tensor<T>> params, std::vector<std::vector<T>>& velocity,
                       double lr, double momentum, double weight_decay) {
  if (velocity.empty())
    for (const auto& p : params) velocity.emplace_back(p.numel(), T(0));
  if (velocity.size() != params.size())
    throw ContractError("sgd_momentum_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad())
      throw ContractError("sgd_momentum_step: parameter " + std::to_string(i) + " has no gradient");
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& v = velocity[i];
    if (v.size() != p.numel())
      throw DimensionError("sgd_momentum_step: velocity shape mismatch for parameter " +
                           std::to_string(i));
    auto values = p.mutable_values();
    const auto grad = p.mutable_grad();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const T g = grad[j] + wd * values[j];
      v[j] = m * v[j] + g;
      values[j] -= step * v[j];
    }
    p.zero_grad();
  }
}

template void sgd_momentum_step(std::span<Tensor<float>>, std::vector<std::vector<float>>&, double,
                                double, double);
template void sgd_momentum_step(std::span<Tensor<double>>, std::vector<std::vector<double>>&,
                                double, double, double);

void sgd_momentum_step(ModelParams<float>& params, OptimState& state, double lr, double momentum,
                       double weight_decay) {
  auto all = params.all();
  sgd_momentum_step<float>(all, state.velocity, lr, momentum, weight_decay);
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},         {"l_ce", r.l_ce},
                   {"l_cr", r.l_cr},           {"l_u", r.l_u},
                   {"total", r.total},         {"lr", r.lr},
                   {"accepted_fraction", r.accepted_fraction}};
  j["target_accuracy"] = r.target_accuracy ? nlohmann::json(*r.target_accuracy) : nlohmann::json();
  return j.dump();
}

void write_history(const RunHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& r : history.epochs) out << to_json_line(r) << '\n';
}

TrainResult train(const TrainConfig& cfg, std::span<const DomainDataset> sources,
                  std::optional<UnlabeledView> target_unlabeled, const DomainDataset* target_test) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  if (sources.size() < 2) throw ContractError("train: need at least two source domains");
  const auto& first = sources.front();
  for (const auto& s : sources) {
    if (s.empty()) throw ContractError("train: empty source domain");
    if (s.num_classes() != first.num_classes() || s.height() != first.height() ||
        s.width() != first.width())
      throw ContractError("train: source domains differ in classes or image size");
  }
  if (first.height() != first.width()) throw ContractError("train: images must be square");

  const bool dg = cfg.loss.mode == Mode::dg;
  if (dg && target_unlabeled) throw ContractError("train: DG mode must not receive target data");
  // lambda_u = 0 removes the term outright.
  const bool use_u = !dg && cfg.loss.use_unlabeled && cfg.loss.lambda_u > 0.0;
  if (use_u && !target_unlabeled)
    throw ContractError("train: UDA mode requires an unlabeled target set");
  if (use_u && target_unlabeled->size() == 0) throw ContractError("train: empty target set");
  LossConfig loss_cfg = cfg.loss;
  loss_cfg.use_unlabeled = use_u;
  const bool use_cr = loss_cfg.use_consistency;

  Architecture arch;
  arch.image_side = first.height();
  arch.widths = cfg.widths;
  arch.feature_dim = cfg.feature_dim;
  arch.num_experts = static_cast<int>(sources.size());
  arch.num_classes = first.num_classes();
  TrainResult result{init_params<float>(arch, derive_seed(cfg.seed, {kInitStream})), {}};
  auto& params = result.params;

  std::size_t min_size = first.size();
  for (const auto& s : sources) min_size = std::min(min_size, s.size());
  const auto batch = static_cast<std::size_t>(cfg.per_domain_batch);
  const std::size_t iters = cfg.iters_per_epoch > 0
                                ? static_cast<std::size_t>(cfg.iters_per_epoch)
                                : std::max<std::size_t>(1, min_size / batch);
  const std::size_t total_iters = iters * static_cast<std::size_t>(cfg.epochs);

  std::vector<EpochSampler> samplers;
  for (std::size_t d = 0; d < sources.size(); ++d)
    samplers.emplace_back(sources[d].size(), batch, derive_seed(cfg.seed, {kSamplerStream, d}));
  std::optional<EpochSampler> target_sampler;
  if (use_u)
    target_sampler.emplace(target_unlabeled->size(), static_cast<std::size_t>(cfg.target_batch),
                           derive_seed(cfg.seed, {kSamplerStream, kTargetSlot}));

  const auto pred_kind =
      cfg.prediction_view == PredictionView::strong ? augment::Kind::strong : augment::Kind::weak;
  OptimState optim;
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < static_cast<std::size_t>(cfg.epochs); ++epoch) {
    EpochRecord rec;
    rec.epoch = static_cast<int>(epoch);
    for (std::size_t it = 0; it < iters; ++it, ++t) {
      const double lr = cosine_lr(t, total_iters, cfg.lr0);
      const ViewBuilder build{cfg, epoch, it};
      std::vector<SourceViews<float>> views(sources.size());
      for (std::size_t d = 0; d < sources.size(); ++d) {
        std::vector<const Image*> images;
        for (const auto idx : samplers[d].indices(epoch, it)) {
          images.push_back(&sources[d].image(idx));
          views[d].labels.push_back(sources[d].label(idx));
        }
        views[d].weak = build(images, d, kWeakView, augment::Kind::weak);
        if (use_cr) views[d].prediction = build(images, d, kPredictionView, pred_kind);
      }
      std::optional<TargetViews<float>> target;
      if (use_u) {
        std::vector<const Image*> images;
        for (const auto idx : target_sampler->indices(epoch, it))
          images.push_back(&target_unlabeled->image(idx));
        target.emplace(TargetViews<float>{build(images, kTargetSlot, kWeakView, augment::Kind::weak),
                                          build(images, kTargetSlot, kPredictionView, pred_kind)});
      }

      LossBreakdown<float> lb;
      try {
        lb = total_loss<float>(params, views, target, loss_cfg);
        check_finite(lb, epoch, it);
        backward(lb.total);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", iteration " + std::to_string(it) +
                           ": " + e.what());
      }
      sgd_momentum_step(params, optim, lr, cfg.momentum, cfg.weight_decay);

      rec.l_ce += lb.l_ce;
      rec.l_cr += lb.l_cr;
      rec.l_u += lb.l_u;
      rec.total += lb.total_value;
      rec.accepted_fraction += lb.accepted_fraction;
      rec.lr = lr;
    }
    const auto n = static_cast<double>(iters);
    rec.l_ce /= n;
    rec.l_cr /= n;
    rec.l_u /= n;
    rec.total /= n;
    rec.accepted_fraction /= n;
    if (target_test) rec.target_accuracy = evaluate(params, *target_test);
    result.history.epochs.push_back(rec);
  }
  result.history.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

}  // namespace dael
