#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dael/dataset.hpp"
#include "dael/model.hpp"
#include "dael/trainer.hpp"

namespace dael {

/// Accuracy of the all-expert ensemble on un-augmented test images.
double evaluate(const ModelParams<float>& p, const DomainDataset& test);

struct ExpertDiagnostics {
  std::vector<double> expert_accuracy;
  double ensemble_accuracy = 0;
  double expert_variance = 0;  // population variance across experts
};

ExpertDiagnostics expert_diagnostics(const ModelParams<float>& p, const DomainDataset& test);

/// One (target, seed) training run.
struct RunRecord {
  int target = 0;
  std::uint64_t seed = 0;
  double accuracy = 0;
  ExpertDiagnostics diagnostics;
  double seconds = 0;
  std::size_t target_train_image_reads = 0;
  std::size_t target_train_label_reads = 0;
};

struct ExperimentResult {
  int target = 0;
  std::string target_name;
  std::vector<RunRecord> runs;  // one per seed
  double mean = 0;
  double stddev = 0;  // sample standard deviation across seeds
  std::string config;  // effective TrainConfig as JSON
};

double mean_of(std::span<const double> v);
double stddev_of(std::span<const double> v);

std::string config_to_json(const TrainConfig& cfg);

/// Invoked after each finished run; calls are serialized.
using ProgressFn = std::function<void(const std::string& label, const RunRecord&)>;

/// Trains on every domain but `target` and evaluates on the target's test
/// split. UDA runs see the target's train images through an UnlabeledView;
/// DG runs see nothing of the target. Reads of the target train split are
/// counted into each RunRecord.
RunRecord run_single(const TrainConfig& cfg, std::span<const DomainSplit> domains, int target);

/// Each domain as target in turn, over `seeds`. Runs execute on up to
/// `jobs` threads; results do not depend on scheduling.
std::vector<ExperimentResult> leave_one_out(const TrainConfig& cfg,
                                            std::span<const DomainSplit> domains,
                                            std::span<const std::uint64_t> seeds, int jobs = 1,
                                            const ProgressFn& progress = {});

// ---- ablations ---------------------------------------------------------------

struct Variant {
  std::string suite;
  std::string name;
  TrainConfig cfg;
};

inline const std::vector<std::string> kSuites{"loss-ladder",    "aggregation",
                                              "consistency-target", "pseudo-label",
                                              "augmentation",   "lambda-sweep"};
inline const std::vector<double> kLambdaSweep{0.0, 0.1, 0.25, 0.5, 0.75, 1.0};

/// Variants of `base` for one suite. `lambdas` overrides the sweep values.
std::vector<Variant> suite_variants(const std::string& suite, const TrainConfig& base,
                                    std::span<const double> lambdas = kLambdaSweep);

struct VariantResult {
  Variant variant;
  std::vector<ExperimentResult> targets;
  double mean = 0;  // mean over targets of the per-target seed means
};

struct AblationReport {
  std::vector<std::string> domain_names;
  std::vector<VariantResult> rows;
  std::size_t trained_runs = 0;  // distinct runs after de-duplication

  const VariantResult& row(const std::string& suite, const std::string& name) const;
};

/// Runs every variant of every listed suite with leave-one-out over `seeds`.
/// Variants whose effective configuration coincides share their runs.
AblationReport ablation_suite(const TrainConfig& base, std::span<const DomainSplit> domains,
                              std::span<const std::string> suites,
                              std::span<const std::uint64_t> seeds, int jobs = 1,
                              std::span<const double> lambdas = kLambdaSweep,
                              const ProgressFn& progress = {});

std::string render_table(const AblationReport& report, const TrainConfig& base);
/// One JSON object per (variant, target, seed).
void write_report_records(const AblationReport& report, const std::filesystem::path& path);

}  // namespace dael
