#include "dael/evalbench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dael/errors.hpp"

namespace dael {

namespace {

constexpr std::size_t kEvalBatch = 250;

/// Runs fn(images, labels) over the test set in fixed-size chunks.
template <typename Fn>
void for_each_chunk(const DomainDataset& test, Fn&& fn) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  for (std::size_t begin = 0; begin < test.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(test.size(), begin + kEvalBatch);
    std::vector<Image> images;
    std::vector<int> labels;
    for (std::size_t i = begin; i < end; ++i) {
      images.push_back(test.image(i));
      labels.push_back(test.label(i));
    }
    fn(images_to_tensor<float>(images), labels);
  }
}

std::size_t count_hits(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return hits;
}

nlohmann::json loss_json(const LossConfig& l) {
  return {{"mode", l.mode == Mode::uda ? "uda" : "dg"},
          {"use_consistency", l.use_consistency},
          {"use_unlabeled", l.use_unlabeled},
          {"lambda_u", l.lambda_u},
          {"epsilon", l.epsilon},
          {"aggregation", l.aggregation == Aggregation::collaborative ? "collaborative" : "individual"},
          {"consistency_target",
           l.consistency_target == ConsistencyTarget::expert ? "expert" : "real_label"},
          {"pseudo_source",
           l.pseudo_source == PseudoLabelSource::confident_expert ? "confident_expert" : "ensemble"}};
}

/// Maps configurations that train identically onto one representative.
TrainConfig canonical(TrainConfig c) {
  auto& l = c.loss;
  const bool use_u = l.mode == Mode::uda && l.use_unlabeled && l.lambda_u > 0.0;
  if (!use_u) {
    l.use_unlabeled = false;
    l.lambda_u = 0.0;
    l.epsilon = 1.0;
    l.pseudo_source = PseudoLabelSource::confident_expert;
  }
  if (!l.use_consistency) l.consistency_target = ConsistencyTarget::expert;
  if (!l.use_consistency && !use_u) {
    l.aggregation = Aggregation::collaborative;
    c.prediction_view = PredictionView::strong;
  }
  c.augment_workers = 1;
  return c;
}

std::string lambda_label(double v) {
  std::ostringstream os;
  os << "lambda_u=" << v;
  return os.str();
}

struct Job {
  TrainConfig cfg;
  int target;
};

/// Executes jobs on up to `jobs` threads; output order follows input order.
std::vector<RunRecord> run_jobs(const std::vector<Job>& work, std::span<const DomainSplit> domains,
                                int jobs, const std::vector<std::string>& labels,
                                const ProgressFn& progress) {
  std::vector<RunRecord> out(work.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < work.size();) {
      try {
        out[i] = run_single(work[i].cfg, domains, work[i].target);
      } catch (...) {
        std::lock_guard lock(report_mutex);
        if (!failure) failure = std::current_exception();
        next = work.size();
        return;
      }
      if (progress) {
        std::lock_guard lock(report_mutex);
        progress(labels[i], out[i]);
      }
    }
  };
  const auto n = static_cast<std::size_t>(std::max(1, jobs));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(n, work.size()); ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

ExperimentResult aggregate(const TrainConfig& cfg, std::span<const DomainSplit> domains, int target,
                           std::vector<RunRecord> runs) {
  ExperimentResult r;
  r.target = target;
  r.target_name = domains[static_cast<std::size_t>(target)].name;
  r.config = config_to_json(cfg);
  std::vector<double> acc;
  for (const auto& run : runs) acc.push_back(run.accuracy);
  r.mean = mean_of(acc);
  r.stddev = stddev_of(acc);
  r.runs = std::move(runs);
  return r;
}

}  // namespace

double evaluate(const ModelParams<float>& p, const DomainDataset& test) {
  std::size_t hits = 0;
  for_each_chunk(test, [&](const Tensor<float>& x, const std::vector<int>& labels) {
    hits += count_hits(predict_class(p, x), labels);
  });
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

ExpertDiagnostics expert_diagnostics(const ModelParams<float>& p, const DomainDataset& test) {
  const auto k = static_cast<std::size_t>(p.num_experts());
  std::vector<std::size_t> hits(k, 0);
  std::size_t ens_hits = 0;
  for_each_chunk(test, [&](const Tensor<float>& x, const std::vector<int>& labels) {
    NoGradGuard no_grad;
    const auto features = backbone(p, x);
    std::vector<Tensor<float>> probs;
    for (std::size_t i = 0; i < k; ++i) {
      probs.push_back(head_probs(p, static_cast<int>(i), features));
      hits[i] += count_hits(argmax_rows(probs.back()), labels);
    }
    ens_hits += count_hits(argmax_rows(average<float>(probs)), labels);
  });
  ExpertDiagnostics d;
  const auto n = static_cast<double>(test.size());
  for (const auto h : hits) d.expert_accuracy.push_back(static_cast<double>(h) / n);
  d.ensemble_accuracy = static_cast<double>(ens_hits) / n;
  // from integer hit counts, so equal experts give exactly zero
  double s = 0, s2 = 0;
  for (const auto h : hits) {
    s += static_cast<double>(h);
    s2 += static_cast<double>(h) * static_cast<double>(h);
  }
  const double kd = static_cast<double>(k);
  d.expert_variance = (kd * s2 - s * s) / (kd * kd * n * n);
  return d;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (const double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string config_to_json(const TrainConfig& c) {
  nlohmann::json j{{"loss", loss_json(c.loss)},
                   {"epochs", c.epochs},
                   {"iters_per_epoch", c.iters_per_epoch},
                   {"lr0", c.lr0},
                   {"momentum", c.momentum},
                   {"weight_decay", c.weight_decay},
                   {"per_domain_batch", c.per_domain_batch},
                   {"target_batch", c.target_batch},
                   {"seed", c.seed},
                   {"prediction_view", c.prediction_view == PredictionView::strong ? "strong" : "weak"},
                   {"widths", c.widths},
                   {"feature_dim", c.feature_dim},
                   {"augment_workers", c.augment_workers}};
  return j.dump();
}

RunRecord run_single(const TrainConfig& cfg, std::span<const DomainSplit> domains, int target) {
  if (domains.size() < 3) throw ContractError("leave-one-out needs at least three domains");
  if (target < 0 || static_cast<std::size_t>(target) >= domains.size())
    throw ContractError("target domain " + std::to_string(target) + " out of range");
  const auto t = static_cast<std::size_t>(target);

  std::vector<DomainDataset> sources;
  for (std::size_t d = 0; d < domains.size(); ++d)
    if (d != t) sources.push_back(domains[d].train);
  DomainDataset target_train = domains[t].train;
  auto counter = std::make_shared<AccessCounter>();
  target_train.attach_counter(counter);

  std::optional<UnlabeledView> unlabeled;
  if (cfg.loss.mode == Mode::uda) unlabeled.emplace(target_train);
  const auto result = train(cfg, sources, unlabeled);

  RunRecord rec;
  rec.target = target;
  rec.seed = cfg.seed;
  rec.diagnostics = expert_diagnostics(result.params, domains[t].test);
  rec.accuracy = rec.diagnostics.ensemble_accuracy;
  rec.seconds = result.history.seconds;
  rec.target_train_image_reads = counter->image_reads;
  rec.target_train_label_reads = counter->label_reads;
  return rec;
}

std::vector<ExperimentResult> leave_one_out(const TrainConfig& cfg,
                                            std::span<const DomainSplit> domains,
                                            std::span<const std::uint64_t> seeds, int jobs,
                                            const ProgressFn& progress) {
  if (domains.size() < 3) throw ContractError("leave-one-out needs at least three domains");
  if (seeds.empty()) throw ContractError("leave-one-out needs at least one seed");
  std::vector<Job> work;
  std::vector<std::string> labels;
  for (std::size_t t = 0; t < domains.size(); ++t)
    for (const auto s : seeds) {
      TrainConfig c = cfg;
      c.seed = s;
      work.push_back({c, static_cast<int>(t)});
      labels.push_back(domains[t].name);
    }
  auto runs = run_jobs(work, domains, jobs, labels, progress);
  std::vector<ExperimentResult> out;
  for (std::size_t t = 0; t < domains.size(); ++t) {
    std::vector<RunRecord> mine(runs.begin() + static_cast<std::ptrdiff_t>(t * seeds.size()),
                                runs.begin() + static_cast<std::ptrdiff_t>((t + 1) * seeds.size()));
    out.push_back(aggregate(cfg, domains, static_cast<int>(t), std::move(mine)));
  }
  return out;
}

std::vector<Variant> suite_variants(const std::string& suite, const TrainConfig& base,
                                    std::span<const double> lambdas) {
  std::vector<Variant> v;
  auto add = [&](std::string name, auto&& edit) {
    TrainConfig c = base;
    edit(c);
    v.push_back({suite, std::move(name), c});
  };
  if (suite == "loss-ladder") {
    add("L_ce", [](TrainConfig& c) {
      c.loss.use_consistency = false;
      c.loss.use_unlabeled = false;
    });
    add("L_ce+L_cr", [](TrainConfig& c) {
      c.loss.use_consistency = true;
      c.loss.use_unlabeled = false;
    });
    add("L_ce+L_u", [](TrainConfig& c) {
      c.loss.use_consistency = false;
      c.loss.use_unlabeled = true;
    });
    add("full", [](TrainConfig& c) {
      c.loss.use_consistency = true;
      c.loss.use_unlabeled = true;
    });
  } else if (suite == "aggregation") {
    add("collaborative", [](TrainConfig& c) { c.loss.aggregation = Aggregation::collaborative; });
    add("individual", [](TrainConfig& c) { c.loss.aggregation = Aggregation::individual; });
  } else if (suite == "consistency-target") {
    add("expert", [](TrainConfig& c) { c.loss.consistency_target = ConsistencyTarget::expert; });
    add("real-label",
        [](TrainConfig& c) { c.loss.consistency_target = ConsistencyTarget::real_label; });
  } else if (suite == "pseudo-label") {
    add("confident-expert",
        [](TrainConfig& c) { c.loss.pseudo_source = PseudoLabelSource::confident_expert; });
    add("ensemble", [](TrainConfig& c) { c.loss.pseudo_source = PseudoLabelSource::ensemble; });
  } else if (suite == "augmentation") {
    add("strong", [](TrainConfig& c) { c.prediction_view = PredictionView::strong; });
    add("weak", [](TrainConfig& c) { c.prediction_view = PredictionView::weak; });
  } else if (suite == "lambda-sweep") {
    for (const double lam : lambdas) {
      if (!(lam >= 0.0)) throw ContractError("lambda sweep values must be non-negative");
      add(lambda_label(lam), [lam](TrainConfig& c) { c.loss.lambda_u = lam; });
    }
  } else {
    throw ContractError("unknown ablation suite '" + suite + "'");
  }
  return v;
}

const VariantResult& AblationReport::row(const std::string& suite, const std::string& name) const {
  for (const auto& r : rows)
    if (r.variant.suite == suite && r.variant.name == name) return r;
  throw ContractError("report has no row " + suite + "/" + name);
}

AblationReport ablation_suite(const TrainConfig& base, std::span<const DomainSplit> domains,
                              std::span<const std::string> suites,
                              std::span<const std::uint64_t> seeds, int jobs,
                              std::span<const double> lambdas, const ProgressFn& progress) {
  if (domains.size() < 3) throw ContractError("ablation needs at least three domains");
  if (seeds.empty()) throw ContractError("ablation needs at least one seed");
  AblationReport report;
  for (const auto& d : domains) report.domain_names.push_back(d.name);

  std::vector<Variant> variants;
  for (const auto& s : suites)
    for (auto& v : suite_variants(s, base, lambdas)) variants.push_back(std::move(v));

  // Distinct effective configurations, each trained once per (target, seed).
  std::map<std::string, std::size_t> config_slot;
  std::vector<TrainConfig> distinct;
  std::vector<std::size_t> slot_of_variant;
  for (const auto& v : variants) {
    const auto key = config_to_json(canonical(v.cfg));
    auto [it, inserted] = config_slot.try_emplace(key, distinct.size());
    if (inserted) distinct.push_back(v.cfg);
    slot_of_variant.push_back(it->second);
  }
  std::vector<std::string> slot_name(distinct.size());
  for (std::size_t i = variants.size(); i-- > 0;)
    slot_name[slot_of_variant[i]] = variants[i].suite + "/" + variants[i].name;

  const std::size_t per_slot = domains.size() * seeds.size();
  std::vector<Job> work;
  std::vector<std::string> labels;
  for (std::size_t c = 0; c < distinct.size(); ++c)
    for (std::size_t t = 0; t < domains.size(); ++t)
      for (const auto s : seeds) {
        TrainConfig cfg = distinct[c];
        cfg.seed = s;
        work.push_back({cfg, static_cast<int>(t)});
        labels.push_back(slot_name[c] + " target=" + domains[t].name + " seed=" + std::to_string(s));
      }
  const auto runs = run_jobs(work, domains, jobs, labels, progress);
  report.trained_runs = runs.size();

  for (std::size_t i = 0; i < variants.size(); ++i) {
    VariantResult vr{variants[i], {}, 0.0};
    const std::size_t base_index = slot_of_variant[i] * per_slot;
    std::vector<double> target_means;
    for (std::size_t t = 0; t < domains.size(); ++t) {
      const auto first = runs.begin() + static_cast<std::ptrdiff_t>(base_index + t * seeds.size());
      std::vector<RunRecord> mine(first, first + static_cast<std::ptrdiff_t>(seeds.size()));
      vr.targets.push_back(aggregate(variants[i].cfg, domains, static_cast<int>(t), std::move(mine)));
      target_means.push_back(vr.targets.back().mean);
    }
    vr.mean = mean_of(target_means);
    report.rows.push_back(std::move(vr));
  }
  return report;
}

std::string render_table(const AblationReport& report, const TrainConfig& base) {
  std::ostringstream os;
  os << "# DAEL ablation report\n"
     << "# reference points at full scale (Digit-5 average accuracy): "
        "collaborative 96.47, individual 93.07\n"
     << "# base config: " << config_to_json(base) << "\n"
     << "# distinct training runs: " << report.trained_runs << "\n";
  std::string current;
  auto cell = [](double acc) {
    std::ostringstream c;
    c.setf(std::ios::fixed);
    c.precision(2);
    c << 100.0 * acc;
    return c.str();
  };
  std::size_t name_w = 18;
  for (const auto& r : report.rows) name_w = std::max(name_w, r.variant.name.size() + 2);
  for (const auto& r : report.rows) {
    if (r.variant.suite != current) {
      current = r.variant.suite;
      os << "\n[" << current << "]\n" << std::string(name_w, ' ');
      for (const auto& d : report.domain_names) {
        os << ' ';
        os.width(16);
        os << d;
      }
      os << ' ';
      os.width(8);
      os << "mean" << '\n';
    }
    os << r.variant.name << std::string(name_w - r.variant.name.size(), ' ');
    for (const auto& t : r.targets) {
      const std::string s = cell(t.mean) + " +/- " + cell(t.stddev);
      os << ' ';
      os.width(16);
      os << s;
    }
    os << ' ';
    os.width(8);
    os << cell(r.mean) << '\n';
  }
  return os.str();
}

void write_report_records(const AblationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& r : report.rows)
    for (const auto& t : r.targets)
      for (const auto& run : t.runs) {
        nlohmann::json j{{"suite", r.variant.suite},
                         {"variant", r.variant.name},
                         {"target", t.target_name},
                         {"seed", run.seed},
                         {"accuracy", run.accuracy},
                         {"expert_accuracy", run.diagnostics.expert_accuracy},
                         {"expert_variance", run.diagnostics.expert_variance},
                         {"seconds", run.seconds},
                         {"config", nlohmann::json::parse(t.config)}};
        out << j.dump() << '\n';
      }
}

}  // namespace dael
