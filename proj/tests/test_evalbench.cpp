#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>
#include <unistd.h>

#include "dael/errors.hpp"
#include "dael/evalbench.hpp"

using namespace dael;

namespace {

std::vector<DomainSplit> tiny_domains() {
  SynthSpec s;
  s.image_side = 16;
  s.train_per_domain = 16;
  s.test_per_domain = 10;
  s.seed = 11;
  return generate_synthetic(s);
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.per_domain_batch = 8;
  cfg.target_batch = 8;
  cfg.widths = {3, 4, 5};
  cfg.feature_dim = 8;
  return cfg;
}

Architecture arch16(int k) {
  Architecture a;
  a.image_side = 16;
  a.widths = {3, 4, 5};
  a.feature_dim = 8;
  a.num_experts = k;
  a.num_classes = 5;
  return a;
}

/// Every head outputs the same fixed distribution peaked on `cls`.
ModelParams<float> constant_model(int cls) {
  auto p = init_params<float>(arch16(3), 1);
  for (std::size_t i = 0; i < 3; ++i) {
    for (auto& w : p.head_w[i].mutable_values()) w = 0;
    auto b = p.head_b[i].mutable_values();
    for (std::size_t c = 0; c < 5; ++c) b[c] = static_cast<int>(c) == cls ? 5.0f : 0.0f;
  }
  return p;
}

DomainDataset relabel(const DomainDataset& d, int label) {
  std::vector<Image> images;
  for (std::size_t i = 0; i < d.size(); ++i) images.push_back(d.image(i));
  return DomainDataset(d.domain_id(), d.num_classes(), std::move(images),
                       std::vector<int>(d.size(), label));
}

}  // namespace

TEST_CASE("accuracy on constructed fixtures") {
  const auto test = tiny_domains()[0].test;
  const auto p = constant_model(2);
  CHECK(evaluate(p, relabel(test, 2)) == 1.0);
  CHECK(evaluate(p, relabel(test, 3)) == 0.0);
  CHECK(evaluate(p, test) == evaluate(p, test));
  CHECK_THROWS_AS(evaluate(p, DomainDataset{}), ContractError);
}

TEST_CASE("random initialisation sits at chance") {
  SynthSpec s;
  s.train_per_domain = 5;
  s.test_per_domain = 500;
  const auto test = generate_synthetic(s)[0].test;
  Architecture a;
  a.num_experts = 3;
  std::vector<double> acc;
  for (std::uint64_t seed = 0; seed < 8; ++seed) acc.push_back(evaluate(init_params<float>(a, seed), test));
  CHECK(std::abs(mean_of(acc) - 0.2) <= 0.05);
}

TEST_CASE("identical heads give identical diagnostics") {
  const auto test = tiny_domains()[1].test;
  auto p = init_params<float>(arch16(3), 4);
  for (std::size_t i = 1; i < 3; ++i) {
    std::copy(p.head_w[0].values().begin(), p.head_w[0].values().end(),
              p.head_w[i].mutable_values().begin());
    std::copy(p.head_b[0].values().begin(), p.head_b[0].values().end(),
              p.head_b[i].mutable_values().begin());
  }
  const auto d = expert_diagnostics(p, test);
  REQUIRE(d.expert_accuracy.size() == 3);
  for (const double a : d.expert_accuracy) CHECK(a == d.ensemble_accuracy);
  CHECK(d.expert_variance == 0.0);
  CHECK(d.ensemble_accuracy == evaluate(p, test));
}

TEST_CASE("mean and sample standard deviation") {
  const std::vector<double> v{0.5, 0.7, 0.9};
  CHECK(mean_of(v) == doctest::Approx(0.7));
  CHECK(stddev_of(v) == doctest::Approx(0.2));
  CHECK(stddev_of(std::vector<double>{0.4}) == 0.0);
}

TEST_CASE("leave-one-out structure and data hygiene") {
  const auto domains = tiny_domains();
  const std::vector<std::uint64_t> seeds{1, 2};
  for (const auto mode : {Mode::dg, Mode::uda}) {
    auto cfg = tiny_config();
    cfg.loss.mode = mode;
    const auto results = leave_one_out(cfg, domains, seeds, 2);
    REQUIRE(results.size() == 4);
    for (std::size_t t = 0; t < 4; ++t) {
      const auto& r = results[t];
      CHECK(r.target == static_cast<int>(t));
      CHECK(r.target_name == domains[t].name);
      REQUIRE(r.runs.size() == 2);
      std::vector<double> acc;
      for (const auto& run : r.runs) {
        acc.push_back(run.accuracy);
        CHECK(run.diagnostics.expert_accuracy.size() == 3);
        CHECK(run.target_train_label_reads == 0);
        if (mode == Mode::dg)
          CHECK(run.target_train_image_reads == 0);
        else
          CHECK(run.target_train_image_reads > 0);
      }
      CHECK(std::abs(r.mean - mean_of(acc)) < 1e-9);
      CHECK(r.stddev == stddev_of(acc));
      CHECK(nlohmann::json::parse(r.config).at("loss").contains("lambda_u"));
    }
  }
}

TEST_CASE("parallel runs match serial runs") {
  const auto domains = tiny_domains();
  const std::vector<std::uint64_t> seeds{3};
  const auto cfg = tiny_config();
  const auto serial = leave_one_out(cfg, domains, seeds, 1);
  const auto parallel = leave_one_out(cfg, domains, seeds, 4);
  for (std::size_t t = 0; t < 4; ++t) CHECK(serial[t].runs[0].accuracy == parallel[t].runs[0].accuracy);
}

TEST_CASE("suite variants") {
  const TrainConfig base;
  CHECK(suite_variants("loss-ladder", base).size() == 4);
  CHECK(suite_variants("aggregation", base).size() == 2);
  CHECK(suite_variants("lambda-sweep", base).size() == 6);
  const auto ladder = suite_variants("loss-ladder", base);
  CHECK(ladder[0].name == "L_ce");
  CHECK_FALSE(ladder[0].cfg.loss.use_consistency);
  CHECK_FALSE(ladder[0].cfg.loss.use_unlabeled);
  CHECK(ladder[3].name == "full");
  const auto aug = suite_variants("augmentation", base);
  CHECK(aug[1].cfg.prediction_view == PredictionView::weak);
  CHECK_THROWS_AS(suite_variants("dropout", base), ContractError);
}

TEST_CASE("ablation report shares identical configurations") {
  const auto domains = tiny_domains();
  const std::vector<std::uint64_t> seeds{1};
  const std::vector<std::string> suites{"loss-ladder", "lambda-sweep"};
  const std::vector<double> lambdas{0.0, 0.5};
  const auto base = tiny_config();
  const auto report = ablation_suite(base, domains, suites, seeds, 2, lambdas);
  CHECK(report.rows.size() == 6);
  // lambda_u = 0 coincides with L_ce+L_cr, lambda_u = 0.5 with full
  CHECK(report.trained_runs == 4 * 4);
  const auto& zero = report.row("lambda-sweep", "lambda_u=0");
  const auto& ce_cr = report.row("loss-ladder", "L_ce+L_cr");
  CHECK(zero.mean == ce_cr.mean);
  for (std::size_t t = 0; t < 4; ++t)
    CHECK(zero.targets[t].runs[0].accuracy == ce_cr.targets[t].runs[0].accuracy);
  CHECK(report.row("loss-ladder", "L_ce").targets.size() == 4);
  for (const auto& row : report.rows) {
    std::vector<double> per_target;
    for (const auto& t : row.targets) per_target.push_back(t.mean);
    CHECK(std::abs(row.mean - mean_of(per_target)) < 1e-12);
  }
  CHECK_THROWS_AS(report.row("loss-ladder", "nope"), ContractError);

  const auto table = render_table(report, base);
  CHECK(table.find("96.47") != std::string::npos);
  CHECK(table.find("93.07") != std::string::npos);
  CHECK(table.find("L_ce+L_u") != std::string::npos);

  const auto path = std::filesystem::temp_directory_path() /
                    ("dael_report_" + std::to_string(::getpid()) + ".jsonl");
  write_report_records(report, path);
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  std::set<std::string> variants;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    variants.insert(j.at("suite").get<std::string>() + "/" + j.at("variant").get<std::string>());
    ++n;
  }
  CHECK(n == 6 * 4);
  CHECK(variants.size() == 6);
  std::filesystem::remove(path);
}
