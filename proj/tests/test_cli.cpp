#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "dael/cli.hpp"
#include "dael/errors.hpp"

using namespace dael;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "dael");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

/// Scratch directory holding a tiny dataset and a config for fast runs.
struct Workspace {
  fs::path dir = fs::temp_directory_path() / ("dael_cli_" + std::to_string(::getpid()));
  fs::path data = dir / "data";
  fs::path config = dir / "tiny.ini";

  Workspace() {
    fs::create_directories(dir);
    std::ofstream(config) << "[train]\nepochs = 2\nwidths = 3,4,5\nfeature_dim = 8\n"
                             "per_domain_batch = 8\ntarget_batch = 8\n\n[loss]\nepsilon = 0.3\n";
    const auto r = invoke({"gendata", "--out", data.string(), "--train-per-domain", "16",
                           "--test-per-domain", "10", "--image-side", "16"});
    REQUIRE(r.code == 0);
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("pipeline: gendata, train, eval") {
  Workspace ws;
  CHECK(fs::exists(ws.data / "domains.txt"));
  CHECK(fs::exists(ws.data / "inverted_train.daelds"));

  const auto train = invoke({"-c", ws.config.string(), "train", "--data", ws.data.string(),
                             "--target", "3", "--mode", "uda", "--checkpoint", ws.path("m.ck"),
                             "--history", ws.path("h.jsonl")});
  REQUIRE(train.code == 0);
  CHECK(count_lines(ws.path("h.jsonl")) == 2);
  CHECK(fs::exists(ws.path("m.ck.ini")));

  const auto eval = invoke({"eval", "--data", ws.data.string(), "--target", "3", "--checkpoint",
                            ws.path("m.ck")});
  REQUIRE(eval.code == 0);
  CHECK(eval.out.rfind("accuracy ", 0) == 0);
  CHECK(std::count(eval.out.begin(), eval.out.end(), '\n') == 1);
}

TEST_CASE("same seed gives byte-identical checkpoints") {
  Workspace ws;
  for (const char* name : {"a.ck", "b.ck"})
    REQUIRE(invoke({"-c", ws.config.string(), "train", "--data", ws.data.string(), "--seed", "7",
                    "--checkpoint", ws.path(name), "--history", ws.path("h.jsonl")})
                .code == 0);
  CHECK(slurp(ws.path("a.ck")) == slurp(ws.path("b.ck")));
  REQUIRE(invoke({"-c", ws.config.string(), "train", "--data", ws.data.string(), "--seed", "8",
                  "--checkpoint", ws.path("c.ck"), "--history", ws.path("h.jsonl")})
              .code == 0);
  CHECK(slurp(ws.path("a.ck")) != slurp(ws.path("c.ck")));
}

TEST_CASE("flags override the file, which overrides defaults") {
  Workspace ws;
  const auto train = [&](std::vector<std::string> extra) {
    std::vector<std::string> args{"-c", ws.config.string(), "train", "--data", ws.data.string(),
                                  "--checkpoint", ws.path("p.ck"), "--history", ws.path("p.jsonl")};
    args.insert(args.end(), extra.begin(), extra.end());
    REQUIRE(invoke(args).code == 0);
    return count_lines(ws.path("p.jsonl"));
  };
  CHECK(train({}) == 2);
  CHECK(train({"--epochs", "1"}) == 1);

  cli::Settings s;
  CHECK(s.train.epochs == 30);
  cli::load_config(s, ws.config);
  CHECK(s.train.epochs == 2);
  CHECK(s.train.loss.epsilon == 0.3);
  CHECK(s.train.momentum == 0.9);
  cli::set_key(s, "train.epochs", "5");
  CHECK(s.train.epochs == 5);
}

TEST_CASE("effective configuration reads back unchanged") {
  cli::Settings s;
  cli::set_key(s, "loss.mode", "dg");
  cli::set_key(s, "loss.lambda_u", "0.75");
  cli::set_key(s, "train.widths", "8, 16, 32");
  cli::set_key(s, "run.suites", "loss-ladder,augmentation");
  cli::set_key(s, "data.domains", "plain,noisy,textured");
  const auto text = cli::render_config(s);
  const auto path = fs::temp_directory_path() / ("dael_cfg_" + std::to_string(::getpid()) + ".ini");
  std::ofstream(path) << text;
  cli::Settings t;
  cli::load_config(t, path);
  CHECK(cli::render_config(t) == text);
  CHECK(t.train.widths == std::array<int, 3>{8, 16, 32});
  CHECK(t.train.loss.mode == Mode::dg);
  CHECK(text.find("lambda_u = 0.75") != std::string::npos);
  fs::remove(path);
}

TEST_CASE("configuration errors name the key and exit 1") {
  Workspace ws;
  std::ofstream(ws.path("bad.ini")) << "[train]\nepochs = 2\nmomentun = 0.8\n";
  auto r = invoke({"-c", ws.path("bad.ini"), "train", "--data", ws.data.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("train.momentun") != std::string::npos);

  std::ofstream(ws.path("bad2.ini")) << "[loss]\nmode = semi\n";
  r = invoke({"-c", ws.path("bad2.ini"), "train", "--data", ws.data.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("loss.mode") != std::string::npos);

  r = invoke({"train", "--data", ws.data.string(), "--epochs", "two"});
  CHECK(r.code == 1);
  CHECK(r.err.find("train.epochs") != std::string::npos);

  cli::Settings s;
  CHECK_THROWS_WITH_AS(cli::set_key(s, "paths.out", "x"), doctest::Contains("paths.out"), FormatError);
}

TEST_CASE("contract and format failures exit 1") {
  Workspace ws;
  CHECK(invoke({"eval", "--data", ws.data.string(), "--checkpoint", ws.path("none.ck")}).code == 1);
  CHECK(invoke({"train", "--data", ws.path("nowhere")}).code == 1);
  CHECK(invoke({"-c", ws.config.string(), "train", "--data", ws.data.string(), "--target", "9"})
            .code == 1);
  auto bytes = slurp(ws.data / "plain_train.daelds");
  bytes[2] = '?';
  std::ofstream(ws.data / "plain_train.daelds", std::ios::binary) << bytes;
  const auto r = invoke({"-c", ws.config.string(), "train", "--data", ws.data.string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("magic") != std::string::npos);
}

TEST_CASE("bad invocation exits 2 with usage") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {}, {"frobnicate"}, {"train", "--no-such-flag"}, {"eval", "--target"},
           {"-c", "/nonexistent/config.ini", "train"}}) {
    const auto r = invoke(args);
    CHECK(r.code == 2);
    CHECK(r.err.find("Usage") != std::string::npos);
  }
  const auto help = invoke({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("preview-augment") != std::string::npos);
}

TEST_CASE("loss-ladder ablation records 48 runs") {
  Workspace ws;
  const auto r = invoke({"-c", ws.config.string(), "ablate", "--data", ws.data.string(),
                         "--suite", "loss-ladder", "--seeds", "3", "--epochs", "1", "--jobs", "2",
                         "--report", ws.path("ladder.jsonl")});
  REQUIRE(r.code == 0);
  CHECK(count_lines(ws.path("ladder.jsonl")) == 4 * 4 * 3);
  CHECK(r.out.find("L_ce+L_cr") != std::string::npos);
  CHECK(r.out.find("# effective configuration") != std::string::npos);
  CHECK(r.out.find("epochs = 1") != std::string::npos);
}

TEST_CASE("preview-augment writes two PNG grids") {
  Workspace ws;
  const auto out = ws.dir / "preview";
  const auto r = invoke({"preview-augment", "--data", ws.data.string(), "--domain", "1", "--count",
                         "5", "--out", out.string()});
  REQUIRE(r.code == 0);
  for (const char* name : {"weak.png", "strong.png"}) {
    const auto bytes = slurp(out / name);
    REQUIRE(bytes.size() > 8);
    CHECK(bytes.substr(1, 3) == "PNG");
  }
  const auto grid = cli::tile({Image(4, 4), Image(4, 4), Image(4, 4)}, 2);
  CHECK(grid.width == 2 * 6 + 2);
  CHECK(grid.height == 2 * 6 + 2);
}
