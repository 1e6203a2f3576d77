#include "dael/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <png.h>

#include "dael/augment.hpp"
#include "dael/errors.hpp"
#include "dael/evalbench.hpp"
#include "dael/model.hpp"

namespace dael::cli {

namespace {

// ---- value parsing -----------------------------------------------------------

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw FormatError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "true or false");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename E>
E parse_choice(const std::string& key, const std::string& value,
               std::initializer_list<std::pair<const char*, E>> choices) {
  std::string names;
  for (const auto& [name, e] : choices) {
    if (value == name) return e;
    names += names.empty() ? name : std::string(" | ") + name;
  }
  bad_value(key, value, "one of " + names);
}

template <typename E>
std::string choice_name(E e, std::initializer_list<std::pair<const char*, E>> choices) {
  for (const auto& [name, c] : choices)
    if (c == e) return name;
  return "?";
}

// shortest text that reads back to the same double
std::string fmt(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    if constexpr (std::is_floating_point_v<T>)
      os << fmt(v[i]);
    else
      os << v[i];
  }
  return os.str();
}

// ---- key registry --------------------------------------------------------------

const std::initializer_list<std::pair<const char*, Mode>> kModes{{"uda", Mode::uda},
                                                                  {"dg", Mode::dg}};
const std::initializer_list<std::pair<const char*, Aggregation>> kAggregations{
    {"collaborative", Aggregation::collaborative}, {"individual", Aggregation::individual}};
const std::initializer_list<std::pair<const char*, ConsistencyTarget>> kTargets{
    {"expert", ConsistencyTarget::expert}, {"real_label", ConsistencyTarget::real_label}};
const std::initializer_list<std::pair<const char*, PseudoLabelSource>> kSources{
    {"confident_expert", PseudoLabelSource::confident_expert},
    {"ensemble", PseudoLabelSource::ensemble}};
const std::initializer_list<std::pair<const char*, PredictionView>> kViews{
    {"strong", PredictionView::strong}, {"weak", PredictionView::weak}};

struct Key {
  std::function<void(Settings&, const std::string& key, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

template <typename T, typename Member>
Key number(Member member) {
  return {[member](Settings& s, const std::string& k, const std::string& v) {
            member(s) = parse_number<T>(k, v);
          },
          [member](const Settings& s) {
            if constexpr (std::is_floating_point_v<T>)
              return fmt(member(s));
            else
              return std::to_string(member(s));
          }};
}

template <typename Member>
Key flag(Member member) {
  return {[member](Settings& s, const std::string& k, const std::string& v) {
            member(s) = parse_bool(k, v);
          },
          [member](const Settings& s) {
            return std::string(member(s) ? "true" : "false");
          }};
}

template <typename Member>
Key path(Member member) {
  return {[member](Settings& s, const std::string&, const std::string& v) { member(s) = v; },
          [member](const Settings& s) { return member(s).string(); }};
}

template <typename E, typename Member>
Key choice(Member member, const std::initializer_list<std::pair<const char*, E>>& choices) {
  return {[member, choices](Settings& s, const std::string& k, const std::string& v) {
            member(s) = parse_choice<E>(k, v, choices);
          },
          [member, choices](const Settings& s) {
            return choice_name<E>(member(s), choices);
          }};
}

#define FIELD(expr) [](auto& s) -> auto& { return s.expr; }

const std::map<std::string, Key>& registry() {
  static const std::map<std::string, Key> keys = [] {
    std::map<std::string, Key> k;
    k["data.dir"] = path(FIELD(data_dir));
    k["data.seed"] = number<std::uint64_t>(FIELD(synth.seed));
    k["data.num_classes"] = number<int>(FIELD(synth.num_classes));
    k["data.image_side"] = number<int>(FIELD(synth.image_side));
    k["data.train_per_domain"] = number<int>(FIELD(synth.train_per_domain));
    k["data.test_per_domain"] = number<int>(FIELD(synth.test_per_domain));
    k["data.domains"] = {[](Settings& s, const std::string& key, const std::string& v) {
                           std::vector<DomainStyle> styles;
                           for (const auto& name : split_list(v)) {
                             try {
                               styles.push_back(style_from_name(name));
                             } catch (const ContractError&) {
                               bad_value(key, name, "plain | inverted | noisy | textured");
                             }
                           }
                           s.synth.domains = std::move(styles);
                         },
                         [](const Settings& s) {
                           std::vector<std::string> names;
                           for (const auto d : s.synth.domains) names.emplace_back(style_name(d));
                           return join(names);
                         }};

    k["train.epochs"] = number<int>(FIELD(train.epochs));
    k["train.iters_per_epoch"] = number<int>(FIELD(train.iters_per_epoch));
    k["train.lr0"] = number<double>(FIELD(train.lr0));
    k["train.momentum"] = number<double>(FIELD(train.momentum));
    k["train.weight_decay"] = number<double>(FIELD(train.weight_decay));
    k["train.per_domain_batch"] = number<int>(FIELD(train.per_domain_batch));
    k["train.target_batch"] = number<int>(FIELD(train.target_batch));
    k["train.seed"] = number<std::uint64_t>(FIELD(train.seed));
    k["train.prediction_view"] = choice<PredictionView>(FIELD(train.prediction_view), kViews);
    k["train.widths"] = {[](Settings& s, const std::string& key, const std::string& v) {
                           const auto parts = split_list(v);
                           if (parts.size() != 3) bad_value(key, v, "three comma-separated widths");
                           for (std::size_t i = 0; i < 3; ++i)
                             s.train.widths[i] = parse_number<int>(key, parts[i]);
                         },
                         [](const Settings& s) {
                           return join(std::vector<int>(s.train.widths.begin(), s.train.widths.end()));
                         }};
    k["train.feature_dim"] = number<int>(FIELD(train.feature_dim));
    k["train.augment_workers"] = number<int>(FIELD(train.augment_workers));

    k["loss.mode"] = choice<Mode>(FIELD(train.loss.mode), kModes);
    k["loss.use_consistency"] = flag(FIELD(train.loss.use_consistency));
    k["loss.use_unlabeled"] = flag(FIELD(train.loss.use_unlabeled));
    k["loss.lambda_u"] = number<double>(FIELD(train.loss.lambda_u));
    k["loss.epsilon"] = number<double>(FIELD(train.loss.epsilon));
    k["loss.aggregation"] = choice<Aggregation>(FIELD(train.loss.aggregation), kAggregations);
    k["loss.consistency_target"] =
        choice<ConsistencyTarget>(FIELD(train.loss.consistency_target), kTargets);
    k["loss.pseudo_source"] = choice<PseudoLabelSource>(FIELD(train.loss.pseudo_source), kSources);

    k["run.target"] = number<int>(FIELD(target));
    k["run.checkpoint"] = path(FIELD(checkpoint));
    k["run.history"] = path(FIELD(history));
    k["run.seeds"] = number<int>(FIELD(seeds));
    k["run.jobs"] = number<int>(FIELD(jobs));
    k["run.report"] = path(FIELD(report));
    k["run.suites"] = {[](Settings& s, const std::string&, const std::string& v) {
                         s.suites = split_list(v);
                       },
                       [](const Settings& s) { return join(s.suites); }};
    k["run.lambdas"] = {[](Settings& s, const std::string& key, const std::string& v) {
                          s.lambdas.clear();
                          for (const auto& x : split_list(v))
                            s.lambdas.push_back(parse_number<double>(key, x));
                        },
                        [](const Settings& s) { return join(s.lambdas); }};

    k["preview.domain"] = number<int>(FIELD(preview_domain));
    k["preview.count"] = number<int>(FIELD(preview_count));
    k["preview.dir"] = path(FIELD(preview_dir));
    return k;
  }();
  return keys;
}

#undef FIELD

// ---- subcommands ---------------------------------------------------------------

std::vector<std::uint64_t> seed_list(const Settings& s) {
  if (s.seeds < 1) throw ContractError("run.seeds must be at least 1");
  std::vector<std::uint64_t> out;
  for (int i = 0; i < s.seeds; ++i) out.push_back(s.train.seed + static_cast<std::uint64_t>(i));
  return out;
}

void check_target(const Settings& s, std::size_t num_domains) {
  if (s.target < 0 || static_cast<std::size_t>(s.target) >= num_domains)
    throw ContractError("target domain " + std::to_string(s.target) + " out of range [0, " +
                        std::to_string(num_domains) + ")");
}

void cmd_gendata(const Settings& s, std::ostream& out) {
  const auto domains = generate_synthetic(s.synth);
  save_domains(domains, s.data_dir);
  for (const auto& d : domains)
    out << d.name << ": " << d.train.size() << " train, " << d.test.size() << " test\n";
}

void cmd_train(const Settings& s, std::ostream& out) {
  const auto domains = load_domains(s.data_dir);
  check_target(s, domains.size());
  const auto t = static_cast<std::size_t>(s.target);
  std::vector<DomainDataset> sources;
  for (std::size_t d = 0; d < domains.size(); ++d)
    if (d != t) sources.push_back(domains[d].train);
  std::optional<UnlabeledView> unlabeled;
  if (s.train.loss.mode == Mode::uda) unlabeled.emplace(domains[t].train);

  const auto result = train(s.train, sources, unlabeled, &domains[t].test);
  save_checkpoint(result.params, s.checkpoint);
  write_history(result.history, s.history);
  {
    std::ofstream cfg(s.checkpoint.string() + ".ini");
    cfg << render_config(s);
  }
  const auto& last = result.history.epochs.back();
  out << "target " << domains[t].name << " accuracy " << last.target_accuracy.value_or(0.0)
      << " after " << result.history.epochs.size() << " epochs\n";
}

void cmd_eval(const Settings& s, std::ostream& out) {
  const auto domains = load_domains(s.data_dir);
  check_target(s, domains.size());
  const auto params = load_checkpoint(s.checkpoint);
  out << "accuracy " << evaluate(params, domains[static_cast<std::size_t>(s.target)].test) << '\n';
}

void cmd_ablate(const Settings& s, std::ostream& out, std::ostream& err) {
  std::vector<DomainSplit> domains;
  if (std::filesystem::exists(s.data_dir / "domains.txt")) {
    domains = load_domains(s.data_dir);
  } else {
    err << "no dataset in " << s.data_dir << ", generating from [data]\n";
    domains = generate_synthetic(s.synth);
  }
  std::vector<std::string> suites = s.suites;
  if (std::find(suites.begin(), suites.end(), "all") != suites.end()) suites = kSuites;
  const auto lambdas = s.lambdas.empty() ? kLambdaSweep : s.lambdas;
  const auto seeds = seed_list(s);

  std::mutex mu;
  std::size_t done = 0;
  const auto report = ablation_suite(
      s.train, domains, suites, seeds, s.jobs, lambdas,
      [&](const std::string& label, const RunRecord& r) {
        std::lock_guard lock(mu);
        err << "[" << ++done << "] " << label << " target " << domains[static_cast<std::size_t>(r.target)].name
            << " seed " << r.seed << " accuracy " << r.accuracy << " (" << r.seconds << " s)\n";
      });
  out << render_table(report, s.train);
  out << "\n# effective configuration\n";
  std::istringstream cfg(render_config(s));
  for (std::string line; std::getline(cfg, line);) out << "# " << line << '\n';
  if (!s.report.empty()) write_report_records(report, s.report);
}

void cmd_preview(const Settings& s, std::ostream& out) {
  std::vector<DomainSplit> domains;
  if (std::filesystem::exists(s.data_dir / "domains.txt")) {
    domains = load_domains(s.data_dir);
  } else {
    SynthSpec spec = s.synth;
    spec.train_per_domain = std::max(spec.num_classes, s.preview_count);
    spec.test_per_domain = 1;
    domains = generate_synthetic(spec);
  }
  if (s.preview_domain < 0 || static_cast<std::size_t>(s.preview_domain) >= domains.size())
    throw ContractError("preview.domain out of range");
  if (s.preview_count < 1) throw ContractError("preview.count must be positive");
  const auto& data = domains[static_cast<std::size_t>(s.preview_domain)].train;
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(s.preview_count), data.size());

  std::vector<Image> originals;
  std::vector<const Image*> ptrs;
  for (std::size_t i = 0; i < n; ++i) originals.push_back(data.image(i));
  for (const auto& img : originals) ptrs.push_back(&img);

  std::filesystem::create_directories(s.preview_dir);
  constexpr int kDraws = 3;
  for (const auto kind : {augment::Kind::weak, augment::Kind::strong}) {
    std::vector<Image> cells = originals;
    for (int draw = 0; draw < kDraws; ++draw) {
      std::vector<std::uint64_t> seeds;
      for (std::size_t i = 0; i < n; ++i)
        seeds.push_back(derive_seed(s.train.seed, {9, static_cast<std::uint64_t>(draw), i}));
      const auto views = augment::augment_batch(ptrs, seeds, kind, s.train.augment_workers);
      cells.insert(cells.end(), views.begin(), views.end());
    }
    const auto file = s.preview_dir / (kind == augment::Kind::weak ? "weak.png" : "strong.png");
    write_png(tile(cells, static_cast<int>(n)), file);
    out << "wrote " << file.string() << '\n';
  }
}

}  // namespace

// ---- configuration ---------------------------------------------------------------

void set_key(Settings& s, const std::string& key, const std::string& value) {
  const auto& keys = registry();
  const auto it = keys.find(key);
  if (it == keys.end()) throw FormatError("unknown config key '" + key + "'");
  it->second.set(s, key, value);
}

void load_config(Settings& s, const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError("config " + path.string() + ": " + e.message() + " (line " +
                      std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw FormatError("unknown config key '" + section + "' outside a section");
    for (const auto& [key, value] : body) set_key(s, section + "." + key, value.data());
  }
}

std::string render_config(const Settings& s) {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, k] : registry()) {
    const auto dot = key.find('.');
    const auto sec = key.substr(0, dot);
    if (sec != section) {
      os << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(dot + 1) << " = " << k.get(s) << '\n';
  }
  return os.str();
}

void save_domains(const std::vector<DomainSplit>& domains, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "domains.txt");
  if (!index) throw FormatError("cannot write " + (dir / "domains.txt").string());
  for (const auto& d : domains) {
    save_dataset(d.train, dir / (d.name + "_train.daelds"));
    save_dataset(d.test, dir / (d.name + "_test.daelds"));
    index << d.name << '\n';
  }
}

std::vector<DomainSplit> load_domains(const std::filesystem::path& dir) {
  std::ifstream index(dir / "domains.txt");
  if (!index) throw FormatError("no domains.txt in " + dir.string() + " (run gendata first)");
  std::vector<DomainSplit> out;
  std::string name;
  while (std::getline(index, name)) {
    if (name.empty()) continue;
    out.push_back({name, load_dataset(dir / (name + "_train.daelds")),
                   load_dataset(dir / (name + "_test.daelds"))});
  }
  if (out.empty()) throw FormatError(dir.string() + "/domains.txt lists no domains");
  return out;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw FormatError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng failed while writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, img.pixels.data() + img.index(y, 0, 0));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image tile(const std::vector<Image>& cells, int columns) {
  if (cells.empty() || columns < 1) throw ContractError("tile: nothing to lay out");
  constexpr int gutter = 2;
  const int h = cells[0].height, w = cells[0].width;
  const int rows = (static_cast<int>(cells.size()) + columns - 1) / columns;
  Image grid(rows * (h + gutter) + gutter, columns * (w + gutter) + gutter, 255);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (c.height != h || c.width != w) throw DimensionError("tile: cells differ in size");
    const int oy = gutter + static_cast<int>(i) / columns * (h + gutter);
    const int ox = gutter + static_cast<int>(i) % columns * (w + gutter);
    for (int y = 0; y < h; ++y)
      std::copy_n(&c.pixels[c.index(y, 0, 0)], w * Image::channels, &grid.at(oy + y, ox, 0));
  }
  return grid;
}

// ---- entry point ---------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain adaptive ensemble learning on a synthetic multi-domain benchmark", "dael"};
  app.require_subcommand(1, 1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "INI file; flags override its keys")
      ->check(CLI::ExistingFile);

  // flag value -> config key, applied after the file so flags win
  std::vector<std::pair<CLI::Option*, std::string>> bindings;
  std::map<std::string, std::string> raw;
  auto bind = [&](CLI::App* sub, const std::string& flag, const std::string& key,
                  const std::string& help) {
    bindings.emplace_back(sub->add_option(flag, raw[key], help + " (" + key + ")"), key);
  };
  std::vector<std::string> suites;
  CLI::Option* suite_opt = nullptr;

  auto* gendata = app.add_subcommand("gendata", "generate the synthetic domains as DAELDS1 files");
  bind(gendata, "--out", "data.dir", "output directory");
  bind(gendata, "--seed", "data.seed", "generator seed");
  bind(gendata, "--train-per-domain", "data.train_per_domain", "training samples per domain");
  bind(gendata, "--test-per-domain", "data.test_per_domain", "test samples per domain");
  bind(gendata, "--image-side", "data.image_side", "image side in pixels");

  auto* train_cmd = app.add_subcommand("train", "train on every domain except the target");
  auto* eval_cmd = app.add_subcommand("eval", "ensemble accuracy of a checkpoint on the target test split");
  auto* ablate = app.add_subcommand("ablate", "leave-one-out ablation suites");
  auto* preview = app.add_subcommand("preview-augment", "write weak and strong augmentation grids");

  for (auto* sub : {train_cmd, eval_cmd, ablate, preview})
    bind(sub, "--data", "data.dir", "dataset directory written by gendata");
  for (auto* sub : {train_cmd, eval_cmd}) {
    bind(sub, "--target", "run.target", "target domain index");
    bind(sub, "--checkpoint", "run.checkpoint", "checkpoint path");
  }
  for (auto* sub : {train_cmd, ablate}) {
    bind(sub, "--mode", "loss.mode", "uda or dg");
    bind(sub, "--epochs", "train.epochs", "training epochs");
    bind(sub, "--lr", "train.lr0", "initial learning rate");
    bind(sub, "--lambda-u", "loss.lambda_u", "unlabeled loss weight");
    bind(sub, "--epsilon", "loss.epsilon", "pseudo-label confidence threshold");
    bind(sub, "--workers", "train.augment_workers", "augmentation threads per run");
  }
  for (auto* sub : {train_cmd, ablate, preview}) bind(sub, "--seed", "train.seed", "run seed");
  bind(train_cmd, "--history", "run.history", "per-epoch JSONL history path");

  suite_opt = ablate->add_option("--suite", suites, "suite name, repeatable, or 'all' (run.suites)");
  bind(ablate, "--seeds", "run.seeds", "number of seeds, counting up from --seed");
  bind(ablate, "--jobs", "run.jobs", "concurrent training runs");
  bind(ablate, "--lambdas", "run.lambdas", "comma-separated lambda_u sweep");
  bind(ablate, "--report", "run.report", "JSONL record file");

  bind(preview, "--domain", "preview.domain", "domain index");
  bind(preview, "--count", "preview.count", "images per row");
  bind(preview, "--out", "preview.dir", "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "dael: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    Settings s;
    if (!config_path.empty()) load_config(s, config_path);
    for (const auto& [opt, key] : bindings)
      if (opt->count()) set_key(s, key, raw[key]);
    if (suite_opt->count()) s.suites = suites;

    if (gendata->parsed()) cmd_gendata(s, out);
    else if (train_cmd->parsed()) cmd_train(s, out);
    else if (eval_cmd->parsed()) cmd_eval(s, out);
    else if (ablate->parsed()) cmd_ablate(s, out, err);
    else if (preview->parsed()) cmd_preview(s, out);
    return 0;
  } catch (const ContractError& e) {
    err << "dael: " << e.what() << '\n';
  } catch (const FormatError& e) {
    err << "dael: " << e.what() << '\n';
  } catch (const NumericError& e) {
    err << "dael: " << e.what() << '\n';
  } catch (const std::filesystem::filesystem_error& e) {
    err << "dael: " << e.what() << '\n';
  }
  return 1;
}

}  // namespace dael::cli
