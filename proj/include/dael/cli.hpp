#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dael/dataset.hpp"
#include "dael/image.hpp"
#include "dael/trainer.hpp"

namespace dael::cli {

/// Everything a subcommand can be configured with. Defaults are those of the
/// owning modules.
struct Settings {
  SynthSpec synth;
  TrainConfig train;
  std::filesystem::path data_dir = "data";
  int target = 3;
  std::filesystem::path checkpoint = "dael.ck";
  std::filesystem::path history = "history.jsonl";
  int seeds = 3;
  int jobs = 1;
  std::vector<std::string> suites{"loss-ladder"};
  std::vector<double> lambdas;  // empty: the default sweep
  std::filesystem::path report;
  int preview_domain = 0;
  int preview_count = 8;
  std::filesystem::path preview_dir = "preview";
};

/// Applies one `section.key = value` assignment. Unknown keys and values
/// that do not parse throw FormatError naming the key.
void set_key(Settings& s, const std::string& key, const std::string& value);

/// Reads a sectioned key/value (INI) file into `s`.
void load_config(Settings& s, const std::filesystem::path& path);

/// The effective configuration in the same format load_config reads.
std::string render_config(const Settings& s);

/// Writes `<dir>/domains.txt` and one DAELDS1 file per domain split.
void save_domains(const std::vector<DomainSplit>& domains, const std::filesystem::path& dir);
std::vector<DomainSplit> load_domains(const std::filesystem::path& dir);

void write_png(const Image& img, const std::filesystem::path& path);

/// Lays images out in a grid with `columns` cells per row and a 2-pixel gutter.
Image tile(const std::vector<Image>& cells, int columns);

/// Entry point. Returns 0 on success, 1 on contract or format errors, 2 on
/// bad invocation (usage goes to `err`).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dael::cli
