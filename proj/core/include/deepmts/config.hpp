#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "deepmts/preprocess.hpp"
#include "deepmts/synth.hpp"
#include "deepmts/train.hpp"

namespace deepmts::cli {

/// Everything a command needs, from a flat key=value file plus flag
/// overrides. One seed drives both cohort generation and training.
struct RunConfig {
  model::ArchSpec arch;
  train::TrainSpec train;
  data::CohortParams cohort;
  double ct_window_lo = -200.0;
  double ct_window_hi = 200.0;
  double pet_percentile = 99.5;
  bool with_masks = true;
  std::size_t fold = 0;  // validation fold for `train`
  std::uint64_t seed = 0;
  std::string name = "default";
  std::filesystem::path out;
  std::filesystem::path manifest;
  std::vector<std::filesystem::path> checkpoints;

  data::PreprocessOptions preprocess_options() const;
  std::filesystem::path run_dir() const { return out / name; }
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Keys accepted in config files and as --key flags.
const std::vector<std::string>& config_keys();

/// Raw key=value pairs with the line each came from.
struct ConfigEntry {
  std::string value;
  std::string where;  // "file:line" or "--flag"
};
using ConfigEntries = std::map<std::string, ConfigEntry>;

/// Parses "key = value" lines; '#' starts a comment. Errors name source:line.
ConfigEntries parse_entries(std::string_view text, const std::string& source);
ConfigEntries read_entries(const std::filesystem::path& path);

/// Later entries win. Unknown keys and malformed values throw
/// ValidationError naming where the entry came from.
RunConfig build_config(const ConfigEntries& entries);

RunConfig parse_config(std::string_view text, const std::string& source = "config");

/// Effective config as text; parse_config(to_text(c)) == c.
std::string to_text(const RunConfig& config);
void write_config(const std::filesystem::path& path, const RunConfig& config);

}  // namespace deepmts::cli
