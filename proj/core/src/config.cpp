#include "deepmts/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "deepmts/error.hpp"
#include "deepmts/metrics.hpp"

namespace deepmts::cli {

data::PreprocessOptions RunConfig::preprocess_options() const {
  data::PreprocessOptions o;
  o.target_extent = arch.extent;
  o.target_spacing = {cohort.spacing_mm, cohort.spacing_mm, cohort.spacing_mm};
  o.ct_window_lo = ct_window_lo;
  o.ct_window_hi = ct_window_hi;
  o.pet_percentile = pet_percentile;
  return o;
}

void RunConfig::validate() const {
  arch.validate();
  train.validate();
  cohort.validate();
  preprocess_options().validate();
  if (fold >= data::kFolds) throw ValidationError("fold must lie in 0..4");
  if (name.empty() || name.find('/') != std::string::npos) throw ValidationError("name must be a non-empty plain name");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "seed",       "name",          "out",          "manifest",        "checkpoints",      "fold",
      "variant",    "backbone",      "csn_input",    "width",           "extent",           "clinical_dim",
      "iterations", "batch_size",    "lr_schedule",  "lr_scale",        "lambda_l2",       "eval_every",       "augment",
      "n",          "spacing_mm",    "beta",         "baseline_hazard", "censor_fraction",  "c_max",
      "node_probability", "with_masks", "ct_window", "pet_percentile"};
  return keys;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] void fail(const ConfigEntry& e, const std::string& key, const std::string& msg) {
  throw ValidationError(e.where + ": " + key + ": " + msg);
}

double to_double(const std::string& s, const ConfigEntry& e, const std::string& key) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) fail(e, key, "expected a number, got '" + s + "'");
  return v;
}

std::uint64_t to_uint(const std::string& s, const ConfigEntry& e, const std::string& key) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    fail(e, key, "expected a nonnegative integer, got '" + s + "'");
  }
  return v;
}

bool to_bool(const std::string& s, const ConfigEntry& e, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  fail(e, key, "expected true or false, got '" + s + "'");
}

template <class F>
auto wrap(const ConfigEntry& e, const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ValidationError& err) {
    fail(e, key, err.what());
  }
}

}  // namespace

ConfigEntries parse_entries(std::string_view text, const std::string& source) {
  ConfigEntries out;
  std::size_t lineno = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ValidationError(where + ": missing key");
    const auto& keys = config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ValidationError(where + ": unknown key '" + key + "'");
    out[key] = {trim(line.substr(eq + 1)), where};
  }
  return out;
}

ConfigEntries read_entries(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_entries(ss.str(), path.string());
}

RunConfig build_config(const ConfigEntries& entries) {
  RunConfig c;
  const auto& keys = config_keys();
  bool explicit_csn = false, explicit_lr = false, explicit_scale = false;
  double lr_scale = train::kDeskLrScale;
  for (const auto& [key, e] : entries) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ValidationError(e.where + ": unknown key '" + key + "'");
    const std::string& v = e.value;
    const bool empty_ok = key == "out" || key == "manifest" || key == "checkpoints";
    if (v.empty() && !empty_ok) fail(e, key, "missing value");
    if (key == "seed") c.seed = to_uint(v, e, key);
    else if (key == "name") c.name = v;
    else if (key == "out") c.out = v;
    else if (key == "manifest") c.manifest = v;
    else if (key == "checkpoints") {
      c.checkpoints.clear();
      for (const auto& p : split(v, ',')) c.checkpoints.emplace_back(p);
    } else if (key == "fold") c.fold = to_uint(v, e, key);
    else if (key == "variant") c.arch.variant = wrap(e, key, [&] { return model::parse_variant(v); });
    else if (key == "backbone") c.arch.backbone = wrap(e, key, [&] { return model::parse_backbone(v); });
    else if (key == "csn_input") {
      c.arch.csn_input = wrap(e, key, [&] { return model::parse_csn_input(v); });
      explicit_csn = true;
    } else if (key == "width") c.arch.width = to_double(v, e, key);
    else if (key == "extent") {
      const auto parts = split(v, 'x');
      if (parts.size() != 3) fail(e, key, "expected DxHxW, got '" + v + "'");
      for (std::size_t a = 0; a < 3; ++a) c.arch.extent[a] = to_uint(parts[a], e, key);
    } else if (key == "clinical_dim") c.arch.clinical_dim = to_uint(v, e, key);
    else if (key == "iterations") c.train.iterations = to_uint(v, e, key);
    else if (key == "batch_size") c.train.batch_size = to_uint(v, e, key);
    else if (key == "lr_schedule") {
      c.train.lr_schedule.points.clear();
      for (const auto& item : split(v, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) fail(e, key, "expected iteration:rate pairs, got '" + item + "'");
        c.train.lr_schedule.points.emplace_back(to_uint(trim(item.substr(0, colon)), e, key),
                                                to_double(trim(item.substr(colon + 1)), e, key));
      }
      wrap(e, key, [&] { c.train.lr_schedule.validate(); return 0; });
      explicit_lr = true;
    } else if (key == "lr_scale") {
      lr_scale = to_double(v, e, key);
      if (!(lr_scale > 0.0)) fail(e, key, "must be positive");
      explicit_scale = true;
    } else if (key == "lambda_l2") c.train.lambda_l2 = to_double(v, e, key);
    else if (key == "eval_every") c.train.eval_every = to_uint(v, e, key);
    else if (key == "augment") c.train.augment = to_bool(v, e, key);
    else if (key == "n") c.cohort.n = to_uint(v, e, key);
    else if (key == "spacing_mm") c.cohort.spacing_mm = to_double(v, e, key);
    else if (key == "beta") {
      const auto parts = split(v, ',');
      if (parts.size() != 3) fail(e, key, "expected three comma-separated coefficients");
      c.cohort.hazard.beta_volume = to_double(parts[0], e, key);
      c.cohort.hazard.beta_uptake = to_double(parts[1], e, key);
      c.cohort.hazard.beta_node = to_double(parts[2], e, key);
    } else if (key == "baseline_hazard") c.cohort.hazard.baseline = to_double(v, e, key);
    else if (key == "censor_fraction") c.cohort.censor.target_fraction = to_double(v, e, key);
    else if (key == "c_max") {
      if (v == "auto") c.cohort.censor.c_max.reset();
      else c.cohort.censor.c_max = to_double(v, e, key);
    } else if (key == "node_probability") c.cohort.phantom.node_probability = to_double(v, e, key);
    else if (key == "with_masks") c.with_masks = to_bool(v, e, key);
    else if (key == "ct_window") {
      const auto parts = split(v, ',');
      if (parts.size() != 2) fail(e, key, "expected lo,hi");
      c.ct_window_lo = to_double(parts[0], e, key);
      c.ct_window_hi = to_double(parts[1], e, key);
    } else if (key == "pet_percentile") c.pet_percentile = to_double(v, e, key);
  }
  if (!explicit_csn) c.arch.csn_input = model::ArchSpec::for_variant(c.arch.variant).csn_input;
  if (explicit_lr && explicit_scale) throw ValidationError("lr_scale and lr_schedule are mutually exclusive");
  if (!explicit_lr) c.train.lr_schedule = train::LrSchedule::standard(c.train.iterations, lr_scale);
  c.train.seed = c.seed;
  c.cohort.seed = c.seed;
  c.cohort.extent = c.arch.extent;
  c.validate();
  return c;
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  return build_config(parse_entries(text, source));
}

std::string to_text(const RunConfig& c) {
  std::ostringstream o;
  const auto& h = c.cohort.hazard;
  std::string lr, cps;
  for (const auto& [it, rate] : c.train.lr_schedule.points) lr += (lr.empty() ? "" : ",") + std::to_string(it) + ":" + format_number(rate);
  for (const auto& p : c.checkpoints) cps += (cps.empty() ? "" : ",") + p.generic_string();
  o << "seed = " << c.seed << '\n'
    << "name = " << c.name << '\n'
    << "out = " << c.out.generic_string() << '\n'
    << "manifest = " << c.manifest.generic_string() << '\n'
    << "checkpoints = " << cps << '\n'
    << "fold = " << c.fold << '\n'
    << "variant = " << to_string(c.arch.variant) << '\n'
    << "backbone = " << to_string(c.arch.backbone) << '\n'
    << "csn_input = " << to_string(c.arch.csn_input) << '\n'
    << "width = " << format_number(c.arch.width) << '\n'
    << "extent = " << c.arch.extent[0] << 'x' << c.arch.extent[1] << 'x' << c.arch.extent[2] << '\n'
    << "clinical_dim = " << c.arch.clinical_dim << '\n'
    << "iterations = " << c.train.iterations << '\n'
    << "batch_size = " << c.train.batch_size << '\n'
    << "lr_schedule = " << lr << '\n'
    << "lambda_l2 = " << format_number(c.train.lambda_l2) << '\n'
    << "eval_every = " << c.train.eval_every << '\n'
    << "augment = " << (c.train.augment ? "true" : "false") << '\n'
    << "n = " << c.cohort.n << '\n'
    << "spacing_mm = " << format_number(c.cohort.spacing_mm) << '\n'
    << "beta = " << format_number(h.beta_volume) << ',' << format_number(h.beta_uptake) << ',' << format_number(h.beta_node) << '\n'
    << "baseline_hazard = " << format_number(h.baseline) << '\n'
    << "censor_fraction = " << format_number(c.cohort.censor.target_fraction) << '\n'
    << "c_max = " << (c.cohort.censor.c_max ? format_number(*c.cohort.censor.c_max) : std::string("auto")) << '\n'
    << "node_probability = " << format_number(c.cohort.phantom.node_probability) << '\n'
    << "with_masks = " << (c.with_masks ? "true" : "false") << '\n'
    << "ct_window = " << format_number(c.ct_window_lo) << ',' << format_number(c.ct_window_hi) << '\n'
    << "pet_percentile = " << format_number(c.pet_percentile) << '\n';
  return o.str();
}

void write_config(const std::filesystem::path& path, const RunConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << to_text(config);
}

}  // namespace deepmts::cli
