// mtsctl: cohort synthesis, training, cross-validation, ablation, prediction
// and reporting for multi-task PET/CT survival models.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "deepmts/checkpoint.hpp"
#include "deepmts/config.hpp"
#include "deepmts/error.hpp"
#include "deepmts/metrics.hpp"
#include "deepmts/report.hpp"

namespace fs = std::filesystem;
using namespace deepmts;

namespace {

void log(const std::string& msg) { std::cerr << msg << std::endl; }

std::string extent_str(const nn::Extent3& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

data::Cohort load_manifest(const cli::RunConfig& cfg) {
  if (cfg.manifest.empty()) throw ValidationError("this command needs --manifest");
  if (!fs::exists(cfg.manifest)) throw ValidationError("manifest not found: " + cfg.manifest.string());
  return data::load_cohort(cfg.manifest);
}

void check_extent(const data::Cohort& cohort, const nn::Extent3& extent, const std::string& what) {
  for (const auto& s : cohort.subjects) {
    if (s.images.pet.extent != extent) {
      throw ValidationError("extent mismatch: subject " + s.id + " is " + extent_str(s.images.pet.extent) + " but the " +
                            what + " expects " + extent_str(extent) + " (run `preprocess` first)");
    }
  }
}

train::Dataset load_dataset(const cli::RunConfig& cfg) {
  const auto cohort = load_manifest(cfg);
  check_extent(cohort, cfg.arch.extent, "configuration");
  return train::prepare_dataset(cohort, cfg.preprocess_options());
}

int cmd_synth(const cli::RunConfig& cfg) {
  const auto cohort = data::generate_cohort(cfg.cohort);
  data::write_cohort(cohort, cfg.out, cfg.with_masks);
  cli::write_config(cfg.out / "config", cfg);
  std::printf("subjects: %zu\n", cohort.size());
  std::printf("censored fraction: %.4f\n", cohort.censored_fraction());
  std::printf("c_max: %s\n", format_number(cohort.c_max).c_str());
  std::printf("oracle C-index: %.4f\n", cohort.oracle_c_index());
  std::printf("manifest: %s\n", (cfg.out / "manifest.csv").string().c_str());
  return 0;
}

int cmd_preprocess(const cli::RunConfig& cfg) {
  auto cohort = load_manifest(cfg);
  const auto opts = cfg.preprocess_options();
  for (auto& s : cohort.subjects) {
    s.images = data::preprocess(s.images, opts);
    if (s.mask) s.mask = data::preprocess_mask(*s.mask, opts);
  }
  data::write_cohort(cohort, cfg.out, true);
  cli::write_config(cfg.out / "config", cfg);
  std::printf("preprocessed %zu subjects to %s at %s mm into %s\n", cohort.size(), extent_str(opts.target_extent).c_str(),
              format_number(cfg.cohort.spacing_mm).c_str(), (cfg.out / "manifest.csv").string().c_str());
  return 0;
}

int cmd_train(const cli::RunConfig& cfg) {
  const auto data = load_dataset(cfg);
  const fs::path run = cfg.run_dir();
  cli::write_config(run / "config", cfg);
  model::Model m(cfg.arch, train::init_seed(cfg.train, cfg.fold));
  const fs::path dir = run / ("fold" + std::to_string(cfg.fold));
  const auto r = train::train(m, data, cfg.fold, train::for_fold(cfg.train, cfg.fold), dir, log);
  MetricsReport metrics;
  metrics.set("fold", double(cfg.fold));
  metrics.set("best_iteration", double(r.best_iteration));
  metrics.set("val_c_index", r.val_c_index);
  metrics.set("val_dsc", r.val_dsc);
  const auto train_ev = train::evaluate(m, data, data.outside_fold(cfg.fold));
  metrics.set("train_c_index", train_ev.c_index);
  metrics.set("train_dsc", train_ev.mean_dsc);
  metrics.write_kv(dir / "metrics.txt");
  std::cout << metrics.to_kv();
  return 0;
}

int cmd_crossval(const cli::RunConfig& cfg) {
  const auto data = load_dataset(cfg);
  const fs::path run = cfg.run_dir();
  cli::write_config(run / "config", cfg);
  const auto cv = train::cross_validate(cfg.arch, data, cfg.train, run, log);
  std::cout << report::format_table(report::read_csv(run / "summary.csv"));
  return 0;
}

int cmd_ablate(const cli::RunConfig& cfg) {
  const auto data = load_dataset(cfg);
  const fs::path run = cfg.run_dir();
  cli::write_config(run / "config", cfg);
  train::run_ablation_suite(cfg.arch, data, cfg.train, run, log);
  for (const char* t : {"table2.csv", "table3.csv", "table4.csv"}) {
    std::cout << t << '\n' << report::format_table(report::read_csv(run / "tables" / t)) << '\n';
  }
  return 0;
}

int cmd_predict(const cli::RunConfig& cfg) {
  if (cfg.checkpoints.empty()) throw ValidationError("predict needs at least one --checkpoint");
  std::vector<model::Model> models;
  for (const auto& ckpt : cfg.checkpoints) {
    if (!fs::exists(ckpt)) throw ValidationError("checkpoint not found: " + ckpt.string());
    const fs::path arch_file = ckpt.parent_path() / "checkpoint.arch";
    const model::ArchSpec arch = fs::exists(arch_file) ? train::read_arch(arch_file) : cfg.arch;
    if (!models.empty() && !(arch == models.front().spec())) {
      throw ValidationError("checkpoints disagree on architecture: " + ckpt.string());
    }
    models.emplace_back(arch, 0);
    nn::load_checkpoint(ckpt, models.back().params());
  }
  const model::ArchSpec& arch = models.front().spec();
  auto cohort = load_manifest(cfg);
  check_extent(cohort, arch.extent, "checkpoint");
  // Ground-truth masks are never consumed at inference, except by the
  // Sur-CasNet ablations that read a manual mask by construction.
  if (!arch.needs_manual_mask()) {
    for (auto& s : cohort.subjects) s.mask.reset();
  }
  auto opts = cfg.preprocess_options();
  opts.target_extent = arch.extent;
  const auto data = train::prepare_dataset(cohort, opts);
  const auto all = data.all();

  std::vector<std::vector<double>> risks;
  std::vector<std::vector<float>> prob_sum;
  for (auto& m : models) {
    auto ev = train::evaluate(m, data, all, true);
    if (!ev.risks.empty()) risks.push_back(std::move(ev.risks));
    for (std::size_t i = 0; i < ev.probs.size(); ++i) {
      if (prob_sum.size() <= i) prob_sum.emplace_back(ev.probs[i].size(), 0.0f);
      for (std::size_t v = 0; v < ev.probs[i].size(); ++v) prob_sum[i][v] += ev.probs[i][v];
    }
  }
  fs::create_directories(cfg.out);
  MetricsReport metrics;
  metrics.set("subjects", double(data.size()));
  metrics.set("models", double(models.size()));
  if (!risks.empty()) {
    const auto final_risk = risks.size() == 1 ? risks.front() : train::ensemble_scores(risks);
    std::ofstream out(cfg.out / "predictions.csv");
    out << "id,risk\n";
    for (std::size_t i = 0; i < data.size(); ++i) out << data.samples[i].id << ',' << format_number(final_risk[i]) << '\n';
    try {
      metrics.set("c_index", c_index(final_risk, data.labels(all)));
    } catch (const NoComparablePairsError&) {
      metrics.set("c_index", "/");
    }
  }
  if (!prob_sum.empty()) {
    fs::create_directories(cfg.out / "masks");
    for (std::size_t i = 0; i < prob_sum.size(); ++i) {
      for (float& p : prob_sum[i]) p /= float(models.size());
      data::SegMask mask(arch.extent, opts.target_spacing);
      mask.voxels = threshold_mask<float>(prob_sum[i]);
      data::write_mask(cfg.out / "masks" / (data.samples[i].id + "_pred.mmsk"), mask);
    }
  }
  metrics.write_kv(cfg.out / "metrics.txt");
  cli::write_config(cfg.out / "config", cfg);
  std::cout << metrics.to_kv();
  return 0;
}

int cmd_report(const fs::path& run_dir) {
  std::cout << report::write_report(run_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task PET/CT survival models: synthesize cohorts, train, cross-validate, ablate, predict, report."};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);

  std::map<std::string, std::string> flags;
  std::map<std::string, CLI::Option*> options;
  for (const auto& key : cli::config_keys()) {
    if (key == "checkpoints") continue;
    options[key] = app.add_option("--" + key, flags[key], "override config key '" + key + "'");
  }
  std::vector<std::string> checkpoint_list;
  auto* ckpt_opt = app.add_option("--checkpoint,--checkpoints", checkpoint_list, "checkpoint file(s) for predict")->delimiter(',');

  auto* synth = app.add_subcommand("synth", "generate a synthetic phantom cohort");
  auto* preprocess = app.add_subcommand("preprocess", "resample, crop and normalise a cohort");
  auto* trainc = app.add_subcommand("train", "train one fold");
  auto* crossval = app.add_subcommand("crossval", "5-fold cross-validation");
  auto* ablate = app.add_subcommand("ablate", "run the ablation tables");
  auto* predict = app.add_subcommand("predict", "risk scores and masks from checkpoint(s)");
  auto* reportc = app.add_subcommand("report", "summarise a run directory");
  std::string report_dir;
  reportc->add_option("run_dir", report_dir, "run directory (default: <out>/<name>)");
  for (auto* sub : {synth, preprocess, trainc, crossval, ablate, predict, reportc}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    cli::ConfigEntries entries;
    if (!config_path.empty()) entries = cli::read_entries(config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) entries[key] = {flags[key], "--" + key};
    }
    if (ckpt_opt->count() > 0) {
      std::string joined;
      for (const auto& c : checkpoint_list) joined += (joined.empty() ? "" : ",") + c;
      entries["checkpoints"] = {joined, "--checkpoint"};
    }
    cli::RunConfig cfg = cli::build_config(entries);
    if (cfg.out.empty()) {
      cfg.out = synth->parsed() || preprocess->parsed() ? "cohort" : predict->parsed() ? "predictions" : "run";
    }

    if (synth->parsed()) return cmd_synth(cfg);
    if (preprocess->parsed()) return cmd_preprocess(cfg);
    if (trainc->parsed()) return cmd_train(cfg);
    if (crossval->parsed()) return cmd_crossval(cfg);
    if (ablate->parsed()) return cmd_ablate(cfg);
    if (predict->parsed()) return cmd_predict(cfg);
    if (reportc->parsed()) return cmd_report(report_dir.empty() ? cfg.run_dir() : fs::path(report_dir));
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
