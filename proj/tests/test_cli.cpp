#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "deepmts/checkpoint.hpp"
#include "deepmts/config.hpp"
#include "deepmts/error.hpp"
#include "deepmts/metrics.hpp"
#include "deepmts/report.hpp"
#include "deepmts/synth.hpp"
#include "test_util.hpp"

using namespace deepmts;
namespace fs = std::filesystem;

// ---- config ----------------------------------------------------------------

TEST(Config, DefaultsAndRoundTrip) {
  const auto c = cli::parse_config("");
  EXPECT_EQ(c.arch.variant, model::Variant::deep_mts);
  EXPECT_EQ(c.arch.extent, (nn::Extent3{32, 32, 16}));
  EXPECT_EQ(c.train.iterations, 1500u);
  EXPECT_EQ(c.train.lr_schedule, train::LrSchedule::standard(1500, train::kDeskLrScale));
  EXPECT_EQ(cli::parse_config(cli::to_text(c)), c);
}

TEST(Config, RoundTripWithEveryKindOfValue) {
  const auto c = cli::parse_config(
      "# comment\n"
      "seed = 42\n"
      "variant = Sur-CasNet\n"
      "csn_input = multiplication\n"
      "width = 0.5\n"
      "extent = 16x16x32\n"
      "iterations = 300\n"
      "lr_schedule = 0:1e-3, 100:5e-4\n"
      "beta = 0.1,0.2,0.3\n"
      "c_max = 123.5\n"
      "ct_window = -100,300\n"
      "augment = false\n"
      "checkpoints = a/checkpoint,b/checkpoint\n");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  EXPECT_EQ(c.cohort.seed, 42u);
  EXPECT_EQ(c.cohort.extent, (nn::Extent3{16, 16, 32}));
  EXPECT_EQ(c.arch.csn_input, model::CsnInput::multiplication);
  EXPECT_EQ(c.train.lr_schedule.points.size(), 2u);
  EXPECT_EQ(c.cohort.censor.c_max, 123.5);
  EXPECT_EQ(c.checkpoints.size(), 2u);
  EXPECT_EQ(cli::parse_config(cli::to_text(c)), c);
}

TEST(Config, VariantDefaultsCsnInput) {
  EXPECT_EQ(cli::parse_config("variant = Sur-CasNet").arch.csn_input, model::CsnInput::pet_ct_only);
  EXPECT_EQ(cli::parse_config("variant = MT-CasNet").arch.csn_input, model::CsnInput::concatenation);
}

TEST(Config, ScheduleFollowsIterations) {
  const auto c = cli::parse_config("iterations = 3000\nlr_scale = 1");
  EXPECT_EQ(c.train.lr_schedule, train::LrSchedule::standard(3000));
  EXPECT_THROW(cli::parse_config("lr_scale = 2\nlr_schedule = 0:1e-4"), ValidationError);
}

namespace {

std::string error_of(const std::string& text) {
  try {
    cli::parse_config(text, "run.cfg");
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, ErrorsNameTheLine) {
  EXPECT_NE(error_of("seed = 1\n\nbogus = 3\n").find("run.cfg:3"), std::string::npos);
  EXPECT_NE(error_of("seed = 1\nwidth = abc\n").find("run.cfg:2"), std::string::npos);
  EXPECT_NE(error_of("extent = 32x32\n").find("run.cfg:1"), std::string::npos);
  EXPECT_NE(error_of("seed 4\n").find("run.cfg:1"), std::string::npos);
}

TEST(Config, ValidatesBeforeCompute) {
  EXPECT_FALSE(error_of("n = 5").empty());
  EXPECT_FALSE(error_of("extent = 32x32x12").empty());
  EXPECT_FALSE(error_of("batch_size = 7").empty());
  EXPECT_FALSE(error_of("beta = 0,0,0").empty());
  EXPECT_FALSE(error_of("fold = 5").empty());
  EXPECT_FALSE(error_of("eval_every = 0").empty());
}

// ---- report helpers ----------------------------------------------------------

TEST(Report, EmptyDirectoryIsIncomplete) {
  testutil::TempDir dir("report_empty");
  try {
    report::write_report(dir.path());
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("incomplete run"), std::string::npos);
  }
  EXPECT_THROW(report::write_report(dir / "nope"), ValidationError);
}

TEST(Report, SvgIsWellFormed) {
  const std::string svg = report::line_plot_svg("loss", "iteration", "value", {{"fold0", {1, 2, 3}, {2, 1.5, 1.2}}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
}

// ---- command line ----------------------------------------------------------------

namespace {

struct Run {
  int code;
  std::string out;
};

Run mtsctl(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DEEPMTS_MTSCTL) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, testutil::slurp(log)};
}

// Small geometry keeps every command under a few seconds.
const std::string kSmall = " --extent 16x16x16 --width 0.25 ";

}  // namespace

TEST(Cli, SynthIsDeterministic) {
  testutil::TempDir dir("cli_synth");
  const auto a = mtsctl("synth --n 50 --seed 7" + kSmall + "--out " + (dir / "a").string(), dir / "log");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("oracle C-index"), std::string::npos);
  const auto b = mtsctl("synth --n 50 --seed 7" + kSmall + "--out " + (dir / "b").string(), dir / "log");
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(testutil::slurp(dir / "a" / "manifest.csv"), testutil::slurp(dir / "b" / "manifest.csv"));
  EXPECT_EQ(testutil::slurp(dir / "a" / "s0003_pet.mvol"), testutil::slurp(dir / "b" / "s0003_pet.mvol"));
}

TEST(Cli, SynthReportsOracleCeiling) {
  testutil::TempDir dir("cli_oracle");
  const auto r = mtsctl("synth --n 500 --seed 0 --out " + (dir / "c").string(), dir / "log");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto at = r.out.find("oracle C-index: ");
  ASSERT_NE(at, std::string::npos);
  EXPECT_GE(std::stod(r.out.substr(at + 16)), 0.80);
}

TEST(Cli, ExitCodes) {
  testutil::TempDir dir("cli_codes");
  EXPECT_EQ(mtsctl("synth --n 5 --out " + (dir / "x").string(), dir / "log").code, 2);
  EXPECT_EQ(mtsctl("synth --bogus 1", dir / "log").code, 2);
  EXPECT_EQ(mtsctl("train --manifest " + (dir / "missing.csv").string(), dir / "log").code, 2);
  testutil::spit(dir / "bad.cfg", "seed = 1\nwidht = 2\n");
  const auto r = mtsctl("--config " + (dir / "bad.cfg").string() + " synth", dir / "log");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("bad.cfg:2"), std::string::npos) << r.out;
  EXPECT_EQ(mtsctl("report " + dir.path().string(), dir / "log").code, 2);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testutil::TempDir("cli_pipeline");
    const auto r = mtsctl("synth --n 30 --seed 3" + kSmall + "--out " + cohort().string(), *dir_ / "log");
    ASSERT_EQ(r.code, 0) << r.out;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path cohort() { return *dir_ / "cohort"; }
  static fs::path manifest() { return cohort() / "manifest.csv"; }
  static std::string common() {
    return kSmall + "--iterations 6 --eval_every 3 --manifest " + manifest().string() + " --out " + (*dir_ / "run").string();
  }
  static testutil::TempDir* dir_;
};

testutil::TempDir* CliPipeline::dir_ = nullptr;

TEST_F(CliPipeline, CrossvalLayoutAndReport) {
  const auto r = mtsctl("crossval --variant DeepMTS --name cv" + common(), *dir_ / "log");
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path run = *dir_ / "run" / "cv";
  for (int k = 0; k < 5; ++k) {
    EXPECT_TRUE(fs::exists(run / ("fold" + std::to_string(k)) / "checkpoint"));
    EXPECT_TRUE(fs::exists(run / ("fold" + std::to_string(k)) / "trajectory.csv"));
  }
  EXPECT_TRUE(fs::exists(run / "summary.csv"));
  // The written config re-parses to the effective one.
  const auto cfg = cli::build_config(cli::read_entries(run / "config"));
  EXPECT_EQ(cli::parse_config(cli::to_text(cfg)), cfg);
  EXPECT_EQ(cfg.train.iterations, 6u);

  const auto rep = mtsctl("report " + run.string(), *dir_ / "log");
  ASSERT_EQ(rep.code, 0) << rep.out;
  for (int k = 0; k < 5; ++k) EXPECT_NE(rep.out.find("fold" + std::to_string(k)), std::string::npos);
  EXPECT_NE(rep.out.find("mean"), std::string::npos);
  EXPECT_TRUE(fs::exists(run / "plots" / "loss.svg"));
  EXPECT_TRUE(fs::exists(run / "report.txt"));
}

TEST_F(CliPipeline, TrainIsReproducible) {
  ASSERT_EQ(mtsctl("train --variant MT-HS --name r1" + common(), *dir_ / "log").code, 0);
  ASSERT_EQ(mtsctl("train --variant MT-HS --name r2" + common(), *dir_ / "log").code, 0);
  const fs::path a = *dir_ / "run" / "r1" / "fold0", b = *dir_ / "run" / "r2" / "fold0";
  EXPECT_EQ(testutil::slurp(a / "trajectory.csv"), testutil::slurp(b / "trajectory.csv"));
  EXPECT_EQ(testutil::slurp(a / "metrics.txt"), testutil::slurp(b / "metrics.txt"));
  EXPECT_EQ(testutil::slurp(a / "checkpoint"), testutil::slurp(b / "checkpoint"));
}

TEST_F(CliPipeline, SurHsTrainsWithoutMasks) {
  const fs::path bare = *dir_ / "bare";
  ASSERT_EQ(mtsctl("synth --n 30 --seed 3 --with_masks false" + kSmall + "--out " + bare.string(), *dir_ / "log").code, 0);
  const auto ok = mtsctl("train --variant Sur-HS --name bare" + kSmall +
                             "--iterations 4 --eval_every 2 --manifest " + (bare / "manifest.csv").string() + " --out " +
                             (*dir_ / "run").string(),
                         *dir_ / "log");
  EXPECT_EQ(ok.code, 0) << ok.out;
  const auto bad = mtsctl("train --variant DeepMTS --name bare2" + kSmall +
                              "--iterations 4 --eval_every 2 --manifest " + (bare / "manifest.csv").string() + " --out " +
                              (*dir_ / "run").string(),
                          *dir_ / "log");
  EXPECT_EQ(bad.code, 2) << bad.out;
}

TEST_F(CliPipeline, PredictMatchesRecordedTrainingCIndex) {
  ASSERT_EQ(mtsctl("train --variant DeepMTS --name p1 --fold 2" + common(), *dir_ / "log").code, 0);
  const fs::path fold = *dir_ / "run" / "p1" / "fold2";
  const fs::path out = *dir_ / "pred1";
  const auto r = mtsctl("predict" + kSmall + "--manifest " + manifest().string() + " --checkpoint " +
                            (fold / "checkpoint").string() + " --out " + out.string(),
                        *dir_ / "log");
  ASSERT_EQ(r.code, 0) << r.out;

  // Offline C-index over the training folds from the written predictions.
  const auto m = data::CohortManifest::read(manifest());
  const auto rows = report::read_csv(out / "predictions.csv");
  ASSERT_EQ(rows.size(), m.entries.size() + 1);
  std::vector<double> risk;
  std::vector<SurvivalLabel> labels;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    ASSERT_EQ(rows[i + 1][0], m.entries[i].id);
    if (m.entries[i].fold == 2) continue;
    risk.push_back(std::stod(rows[i + 1][1]));
    labels.push_back(m.entries[i].label);
  }
  const auto recorded = MetricsReport::read_kv(fold / "metrics.txt");
  EXPECT_NEAR(c_index(risk, labels), recorded.number("train_c_index"), 1e-9);

  // Written masks are the 0.5 threshold of the model's probabilities.
  model::Model net(train::read_arch(fold / "checkpoint.arch"), 0);
  nn::load_checkpoint(fold / "checkpoint", net.params());
  auto cohort = data::load_cohort(manifest());
  for (auto& s : cohort.subjects) s.mask.reset();
  const auto ds = train::prepare_dataset(cohort, cli::parse_config("extent = 16x16x16").preprocess_options());
  const auto ev = train::evaluate(net, ds, ds.all(), true);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto written = data::read_mask(out / "masks" / (ds.samples[i].id + "_pred.mmsk"));
    EXPECT_EQ(written.voxels, threshold_mask<float>(ev.probs[i])) << ds.samples[i].id;
  }
}

TEST_F(CliPipeline, PredictEnsemblesFiveCheckpoints) {
  const auto cv = mtsctl("crossval --variant Sur-HS --name ens" + common(), *dir_ / "log");
  ASSERT_EQ(cv.code, 0) << cv.out;
  std::string list;
  for (int k = 0; k < 5; ++k) {
    list += (k ? "," : "") + (*dir_ / "run" / "ens" / ("fold" + std::to_string(k)) / "checkpoint").string();
  }
  const fs::path out = *dir_ / "pred5";
  const auto r = mtsctl("predict" + kSmall + "--manifest " + manifest().string() + " --checkpoints " + list + " --out " +
                            out.string(),
                        *dir_ / "log");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto metrics = MetricsReport::read_kv(out / "metrics.txt");
  EXPECT_EQ(metrics.number("models"), 5.0);
  // z-scored ensemble: mean zero across the cohort.
  const auto rows = report::read_csv(out / "predictions.csv");
  double sum = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) sum += std::stod(rows[i][1]);
  EXPECT_NEAR(sum, 0.0, 1e-9);
  EXPECT_FALSE(fs::exists(out / "masks"));
}

TEST_F(CliPipeline, PredictRejectsExtentMismatch) {
  ASSERT_EQ(mtsctl("train --variant Sur-HS --name mm" + common(), *dir_ / "log").code, 0);
  const fs::path big = *dir_ / "big";
  ASSERT_EQ(mtsctl("synth --n 10 --seed 1 --out " + big.string(), *dir_ / "log").code, 0);
  const auto r = mtsctl("predict --manifest " + (big / "manifest.csv").string() + " --checkpoint " +
                            (*dir_ / "run" / "mm" / "fold0" / "checkpoint").string() + " --out " +
                            (*dir_ / "predmm").string(),
                        *dir_ / "log");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("extent mismatch"), std::string::npos) << r.out;
}

TEST_F(CliPipeline, PreprocessFixesExtent) {
  const fs::path big = *dir_ / "big2";
  ASSERT_EQ(mtsctl("synth --n 10 --seed 1 --out " + big.string(), *dir_ / "log").code, 0);
  const fs::path pre = *dir_ / "pre";
  const auto r = mtsctl("preprocess" + kSmall + "--manifest " + (big / "manifest.csv").string() + " --out " + pre.string(),
                        *dir_ / "log");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto c = data::load_cohort(pre / "manifest.csv");
  EXPECT_EQ(c.subjects[0].images.pet.extent, (nn::Extent3{16, 16, 16}));
  EXPECT_EQ(c.subjects[0].mask->extent, (nn::Extent3{16, 16, 16}));
}

TEST_F(CliPipeline, AblateWritesTables) {
  const auto r = mtsctl("ablate --name abl" + kSmall + "--iterations 2 --eval_every 2 --manifest " + manifest().string() +
                            " --out " + (*dir_ / "run").string(),
                        *dir_ / "log");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto t2 = report::read_csv(*dir_ / "run" / "abl" / "tables" / "table2.csv");
  ASSERT_EQ(t2.size(), 7u);
  EXPECT_EQ(t2[1][0], "Seg-Backbone");
  EXPECT_EQ(t2[1][1], "/");
  EXPECT_EQ(t2[2][2], "/");
  const auto rep = mtsctl("report " + (*dir_ / "run" / "abl").string(), *dir_ / "log");
  ASSERT_EQ(rep.code, 0) << rep.out;
  EXPECT_NE(rep.out.find("table2"), std::string::npos);
  EXPECT_NE(rep.out.find("/"), std::string::npos) << rep.out;
}
