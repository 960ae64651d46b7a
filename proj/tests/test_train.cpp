#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "deepmts/checkpoint.hpp"
#include "deepmts/error.hpp"
#include "deepmts/losses.hpp"
#include "deepmts/metrics.hpp"
#include "deepmts/train.hpp"
#include "test_util.hpp"

using namespace deepmts;
using namespace deepmts::train;
using model::ArchSpec;
using model::Variant;

namespace {

constexpr nn::Extent3 kSmall{16, 16, 16};

Dataset small_dataset(std::size_t n, std::uint64_t seed) {
  data::CohortParams p;
  p.n = n;
  p.seed = seed;
  p.extent = kSmall;
  data::PreprocessOptions o;
  o.target_extent = kSmall;
  return prepare_dataset(data::generate_cohort(p), o);
}

ArchSpec small_arch(Variant v) {
  auto a = ArchSpec::for_variant(v);
  a.extent = kSmall;
  return a;
}

TrainSpec quick_spec(std::size_t iterations, std::size_t eval_every) {
  TrainSpec s;
  s.iterations = iterations;
  s.eval_every = eval_every;
  s.lr_schedule = LrSchedule::standard(iterations);
  return s;
}

std::vector<std::size_t> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  return idx;
}

}  // namespace

// ---- schedule --------------------------------------------------------------

TEST(LrSchedule, StandardBreakpoints) {
  const auto s = LrSchedule::standard(15000);
  EXPECT_EQ(s.rate_at(0), 1e-4);
  EXPECT_EQ(s.rate_at(2499), 1e-4);
  EXPECT_EQ(s.rate_at(2500), 5e-5);
  EXPECT_EQ(s.rate_at(5000), 1e-5);
  EXPECT_EQ(s.rate_at(14999), 1e-6);
}

TEST(LrSchedule, ScalesWithIterations) {
  const auto s = LrSchedule::standard(1500);
  ASSERT_EQ(s.points.size(), 4u);
  EXPECT_EQ(s.points[1].first, 250u);
  EXPECT_EQ(s.points[2].first, 500u);
  EXPECT_EQ(s.points[3].first, 1000u);
  const auto scaled = LrSchedule::standard(1500, 3.0);
  EXPECT_DOUBLE_EQ(scaled.rate_at(0), 3e-4);
  EXPECT_DOUBLE_EQ(scaled.rate_at(600), 3e-5);
}

TEST(LrSchedule, Validation) {
  LrSchedule s;
  EXPECT_THROW(s.validate(), ValidationError);
  s.points = {{0, 1e-4}, {10, 2e-4}};
  EXPECT_THROW(s.validate(), ValidationError);
  s.points = {{0, 1e-4}, {10, 1e-5}, {10, 1e-6}};
  EXPECT_THROW(s.validate(), ValidationError);
  s.points = {{5, 1e-4}};
  EXPECT_THROW(s.validate(), ValidationError);
  s.points = {{0, 1e-4}, {10, 1e-5}};
  EXPECT_NO_THROW(s.validate());
}

// ---- optimizer and loss terms ---------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  model::Model m(small_arch(Variant::sur_hs), 1);
  const auto before = m.params();
  m.params().zero_grad();
  Adam adam;
  for (int i = 0; i < 3; ++i) adam.step(m.params(), 1e-3);
  for (const auto& [key, p] : before) EXPECT_EQ(m.params().at(key).value, p.value) << key;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::ParamStore<float> store;
  store.add("w", Tensor<float>({3}, 1.0f));
  store.at("w").grad[0] = 0.5f;
  store.at("w").grad[1] = -2.0f;
  Adam adam;
  adam.step(store, 0.01);
  // Bias-corrected first step is lr * g / (|g| + eps).
  EXPECT_NEAR(store.at("w").value[0], 0.99, 1e-6);
  EXPECT_NEAR(store.at("w").value[1], 1.01, 1e-6);
  EXPECT_EQ(store.at("w").value[2], 1.0f);
}

TEST(L2Term, EqualsSumOfSquaredHeadWeights) {
  for (Variant v : {Variant::deep_mts, Variant::sur_hs, Variant::sur_casnet}) {
    model::Network<double> net(small_arch(v), 5);
    Rng rng(1);
    nn::Tape<double> tape;
    Tensor<double> img({2, 2, 16, 16, 16}, 0.3);
    const auto out = net.forward(tape, img, Tensor<double>({2, 1}), nn::Mode::eval, rng);
    double expect = 0.0;
    for (const auto& key : net.keys_with_prefix("head."))
      if (key.ends_with(".weight"))
        for (double w : net.params().at(key).value.values()) expect += w * w;
    EXPECT_NEAR(tape.value(out.l2)[0], expect, 1e-10 * expect) << to_string(v);
    // Dropping the term changes the total by exactly lambda * sum w^2.
    const std::vector<SurvivalLabel> y = {{1, true}, {2, false}};
    const auto sur = cox_ph_loss(tape, *out.risk, std::span<const SurvivalLabel>(y));
    const auto total = nn::add(tape, sur, nn::scale(tape, out.l2, 0.1));
    EXPECT_NEAR(tape.value(total)[0] - tape.value(sur)[0], 0.1 * expect, 1e-9 * expect);
  }
}

// ---- evaluation and batches ------------------------------------------------

TEST(Evaluate, TwoPassesAgreeBitwise) {
  const auto data = small_dataset(12, 1);
  model::Model m(small_arch(Variant::deep_mts), 2);
  const auto a = evaluate(m, data, data.all(), true);
  const auto b = evaluate(m, data, data.all(), true);
  EXPECT_EQ(a.risks, b.risks);
  EXPECT_EQ(a.dsc, b.dsc);
  EXPECT_EQ(a.probs, b.probs);
  EXPECT_EQ(a.masks.size(), 12u);
}

TEST(Evaluate, BatchingDoesNotChangeResults) {
  const auto data = small_dataset(12, 2);
  model::Model m(small_arch(Variant::mt_hs), 3);
  const auto a = evaluate(m, data, data.all(), false, 8);
  const auto b = evaluate(m, data, data.all(), false, 5);
  ASSERT_EQ(a.risks.size(), b.risks.size());
  for (std::size_t i = 0; i < a.risks.size(); ++i) EXPECT_NEAR(a.risks[i], b.risks[i], 1e-6);
}

TEST(Batch, Layout) {
  const auto data = small_dataset(10, 3);
  const auto b = make_batch(data, {4, 1}, 1);
  EXPECT_EQ(b.images.shape(), (Shape{2, 2, 16, 16, 16}));
  EXPECT_EQ(b.clinical.shape(), (Shape{2, 1}));
  EXPECT_EQ(b.masks.shape(), (Shape{2, 1, 16, 16, 16}));
  EXPECT_EQ(b.labels[0].time, data.samples[4].label.time);
  EXPECT_EQ(b.clinical[1], data.samples[1].clinical[0]);
  EXPECT_EQ(b.mask_bytes.size(), 2u * 4096);
}

// ---- training --------------------------------------------------------------

TEST(Train, SameSeedSameTrajectory) {
  const auto data = small_dataset(20, 4);
  const auto spec = quick_spec(12, 4);
  const auto run = [&] {
    model::Model m(small_arch(Variant::deep_mts), init_seed(spec, 0));
    return train::train(m, data, 0, spec);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.trajectory.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.trajectory[i].loss, b.trajectory[i].loss);
    EXPECT_EQ(a.trajectory[i].val_c_index, b.trajectory[i].val_c_index);
    EXPECT_EQ(a.trajectory[i].val_dsc, b.trajectory[i].val_dsc);
  }
  EXPECT_EQ(a.val_c_index, b.val_c_index);
  EXPECT_EQ(a.best_iteration, b.best_iteration);
}

TEST(Train, WritesFoldArtifacts) {
  testutil::TempDir dir("train");
  const auto data = small_dataset(20, 5);
  const auto spec = quick_spec(6, 3);
  model::Model m(small_arch(Variant::sur_hs), 1);
  const auto r = train::train(m, data, 1, spec, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint.arch"));
  EXPECT_EQ(read_arch(dir / "checkpoint.arch"), small_arch(Variant::sur_hs));
  const auto t = read_trajectory(dir / "trajectory.csv");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[1].iteration, 6u);
  EXPECT_EQ(t[0].loss, r.trajectory[0].loss);
  // The returned model holds the selected checkpoint.
  model::Model reloaded(small_arch(Variant::sur_hs), 99);
  nn::load_checkpoint(dir / "checkpoint", reloaded.params());
  EXPECT_EQ(evaluate(reloaded, data, data.in_fold(1)).risks, evaluate(m, data, data.in_fold(1)).risks);
  EXPECT_EQ(evaluate(m, data, data.in_fold(1)).c_index, r.val_c_index);
}

TEST(Train, ValidationFoldNeverTrained) {
  const auto data = small_dataset(20, 6);
  auto spec = quick_spec(4, 2);
  model::Model m(small_arch(Variant::sur_hs), 1);
  const auto train_idx = data.outside_fold(2);
  for (auto i : data.in_fold(2)) EXPECT_EQ(std::find(train_idx.begin(), train_idx.end(), i), train_idx.end());
  EXPECT_THROW(train::train(m, data, std::vector<std::size_t>{}, data.in_fold(2), spec), ValidationError);
}

TEST(Train, SegBackboneSelectsByDsc) {
  const auto data = small_dataset(20, 7);
  model::Model m(small_arch(Variant::seg_backbone), 1);
  const auto r = train::train(m, data, 0, quick_spec(6, 2));
  double best = -1;
  std::size_t at = 0;
  for (const auto& p : r.trajectory) {
    EXPECT_TRUE(std::isnan(p.val_c_index));
    if (p.val_dsc > best) best = p.val_dsc, at = p.iteration;
  }
  EXPECT_EQ(r.best_iteration, at);
  EXPECT_EQ(r.val_dsc, best);
}

TEST(Train, OverfitsEightSubjects) {
  const auto data = small_dataset(40, 8);
  std::vector<std::size_t> pool;
  std::size_t events = 0, censored = 0;
  for (std::size_t i = 0; i < data.size() && pool.size() < 8; ++i) {
    auto& n = data.samples[i].label.event ? events : censored;
    if (n < 4) {
      pool.push_back(i);
      ++n;
    }
  }
  ASSERT_EQ(pool.size(), 8u);
  auto spec = quick_spec(200, 25);
  spec.lambda_l2 = 0.0;
  spec.augment = false;
  spec.lr_schedule = LrSchedule{{{0, 1e-3}}};
  model::Model m(small_arch(Variant::deep_mts), 3);
  std::vector<std::size_t> val;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (std::find(pool.begin(), pool.end(), i) == pool.end()) val.push_back(i);
  const auto r = train::train(m, data, pool, val, spec);
  ASSERT_EQ(r.trajectory.size(), 8u);
  EXPECT_LE(r.trajectory.back().seg_loss, -0.9);
  // Window means of the Cox term: allow small wiggles, require a clear drop.
  for (std::size_t i = 1; i < r.trajectory.size(); ++i)
    EXPECT_LE(r.trajectory[i].sur_loss, r.trajectory[i - 1].sur_loss + 0.05) << i;
  EXPECT_LT(r.trajectory.back().sur_loss, 0.7 * r.trajectory.front().sur_loss);
}

TEST(Seeds, FoldStreamsDiffer) {
  TrainSpec s;
  s.seed = 7;
  std::set<std::uint64_t> seen;
  for (std::size_t k = 0; k < 5; ++k) {
    seen.insert(init_seed(s, k));
    seen.insert(for_fold(s, k).seed);
  }
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(for_fold(s, 3).iterations, s.iterations);
}

// ---- cross-validation and ensembles ------------------------------------------

TEST(CrossValidate, FoldsAndSummary) {
  testutil::TempDir dir("cv");
  const auto data = small_dataset(50, 9);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(data.in_fold(k).size(), 10u);
  const auto r = cross_validate(small_arch(Variant::sur_hs), data, quick_spec(4, 2), dir.path());
  ASSERT_EQ(r.folds.size(), 5u);
  ASSERT_EQ(r.models.size(), 5u);
  double sum = 0;
  std::size_t defined = 0;
  for (const auto& f : r.folds) {
    if (!std::isnan(f.val_c_index)) sum += f.val_c_index, ++defined;
    EXPECT_TRUE(std::filesystem::exists(dir / ("fold" + std::to_string(f.fold)) / "checkpoint"));
    EXPECT_TRUE(std::filesystem::exists(dir / ("fold" + std::to_string(f.fold)) / "trajectory.csv"));
  }
  ASSERT_GT(defined, 0u);
  EXPECT_DOUBLE_EQ(r.mean_c_index, sum / double(defined));
  EXPECT_TRUE(std::isnan(r.mean_dsc));
  const auto summary = testutil::slurp(dir / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "row,c_index,dsc,best_iteration");
  EXPECT_NE(summary.find("\nmean," + format_number(r.mean_c_index) + ",/"), std::string::npos) << summary;
  EXPECT_NE(summary.find("\npooled," + format_number(r.pooled_c_index)), std::string::npos) << summary;
}

TEST(Ensemble, AffineInvariance) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> members(5, std::vector<double>(30));
    for (auto& m : members)
      for (auto& v : m) v = rng.normal();
    const auto base = ensemble_scores(members);
    const std::size_t k = rng.index(5);
    const double a = std::exp(rng.uniform(-5, 5)), b = rng.uniform(-100, 100);
    for (auto& v : members[k]) v = a * v + b;
    const auto moved = ensemble_scores(members);
    for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(moved[i], base[i], 1e-9);
    EXPECT_EQ(ranks(moved), ranks(base));
  }
}

TEST(Ensemble, IdenticalMembersKeepRanking) {
  Rng rng(11);
  std::vector<double> h(20);
  for (auto& v : h) v = rng.normal();
  const auto e = ensemble_scores(std::vector<std::vector<double>>(5, h));
  EXPECT_EQ(ranks(e), ranks(h));
}

TEST(Ensemble, ZScoreAverage) {
  const auto e = ensemble_scores({{1, 2, 3}, {10, 30, 20}});
  const double z = std::sqrt(1.5);
  EXPECT_NEAR(e[0], -z, 1e-12);
  EXPECT_NEAR(e[1], 0.5 * z, 1e-12);
  EXPECT_NEAR(e[2], 0.5 * z, 1e-12);
}

TEST(Ensemble, DegenerateMemberThrows) {
  EXPECT_THROW(ensemble_scores({{1, 2, 3}, {4, 4, 4}}), DegenerateModelError);
  EXPECT_THROW(ensemble_scores({}), ValidationError);
  EXPECT_THROW(ensemble_scores({{1, 2}, {1, 2, 3}}), ValidationError);
}

TEST(Ensemble, PredictMatchesManualNormalisation) {
  const auto data = small_dataset(12, 12);
  std::vector<model::Model> models;
  for (std::uint64_t s = 0; s < 3; ++s) models.emplace_back(small_arch(Variant::sur_hs), s);
  std::vector<std::vector<double>> raw;
  for (auto& m : models) raw.push_back(evaluate(m, data, data.all()).risks);
  EXPECT_EQ(ensemble_predict(models, data, data.all()), ensemble_scores(raw));
}

// ---- ablation tables -----------------------------------------------------------

TEST(TableLabels, MethodNames) {
  EXPECT_EQ(table_label(ArchSpec::for_variant(Variant::deep_mts)), "DeepMTS");
  auto a = ArchSpec::for_variant(Variant::mt_casnet);
  a.csn_input = model::CsnInput::multiplication;
  EXPECT_EQ(table_label(a, true), "MT-CasNet (Multiplication)");
  a.csn_input = model::CsnInput::pet_ct_only;
  EXPECT_EQ(table_label(a, true), "MT-CasNet (only PET/CT)");
  auto p = ArchSpec::for_variant(Variant::deep_mts);
  p.backbone = model::Backbone::plain_unet;
  EXPECT_EQ(table_label(p), "DeepMTS (U-net)");
  p.variant = Variant::seg_backbone;
  EXPECT_EQ(table_label(p), "U-net");
}

TEST(TableFormat, SlashForAbsentTask) {
  testutil::TempDir dir("table");
  TableRow seg{"Seg-Backbone", std::nullopt, 0.7581, {}};
  TableRow sur{"Sur-HS", 0.6512, std::nullopt, {}};
  write_table(dir / "t.csv", {seg, sur}, false);
  EXPECT_EQ(testutil::slurp(dir / "t.csv"), "method,c_index,dsc\nSeg-Backbone,/,0.758\nSur-HS,0.651,/\n");
}

TEST(Ablation, TableLayout) {
  testutil::TempDir dir("ablate");
  const auto data = small_dataset(20, 13);
  const auto tables = run_ablation_suite(small_arch(Variant::deep_mts), data, quick_spec(2, 2), dir.path());
  ASSERT_EQ(tables.table2.size(), 6u);
  EXPECT_EQ(tables.table2[0].method, "Seg-Backbone");
  EXPECT_FALSE(tables.table2[0].c_index.has_value());
  EXPECT_TRUE(tables.table2[0].dsc.has_value());
  EXPECT_FALSE(tables.table2[1].dsc.has_value());
  EXPECT_EQ(tables.table2[5].method, "DeepMTS");
  ASSERT_EQ(tables.table3.size(), 6u);
  for (const auto& r : tables.table3) EXPECT_EQ(r.fold_c_index.size(), 5u);
  ASSERT_EQ(tables.table4.size(), 10u);
  EXPECT_EQ(tables.table4[0].method, "U-net");
  EXPECT_EQ(tables.table4[9].method, "DeepMTS (residual)");
  const auto t3 = testutil::slurp(dir / "tables" / "table3.csv");
  EXPECT_EQ(t3.substr(0, t3.find('\n')), "method,fold1,fold2,fold3,fold4,fold5,average");
  EXPECT_TRUE(std::filesystem::exists(dir / "tables" / "table2.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "tables" / "table4.csv"));
}
