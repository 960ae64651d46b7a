#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deepmts/model.hpp"
#include "deepmts/preprocess.hpp"
#include "deepmts/synth.hpp"

namespace deepmts::train {

using model::ArchSpec;
using model::Model;

/// Piecewise-constant learning rate: (first iteration, rate) pairs.
struct LrSchedule {
  std::vector<std::pair<std::size_t, double>> points;

  static constexpr std::size_t kReferenceIterations = 15000;
  /// (0, 1e-4), (2500, 5e-5), (5000, 1e-5), (10000, 1e-6) with breakpoints
  /// scaled by iterations / 15000.
  static LrSchedule standard(std::size_t iterations, double base_scale = 1.0);

  double rate_at(std::size_t iteration) const;
  void validate() const;
  friend bool operator==(const LrSchedule&, const LrSchedule&) = default;
};

/// Rate multiplier for the compressed desk-scale schedule. With 10x fewer
/// iterations the standard rates leave the segmentation branch undertrained.
inline constexpr double kDeskLrScale = 3.0;

struct TrainSpec {
  std::size_t iterations = 1500;
  std::size_t batch_size = 8;
  LrSchedule lr_schedule = LrSchedule::standard(1500, kDeskLrScale);
  std::uint64_t seed = 0;
  double lambda_l2 = 0.1;
  std::size_t eval_every = 100;
  bool augment = true;

  void validate() const;
  friend bool operator==(const TrainSpec&, const TrainSpec&) = default;
};

/// Preprocessed subject ready for batching.
struct Sample {
  std::string id;
  data::VolumePair images;  // normalised to [0, 1]
  data::SegMask mask;       // empty voxels when the cohort has no masks
  SurvivalLabel label;
  std::vector<float> clinical;
  std::size_t fold = 0;
};

struct Dataset {
  nn::Extent3 extent{0, 0, 0};
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool has_masks() const;
  std::vector<SurvivalLabel> labels(const std::vector<std::size_t>& indices) const;
  std::vector<std::size_t> all() const;
  std::vector<std::size_t> in_fold(std::size_t fold) const;
  std::vector<std::size_t> outside_fold(std::size_t fold) const;
};

Dataset prepare_dataset(const data::Cohort& cohort, const data::PreprocessOptions& options);

struct Batch {
  Tensor<float> images;    // (N, 2, D, H, W)
  Tensor<float> clinical;  // (N, clinical_dim)
  Tensor<float> masks;     // (N, 1, D, H, W) or empty
  std::vector<std::uint8_t> mask_bytes;
  std::vector<SurvivalLabel> labels;
};

/// Stacks subjects; optional per-subject augmentation draws from rng.
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t clinical_dim,
                 Rng* augment_rng = nullptr);

class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void step(nn::ParamStore<float>& params, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct Evaluation {
  std::vector<double> risks;    // empty for Seg-Backbone
  std::vector<double> dsc;      // per subject; empty without masks or segmentation
  std::vector<std::vector<std::uint8_t>> masks;  // thresholded predictions when requested
  std::vector<std::vector<float>> probs;         // foreground probabilities when requested
  double c_index = 0.0;         // NaN when undefined
  double mean_dsc = 0.0;        // NaN when undefined
};

/// Eval-mode pass: BN running statistics, no dropout, no augmentation.
Evaluation evaluate(Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                    bool keep_masks = false, std::size_t batch_size = 8);

struct TrajectoryPoint {
  std::size_t iteration = 0;  // iterations completed
  double lr = 0.0;
  double loss = 0.0;       // window means of the training terms
  double seg_loss = 0.0;
  double sur_loss = 0.0;
  double val_c_index = 0.0;
  double val_dsc = 0.0;
};

struct FoldResult {
  std::size_t fold = 0;
  double val_c_index = 0.0;
  double val_dsc = 0.0;
  std::size_t best_iteration = 0;
  std::filesystem::path checkpoint;
  std::vector<TrajectoryPoint> trajectory;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains on every subject outside val_fold and keeps the parameters with the
/// best validation score (C-index, or DSC for Seg-Backbone). The model holds
/// those parameters on return. With fold_dir set, writes checkpoint,
/// checkpoint.arch and trajectory.csv there.
FoldResult train(Model& model, const Dataset& data, std::size_t val_fold, const TrainSpec& spec,
                 const std::optional<std::filesystem::path>& fold_dir = std::nullopt, const ProgressFn& progress = {});

/// Same, with explicit training and validation index sets.
FoldResult train(Model& model, const Dataset& data, const std::vector<std::size_t>& train_idx,
                 const std::vector<std::size_t>& val_idx, const TrainSpec& spec,
                 const std::optional<std::filesystem::path>& fold_dir = std::nullopt, const ProgressFn& progress = {});

/// Seeds for fold k of a cross-validation; `train` on one fold uses the same
/// so a single-fold run reproduces that fold of crossval.
std::uint64_t init_seed(const TrainSpec& spec, std::size_t fold);
TrainSpec for_fold(const TrainSpec& spec, std::size_t fold);

struct CrossValResult {
  ArchSpec arch;
  std::vector<FoldResult> folds;
  double mean_c_index = 0.0;
  double mean_dsc = 0.0;
  double pooled_c_index = 0.0;  // over concatenated validation predictions
  std::vector<Model> models;
};

CrossValResult cross_validate(const ArchSpec& arch, const Dataset& data, const TrainSpec& spec,
                              const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                              const ProgressFn& progress = {});

/// z-scores each member's risk vector and averages. Throws
/// DegenerateModelError when a member has zero variance.
std::vector<double> ensemble_scores(const std::vector<std::vector<double>>& member_risks);
std::vector<double> ensemble_predict(std::vector<Model>& models, const Dataset& data,
                                     const std::vector<std::size_t>& indices);

void write_trajectory(const std::filesystem::path& path, const std::vector<TrajectoryPoint>& trajectory);
std::vector<TrajectoryPoint> read_trajectory(const std::filesystem::path& path);
void write_summary(const std::filesystem::path& path, const CrossValResult& result);

void write_arch(const std::filesystem::path& path, const ArchSpec& arch);
ArchSpec read_arch(const std::filesystem::path& path);

struct TableRow {
  std::string method;
  std::optional<double> c_index;
  std::optional<double> dsc;
  std::vector<double> fold_c_index;
};

struct AblationTables {
  std::vector<TableRow> table2;  // variants
  std::vector<TableRow> table3;  // CSN input strategies, per fold
  std::vector<TableRow> table4;  // custom vs plain backbone
};

/// Method label in the tables' row layout, e.g. "MT-CasNet (Multiplication)"
/// or "DeepMTS (U-net)".
std::string table_label(const ArchSpec& arch, bool with_strategy = false);

AblationTables run_ablation_suite(const ArchSpec& base, const Dataset& data, const TrainSpec& spec,
                                  const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                                  const ProgressFn& progress = {});

std::string format_metric(const std::optional<double>& v);
void write_table(const std::filesystem::path& path, const std::vector<TableRow>& rows, bool per_fold);

}  // namespace deepmts::train
