#include "deepmts/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "deepmts/checkpoint.hpp"
#include "deepmts/error.hpp"
#include "deepmts/losses.hpp"
#include "deepmts/metrics.hpp"
#include "deepmts/sampler.hpp"

namespace deepmts::train {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string join_ids(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::string out;
  for (std::size_t i : idx) {
    if (!out.empty()) out += ' ';
    out += data.samples[i].id;
  }
  return out;
}

}  // namespace

LrSchedule LrSchedule::standard(std::size_t iterations, double base_scale) {
  static constexpr std::pair<std::size_t, double> kPoints[] = {{0, 1e-4}, {2500, 5e-5}, {5000, 1e-5}, {10000, 1e-6}};
  LrSchedule s;
  for (const auto& [it, rate] : kPoints) {
    // Integer arithmetic keeps 2500 * 1500 / 15000 exactly 250.
    const std::size_t at = it * iterations / kReferenceIterations;
    if (!s.points.empty() && at <= s.points.back().first) continue;
    s.points.emplace_back(at, rate * base_scale);
  }
  return s;
}

double LrSchedule::rate_at(std::size_t iteration) const {
  if (points.empty()) throw ValidationError("empty learning-rate schedule");
  double rate = points.front().second;
  for (const auto& [at, r] : points) {
    if (iteration >= at) rate = r;
  }
  return rate;
}

void LrSchedule::validate() const {
  if (points.empty() || points.front().first != 0) throw ValidationError("lr schedule must start at iteration 0");
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(points[i].second > 0.0) || !std::isfinite(points[i].second)) throw ValidationError("lr schedule: rates must be positive");
    if (i > 0) {
      if (points[i].first <= points[i - 1].first) throw ValidationError("lr schedule: iterations must be strictly increasing");
      if (points[i].second > points[i - 1].second) throw ValidationError("lr schedule: rates must be non-increasing");
    }
  }
}

void TrainSpec::validate() const {
  if (iterations == 0) throw ValidationError("iterations must be positive");
  if (batch_size == 0 || batch_size % 2 != 0) throw ValidationError("batch_size must be even and positive");
  if (!(lambda_l2 >= 0.0) || !std::isfinite(lambda_l2)) throw ValidationError("lambda_l2 must be nonnegative");
  if (eval_every == 0 || eval_every > iterations) throw ValidationError("eval_every must lie in [1, iterations]");
  lr_schedule.validate();
}

bool Dataset::has_masks() const {
  return !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const Sample& s) { return !s.mask.voxels.empty(); });
}

std::vector<SurvivalLabel> Dataset::labels(const std::vector<std::size_t>& indices) const {
  std::vector<SurvivalLabel> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(samples.at(i).label);
  return out;
}

std::vector<std::size_t> Dataset::all() const {
  std::vector<std::size_t> out(samples.size());
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

std::vector<std::size_t> Dataset::in_fold(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].fold == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> Dataset::outside_fold(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].fold != fold) out.push_back(i);
  return out;
}

Dataset prepare_dataset(const data::Cohort& cohort, const data::PreprocessOptions& options) {
  Dataset d;
  d.extent = options.target_extent;
  d.samples.reserve(cohort.size());
  for (const auto& s : cohort.subjects) {
    Sample out;
    out.id = s.id;
    out.images = data::preprocess(s.images, options);
    if (s.mask) out.mask = data::preprocess_mask(*s.mask, options);
    out.label = s.label;
    out.label.validate();
    out.clinical.assign(s.clinical.begin(), s.clinical.end());
    out.fold = s.fold;
    d.samples.push_back(std::move(out));
  }
  return d;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, std::size_t clinical_dim,
                 Rng* augment_rng) {
  const auto [D, H, W] = data.extent;
  const std::size_t V = D * H * W, n = indices.size();
  const bool masks = data.has_masks();
  Batch b;
  b.images = Tensor<float>({n, 2, D, H, W});
  b.clinical = Tensor<float>({n, clinical_dim});
  if (masks) {
    b.masks = Tensor<float>({n, 1, D, H, W});
    b.mask_bytes.resize(n * V);
  }
  for (std::size_t k = 0; k < n; ++k) {
    const Sample& s = data.samples.at(indices[k]);
    const data::VolumePair* images = &s.images;
    const data::SegMask* mask = &s.mask;
    data::Augmented aug;
    if (augment_rng) {
      aug = data::augment(s.images, s.mask, data::sample_augment(*augment_rng, data.extent));
      images = &aug.images;
      mask = &aug.mask;
    }
    if (images->pet.extent != data.extent) throw ValidationError(s.id + ": image extent differs from dataset extent");
    float* dst = b.images.data() + k * 2 * V;
    std::copy(images->pet.voxels.begin(), images->pet.voxels.end(), dst);
    std::copy(images->ct.voxels.begin(), images->ct.voxels.end(), dst + V);
    if (s.clinical.size() < clinical_dim) throw ValidationError(s.id + ": fewer clinical values than clinical_dim");
    for (std::size_t c = 0; c < clinical_dim; ++c) b.clinical.data()[k * clinical_dim + c] = s.clinical[c];
    if (masks) {
      std::copy(mask->voxels.begin(), mask->voxels.end(), b.mask_bytes.begin() + static_cast<long>(k * V));
      for (std::size_t v = 0; v < V; ++v) b.masks.data()[k * V + v] = mask->voxels[v] ? 1.0f : 0.0f;
    }
    b.labels.push_back(s.label);
  }
  return b;
}

void Adam::step(nn::ParamStore<float>& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_)), c2 = 1.0 - std::pow(beta2_, double(t_));
  for (auto& [key, p] : params) {
    if (!p.trainable) continue;
    auto& st = state_[key];
    const std::size_t n = p.value.size();
    if (st.m.empty()) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    float* w = p.value.data();
    const float* g = p.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * gi;
      st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + epsilon_));
    }
  }
}

Evaluation evaluate(Model& model, const Dataset& data, const std::vector<std::size_t>& indices, bool keep_masks,
                    std::size_t batch_size) {
  const ArchSpec& arch = model.spec();
  if (arch.extent != data.extent) throw ValidationError("model extent differs from cohort extent");
  if (arch.needs_manual_mask() && !data.has_masks()) {
    throw ValidationError(to_string(arch.variant) + " with a mask input strategy needs tumour masks");
  }
  Evaluation ev;
  const std::size_t V = data.extent[0] * data.extent[1] * data.extent[2];
  const bool score_dsc = arch.has_decoder() && data.has_masks();
  Rng unused(0);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::vector<std::size_t> idx(indices.begin() + long(start),
                                       indices.begin() + long(std::min(indices.size(), start + batch_size)));
    const Batch b = make_batch(data, idx, arch.clinical_dim);
    nn::Tape<float> tape;
    const auto out = model.forward(tape, b.images, b.clinical, nn::Mode::eval, unused,
                                   arch.needs_manual_mask() ? &b.masks : nullptr);
    if (out.risk) {
      const auto& r = tape.value(*out.risk);
      for (std::size_t k = 0; k < idx.size(); ++k) ev.risks.push_back(r[k]);
    }
    if (out.prob_map) {
      const auto& p = tape.value(*out.prob_map);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const std::span<const float> fg(p.data() + (k * 2 + 1) * V, V);
        auto pred = threshold_mask<float>(fg);
        if (score_dsc) ev.dsc.push_back(dsc(pred, std::span<const std::uint8_t>(b.mask_bytes.data() + k * V, V)));
        if (keep_masks) {
          ev.masks.push_back(std::move(pred));
          ev.probs.emplace_back(fg.begin(), fg.end());
        }
      }
    }
  }
  ev.c_index = kNaN;
  if (!ev.risks.empty()) {
    try {
      ev.c_index = c_index(ev.risks, data.labels(indices));
    } catch (const NoComparablePairsError&) {
    }
  }
  ev.mean_dsc = ev.dsc.empty() ? kNaN : std::accumulate(ev.dsc.begin(), ev.dsc.end(), 0.0) / double(ev.dsc.size());
  return ev;
}

std::uint64_t init_seed(const TrainSpec& spec, std::size_t fold) { return Rng(spec.seed).split(0x1000 + fold).seed(); }

TrainSpec for_fold(const TrainSpec& spec, std::size_t fold) {
  TrainSpec s = spec;
  s.seed = Rng(spec.seed).split(fold).seed();
  return s;
}

namespace {

double selection_score(const ArchSpec& arch, const Evaluation& ev) {
  const double s = arch.has_head() ? ev.c_index : ev.mean_dsc;
  return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
}

std::vector<Tensor<float>> snapshot(const nn::ParamStore<float>& params) {
  std::vector<Tensor<float>> out;
  for (const auto& [key, p] : params) out.push_back(p.value);
  return out;
}

void restore(nn::ParamStore<float>& params, const std::vector<Tensor<float>>& values) {
  std::size_t i = 0;
  for (auto& [key, p] : params) p.value = values.at(i++);
}

}  // namespace

FoldResult train(Model& model, const Dataset& data, const std::vector<std::size_t>& train_idx,
                 const std::vector<std::size_t>& val_idx, const TrainSpec& spec,
                 const std::optional<std::filesystem::path>& fold_dir, const ProgressFn& progress) {
  spec.validate();
  const ArchSpec& arch = model.spec();
  if (arch.extent != data.extent) throw ValidationError("model extent differs from cohort extent");
  if (train_idx.empty()) throw ValidationError("empty training set");
  if (val_idx.empty()) throw ValidationError("empty validation fold");
  for (std::size_t t : train_idx) {
    if (std::find(val_idx.begin(), val_idx.end(), t) != val_idx.end()) {
      throw ValidationError("subject " + data.samples.at(t).id + " is in both training and validation sets");
    }
  }
  if ((arch.trains_segmentation() || arch.needs_manual_mask()) && !data.has_masks()) {
    throw ValidationError(to_string(arch.variant) + " needs tumour masks for training");
  }

  const Rng root(spec.seed);
  std::vector<SurvivalLabel> all_labels;
  for (const auto& s : data.samples) all_labels.push_back(s.label);
  data::BalancedSampler sampler(all_labels, train_idx, spec.batch_size, root.split(1).seed());
  Rng augment_rng = root.split(2);
  Rng dropout_rng = root.split(3);

  Adam adam;
  FoldResult result;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<Tensor<float>> best_params = snapshot(model.params());
  Evaluation best_eval;
  double win_loss = 0, win_seg = 0, win_sur = 0;
  std::size_t win_n = 0;

  for (std::size_t it = 0; it < spec.iterations; ++it) {
    const auto idx = sampler.next();
    const double lr = spec.lr_schedule.rate_at(it);
    try {
      const Batch b = make_batch(data, idx, arch.clinical_dim, spec.augment ? &augment_rng : nullptr);
      nn::Tape<float> tape;
      const auto out = model.forward(tape, b.images, b.clinical, nn::Mode::train, dropout_rng,
                                     arch.needs_manual_mask() ? &b.masks : nullptr);
      std::optional<nn::Var> total;
      double seg = 0.0, sur = 0.0;
      if (arch.trains_segmentation()) {
        const nn::Var fg = nn::slice_channels(tape, *out.prob_map, 1, 1);
        const nn::Var l = dice_loss(tape, fg, std::span<const std::uint8_t>(b.mask_bytes));
        seg = tape.value(l)[0];
        total = l;
      }
      if (arch.trains_survival()) {
        const nn::Var l = cox_ph_loss(tape, *out.risk, std::span<const SurvivalLabel>(b.labels));
        sur = tape.value(l)[0];
        total = total ? nn::add(tape, *total, l) : l;
        if (spec.lambda_l2 > 0.0) total = nn::add(tape, *total, nn::scale(tape, out.l2, static_cast<float>(spec.lambda_l2)));
      }
      const double loss = tape.value(*total)[0];
      if (!std::isfinite(loss)) throw RuntimeFailure("loss is not finite");
      model.params().zero_grad();
      tape.backward(*total);
      adam.step(model.params(), lr);
      win_loss += loss;
      win_seg += seg;
      win_sur += sur;
      ++win_n;
    } catch (const RuntimeFailure& e) {
      throw RuntimeFailure("training diverged at iteration " + std::to_string(it) + " (batch: " + join_ids(data, idx) +
                           "): " + e.what());
    }

    if ((it + 1) % spec.eval_every == 0) {
      const Evaluation ev = evaluate(model, data, val_idx);
      TrajectoryPoint pt;
      pt.iteration = it + 1;
      pt.lr = lr;
      pt.loss = win_loss / double(win_n);
      pt.seg_loss = win_seg / double(win_n);
      pt.sur_loss = win_sur / double(win_n);
      pt.val_c_index = ev.c_index;
      pt.val_dsc = ev.mean_dsc;
      result.trajectory.push_back(pt);
      win_loss = win_seg = win_sur = 0.0;
      win_n = 0;
      const double score = selection_score(arch, ev);
      if (score > best || result.best_iteration == 0) {
        best = score;
        best_params = snapshot(model.params());
        best_eval = ev;
        result.best_iteration = it + 1;
      }
      if (progress) {
        std::ostringstream msg;
        msg << "iter " << pt.iteration << " loss " << pt.loss << " val_c " << pt.val_c_index << " val_dsc " << pt.val_dsc;
        progress(msg.str());
      }
    }
  }

  restore(model.params(), best_params);
  result.val_c_index = best_eval.c_index;
  result.val_dsc = best_eval.mean_dsc;
  if (fold_dir) {
    std::filesystem::create_directories(*fold_dir);
    result.checkpoint = *fold_dir / "checkpoint";
    nn::save_checkpoint(result.checkpoint, model.params());
    write_arch(*fold_dir / "checkpoint.arch", arch);
    write_trajectory(*fold_dir / "trajectory.csv", result.trajectory);
  }
  return result;
}

FoldResult train(Model& model, const Dataset& data, std::size_t val_fold, const TrainSpec& spec,
                 const std::optional<std::filesystem::path>& fold_dir, const ProgressFn& progress) {
  auto r = train(model, data, data.outside_fold(val_fold), data.in_fold(val_fold), spec, fold_dir, progress);
  r.fold = val_fold;
  return r;
}

CrossValResult cross_validate(const ArchSpec& arch, const Dataset& data, const TrainSpec& spec,
                              const std::optional<std::filesystem::path>& run_dir, const ProgressFn& progress) {
  arch.validate();
  spec.validate();
  for (std::size_t k = 0; k < data::kFolds; ++k) {
    if (data.in_fold(k).empty()) throw ValidationError("fold " + std::to_string(k) + " is empty");
  }
  CrossValResult cv;
  cv.arch = arch;
  std::vector<double> pooled_risk;
  std::vector<SurvivalLabel> pooled_labels;
  for (std::size_t k = 0; k < data::kFolds; ++k) {
    const TrainSpec fold_spec = for_fold(spec, k);
    Model m(arch, init_seed(spec, k));
    std::optional<std::filesystem::path> dir;
    if (run_dir) dir = *run_dir / ("fold" + std::to_string(k));
    ProgressFn fold_progress;
    if (progress) fold_progress = [&, k](const std::string& s) { progress("fold " + std::to_string(k) + ": " + s); };
    cv.folds.push_back(train(m, data, k, fold_spec, dir, fold_progress));
    if (arch.has_head()) {
      const auto val = data.in_fold(k);
      const auto ev = evaluate(m, data, val);
      pooled_risk.insert(pooled_risk.end(), ev.risks.begin(), ev.risks.end());
      const auto l = data.labels(val);
      pooled_labels.insert(pooled_labels.end(), l.begin(), l.end());
    }
    cv.models.push_back(std::move(m));
  }
  // Folds whose metric is undefined (no comparable pairs) are left out.
  const auto mean_of = [&](double FoldResult::*field) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& f : cv.folds) {
      if (std::isnan(f.*field)) continue;
      sum += f.*field;
      ++n;
    }
    return n > 0 ? sum / double(n) : kNaN;
  };
  cv.mean_c_index = arch.has_head() ? mean_of(&FoldResult::val_c_index) : kNaN;
  cv.mean_dsc = arch.has_decoder() ? mean_of(&FoldResult::val_dsc) : kNaN;
  cv.pooled_c_index = kNaN;
  if (!pooled_risk.empty()) {
    try {
      cv.pooled_c_index = c_index(pooled_risk, pooled_labels);
    } catch (const NoComparablePairsError&) {
    }
  }
  if (run_dir) write_summary(*run_dir / "summary.csv", cv);
  return cv;
}

std::vector<double> ensemble_scores(const std::vector<std::vector<double>>& member_risks) {
  if (member_risks.empty()) throw ValidationError("ensemble: no members");
  const std::size_t n = member_risks.front().size();
  if (n < 2) throw ValidationError("ensemble: need at least two subjects to normalise");
  std::vector<double> out(n, 0.0);
  for (std::size_t m = 0; m < member_risks.size(); ++m) {
    const auto& r = member_risks[m];
    if (r.size() != n) throw ValidationError("ensemble: members disagree on cohort size");
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / double(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / double(n));
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      throw DegenerateModelError("member " + std::to_string(m) + " predicts the same risk for every subject");
    }
    for (std::size_t i = 0; i < n; ++i) out[i] += (r[i] - mean) / sd;
  }
  for (double& v : out) v /= double(member_risks.size());
  return out;
}

std::vector<double> ensemble_predict(std::vector<Model>& models, const Dataset& data,
                                     const std::vector<std::size_t>& indices) {
  if (models.empty()) throw ValidationError("ensemble: no models");
  std::vector<std::vector<double>> members;
  for (auto& m : models) {
    if (!(m.spec() == models.front().spec())) throw ValidationError("ensemble: members have different architectures");
    if (!m.spec().has_head()) throw ValidationError("ensemble: " + to_string(m.spec().variant) + " predicts no risk");
    members.push_back(evaluate(m, data, indices).risks);
  }
  return ensemble_scores(members);
}

void write_trajectory(const std::filesystem::path& path, const std::vector<TrajectoryPoint>& trajectory) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << "iteration,lr,loss,seg_loss,sur_loss,val_c_index,val_dsc\n";
  for (const auto& p : trajectory) {
    out << p.iteration << ',' << format_number(p.lr) << ',' << format_number(p.loss) << ',' << format_number(p.seg_loss)
        << ',' << format_number(p.sur_loss) << ',' << format_number(p.val_c_index) << ',' << format_number(p.val_dsc)
        << '\n';
  }
}

std::vector<TrajectoryPoint> read_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<TrajectoryPoint> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 7) throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 7 fields");
    out.push_back({static_cast<std::size_t>(v[0]), v[1], v[2], v[3], v[4], v[5], v[6]});
  }
  return out;
}

std::string format_metric(const std::optional<double>& v) {
  if (!v || std::isnan(*v)) return "/";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

void write_summary(const std::filesystem::path& path, const CrossValResult& r) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  const bool c = r.arch.has_head(), d = r.arch.has_decoder();
  const auto num = [](bool on, double v) { return on && !std::isnan(v) ? format_number(v) : std::string("/"); };
  out << "row,c_index,dsc,best_iteration\n";
  for (const auto& f : r.folds) {
    out << "fold" << f.fold << ',' << num(c, f.val_c_index) << ',' << num(d, f.val_dsc) << ',' << f.best_iteration << '\n';
  }
  out << "mean," << num(c, r.mean_c_index) << ',' << num(d, r.mean_dsc) << ",\n";
  out << "pooled," << num(c, r.pooled_c_index) << ",/,\n";
}

void write_arch(const std::filesystem::path& path, const ArchSpec& a) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << "variant=" << to_string(a.variant) << "\nbackbone=" << to_string(a.backbone)
      << "\ncsn_input=" << to_string(a.csn_input) << "\nwidth=" << format_number(a.width) << "\nextent=" << a.extent[0]
      << 'x' << a.extent[1] << 'x' << a.extent[2] << "\nclinical_dim=" << a.clinical_dim << '\n';
}

ArchSpec read_arch(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing architecture file " + path.string());
  ArchSpec a;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "variant") a.variant = model::parse_variant(v);
    else if (k == "backbone") a.backbone = model::parse_backbone(v);
    else if (k == "csn_input") a.csn_input = model::parse_csn_input(v);
    else if (k == "width") a.width = std::stod(v);
    else if (k == "clinical_dim") a.clinical_dim = std::stoul(v);
    else if (k == "extent") {
      if (std::sscanf(v.c_str(), "%zux%zux%zu", &a.extent[0], &a.extent[1], &a.extent[2]) != 3) {
        throw ValidationError(path.string() + ": bad extent '" + v + "'");
      }
    } else {
      throw ValidationError(path.string() + ": unknown key '" + k + "'");
    }
  }
  a.validate();
  return a;
}

std::string table_label(const ArchSpec& arch, bool with_strategy) {
  std::string name = to_string(arch.variant);
  if (with_strategy) {
    switch (arch.csn_input) {
      case model::CsnInput::concatenation: return name + " (Concatenation)";
      case model::CsnInput::multiplication: return name + " (Multiplication)";
      case model::CsnInput::pet_ct_only: return name + " (only PET/CT)";
      case model::CsnInput::mask_only: return name + " (only Seg)";
    }
  }
  if (arch.backbone == model::Backbone::plain_unet) return arch.variant == model::Variant::seg_backbone ? "U-net" : name + " (U-net)";
  return name;
}

void write_table(const std::filesystem::path& path, const std::vector<TableRow>& rows, bool per_fold) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  if (per_fold) {
    out << "method";
    for (std::size_t k = 1; k <= data::kFolds; ++k) out << ",fold" << k;
    out << ",average\n";
    for (const auto& r : rows) {
      out << r.method;
      for (double v : r.fold_c_index) out << ',' << format_metric(v);
      out << ',' << format_metric(r.c_index) << '\n';
    }
  } else {
    out << "method,c_index,dsc\n";
    for (const auto& r : rows) out << r.method << ',' << format_metric(r.c_index) << ',' << format_metric(r.dsc) << '\n';
  }
}

AblationTables run_ablation_suite(const ArchSpec& base, const Dataset& data, const TrainSpec& spec,
                                  const std::optional<std::filesystem::path>& run_dir, const ProgressFn& progress) {
  using model::Backbone;
  using model::CsnInput;
  using model::Variant;
  std::vector<std::pair<ArchSpec, CrossValResult>> done;
  const auto slug = [](const ArchSpec& a) {
    return to_string(a.variant) + "_" + to_string(a.backbone) + "_" + to_string(a.csn_input);
  };
  const auto run = [&](const ArchSpec& a) -> const CrossValResult& {
    for (const auto& [arch, r] : done)
      if (arch == a) return r;
    if (progress) progress("cross-validating " + slug(a));
    std::optional<std::filesystem::path> dir;
    if (run_dir) dir = *run_dir / slug(a);
    ProgressFn p;
    if (progress) p = [&](const std::string& s) { progress(slug(a) + " " + s); };
    auto r = cross_validate(a, data, spec, dir, p);
    r.models.clear();
    done.emplace_back(a, std::move(r));
    return done.back().second;
  };
  const auto with = [&](Variant v, Backbone b, std::optional<CsnInput> c = std::nullopt) {
    ArchSpec a = ArchSpec::for_variant(v);
    a.width = base.width;
    a.extent = base.extent;
    a.clinical_dim = base.clinical_dim;
    a.backbone = b;
    if (c) a.csn_input = *c;
    return a;
  };
  const auto row = [](const std::string& label, const CrossValResult& r) {
    TableRow t;
    t.method = label;
    if (r.arch.has_head()) t.c_index = r.mean_c_index;
    if (r.arch.has_decoder()) t.dsc = r.mean_dsc;
    for (const auto& f : r.folds) t.fold_c_index.push_back(f.val_c_index);
    return t;
  };

  AblationTables tables;
  for (Variant v : {Variant::seg_backbone, Variant::sur_hs, Variant::sur_casnet, Variant::mt_hs, Variant::mt_casnet,
                    Variant::deep_mts}) {
    const ArchSpec a = with(v, Backbone::custom_residual);
    tables.table2.push_back(row(table_label(a), run(a)));
  }
  const std::pair<Variant, CsnInput> strategies[] = {
      {Variant::sur_casnet, CsnInput::pet_ct_only},   {Variant::sur_casnet, CsnInput::mask_only},
      {Variant::sur_casnet, CsnInput::multiplication}, {Variant::sur_casnet, CsnInput::concatenation},
      {Variant::mt_casnet, CsnInput::multiplication},  {Variant::mt_casnet, CsnInput::concatenation}};
  for (const auto& [v, c] : strategies) {
    const ArchSpec a = with(v, Backbone::custom_residual, c);
    tables.table3.push_back(row(table_label(a, true), run(a)));
  }
  for (Variant v : {Variant::seg_backbone, Variant::sur_hs, Variant::mt_hs, Variant::mt_casnet, Variant::deep_mts}) {
    const ArchSpec plain = with(v, Backbone::plain_unet), custom = with(v, Backbone::custom_residual);
    tables.table4.push_back(row(table_label(plain), run(plain)));
    tables.table4.push_back(row(to_string(v) + " (residual)", run(custom)));
  }
  if (run_dir) {
    std::filesystem::create_directories(*run_dir / "tables");
    write_table(*run_dir / "tables" / "table2.csv", tables.table2, false);
    write_table(*run_dir / "tables" / "table3.csv", tables.table3, true);
    write_table(*run_dir / "tables" / "table4.csv", tables.table4, false);
  }
  return tables;
}

}  // namespace deepmts::train
