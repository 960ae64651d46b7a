#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "deepmts/survival.hpp"
#include "deepmts/volume.hpp"

namespace deepmts::data {

inline constexpr std::size_t kFolds = 5;
inline constexpr std::size_t kMinCohort = 10;

/// log h = b_volume * log(tumour voxels) + b_uptake * mean tumour SUV + b_node * node.
struct HazardParams {
  double beta_volume = 0.8;
  double beta_uptake = 0.5;
  double beta_node = 1.0;
  double baseline = 0.02;  // h0

  void validate() const;
  friend bool operator==(const HazardParams&, const HazardParams&) = default;
};

/// Censoring ~ U(0, c_max). Without an explicit c_max, it is solved so the
/// expected censored fraction over the drawn hazards equals target_fraction.
struct CensorParams {
  std::optional<double> c_max;
  double target_fraction = 0.65;

  void validate() const;
  friend bool operator==(const CensorParams&, const CensorParams&) = default;
};

struct PhantomParams {
  double tumor_radius_min = 1.5;  // voxels
  double tumor_radius_max = 6.0;
  double tumor_uptake_min = 1.0;  // SUV
  double tumor_uptake_max = 9.0;
  double node_probability = 0.5;
  double node_radius_min = 1.5;
  double node_radius_max = 2.5;
  double node_uptake_min = 3.0;
  double node_uptake_max = 5.5;
  double node_margin = 2.0;  // voxels between tumour surface and node
  double background_suv = 1.0;
  double pet_noise = 0.2;
  double brain_suv = 12.0;
  double ct_noise = 20.0;      // HU
  double ct_tumor_bump = 60.0;  // HU

  void validate() const;
  friend bool operator==(const PhantomParams&, const PhantomParams&) = default;
};

struct CohortParams {
  std::size_t n = 200;
  Extent3 extent{32, 32, 16};
  double spacing_mm = 4.0;
  std::uint64_t seed = 0;
  HazardParams hazard;
  CensorParams censor;
  PhantomParams phantom;

  void validate() const;
  friend bool operator==(const CohortParams&, const CohortParams&) = default;
};

struct PhantomTruth {
  SegMask tumor_mask;
  bool node_present = false;
  std::size_t tumor_volume = 0;
  double mean_uptake = 0.0;
  double true_log_hazard = 0.0;
};

struct Subject {
  std::string id;
  VolumePair images;
  std::optional<SegMask> mask;
  SurvivalLabel label;
  std::vector<double> clinical;  // binary TNM stage (III = 0, IVa = 1)
  std::size_t fold = 0;
  std::optional<PhantomTruth> truth;
};

struct Cohort {
  std::vector<Subject> subjects;
  double c_max = 0.0;  // censoring bound actually used; 0 when loaded from files

  std::size_t size() const { return subjects.size(); }
  std::vector<SurvivalLabel> labels() const;
  double censored_fraction() const;
  /// C-index of the planted log hazards; requires generator truth.
  double oracle_c_index() const;
};

/// Draws a phantom cohort. Pure given params (including seed).
Cohort generate_cohort(const CohortParams& params);

/// Mean over subjects of P(censored) = (1 - exp(-r c)) / (r c) for rates r.
double expected_censored_fraction(const std::vector<double>& rates, double c_max);
/// Bisection for the c_max giving the target expected censored fraction.
double solve_c_max(const std::vector<double>& rates, double target_fraction);

struct ManifestEntry {
  std::string id;
  std::filesystem::path pet;
  std::filesystem::path ct;
  std::filesystem::path mask;  // empty for mask-less cohorts
  SurvivalLabel label;
  double tnm = 0.0;
  std::size_t fold = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// CSV with header id,pet,ct,mask,time,event,tnm,fold. Relative paths are
/// resolved against the manifest's directory.
struct CohortManifest {
  std::vector<ManifestEntry> entries;

  void validate() const;
  void write(const std::filesystem::path& path) const;
  static CohortManifest read(const std::filesystem::path& path);
};

/// Writes volumes, masks and manifest.csv under dir; returns the manifest.
CohortManifest write_cohort(const Cohort& cohort, const std::filesystem::path& dir, bool with_masks = true);
/// Loads every subject listed in a manifest file.
Cohort load_cohort(const std::filesystem::path& manifest_path);

}  // namespace deepmts::data
