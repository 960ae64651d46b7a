#include "deepmts/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "deepmts/error.hpp"
#include "deepmts/metrics.hpp"
#include "deepmts/rng.hpp"

namespace deepmts::data {

namespace {

bool finite_positive(double v) { return std::isfinite(v) && v > 0.0; }

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

}  // namespace

void HazardParams::validate() const {
  require(std::isfinite(beta_volume) && std::isfinite(beta_uptake) && std::isfinite(beta_node), "hazard: beta must be finite");
  require(beta_volume != 0.0 || beta_uptake != 0.0 || beta_node != 0.0,
          "hazard: all-zero beta gives identical true risks; refusing to generate an uninformative cohort");
  require(finite_positive(baseline), "hazard: baseline h0 must be positive");
}

void CensorParams::validate() const {
  if (c_max) require(finite_positive(*c_max), "censoring: c_max must be positive");
  require(target_fraction > 0.0 && target_fraction < 1.0, "censoring: target fraction must lie in (0, 1)");
}

void PhantomParams::validate() const {
  require(tumor_radius_min >= 1.2 && tumor_radius_max >= tumor_radius_min, "phantom: need 1.2 <= tumor radius min <= max");
  require(tumor_uptake_min > 0.0 && tumor_uptake_max >= tumor_uptake_min, "phantom: invalid tumor uptake range");
  require(node_probability >= 0.0 && node_probability <= 1.0, "phantom: node probability must lie in [0, 1]");
  require(node_radius_min > 0.0 && node_radius_max >= node_radius_min, "phantom: invalid node radius range");
  require(node_uptake_min > 0.0 && node_uptake_max >= node_uptake_min, "phantom: invalid node uptake range");
  require(node_margin >= 0.0, "phantom: node margin must be nonnegative");
  require(background_suv >= 0.0 && pet_noise >= 0.0 && brain_suv >= 0.0 && ct_noise >= 0.0,
          "phantom: intensities and noise levels must be nonnegative");
}

void CohortParams::validate() const {
  require(n >= kMinCohort, "cohort: n must be at least " + std::to_string(kMinCohort));
  for (std::size_t e : extent) require(e > 0 && e % 16 == 0, "cohort: extents must be positive multiples of 16");
  require(finite_positive(spacing_mm), "cohort: spacing must be positive");
  hazard.validate();
  censor.validate();
  phantom.validate();
  // The tumour centre lives in the central third and its radius is capped so
  // the ellipsoid stays clear of the border and of the last (brain) slice.
  const double room = static_cast<double>(*std::min_element(extent.begin(), extent.end())) / 3.0 - 1.5;
  require(room >= phantom.tumor_radius_min, "cohort: extent too small to place a tumor plus margin");
}

std::vector<SurvivalLabel> Cohort::labels() const {
  std::vector<SurvivalLabel> out;
  out.reserve(subjects.size());
  for (const auto& s : subjects) out.push_back(s.label);
  return out;
}

double Cohort::censored_fraction() const {
  if (subjects.empty()) return 0.0;
  const auto censored = std::count_if(subjects.begin(), subjects.end(), [](const Subject& s) { return !s.label.event; });
  return static_cast<double>(censored) / static_cast<double>(subjects.size());
}

double Cohort::oracle_c_index() const {
  std::vector<double> risk;
  for (const auto& s : subjects) {
    if (!s.truth) throw ValidationError("oracle C-index needs generator truth");
    risk.push_back(s.truth->true_log_hazard);
  }
  const auto l = labels();
  return c_index(risk, l);
}

double expected_censored_fraction(const std::vector<double>& rates, double c_max) {
  double acc = 0.0;
  for (double r : rates) {
    const double x = r * c_max;
    acc += x < 1e-12 ? 1.0 : -std::expm1(-x) / x;
  }
  return acc / static_cast<double>(rates.size());
}

double solve_c_max(const std::vector<double>& rates, double target_fraction) {
  if (rates.empty()) throw ValidationError("solve_c_max: no rates");
  // The censored fraction falls monotonically in c_max, so bisect in log space.
  double lo = std::log(1e-9), hi = std::log(1e12);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (expected_censored_fraction(rates, std::exp(mid)) > target_fraction) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

namespace {

struct Ellipsoid {
  std::array<double, 3> centre;
  std::array<double, 3> radius;
  bool contains(double z, double y, double x) const {
    const double a = (z - centre[0]) / radius[0], b = (y - centre[1]) / radius[1], c = (x - centre[2]) / radius[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

struct Phantom {
  VolumePair images;
  PhantomTruth truth;
};

Phantom draw_phantom(const CohortParams& p, Rng& rng) {
  const auto& ph = p.phantom;
  const Extent3 e = p.extent;
  const Spacing3 sp{p.spacing_mm, p.spacing_mm, p.spacing_mm};
  Phantom out;
  out.images.pet = Volume(e, sp);
  out.images.ct = Volume(e, sp);
  out.truth.tumor_mask = SegMask(e, sp);

  Ellipsoid tumour{};
  const double base = rng.uniform(ph.tumor_radius_min, ph.tumor_radius_max);
  for (std::size_t a = 0; a < 3; ++a) {
    const double ext = static_cast<double>(e[a]);
    tumour.centre[a] = rng.uniform(ext / 3.0, 2.0 * ext / 3.0);
    tumour.radius[a] = std::min(base * rng.uniform(0.8, 1.2), ext / 3.0 - 1.5);
  }
  const double uptake = rng.uniform(ph.tumor_uptake_min, ph.tumor_uptake_max);

  std::vector<std::array<double, 3>> tumour_voxels;
  for (std::size_t z = 0; z < e[0]; ++z)
    for (std::size_t y = 0; y < e[1]; ++y)
      for (std::size_t x = 0; x < e[2]; ++x)
        if (tumour.contains(double(z), double(y), double(x))) {
          out.truth.tumor_mask.at(z, y, x) = 1;
          tumour_voxels.push_back({double(z), double(y), double(x)});
        }

  bool node = rng.bernoulli(ph.node_probability);
  std::array<double, 3> node_centre{};
  double node_radius = 0.0, node_uptake = 0.0;
  if (node) {
    node_radius = rng.uniform(ph.node_radius_min, ph.node_radius_max);
    node_uptake = rng.uniform(ph.node_uptake_min, ph.node_uptake_max);
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      for (std::size_t a = 0; a < 3; ++a) {
        // Last slice along the final axis is reserved for the brain slab.
        const double hi = static_cast<double>(e[a]) - 1.0 - node_radius - (a == 2 ? 1.0 : 0.0);
        node_centre[a] = rng.uniform(node_radius, hi);
      }
      placed = std::all_of(tumour_voxels.begin(), tumour_voxels.end(), [&](const auto& v) {
        const double d = std::hypot(v[0] - node_centre[0], v[1] - node_centre[1], v[2] - node_centre[2]);
        return d >= node_radius + ph.node_margin;
      });
    }
    node = placed;
  }

  double uptake_sum = 0.0;
  for (std::size_t z = 0; z < e[0]; ++z) {
    for (std::size_t y = 0; y < e[1]; ++y) {
      for (std::size_t x = 0; x < e[2]; ++x) {
        const bool in_tumour = out.truth.tumor_mask.at(z, y, x) != 0;
        const bool in_node =
            node && std::hypot(z - node_centre[0], y - node_centre[1], x - node_centre[2]) <= node_radius;
        double suv = (x + 1 == e[2] ? ph.brain_suv : ph.background_suv) + ph.pet_noise * rng.normal();
        if (in_tumour) suv += uptake;
        if (in_node) suv += node_uptake;
        suv = std::max(suv, 0.0);
        out.images.pet.at(z, y, x) = static_cast<float>(suv);
        if (in_tumour) uptake_sum += static_cast<float>(suv);

        const double fz = double(z) / double(e[0]), fy = double(y) / double(e[1]);
        double hu = -60.0 + 100.0 * fz + 50.0 * std::sin(3.14159265358979 * fy) + ph.ct_noise * rng.normal();
        if (in_tumour) hu += ph.ct_tumor_bump;
        out.images.ct.at(z, y, x) = static_cast<float>(hu);
      }
    }
  }

  out.truth.node_present = node;
  out.truth.tumor_volume = tumour_voxels.size();
  out.truth.mean_uptake = uptake_sum / static_cast<double>(tumour_voxels.size());
  const auto& h = p.hazard;
  out.truth.true_log_hazard = h.beta_volume * std::log(static_cast<double>(out.truth.tumor_volume)) +
                              h.beta_uptake * out.truth.mean_uptake + h.beta_node * (node ? 1.0 : 0.0);
  return out;
}

std::string subject_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%04zu", i);
  return buf;
}

}  // namespace

Cohort generate_cohort(const CohortParams& params) {
  params.validate();
  const Rng root(params.seed);
  Cohort cohort;
  cohort.subjects.resize(params.n);
  std::vector<double> rates(params.n);
  for (std::size_t i = 0; i < params.n; ++i) {
    Rng rng = root.split(2 * i);
    Phantom ph = draw_phantom(params, rng);
    Subject& s = cohort.subjects[i];
    s.id = subject_id(i);
    s.images = std::move(ph.images);
    s.mask = ph.truth.tumor_mask;
    // TNM stage is a noisy, weak proxy for nodal spread.
    s.clinical = {rng.bernoulli(ph.truth.node_present ? 0.65 : 0.35) ? 1.0 : 0.0};
    rates[i] = params.hazard.baseline * std::exp(ph.truth.true_log_hazard);
    s.truth = std::move(ph.truth);
  }

  cohort.c_max = params.censor.c_max ? *params.censor.c_max : solve_c_max(rates, params.censor.target_fraction);
  for (std::size_t i = 0; i < params.n; ++i) {
    Rng rng = root.split(2 * i + 1);
    const double event_time = std::exponential_distribution<double>(rates[i])(rng.engine());
    const double censor_time = rng.uniform(0.0, cohort.c_max);
    auto& label = cohort.subjects[i].label;
    label.event = event_time <= censor_time;
    label.time = std::max(std::min(event_time, censor_time), 1e-9);
  }

  std::vector<std::size_t> order(params.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng fold_rng = root.split(~std::uint64_t{0});
  std::shuffle(order.begin(), order.end(), fold_rng.engine());
  for (std::size_t k = 0; k < params.n; ++k) cohort.subjects[order[k]].fold = k % kFolds;
  return cohort;
}

void CohortManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    require(!e.id.empty(), "manifest: empty subject id");
    require(ids.insert(e.id).second, "manifest: duplicate subject id '" + e.id + "'");
    require(e.fold < kFolds, "manifest: fold of '" + e.id + "' outside 0..4");
    e.label.validate();
  }
  require(!entries.empty(), "manifest: no subjects");
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

constexpr const char* kManifestHeader = "id,pet,ct,mask,time,event,tnm,fold";

double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(where + ": not a number: '" + s + "'");
  }
}

}  // namespace

void CohortManifest::write(const std::filesystem::path& path) const {
  validate();
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& e : entries) {
    for (const std::string& cell : {e.id, e.pet.generic_string(), e.ct.generic_string(), e.mask.generic_string()}) {
      require(cell.find_first_of(",\n") == std::string::npos, "manifest: field contains a comma or newline: " + cell);
    }
    out << e.id << ',' << e.pet.generic_string() << ',' << e.ct.generic_string() << ',' << e.mask.generic_string()
        << ',' << format_number(e.label.time) << ',' << (e.label.event ? 1 : 0) << ',' << format_number(e.tnm) << ','
        << e.fold << '\n';
  }
}

CohortManifest CohortManifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("manifest not found: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw ValidationError(path.string() + ":1: expected header '" + std::string(kManifestHeader) + "'");
  }
  CohortManifest m;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto cells = split_csv(line);
    require(cells.size() == 8, where + ": expected 8 fields, got " + std::to_string(cells.size()));
    ManifestEntry e;
    e.id = cells[0];
    e.pet = cells[1];
    e.ct = cells[2];
    e.mask = cells[3];
    e.label.time = parse_double(cells[4], where);
    require(cells[5] == "0" || cells[5] == "1", where + ": event must be 0 or 1");
    e.label.event = cells[5] == "1";
    e.tnm = parse_double(cells[6], where);
    const double fold = parse_double(cells[7], where);
    require(fold >= 0 && fold < kFolds && fold == std::floor(fold), where + ": fold must be an integer in 0..4");
    e.fold = static_cast<std::size_t>(fold);
    try {
      e.label.validate();
    } catch (const ValidationError& err) {
      throw ValidationError(where + ": " + err.what());
    }
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

CohortManifest write_cohort(const Cohort& cohort, const std::filesystem::path& dir, bool with_masks) {
  std::filesystem::create_directories(dir);
  CohortManifest m;
  for (const auto& s : cohort.subjects) {
    ManifestEntry e;
    e.id = s.id;
    e.pet = s.id + "_pet.mvol";
    e.ct = s.id + "_ct.mvol";
    write_volume(dir / e.pet, {s.images.pet});
    write_volume(dir / e.ct, {s.images.ct});
    if (with_masks && s.mask) {
      e.mask = s.id + "_mask.mmsk";
      write_mask(dir / e.mask, *s.mask);
    }
    e.label = s.label;
    e.tnm = s.clinical.empty() ? 0.0 : s.clinical.front();
    e.fold = s.fold;
    m.entries.push_back(std::move(e));
  }
  m.write(dir / "manifest.csv");
  return m;
}

Cohort load_cohort(const std::filesystem::path& manifest_path) {
  const CohortManifest m = CohortManifest::read(manifest_path);
  const auto base = manifest_path.parent_path();
  const auto resolve = [&](const std::filesystem::path& p) { return p.is_absolute() ? p : base / p; };
  Cohort cohort;
  for (const auto& e : m.entries) {
    Subject s;
    s.id = e.id;
    auto pet = read_volume(resolve(e.pet));
    auto ct = read_volume(resolve(e.ct));
    require(pet.size() == 1 && ct.size() == 1, e.id + ": expected single-channel PET and CT files");
    s.images.pet = std::move(pet.front());
    s.images.ct = std::move(ct.front());
    s.images.validate();
    if (!e.mask.empty()) {
      s.mask = read_mask(resolve(e.mask));
      require(s.mask->extent == s.images.pet.extent, e.id + ": mask extent differs from images");
    }
    s.label = e.label;
    s.clinical = {e.tnm};
    s.fold = e.fold;
    cohort.subjects.push_back(std::move(s));
  }
  return cohort;
}

}  // namespace deepmts::data
