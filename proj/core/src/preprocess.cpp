#include "deepmts/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "deepmts/error.hpp"

namespace deepmts::data {

void PreprocessOptions::validate() const {
  for (std::size_t e : target_extent) {
    if (e == 0) throw ValidationError("preprocess: target extent must be positive");
  }
  for (double s : target_spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("preprocess: target spacing must be positive");
  }
  if (!(ct_window_lo < ct_window_hi)) throw ValidationError("preprocess: CT window must satisfy lo < hi");
  if (!(pet_percentile > 0.0 && pet_percentile <= 100.0)) throw ValidationError("preprocess: percentile must lie in (0, 100]");
}

double sample_trilinear(const Volume& v, double z, double y, double x) {
  const std::array<double, 3> c{z, y, x};
  std::array<std::size_t, 3> i0{}, i1{};
  std::array<double, 3> f{};
  for (std::size_t a = 0; a < 3; ++a) {
    const double hi = static_cast<double>(v.extent[a] - 1);
    const double p = std::clamp(c[a], 0.0, hi);
    const double fl = std::floor(p);
    i0[a] = static_cast<std::size_t>(fl);
    i1[a] = std::min(i0[a] + 1, v.extent[a] - 1);
    f[a] = p - fl;
  }
  double acc = 0.0;
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::size_t idx[3];
    for (std::size_t a = 0; a < 3; ++a) {
      const bool upper = (corner >> (2 - a)) & 1;
      w *= upper ? f[a] : 1.0 - f[a];
      idx[a] = upper ? i1[a] : i0[a];
    }
    if (w != 0.0) acc += w * v.at(idx[0], idx[1], idx[2]);
  }
  return acc;
}

namespace {

void check_spacing(const Spacing3& s) {
  for (double v : s) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("preprocess: spacing metadata missing or invalid");
  }
}

Extent3 resampled_extent(const Extent3& e, const Spacing3& from, const Spacing3& to) {
  Extent3 out{};
  for (std::size_t a = 0; a < 3; ++a) {
    out[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(double(e[a]) * from[a] / to[a])));
  }
  return out;
}

double source_index(std::size_t i, double from, double to) { return (double(i) + 0.5) * to / from - 0.5; }

}  // namespace

Volume resample_trilinear(const Volume& v, const Spacing3& spacing) {
  check_spacing(v.spacing);
  check_spacing(spacing);
  if (v.spacing == spacing) return v;
  Volume out(resampled_extent(v.extent, v.spacing, spacing), spacing);
  for (std::size_t z = 0; z < out.extent[0]; ++z)
    for (std::size_t y = 0; y < out.extent[1]; ++y)
      for (std::size_t x = 0; x < out.extent[2]; ++x)
        out.at(z, y, x) = static_cast<float>(sample_trilinear(v, source_index(z, v.spacing[0], spacing[0]),
                                                              source_index(y, v.spacing[1], spacing[1]),
                                                              source_index(x, v.spacing[2], spacing[2])));
  return out;
}

SegMask resample_nearest(const SegMask& m, const Spacing3& spacing) {
  check_spacing(m.spacing);
  check_spacing(spacing);
  if (m.spacing == spacing) return m;
  SegMask out(resampled_extent(m.extent, m.spacing, spacing), spacing);
  const auto nearest = [&](std::size_t i, std::size_t a) {
    const double s = std::round(source_index(i, m.spacing[a], spacing[a]));
    return static_cast<std::size_t>(std::clamp(s, 0.0, double(m.extent[a] - 1)));
  };
  for (std::size_t z = 0; z < out.extent[0]; ++z)
    for (std::size_t y = 0; y < out.extent[1]; ++y)
      for (std::size_t x = 0; x < out.extent[2]; ++x) out.at(z, y, x) = m.at(nearest(z, 0), nearest(y, 1), nearest(x, 2));
  return out;
}

template <class V>
Grid<V> center_crop_pad(const Grid<V>& g, const Extent3& extent, V fill) {
  if (g.extent == extent) return g;
  Grid<V> out(extent, g.spacing, fill);
  // Signed offset of the output origin inside the input.
  std::array<long, 3> off{};
  for (std::size_t a = 0; a < 3; ++a) off[a] = (static_cast<long>(g.extent[a]) - static_cast<long>(extent[a])) / 2;
  for (std::size_t z = 0; z < extent[0]; ++z) {
    const long sz = long(z) + off[0];
    if (sz < 0 || sz >= long(g.extent[0])) continue;
    for (std::size_t y = 0; y < extent[1]; ++y) {
      const long sy = long(y) + off[1];
      if (sy < 0 || sy >= long(g.extent[1])) continue;
      for (std::size_t x = 0; x < extent[2]; ++x) {
        const long sx = long(x) + off[2];
        if (sx < 0 || sx >= long(g.extent[2])) continue;
        out.at(z, y, x) = g.at(std::size_t(sz), std::size_t(sy), std::size_t(sx));
      }
    }
  }
  return out;
}

template Grid<float> center_crop_pad(const Grid<float>&, const Extent3&, float);
template Grid<std::uint8_t> center_crop_pad(const Grid<std::uint8_t>&, const Extent3&, std::uint8_t);

double percentile(const Volume& v, double q) {
  if (v.voxels.empty()) throw ValidationError("percentile of an empty volume");
  std::vector<float> tmp = v.voxels;
  const auto n = tmp.size();
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * double(n)));
  const std::size_t k = std::clamp<std::size_t>(rank, 1, n) - 1;
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<long>(k), tmp.end());
  return tmp[k];
}

void normalize_ct(Volume& ct, double window_lo, double window_hi) {
  const float lo = static_cast<float>(window_lo), hi = static_cast<float>(window_hi);
  for (float& v : ct.voxels) v = std::clamp(v, lo, hi);
  const auto [mn, mx] = std::minmax_element(ct.voxels.begin(), ct.voxels.end());
  const float a = *mn, range = *mx - *mn;
  for (float& v : ct.voxels) v = range > 0.0f ? (v - a) / range : 0.0f;
}

void normalize_pet(Volume& pet, double q) {
  const float p = static_cast<float>(percentile(pet, q));
  for (float& v : pet.voxels) v = p > 0.0f ? std::clamp(v / p, 0.0f, 1.0f) : 0.0f;
}

VolumePair preprocess(const VolumePair& raw, const PreprocessOptions& options) {
  options.validate();
  raw.validate();
  VolumePair out;
  out.pet = resample_trilinear(raw.pet, options.target_spacing);
  out.ct = resample_trilinear(raw.ct, options.target_spacing);
  if (raw.suv) {
    if (!(raw.suv->body_weight_g > 0.0) || !(raw.suv->injected_dose_bq > 0.0)) {
      throw ValidationError("preprocess: SUV metadata needs positive body weight and injected dose");
    }
    const double k = raw.suv->body_weight_g / raw.suv->injected_dose_bq;
    for (float& v : out.pet.voxels) v = static_cast<float>(v * k);
  }
  out.pet = center_crop_pad(out.pet, options.target_extent, 0.0f);
  out.ct = center_crop_pad(out.ct, options.target_extent, static_cast<float>(options.ct_window_lo));
  normalize_ct(out.ct, options.ct_window_lo, options.ct_window_hi);
  normalize_pet(out.pet, options.pet_percentile);
  return out;
}

SegMask preprocess_mask(const SegMask& mask, const PreprocessOptions& options) {
  options.validate();
  return center_crop_pad(resample_nearest(mask, options.target_spacing), options.target_extent, std::uint8_t{0});
}

AugmentParams sample_augment(Rng& rng, const Extent3& extent) {
  AugmentParams a;
  for (std::size_t i = 0; i < 3; ++i) {
    const double bound = kFullScaleTranslation * double(extent[i]) / double(kFullScaleExtent[i]);
    a.translation[i] = rng.uniform(-bound, bound);
  }
  a.rotation_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  a.flip = rng.bernoulli(0.5);
  return a;
}

std::array<double, 3> source_coordinate(const AugmentParams& a, const Extent3& extent, double z, double y, double x) {
  // Forward map: rotate about the centre, translate, then mirror along D.
  if (a.flip) z = double(extent[0] - 1) - z;
  z -= a.translation[0];
  y -= a.translation[1];
  x -= a.translation[2];
  if (a.rotation_deg != 0.0) {
    const double cz = 0.5 * double(extent[0] - 1), cy = 0.5 * double(extent[1] - 1);
    const double t = -a.rotation_deg * std::numbers::pi / 180.0;
    const double dz = z - cz, dy = y - cy;
    z = cz + std::cos(t) * dz - std::sin(t) * dy;
    y = cy + std::sin(t) * dz + std::cos(t) * dy;
  }
  return {z, y, x};
}

namespace {

bool inside(const std::array<double, 3>& c, const Extent3& e, double slack) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (c[a] < -slack || c[a] > double(e[a] - 1) + slack) return false;
  }
  return true;
}

}  // namespace

Volume augment_volume(const Volume& v, const AugmentParams& a) {
  if (a.is_identity()) return v;
  Volume out(v.extent, v.spacing, 0.0f);
  for (std::size_t z = 0; z < v.extent[0]; ++z)
    for (std::size_t y = 0; y < v.extent[1]; ++y)
      for (std::size_t x = 0; x < v.extent[2]; ++x) {
        const auto s = source_coordinate(a, v.extent, double(z), double(y), double(x));
        if (!inside(s, v.extent, 0.0)) continue;
        out.at(z, y, x) = static_cast<float>(sample_trilinear(v, s[0], s[1], s[2]));
      }
  return out;
}

SegMask augment_mask(const SegMask& m, const AugmentParams& a) {
  if (a.is_identity()) return m;
  SegMask out(m.extent, m.spacing, 0);
  for (std::size_t z = 0; z < m.extent[0]; ++z)
    for (std::size_t y = 0; y < m.extent[1]; ++y)
      for (std::size_t x = 0; x < m.extent[2]; ++x) {
        const auto s = source_coordinate(a, m.extent, double(z), double(y), double(x));
        if (!inside(s, m.extent, 0.5)) continue;
        const auto r = [&](std::size_t i) {
          return static_cast<std::size_t>(std::clamp(std::round(s[i]), 0.0, double(m.extent[i] - 1)));
        };
        out.at(z, y, x) = m.at(r(0), r(1), r(2));
      }
  return out;
}

Augmented augment(const VolumePair& x, const SegMask& mask, const AugmentParams& a) {
  Augmented out;
  out.images.pet = augment_volume(x.pet, a);
  out.images.ct = augment_volume(x.ct, a);
  out.images.suv = x.suv;
  out.mask = mask.voxels.empty() ? mask : augment_mask(mask, a);
  return out;
}

Augmented augment(const VolumePair& x, const SegMask& mask, std::uint64_t seed) {
  Rng rng(seed);
  return augment(x, mask, sample_augment(rng, x.pet.extent));
}

}  // namespace deepmts::data
