#pragma once

#include <array>
#include <cstdint>

#include "deepmts/rng.hpp"
#include "deepmts/volume.hpp"

namespace deepmts::data {

struct PreprocessOptions {
  Extent3 target_extent{32, 32, 16};
  Spacing3 target_spacing{4.0, 4.0, 4.0};
  double ct_window_lo = -200.0;  // HU
  double ct_window_hi = 200.0;
  double pet_percentile = 99.5;

  void validate() const;
};

/// Trilinear sample at a continuous voxel coordinate; coordinates are clamped
/// to the grid (edge replicate).
double sample_trilinear(const Volume& v, double z, double y, double x);

/// Resamples to a new spacing. Voxel centres are aligned so that output voxel
/// i sits at input coordinate (i + 0.5) * out_spacing / in_spacing - 0.5.
Volume resample_trilinear(const Volume& v, const Spacing3& spacing);
SegMask resample_nearest(const SegMask& m, const Spacing3& spacing);

template <class V>
Grid<V> center_crop_pad(const Grid<V>& g, const Extent3& extent, V fill);

/// Nearest-rank percentile of the voxel values, q in (0, 100].
double percentile(const Volume& v, double q);

void normalize_ct(Volume& ct, double window_lo, double window_hi);
void normalize_pet(Volume& pet, double q);

/// Resample, SUV conversion (when metadata is present), centre crop/pad and
/// intensity normalisation. Idempotent on conforming input.
VolumePair preprocess(const VolumePair& raw, const PreprocessOptions& options);
/// Geometry steps only, nearest-neighbour.
SegMask preprocess_mask(const SegMask& mask, const PreprocessOptions& options);

/// One draw of the training-time spatial transform.
struct AugmentParams {
  std::array<double, 3> translation{0.0, 0.0, 0.0};  // voxels, (D, H, W)
  double rotation_deg = 0.0;                          // in the D-H plane, about the W (axial) axis
  bool flip = false;                                  // mirror along D (left-right)

  bool is_identity() const { return translation == std::array<double, 3>{} && rotation_deg == 0.0 && !flip; }
};

inline constexpr double kFullScaleTranslation = 10.0;
inline constexpr double kMaxRotationDeg = 5.0;
inline constexpr Extent3 kFullScaleExtent{128, 128, 112};

/// Translation bounds scale with extent / 128x128x112.
AugmentParams sample_augment(Rng& rng, const Extent3& extent);

/// Maps an output voxel coordinate to the source coordinate it reads from.
std::array<double, 3> source_coordinate(const AugmentParams& a, const Extent3& extent, double z, double y, double x);

/// Trilinear for images, nearest for masks, zero outside the grid.
Volume augment_volume(const Volume& v, const AugmentParams& a);
SegMask augment_mask(const SegMask& m, const AugmentParams& a);

struct Augmented {
  VolumePair images;
  SegMask mask;
};

Augmented augment(const VolumePair& x, const SegMask& mask, const AugmentParams& a);
Augmented augment(const VolumePair& x, const SegMask& mask, std::uint64_t seed);

}  // namespace deepmts::data
