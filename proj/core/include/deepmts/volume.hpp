#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "deepmts/ops.hpp"

namespace deepmts::data {

using nn::Extent3;
using Spacing3 = std::array<double, 3>;

/// Voxel grid in (depth, height, width) order, depth-major storage.
template <class V>
struct Grid {
  Extent3 extent{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::vector<V> voxels;

  Grid() = default;
  Grid(Extent3 e, Spacing3 s, V fill = V{}) : extent(e), spacing(s), voxels(e[0] * e[1] * e[2], fill) {}

  std::size_t size() const noexcept { return voxels.size(); }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept { return (z * extent[1] + y) * extent[2] + x; }
  V& at(std::size_t z, std::size_t y, std::size_t x) noexcept { return voxels[index(z, y, x)]; }
  const V& at(std::size_t z, std::size_t y, std::size_t x) const noexcept { return voxels[index(z, y, x)]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Volume = Grid<float>;
using SegMask = Grid<std::uint8_t>;

/// Optional SUV conversion inputs. SUV = activity * body_weight / dose.
struct SuvMetadata {
  double body_weight_g = 0.0;
  double injected_dose_bq = 0.0;

  friend bool operator==(const SuvMetadata&, const SuvMetadata&) = default;
};

struct VolumePair {
  Volume pet;  // SUV-like, nonnegative
  Volume ct;   // HU-like before preprocessing, [0,1] after
  std::optional<SuvMetadata> suv;

  void validate() const;
  friend bool operator==(const VolumePair&, const VolumePair&) = default;
};

std::size_t foreground_count(const SegMask& mask);

// Volume file: "MVOL1" | 3 x u32 extents | 3 x f32 spacing | u32 channels |
// f32 voxels, depth-major, channel after channel. Mask files use "MMSK1" and
// u8 voxels. All little-endian.
void write_volume(const std::filesystem::path& path, const std::vector<Volume>& channels);
std::vector<Volume> read_volume(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const SegMask& mask);
SegMask read_mask(const std::filesystem::path& path);

}  // namespace deepmts::data
