#include "deepmts/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "deepmts/error.hpp"

namespace deepmts::data {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

void VolumePair::validate() const {
  if (pet.extent != ct.extent) throw ValidationError("volume pair: PET and CT extents differ");
  if (pet.spacing != ct.spacing) throw ValidationError("volume pair: PET and CT spacing differ");
  for (double s : pet.spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("volume pair: spacing metadata missing or invalid");
  }
  if (pet.voxels.size() != pet.extent[0] * pet.extent[1] * pet.extent[2] || ct.voxels.size() != pet.voxels.size()) {
    throw ValidationError("volume pair: voxel count does not match extents");
  }
}

std::size_t foreground_count(const SegMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.voxels.begin(), mask.voxels.end(), [](std::uint8_t v) { return v != 0; }));
}

namespace {

constexpr char kVolumeMagic[5] = {'M', 'V', 'O', 'L', '1'};
constexpr char kMaskMagic[5] = {'M', 'M', 'S', 'K', '1'};

template <class U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U get(std::istream& in, const std::filesystem::path& path) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw ValidationError(path.string() + ": truncated file");
  return v;
}

void write_header(std::ostream& out, const char (&magic)[5], Extent3 extent, Spacing3 spacing, std::uint32_t channels) {
  out.write(magic, 5);
  for (std::size_t e : extent) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  for (double s : spacing) put<float>(out, static_cast<float>(s));
  put<std::uint32_t>(out, channels);
}

struct Header {
  Extent3 extent;
  Spacing3 spacing;
  std::uint32_t channels;
};

Header read_header(std::istream& in, const char (&magic)[5], const std::filesystem::path& path) {
  char m[5];
  in.read(m, 5);
  if (!in || std::memcmp(m, magic, 5) != 0) throw ValidationError(path.string() + ": bad magic");
  Header h{};
  for (auto& e : h.extent) e = get<std::uint32_t>(in, path);
  for (auto& s : h.spacing) s = get<float>(in, path);
  h.channels = get<std::uint32_t>(in, path);
  return h;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const std::vector<Volume>& channels) {
  if (channels.empty()) throw ValidationError("write_volume: no channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  const Volume& first = channels.front();
  write_header(out, kVolumeMagic, first.extent, first.spacing, static_cast<std::uint32_t>(channels.size()));
  for (const Volume& v : channels) {
    if (v.extent != first.extent) throw ValidationError("write_volume: channel extents differ");
    out.write(reinterpret_cast<const char*>(v.voxels.data()), static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  }
  if (!out) throw RuntimeFailure("write failed: " + path.string());
}

std::vector<Volume> read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot read " + path.string());
  const Header h = read_header(in, kVolumeMagic, path);
  std::vector<Volume> channels;
  for (std::uint32_t c = 0; c < h.channels; ++c) {
    Volume v(h.extent, h.spacing);
    in.read(reinterpret_cast<char*>(v.voxels.data()), static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
    if (!in) throw ValidationError(path.string() + ": truncated voxel data");
    channels.push_back(std::move(v));
  }
  return channels;
}

void write_mask(const std::filesystem::path& path, const SegMask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write " + path.string());
  write_header(out, kMaskMagic, mask.extent, mask.spacing, 1);
  out.write(reinterpret_cast<const char*>(mask.voxels.data()), static_cast<std::streamsize>(mask.voxels.size()));
  if (!out) throw RuntimeFailure("write failed: " + path.string());
}

SegMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot read " + path.string());
  const Header h = read_header(in, kMaskMagic, path);
  if (h.channels != 1) throw ValidationError(path.string() + ": masks have exactly one channel");
  SegMask m(h.extent, h.spacing);
  in.read(reinterpret_cast<char*>(m.voxels.data()), static_cast<std::streamsize>(m.voxels.size()));
  if (!in) throw ValidationError(path.string() + ": truncated voxel data");
  return m;
}

}  // namespace deepmts::data
