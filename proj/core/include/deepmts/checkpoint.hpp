#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "deepmts/param_store.hpp"

namespace deepmts::nn {

// Binary parameter checkpoint, little-endian throughout:
//   "MTSW1" | u32 count | count x record
//   record: u32 key_len | key bytes | u8 dtype (1 = f32, 2 = f64) | u32 rank |
//           rank x u64 extent | values
enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

inline constexpr char kCheckpointMagic[5] = {'M', 'T', 'S', 'W', '1'};

struct CheckpointRecord {
  std::string key;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened; exact for both dtypes
};

template <class T>
void write_checkpoint(std::ostream& out, const ParamStore<T>& store);

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store);

std::vector<CheckpointRecord> read_checkpoint(std::istream& in);
std::vector<CheckpointRecord> load_checkpoint_records(const std::filesystem::path& path);

/// Overwrites values in `store`. Every record must match an existing key and
/// shape, and every store entry must be present in the file.
template <class T>
void restore_checkpoint(const std::vector<CheckpointRecord>& records, ParamStore<T>& store);

template <class T>
void load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store) {
  restore_checkpoint(load_checkpoint_records(path), store);
}

}  // namespace deepmts::nn
