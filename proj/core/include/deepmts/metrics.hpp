#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deepmts/survival.hpp"

namespace deepmts {

/// Harrell's C-index. A pair (i, j) is comparable when T_i < T_j and E_i = 1;
/// it is concordant when h_i > h_j and counts 0.5 on a risk tie. Runs in
/// O(n log n). Throws NoComparablePairsError when nothing is comparable.
double c_index(std::span<const double> risk, std::span<const SurvivalLabel> labels);

/// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

inline constexpr double kMaskThreshold = 0.5;

/// Voxels with probability above 0.5 become foreground.
template <class T>
std::vector<std::uint8_t> threshold_mask(std::span<const T> prob, double threshold = kMaskThreshold);

/// Ordered metric=value pairs written as a flat text file or JSON.
class MetricsReport {
 public:
  void set(const std::string& key, double value);
  void set(const std::string& key, const std::string& value);
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string get(const std::string& key) const;
  double number(const std::string& key) const;
  bool contains(const std::string& key) const;

  std::string to_kv() const;
  std::string to_json() const;
  void write_kv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
  static MetricsReport read_kv(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Shortest round-tripping decimal form of a double.
std::string format_number(double v);

}  // namespace deepmts
