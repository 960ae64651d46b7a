#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "deepmts/rng.hpp"
#include "deepmts/survival.hpp"

namespace deepmts::data {

/// Batches of half censored, half uncensored subjects, so every batch has an
/// event. The larger class is walked in shuffled epochs without replacement;
/// the smaller one is drawn with replacement.
class BalancedSampler {
 public:
  /// pool holds the subject indices eligible for training; labels is indexed
  /// by those same indices.
  BalancedSampler(std::span<const SurvivalLabel> labels, std::vector<std::size_t> pool, std::size_t batch_size,
                  std::uint64_t seed);

  std::vector<std::size_t> next();

  std::size_t batch_size() const noexcept { return batch_size_; }
  const std::vector<std::size_t>& censored() const noexcept { return censored_; }
  const std::vector<std::size_t>& uncensored() const noexcept { return uncensored_; }
  /// Batches needed to visit every majority-class subject once.
  std::size_t batches_per_epoch() const noexcept;

 private:
  std::vector<std::size_t> draw_majority(std::size_t k);

  std::vector<std::size_t> censored_;
  std::vector<std::size_t> uncensored_;
  std::size_t batch_size_;
  bool censored_is_majority_;
  Rng rng_;
  std::vector<std::size_t> epoch_;
  std::size_t cursor_ = 0;
};

}  // namespace deepmts::data
