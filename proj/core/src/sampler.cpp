#include "deepmts/sampler.hpp"

#include <algorithm>

#include "deepmts/error.hpp"

namespace deepmts::data {

BalancedSampler::BalancedSampler(std::span<const SurvivalLabel> labels, std::vector<std::size_t> pool,
                                 std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed) {
  if (batch_size == 0 || batch_size % 2 != 0) throw ValidationError("sampler: batch size must be even and positive");
  std::sort(pool.begin(), pool.end());
  for (std::size_t i : pool) {
    if (i >= labels.size()) throw ValidationError("sampler: subject index out of range");
    (labels[i].event ? uncensored_ : censored_).push_back(i);
  }
  if (censored_.empty() || uncensored_.empty()) {
    throw ValidationError("sampler: cohort needs at least one censored and one uncensored subject");
  }
  censored_is_majority_ = censored_.size() >= uncensored_.size();
}

std::size_t BalancedSampler::batches_per_epoch() const noexcept {
  const std::size_t half = batch_size_ / 2;
  const std::size_t majority = std::max(censored_.size(), uncensored_.size());
  return (majority + half - 1) / half;
}

std::vector<std::size_t> BalancedSampler::draw_majority(std::size_t k) {
  const auto& src = censored_is_majority_ ? censored_ : uncensored_;
  std::vector<std::size_t> out;
  while (out.size() < k) {
    if (cursor_ == epoch_.size()) {
      epoch_ = src;
      std::shuffle(epoch_.begin(), epoch_.end(), rng_.engine());
      cursor_ = 0;
    }
    out.push_back(epoch_[cursor_++]);
  }
  return out;
}

std::vector<std::size_t> BalancedSampler::next() {
  const std::size_t half = batch_size_ / 2;
  std::vector<std::size_t> batch = draw_majority(half);
  const auto& minority = censored_is_majority_ ? uncensored_ : censored_;
  for (std::size_t k = 0; k < half; ++k) batch.push_back(minority[rng_.index(minority.size())]);
  return batch;
}

}  // namespace deepmts::data
