#pragma once

#include <span>
#include <vector>

namespace deepmts {

/// Right-censored outcome. time is the progression time when event is true,
/// otherwise the censoring time.
struct SurvivalLabel {
  double time = 1.0;
  bool event = false;

  void validate() const;
  friend bool operator==(const SurvivalLabel&, const SurvivalLabel&) = default;
};

void validate_labels(std::span<const SurvivalLabel> labels);

}  // namespace deepmts
