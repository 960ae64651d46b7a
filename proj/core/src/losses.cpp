#include "deepmts/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "deepmts/error.hpp"

namespace deepmts {

void SurvivalLabel::validate() const {
  if (!(time > 0.0) || !std::isfinite(time)) {
    throw ValidationError("survival label: time must be positive and finite, got " + std::to_string(time));
  }
}

void validate_labels(std::span<const SurvivalLabel> labels) {
  for (const auto& l : labels) l.validate();
}

namespace {

void check_grid(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": grid mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

// Streaming log-sum-exp accumulator.
struct LogSumExp {
  double max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  void add(double v) {
    if (v <= max) {
      sum += std::exp(v - max);
    } else {
      sum = sum * std::exp(max - v) + 1.0;
      max = v;
    }
  }
  double value() const { return max + std::log(sum); }
};

struct CoxTerms {
  std::vector<std::size_t> order;  // indices by descending time
  std::vector<double> lse;         // log sum_{j in R(i)} exp(h_j), per subject
  std::size_t events = 0;
};

template <class T>
CoxTerms cox_terms(std::span<const T> risk, std::span<const SurvivalLabel> labels) {
  check_grid(risk.size(), labels.size(), "cox_ph_loss");
  validate_labels(labels);
  CoxTerms c;
  for (const auto& l : labels) c.events += l.event ? 1 : 0;
  if (c.events == 0) throw NoEventBatchError();
  const std::size_t n = risk.size();
  c.order.resize(n);
  std::iota(c.order.begin(), c.order.end(), std::size_t{0});
  std::stable_sort(c.order.begin(), c.order.end(), [&](std::size_t a, std::size_t b) { return labels[a].time > labels[b].time; });
  c.lse.assign(n, 0.0);
  LogSumExp acc;
  for (std::size_t k = 0; k < n;) {
    std::size_t end = k;
    // Whole tie group enters the risk set before any of its members is scored.
    while (end < n && labels[c.order[end]].time == labels[c.order[k]].time) acc.add(static_cast<double>(risk[c.order[end++]]));
    for (std::size_t m = k; m < end; ++m) c.lse[c.order[m]] = acc.value();
    k = end;
  }
  return c;
}

}  // namespace

template <class T>
T dice_loss(std::span<const T> prob, std::span<const std::uint8_t> truth) {
  check_grid(prob.size(), truth.size(), "dice_loss");
  double inter = 0.0, pp = 0.0, gg = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double p = prob[i];
    const double g = truth[i] ? 1.0 : 0.0;
    inter += p * g;
    pp += p * p;
    gg += g;
  }
  return static_cast<T>(-2.0 * inter / (pp + gg + kDiceEpsilon));
}

template <class T>
std::vector<T> dice_loss_grad(std::span<const T> prob, std::span<const std::uint8_t> truth) {
  check_grid(prob.size(), truth.size(), "dice_loss");
  double inter = 0.0, pp = 0.0, gg = 0.0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double p = prob[i];
    const double g = truth[i] ? 1.0 : 0.0;
    inter += p * g;
    pp += p * p;
    gg += g;
  }
  const double denom = pp + gg + kDiceEpsilon;
  std::vector<T> grad(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const double g = truth[i] ? 1.0 : 0.0;
    grad[i] = static_cast<T>(-2.0 * g / denom + 4.0 * inter * static_cast<double>(prob[i]) / (denom * denom));
  }
  return grad;
}

template <class T>
T cox_ph_loss(std::span<const T> risk, std::span<const SurvivalLabel> labels) {
  const CoxTerms c = cox_terms(risk, labels);
  double total = 0.0;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    if (labels[i].event) total += static_cast<double>(risk[i]) - c.lse[i];
  }
  return static_cast<T>(-total / static_cast<double>(c.events));
}

template <class T>
std::vector<T> cox_ph_loss_grad(std::span<const T> risk, std::span<const SurvivalLabel> labels) {
  const CoxTerms c = cox_terms(risk, labels);
  const std::size_t n = risk.size();
  // log W_k = log sum_{i: E_i, T_i <= T_k} exp(-lse_i), accumulated in
  // ascending time so every earlier-or-tied event is included.
  std::vector<double> log_w(n, -std::numeric_limits<double>::infinity());
  LogSumExp acc;
  for (std::size_t k = n; k > 0;) {
    std::size_t begin = k;
    while (begin > 0 && labels[c.order[begin - 1]].time == labels[c.order[k - 1]].time) {
      --begin;
      const std::size_t i = c.order[begin];
      if (labels[i].event) acc.add(-c.lse[i]);
    }
    for (std::size_t m = begin; m < k; ++m) log_w[c.order[m]] = acc.sum > 0.0 ? acc.value() : -std::numeric_limits<double>::infinity();
    k = begin;
  }
  std::vector<T> grad(n);
  const double inv_events = 1.0 / static_cast<double>(c.events);
  for (std::size_t k = 0; k < n; ++k) {
    const double expected = std::isfinite(log_w[k]) ? std::exp(static_cast<double>(risk[k]) + log_w[k]) : 0.0;
    grad[k] = static_cast<T>(-inv_events * ((labels[k].event ? 1.0 : 0.0) - expected));
  }
  return grad;
}

double combined_loss(double seg_loss, double sur_loss, double l2_acc, double lambda) {
  if (!(lambda >= 0.0)) throw ValidationError("combined_loss: lambda must be nonnegative");
  return seg_loss + sur_loss + lambda * l2_acc;
}

template <class T>
nn::Var dice_loss(nn::Tape<T>& tape, nn::Var prob, std::span<const std::uint8_t> truth) {
  const Tensor<T>& p = tape.value(prob);
  check_grid(p.size(), truth.size(), "dice_loss");
  const T value = dice_loss<T>(p.values(), truth);
  std::vector<std::uint8_t> g(truth.begin(), truth.end());
  return tape.record(Tensor<T>({1}, value), {prob}, [prob, g = std::move(g)](nn::Tape<T>& t, nn::Var self) {
    const T seed = t.grad(self)[0];
    const std::vector<T> d = dice_loss_grad<T>(t.value(prob).values(), g);
    Tensor<T>& dp = t.accumulate_grad(prob);
    for (std::size_t i = 0; i < d.size(); ++i) dp[i] += seed * d[i];
  });
}

template <class T>
nn::Var cox_ph_loss(nn::Tape<T>& tape, nn::Var risk, std::span<const SurvivalLabel> labels) {
  const Tensor<T>& h = tape.value(risk);
  const T value = cox_ph_loss<T>(h.values(), labels);
  std::vector<SurvivalLabel> copy(labels.begin(), labels.end());
  return tape.record(Tensor<T>({1}, value), {risk}, [risk, copy = std::move(copy)](nn::Tape<T>& t, nn::Var self) {
    const T seed = t.grad(self)[0];
    const std::vector<T> d = cox_ph_loss_grad<T>(t.value(risk).values(), copy);
    Tensor<T>& dh = t.accumulate_grad(risk);
    for (std::size_t i = 0; i < d.size(); ++i) dh[i] += seed * d[i];
  });
}

#define DEEPMTS_INSTANTIATE_LOSSES(T)                                                                  \
  template T dice_loss(std::span<const T>, std::span<const std::uint8_t>);                             \
  template std::vector<T> dice_loss_grad(std::span<const T>, std::span<const std::uint8_t>);           \
  template T cox_ph_loss(std::span<const T>, std::span<const SurvivalLabel>);                          \
  template std::vector<T> cox_ph_loss_grad(std::span<const T>, std::span<const SurvivalLabel>);        \
  template nn::Var dice_loss(nn::Tape<T>&, nn::Var, std::span<const std::uint8_t>);                    \
  template nn::Var cox_ph_loss(nn::Tape<T>&, nn::Var, std::span<const SurvivalLabel>);

DEEPMTS_INSTANTIATE_LOSSES(float)
DEEPMTS_INSTANTIATE_LOSSES(double)

}  // namespace deepmts
