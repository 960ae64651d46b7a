#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "deepmts/survival.hpp"
#include "deepmts/tape.hpp"

namespace deepmts {

inline constexpr double kDiceEpsilon = 1e-7;

/// Soft Dice loss  -2 sum(p g) / (sum(p^2) + sum(g^2) + eps), in [-1, 0].
template <class T>
T dice_loss(std::span<const T> prob, std::span<const std::uint8_t> truth);

/// d dice_loss / d prob.
template <class T>
std::vector<T> dice_loss_grad(std::span<const T> prob, std::span<const std::uint8_t> truth);

/// Negative Cox log partial likelihood averaged over events. The risk set of
/// subject i is every j with T_j >= T_i, i included. Throws
/// NoEventBatchError when no label carries an event.
template <class T>
T cox_ph_loss(std::span<const T> risk, std::span<const SurvivalLabel> labels);

template <class T>
std::vector<T> cox_ph_loss_grad(std::span<const T> risk, std::span<const SurvivalLabel> labels);

/// L = seg + sur + lambda * l2.
double combined_loss(double seg_loss, double sur_loss, double l2_acc, double lambda);

// Tape-level versions used by training. prob is any tensor holding the
// foreground probabilities; risk is (N, 1) or (N).
template <class T>
nn::Var dice_loss(nn::Tape<T>& tape, nn::Var prob, std::span<const std::uint8_t> truth);

template <class T>
nn::Var cox_ph_loss(nn::Tape<T>& tape, nn::Var risk, std::span<const SurvivalLabel> labels);

}  // namespace deepmts
