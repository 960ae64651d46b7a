#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "deepmts/rng.hpp"
#include "deepmts/tape.hpp"
#include "deepmts/tensor.hpp"

namespace deepmts::nn {

using deepmts::to_string;

enum class Mode { train, eval };

enum class LayerKind {
  conv3d,
  bn,
  relu,
  maxpool3d,
  upsample3d,
  avgpool3d,
  gap,
  dense,
  dropout,
  softmax_channel,
  concat,
  add,
  multiply,
};

const char* to_string(LayerKind kind);

using Extent3 = std::array<std::size_t, 3>;

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  std::size_t out_channels = 0;  // conv3d filters or dense units
  double dropout_p = 0.0;

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1);
  static LayerSpec pool(LayerKind kind);  // maxpool3d / avgpool3d / upsample3d with 2x2x2
  static LayerSpec of(LayerKind kind) { return LayerSpec{kind}; }
  static LayerSpec dropout(double p);
  static LayerSpec dense(std::size_t units);

  /// "same" padding: k/2 per axis.
  Extent3 padding() const { return {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2}; }
  void validate() const;
};

/// Output shape of a layer given its input shapes. This is the shape algebra
/// the model builder is checked against.
Shape infer_shape(const LayerSpec& spec, const std::vector<Shape>& inputs);

struct BatchNormOptions {
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double epsilon = 1e-5;
};

// ---- plain tensor kernels --------------------------------------------------

template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const LayerSpec& spec);

/// Max/avg pooling, nearest upsampling or global average pooling.
template <class T>
Tensor<T> pooling_forward(const Tensor<T>& x, const LayerSpec& spec);

/// Updates running statistics in train mode.
template <class T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                            Tensor<T>& running_var, Mode mode, const BatchNormOptions& opt = {});

// ---- differentiable ops ----------------------------------------------------

template <class T>
Var conv3d(Tape<T>& tape, Var x, Var weight, Var bias, const LayerSpec& spec);

template <class T>
Var batchnorm(Tape<T>& tape, Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
              const BatchNormOptions& opt = {});

template <class T>
Var relu(Tape<T>& tape, Var x);

template <class T>
Var maxpool3d(Tape<T>& tape, Var x);

template <class T>
Var avgpool3d(Tape<T>& tape, Var x);

template <class T>
Var upsample3d(Tape<T>& tape, Var x);

/// (N, C, D, H, W) -> (N, C)
template <class T>
Var global_avg_pool(Tape<T>& tape, Var x);

/// x (N, F) * weight (F, U) + bias (U)
template <class T>
Var dense(Tape<T>& tape, Var x, Var weight, Var bias);

/// Inverted dropout; identity in eval mode or when p == 0.
template <class T>
Var dropout(Tape<T>& tape, Var x, double p, Mode mode, Rng& rng);

template <class T>
Var softmax_channels(Tape<T>& tape, Var x);

/// Concatenate along axis 1 (channels for 5-D, features for 2-D).
template <class T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& xs);

template <class T>
Var slice_channels(Tape<T>& tape, Var x, std::size_t begin, std::size_t count);

template <class T>
Var add(Tape<T>& tape, Var a, Var b);

/// Elementwise product; b may have a single channel that broadcasts over a's
/// channels.
template <class T>
Var multiply(Tape<T>& tape, Var a, Var b);

template <class T>
Var scale(Tape<T>& tape, Var x, T factor);

/// Copy without a gradient path.
template <class T>
Var detach(Tape<T>& tape, Var x);

template <class T>
Var sum(Tape<T>& tape, Var x);

template <class T>
Var sum_squares(Tape<T>& tape, Var x);

}  // namespace deepmts::nn
