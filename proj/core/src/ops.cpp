#include "deepmts/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace deepmts::nn {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

struct ConvGeom {
  std::size_t cin, d, h, w;
  std::size_t cout;
  Extent3 k, s, p;
  std::size_t od, oh, ow;
  std::size_t in_spatial() const { return d * h * w; }
  std::size_t out_spatial() const { return od * oh * ow; }
  std::size_t patch() const { return cin * k[0] * k[1] * k[2]; }
  bool pointwise() const { return k == Extent3{1, 1, 1} && s == Extent3{1, 1, 1}; }
};

std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (in + 2 * p < k) throw ValidationError("conv3d: non-positive spatial extent after striding");
  return (in + 2 * p - k) / s + 1;
}

ConvGeom conv_geometry(const Shape& x, const Shape& weight, const LayerSpec& spec) {
  spec.validate();
  const Volume5 v = as_volume5(x);
  if (weight.size() != 5) throw ValidationError("conv3d: weight must be 5-D, got " + to_string(weight));
  if (weight[1] != v.c) {
    throw ValidationError("conv3d: channel mismatch, input has " + std::to_string(v.c) + " channels, kernel expects " +
                          std::to_string(weight[1]));
  }
  if (weight[2] != spec.kernel[0] || weight[3] != spec.kernel[1] || weight[4] != spec.kernel[2]) {
    throw ValidationError("conv3d: weight extents " + to_string(weight) + " disagree with layer kernel");
  }
  ConvGeom g{v.c, v.d, v.h, v.w, weight[0], spec.kernel, spec.stride, spec.padding(), 0, 0, 0};
  g.od = out_extent(g.d, g.k[0], g.s[0], g.p[0]);
  g.oh = out_extent(g.h, g.k[1], g.s[1], g.p[1]);
  g.ow = out_extent(g.w, g.k[2], g.s[2], g.p[2]);
  return g;
}

template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.out_spatial();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
          const std::size_t row = ((c * g.k[0] + kz) * g.k[1] + ky) * g.k[2] + kx;
          T* dst = col + row * P;
          for (std::size_t oz = 0; oz < g.od; ++oz) {
            const auto iz = static_cast<std::ptrdiff_t>(oz * g.s[0] + kz) - static_cast<std::ptrdiff_t>(g.p[0]);
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              T* out = dst + (oz * g.oh + oy) * g.ow;
              const auto iy = static_cast<std::ptrdiff_t>(oy * g.s[1] + ky) - static_cast<std::ptrdiff_t>(g.p[1]);
              if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d) || iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                std::fill(out, out + g.ow, T{0});
                continue;
              }
              const T* src = x + ((c * g.d + iz) * g.h + iy) * g.w;
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.s[2] + kx) - static_cast<std::ptrdiff_t>(g.p[2]);
                out[ox] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) ? src[ix] : T{0};
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* dx) {
  const std::size_t P = g.out_spatial();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
      for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
        for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
          const std::size_t row = ((c * g.k[0] + kz) * g.k[1] + ky) * g.k[2] + kx;
          const T* src = col + row * P;
          for (std::size_t oz = 0; oz < g.od; ++oz) {
            const auto iz = static_cast<std::ptrdiff_t>(oz * g.s[0] + kz) - static_cast<std::ptrdiff_t>(g.p[0]);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d)) continue;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * g.s[1] + ky) - static_cast<std::ptrdiff_t>(g.p[1]);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const T* in = src + (oz * g.oh + oy) * g.ow;
              T* dst = dx + ((c * g.d + iz) * g.h + iy) * g.w;
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.s[2] + kx) - static_cast<std::ptrdiff_t>(g.p[2]);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += in[ox];
              }
            }
          }
        }
      }
    }
  }
}

template <class T>
AlignedVector<T>& scratch() {
  thread_local AlignedVector<T> buf;
  return buf;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ValidationError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Per-channel reduction layout: groups of `inner` contiguous values, `outer`
// repetitions, `channels` channels. 5-D: outer = N, inner = DHW. 2-D: outer =
// N, inner = 1.
struct ChannelLayout {
  std::size_t outer, channels, inner;
  std::size_t count() const { return outer * inner; }
  std::size_t index(std::size_t o, std::size_t c, std::size_t i) const { return (o * channels + c) * inner + i; }
};

ChannelLayout channel_layout(const Shape& s) {
  if (s.size() == 5) return {s[0], s[1], s[2] * s[3] * s[4]};
  if (s.size() == 2) return {s[0], s[1], 1};
  throw ValidationError("batchnorm: expected 2-D or 5-D input, got " + to_string(s));
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv3d: return "conv3d";
    case LayerKind::bn: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool3d: return "maxpool3d";
    case LayerKind::upsample3d: return "upsample3d";
    case LayerKind::avgpool3d: return "avgpool3d";
    case LayerKind::gap: return "gap";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax_channel: return "softmax-channel";
    case LayerKind::concat: return "concat";
    case LayerKind::add: return "add";
    case LayerKind::multiply: return "multiply";
  }
  return "?";
}

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel, std::size_t stride) {
  LayerSpec s{LayerKind::conv3d};
  s.kernel = {kernel, kernel, kernel};
  s.stride = {stride, stride, stride};
  s.out_channels = out_channels;
  return s;
}

LayerSpec LayerSpec::pool(LayerKind kind) {
  LayerSpec s{kind};
  s.kernel = {2, 2, 2};
  s.stride = {2, 2, 2};
  return s;
}

LayerSpec LayerSpec::dropout(double p) {
  LayerSpec s{LayerKind::dropout};
  s.dropout_p = p;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t units) {
  LayerSpec s{LayerKind::dense};
  s.out_channels = units;
  return s;
}

void LayerSpec::validate() const {
  for (std::size_t a = 0; a < 3; ++a) {
    if (kernel[a] == 0 || stride[a] == 0) throw ValidationError("layer: kernel/stride extents must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ValidationError("layer: dropout probability must be in [0,1)");
  if ((kind == LayerKind::conv3d || kind == LayerKind::dense) && out_channels == 0) {
    throw ValidationError(std::string(nn::to_string(kind)) + ": output channels must be positive");
  }
}

Shape infer_shape(const LayerSpec& spec, const std::vector<Shape>& inputs) {
  spec.validate();
  if (inputs.empty()) throw ValidationError("infer_shape: no inputs");
  const Shape& x = inputs.front();
  switch (spec.kind) {
    case LayerKind::conv3d: {
      const Volume5 v = as_volume5(x);
      const Extent3 p = spec.padding();
      return {v.n, spec.out_channels, out_extent(v.d, spec.kernel[0], spec.stride[0], p[0]),
              out_extent(v.h, spec.kernel[1], spec.stride[1], p[1]), out_extent(v.w, spec.kernel[2], spec.stride[2], p[2])};
    }
    case LayerKind::maxpool3d:
    case LayerKind::avgpool3d: {
      const Volume5 v = as_volume5(x);
      if (v.d % 2 || v.h % 2 || v.w % 2) throw ValidationError("pool 2x2x2: odd spatial extent " + to_string(x));
      return {v.n, v.c, v.d / 2, v.h / 2, v.w / 2};
    }
    case LayerKind::upsample3d: {
      const Volume5 v = as_volume5(x);
      return {v.n, v.c, v.d * 2, v.h * 2, v.w * 2};
    }
    case LayerKind::gap: {
      const Volume5 v = as_volume5(x);
      return {v.n, v.c};
    }
    case LayerKind::dense:
      if (x.size() != 2) throw ValidationError("dense: expected 2-D input, got " + to_string(x));
      return {x[0], spec.out_channels};
    case LayerKind::concat: {
      Shape out = x;
      for (std::size_t i = 1; i < inputs.size(); ++i) {
        Shape a = inputs[i];
        if (a.size() != x.size()) throw ValidationError("concat: rank mismatch");
        for (std::size_t ax = 0; ax < a.size(); ++ax) {
          if (ax != 1 && a[ax] != x[ax]) throw ValidationError("concat: extent mismatch " + to_string(a) + " vs " + to_string(x));
        }
        out[1] += a[1];
      }
      return out;
    }
    case LayerKind::add:
    case LayerKind::multiply:
      for (const Shape& s : inputs) {
        if (s != x && !(spec.kind == LayerKind::multiply && s.size() == 5 && s[1] == 1)) {
          throw ValidationError(std::string(nn::to_string(spec.kind)) + ": shape mismatch");
        }
      }
      return x;
    case LayerKind::bn:
    case LayerKind::relu:
    case LayerKind::dropout:
    case LayerKind::softmax_channel:
      return x;
  }
  return x;
}

// ---- convolution -----------------------------------------------------------

template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const LayerSpec& spec) {
  const ConvGeom g = conv_geometry(x.shape(), weight.shape(), spec);
  if (spec.out_channels != 0 && spec.out_channels != g.cout) {
    throw ValidationError("conv3d: weight has " + std::to_string(g.cout) + " filters, layer wants " +
                          std::to_string(spec.out_channels));
  }
  if (bias.size() != g.cout) throw ValidationError("conv3d: bias length mismatch");
  const std::size_t n = x.dim(0);
  Tensor<T> y({n, g.cout, g.od, g.oh, g.ow});
  const std::size_t K = g.patch();
  const std::size_t P = g.out_spatial();
  CMapR<T> W(weight.data(), g.cout, K);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.data(), g.cout);
  auto& col = scratch<T>();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xn = x.data() + i * g.cin * g.in_spatial();
    const T* colp = xn;
    if (!g.pointwise()) {
      col.resize(K * P);
      im2col(xn, g, col.data());
      colp = col.data();
    }
    MapR<T> Y(y.data() + i * g.cout * P, g.cout, P);
    Y.noalias() = W * CMapR<T>(colp, K, P);
    Y.colwise() += b;
  }
  return y;
}

template <class T>
Var conv3d(Tape<T>& tape, Var x, Var weight, Var bias, const LayerSpec& spec) {
  Tensor<T> y = conv3d_forward(tape.value(x), tape.value(weight), tape.value(bias), spec);
  return tape.record(std::move(y), {x, weight, bias}, [x, weight, bias, spec](Tape<T>& t, Var self) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(weight);
    const ConvGeom g = conv_geometry(xv.shape(), wv.shape(), spec);
    const std::size_t n = xv.dim(0);
    const std::size_t K = g.patch();
    const std::size_t P = g.out_spatial();
    const Tensor<T>& dy = t.grad(self);
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(weight);
    const bool need_b = t.requires_grad(bias);
    T* dx = need_x ? t.accumulate_grad(x).data() : nullptr;
    T* dw = need_w ? t.accumulate_grad(weight).data() : nullptr;
    T* db = need_b ? t.accumulate_grad(bias).data() : nullptr;
    CMapR<T> W(wv.data(), g.cout, K);
    auto& col = scratch<T>();
    AlignedVector<T> dcol;
    for (std::size_t i = 0; i < n; ++i) {
      const T* xn = xv.data() + i * g.cin * g.in_spatial();
      CMapR<T> dY(dy.data() + i * g.cout * P, g.cout, P);
      if (need_b) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dB(db, g.cout);
        dB += dY.rowwise().sum();
      }
      if (g.pointwise()) {
        if (need_w) MapR<T>(dw, g.cout, K).noalias() += dY * CMapR<T>(xn, K, P).transpose();
        if (need_x) MapR<T>(dx + i * g.cin * g.in_spatial(), K, P).noalias() += W.transpose() * dY;
        continue;
      }
      if (need_w) {
        col.resize(K * P);
        im2col(xn, g, col.data());
        MapR<T>(dw, g.cout, K).noalias() += dY * CMapR<T>(col.data(), K, P).transpose();
      }
      if (need_x) {
        dcol.resize(K * P);
        MapR<T>(dcol.data(), K, P).noalias() = W.transpose() * dY;
        col2im(dcol.data(), g, dx + i * g.cin * g.in_spatial());
      }
    }
  });
}

// ---- pooling / resampling --------------------------------------------------

template <class T>
Tensor<T> pooling_forward(const Tensor<T>& x, const LayerSpec& spec) {
  const Shape out_shape = infer_shape(spec, {x.shape()});
  const Volume5 v = as_volume5(x.shape());
  Tensor<T> y(out_shape);
  switch (spec.kind) {
    case LayerKind::maxpool3d:
    case LayerKind::avgpool3d: {
      const bool is_max = spec.kind == LayerKind::maxpool3d;
      const std::size_t od = v.d / 2, oh = v.h / 2, ow = v.w / 2;
      for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
        const T* src = x.data() + nc * v.spatial();
        T* dst = y.data() + nc * od * oh * ow;
        for (std::size_t z = 0; z < od; ++z)
          for (std::size_t yy = 0; yy < oh; ++yy)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              T acc = is_max ? -std::numeric_limits<T>::infinity() : T{0};
              for (std::size_t dz = 0; dz < 2; ++dz)
                for (std::size_t dy = 0; dy < 2; ++dy)
                  for (std::size_t dx = 0; dx < 2; ++dx) {
                    const T val = src[((2 * z + dz) * v.h + 2 * yy + dy) * v.w + 2 * xx + dx];
                    acc = is_max ? std::max(acc, val) : acc + val;
                  }
              dst[(z * oh + yy) * ow + xx] = is_max ? acc : acc / T{8};
            }
      }
      break;
    }
    case LayerKind::upsample3d: {
      const std::size_t od = v.d * 2, oh = v.h * 2, ow = v.w * 2;
      for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
        const T* src = x.data() + nc * v.spatial();
        T* dst = y.data() + nc * od * oh * ow;
        for (std::size_t z = 0; z < od; ++z)
          for (std::size_t yy = 0; yy < oh; ++yy)
            for (std::size_t xx = 0; xx < ow; ++xx) dst[(z * oh + yy) * ow + xx] = src[((z / 2) * v.h + yy / 2) * v.w + xx / 2];
      }
      break;
    }
    case LayerKind::gap: {
      const T inv = T{1} / static_cast<T>(v.spatial());
      for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
        const T* src = x.data() + nc * v.spatial();
        T acc{0};
        for (std::size_t i = 0; i < v.spatial(); ++i) acc += src[i];
        y[nc] = acc * inv;
      }
      break;
    }
    default:
      throw ValidationError(std::string("pooling_forward: unsupported layer kind ") + nn::to_string(spec.kind));
  }
  return y;
}

template <class T>
Var maxpool3d(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y = pooling_forward(xv, LayerSpec::pool(LayerKind::maxpool3d));
  const Volume5 v = as_volume5(xv.shape());
  // Winner index per output; first maximum wins ties.
  std::vector<std::uint32_t> argmax(y.size());
  const std::size_t od = v.d / 2, oh = v.h / 2, ow = v.w / 2;
  for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
    const T* src = xv.data() + nc * v.spatial();
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t yy = 0; yy < oh; ++yy)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          std::size_t best = ((2 * z) * v.h + 2 * yy) * v.w + 2 * xx;
          for (std::size_t dz = 0; dz < 2; ++dz)
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = ((2 * z + dz) * v.h + 2 * yy + dy) * v.w + 2 * xx + dx;
                if (src[idx] > src[best]) best = idx;
              }
          argmax[nc * od * oh * ow + (z * oh + yy) * ow + xx] = static_cast<std::uint32_t>(best);
        }
  }
  const std::size_t out_spatial = od * oh * ow;
  const std::size_t in_spatial = v.spatial();
  return tape.record(std::move(y), {x}, [x, argmax = std::move(argmax), out_spatial, in_spatial](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[(i / out_spatial) * in_spatial + argmax[i]] += dy[i];
  });
}

template <class T>
Var avgpool3d(Tape<T>& tape, Var x) {
  Tensor<T> y = pooling_forward(tape.value(x), LayerSpec::pool(LayerKind::avgpool3d));
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const Volume5 v = as_volume5(t.value(x).shape());
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    const std::size_t od = v.d / 2, oh = v.h / 2, ow = v.w / 2;
    for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
      const T* g = dy.data() + nc * od * oh * ow;
      T* dst = dx + nc * v.spatial();
      for (std::size_t z = 0; z < v.d; ++z)
        for (std::size_t yy = 0; yy < v.h; ++yy)
          for (std::size_t xx = 0; xx < v.w; ++xx) dst[(z * v.h + yy) * v.w + xx] += g[((z / 2) * oh + yy / 2) * ow + xx / 2] / T{8};
    }
  });
}

template <class T>
Var upsample3d(Tape<T>& tape, Var x) {
  Tensor<T> y = pooling_forward(tape.value(x), LayerSpec::pool(LayerKind::upsample3d));
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const Volume5 v = as_volume5(t.value(x).shape());
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    const std::size_t od = v.d * 2, oh = v.h * 2, ow = v.w * 2;
    for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
      const T* g = dy.data() + nc * od * oh * ow;
      T* dst = dx + nc * v.spatial();
      for (std::size_t z = 0; z < od; ++z)
        for (std::size_t yy = 0; yy < oh; ++yy)
          for (std::size_t xx = 0; xx < ow; ++xx) dst[((z / 2) * v.h + yy / 2) * v.w + xx / 2] += g[(z * oh + yy) * ow + xx];
    }
  });
}

template <class T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  Tensor<T> y = pooling_forward(tape.value(x), LayerSpec::of(LayerKind::gap));
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const Volume5 v = as_volume5(t.value(x).shape());
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    const T inv = T{1} / static_cast<T>(v.spatial());
    for (std::size_t nc = 0; nc < v.n * v.c; ++nc) {
      const T g = dy[nc] * inv;
      T* dst = dx + nc * v.spatial();
      for (std::size_t i = 0; i < v.spatial(); ++i) dst[i] += g;
    }
  });
}

// ---- batch normalization ---------------------------------------------------

namespace {

template <class T>
struct BatchNormPass {
  Tensor<T> y;
  std::vector<T> mean, inv_std;  // statistics applied in this pass
};

template <class T>
BatchNormPass<T> batchnorm_pass(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                                Tensor<T>& running_var, Mode mode, const BatchNormOptions& opt) {
  const ChannelLayout L = channel_layout(x.shape());
  if (gamma.size() != L.channels || beta.size() != L.channels || running_mean.size() != L.channels ||
      running_var.size() != L.channels) {
    throw ValidationError("batchnorm: parameter length does not match " + std::to_string(L.channels) + " channels");
  }
  if (mode == Mode::train && L.count() < 2) {
    throw ValidationError("batchnorm: train mode needs at least 2 values per channel, got " + std::to_string(L.count()));
  }
  BatchNormPass<T> pass{Tensor<T>(x.shape()), std::vector<T>(L.channels), std::vector<T>(L.channels)};
  for (std::size_t c = 0; c < L.channels; ++c) {
    T mean, var;
    if (mode == Mode::train) {
      double s = 0.0, ss = 0.0;
      for (std::size_t o = 0; o < L.outer; ++o)
        for (std::size_t i = 0; i < L.inner; ++i) s += x[L.index(o, c, i)];
      const double m = s / static_cast<double>(L.count());
      for (std::size_t o = 0; o < L.outer; ++o)
        for (std::size_t i = 0; i < L.inner; ++i) {
          const double d = x[L.index(o, c, i)] - m;
          ss += d * d;
        }
      mean = static_cast<T>(m);
      var = static_cast<T>(ss / static_cast<double>(L.count()));
      running_mean[c] = static_cast<T>(opt.momentum * running_mean[c] + (1.0 - opt.momentum) * mean);
      running_var[c] = static_cast<T>(opt.momentum * running_var[c] + (1.0 - opt.momentum) * var);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv_std = T{1} / std::sqrt(var + static_cast<T>(opt.epsilon));
    pass.mean[c] = mean;
    pass.inv_std[c] = inv_std;
    const T a = gamma[c] * inv_std;
    const T b = beta[c] - a * mean;
    for (std::size_t o = 0; o < L.outer; ++o) {
      const std::size_t base = L.index(o, c, 0);
      for (std::size_t i = 0; i < L.inner; ++i) pass.y[base + i] = a * x[base + i] + b;
    }
  }
  return pass;
}

}  // namespace

template <class T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                            Tensor<T>& running_var, Mode mode, const BatchNormOptions& opt) {
  return batchnorm_pass(x, gamma, beta, running_mean, running_var, mode, opt).y;
}

template <class T>
Var batchnorm(Tape<T>& tape, Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
              const BatchNormOptions& opt) {
  const ChannelLayout L = channel_layout(tape.value(x).shape());
  auto [y, mean, inv_std] =
      batchnorm_pass(tape.value(x), tape.value(gamma), tape.value(beta), running_mean, running_var, mode, opt);
  return tape.record(std::move(y), {x, gamma, beta},
                     [x, gamma, beta, mode, L, mean = std::move(mean), inv_std = std::move(inv_std)](Tape<T>& t, Var self) {
                       const Tensor<T>& xv = t.value(x);
                       const Tensor<T>& gv = t.value(gamma);
                       const Tensor<T>& dy = t.grad(self);
                       const bool need_x = t.requires_grad(x);
                       T* dx = need_x ? t.accumulate_grad(x).data() : nullptr;
                       T* dg = t.requires_grad(gamma) ? t.accumulate_grad(gamma).data() : nullptr;
                       T* db = t.requires_grad(beta) ? t.accumulate_grad(beta).data() : nullptr;
                       const T count = static_cast<T>(L.count());
                       for (std::size_t c = 0; c < L.channels; ++c) {
                         T sum_dy{0}, sum_dy_xhat{0};
                         for (std::size_t o = 0; o < L.outer; ++o)
                           for (std::size_t i = 0; i < L.inner; ++i) {
                             const std::size_t k = L.index(o, c, i);
                             const T xhat = (xv[k] - mean[c]) * inv_std[c];
                             sum_dy += dy[k];
                             sum_dy_xhat += dy[k] * xhat;
                           }
                         if (dg) dg[c] += sum_dy_xhat;
                         if (db) db[c] += sum_dy;
                         if (!need_x) continue;
                         const T a = gv[c] * inv_std[c];
                         for (std::size_t o = 0; o < L.outer; ++o)
                           for (std::size_t i = 0; i < L.inner; ++i) {
                             const std::size_t k = L.index(o, c, i);
                             if (mode == Mode::eval) {
                               dx[k] += a * dy[k];
                             } else {
                               const T xhat = (xv[k] - mean[c]) * inv_std[c];
                               dx[k] += a / count * (count * dy[k] - sum_dy - xhat * sum_dy_xhat);
                             }
                           }
                       }
                     });
}

// ---- pointwise -------------------------------------------------------------

template <class T>
Var relu(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T{0} ? xv[i] : T{0};
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, Var self) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (xv[i] > T{0}) dx[i] += dy[i];
  });
}

template <class T>
Var dense(Tape<T>& tape, Var x, Var weight, Var bias) {
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& wv = tape.value(weight);
  const Tensor<T>& bv = tape.value(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw ValidationError("dense: shape mismatch x" + to_string(xv.shape()) + " w" + to_string(wv.shape()) + " b" +
                          to_string(bv.shape()));
  }
  const std::size_t n = xv.dim(0), f = wv.dim(0), u = wv.dim(1);
  Tensor<T> y({n, u});
  MapR<T> Y(y.data(), n, u);
  Y.noalias() = CMapR<T>(xv.data(), n, f) * CMapR<T>(wv.data(), f, u);
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data(), u);
  return tape.record(std::move(y), {x, weight, bias}, [x, weight, bias, n, f, u](Tape<T>& t, Var self) {
    CMapR<T> dY(t.grad(self).data(), n, u);
    if (t.requires_grad(x)) MapR<T>(t.accumulate_grad(x).data(), n, f).noalias() += dY * CMapR<T>(t.value(weight).data(), f, u).transpose();
    if (t.requires_grad(weight)) MapR<T>(t.accumulate_grad(weight).data(), f, u).noalias() += CMapR<T>(t.value(x).data(), n, f).transpose() * dY;
    if (t.requires_grad(bias)) Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(t.accumulate_grad(bias).data(), u) += dY.colwise().sum();
  });
}

template <class T>
Var dropout(Tape<T>& tape, Var x, double p, Mode mode, Rng& rng) {
  LayerSpec::dropout(p).validate();
  if (mode == Mode::eval || p == 0.0) return x;
  const Tensor<T>& xv = tape.value(x);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(xv.size());
  std::bernoulli_distribution keep(1.0 - p);
  for (auto& m : mask) m = keep(rng.engine()) ? keep_scale : T{0};
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
  return tape.record(std::move(y), {x}, [x, mask = std::move(mask)](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
  });
}

template <class T>
Var softmax_channels(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  const Volume5 v = as_volume5(xv.shape());
  const std::size_t S = v.spatial();
  Tensor<T> y(xv.shape());
  for (std::size_t n = 0; n < v.n; ++n) {
    const T* src = xv.data() + n * v.c * S;
    T* dst = y.data() + n * v.c * S;
    for (std::size_t i = 0; i < S; ++i) {
      T mx = src[i];
      for (std::size_t c = 1; c < v.c; ++c) mx = std::max(mx, src[c * S + i]);
      T z{0};
      for (std::size_t c = 0; c < v.c; ++c) {
        dst[c * S + i] = std::exp(src[c * S + i] - mx);
        z += dst[c * S + i];
      }
      for (std::size_t c = 0; c < v.c; ++c) dst[c * S + i] /= z;
    }
  }
  return tape.record(std::move(y), {x}, [x, v, S](Tape<T>& t, Var self) {
    const Tensor<T>& yv = t.value(self);
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    for (std::size_t n = 0; n < v.n; ++n) {
      const std::size_t base = n * v.c * S;
      for (std::size_t i = 0; i < S; ++i) {
        T dot{0};
        for (std::size_t c = 0; c < v.c; ++c) dot += dy[base + c * S + i] * yv[base + c * S + i];
        for (std::size_t c = 0; c < v.c; ++c) {
          const std::size_t k = base + c * S + i;
          dx[k] += yv[k] * (dy[k] - dot);
        }
      }
    }
  });
}

template <class T>
Var concat_channels(Tape<T>& tape, const std::vector<Var>& xs) {
  if (xs.empty()) throw ValidationError("concat: no inputs");
  if (xs.size() == 1) return xs.front();
  std::vector<Shape> shapes;
  for (Var v : xs) shapes.push_back(tape.value(v).shape());
  const Shape out = infer_shape(LayerSpec::of(LayerKind::concat), shapes);
  const std::size_t outer = out[0];
  const std::size_t inner = element_count(out) / (out[0] * out[1]);
  Tensor<T> y(out);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (Var v : xs) {
    const Tensor<T>& xv = tape.value(v);
    const std::size_t block = xv.dim(1) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xv.data() + o * block, block, y.data() + o * out[1] * inner + off * inner);
    }
    offsets.push_back(off);
    off += xv.dim(1);
  }
  return tape.record(std::move(y), xs, [xs, offsets, outer, inner, total = out[1]](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (!t.requires_grad(xs[k])) continue;
      Tensor<T>& dx = t.accumulate_grad(xs[k]);
      const std::size_t block = dx.dim(1) * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = dy.data() + o * total * inner + offsets[k] * inner;
        T* dst = dx.data() + o * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
}

template <class T>
Var slice_channels(Tape<T>& tape, Var x, std::size_t begin, std::size_t count) {
  const Tensor<T>& xv = tape.value(x);
  if (xv.rank() < 2 || begin + count > xv.dim(1) || count == 0) throw ValidationError("slice_channels: range out of bounds");
  Shape out = xv.shape();
  out[1] = count;
  const std::size_t outer = out[0];
  const std::size_t inner = xv.size() / (xv.dim(0) * xv.dim(1));
  const std::size_t total = xv.dim(1);
  Tensor<T> y(out);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * total + begin) * inner, count * inner, y.data() + o * count * inner);
  }
  return tape.record(std::move(y), {x}, [x, begin, count, outer, inner, total](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = dy.data() + o * count * inner;
      T* dst = dx + (o * total + begin) * inner;
      for (std::size_t i = 0; i < count * inner; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "add");
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    for (Var p : {a, b}) {
      if (!t.requires_grad(p)) continue;
      T* d = t.accumulate_grad(p).data();
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
  });
}

template <class T>
Var multiply(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  const bool broadcast = av.shape() != bv.shape();
  std::size_t channels = 1, inner = av.size();
  if (broadcast) {
    infer_shape(LayerSpec::of(LayerKind::multiply), {av.shape(), bv.shape()});
    Shape expect = av.shape();
    expect[1] = 1;
    require_same_shape(expect, bv.shape(), "multiply");
    const Volume5 v = as_volume5(av.shape());
    channels = v.c;
    inner = v.spatial();
  }
  auto b_index = [=](std::size_t k) { return broadcast ? (k / (channels * inner)) * inner + k % inner : k; };
  Tensor<T> y(av.shape());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = av[k] * bv[b_index(k)];
  return tape.record(std::move(y), {a, b}, [a, b, b_index](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    if (t.requires_grad(a)) {
      T* da = t.accumulate_grad(a).data();
      for (std::size_t k = 0; k < dy.size(); ++k) da[k] += dy[k] * bv[b_index(k)];
    }
    if (t.requires_grad(b)) {
      T* db = t.accumulate_grad(b).data();
      for (std::size_t k = 0; k < dy.size(); ++k) db[b_index(k)] += dy[k] * av[k];
    }
  });
}

template <class T>
Var scale(Tape<T>& tape, Var x, T factor) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * factor;
  return tape.record(std::move(y), {x}, [x, factor](Tape<T>& t, Var self) {
    const Tensor<T>& dy = t.grad(self);
    T* dx = t.accumulate_grad(x).data();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
  });
}

template <class T>
Var detach(Tape<T>& tape, Var x) {
  return tape.input(tape.value(x), false);
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  T acc{0};
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  return tape.record(Tensor<T>({1}, acc), {x}, [x](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    Tensor<T>& dx = t.accumulate_grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
  });
}

template <class T>
Var sum_squares(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  T acc{0};
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i] * xv[i];
  return tape.record(Tensor<T>({1}, acc), {x}, [x](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    const Tensor<T>& xv = t.value(x);
    Tensor<T>& dx = t.accumulate_grad(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += T{2} * g * xv[i];
  });
}

#define DEEPMTS_INSTANTIATE_OPS(T)                                                                                     \
  template Tensor<T> conv3d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const LayerSpec&);          \
  template Tensor<T> pooling_forward(const Tensor<T>&, const LayerSpec&);                                              \
  template Tensor<T> batchnorm_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,   \
                                       Mode, const BatchNormOptions&);                                                 \
  template Var conv3d(Tape<T>&, Var, Var, Var, const LayerSpec&);                                                      \
  template Var batchnorm(Tape<T>&, Var, Var, Var, Tensor<T>&, Tensor<T>&, Mode, const BatchNormOptions&);              \
  template Var relu(Tape<T>&, Var);                                                                                    \
  template Var maxpool3d(Tape<T>&, Var);                                                                               \
  template Var avgpool3d(Tape<T>&, Var);                                                                               \
  template Var upsample3d(Tape<T>&, Var);                                                                              \
  template Var global_avg_pool(Tape<T>&, Var);                                                                         \
  template Var dense(Tape<T>&, Var, Var, Var);                                                                         \
  template Var dropout(Tape<T>&, Var, double, Mode, Rng&);                                                             \
  template Var softmax_channels(Tape<T>&, Var);                                                                        \
  template Var concat_channels(Tape<T>&, const std::vector<Var>&);                                                     \
  template Var slice_channels(Tape<T>&, Var, std::size_t, std::size_t);                                                \
  template Var add(Tape<T>&, Var, Var);                                                                                \
  template Var multiply(Tape<T>&, Var, Var);                                                                           \
  template Var scale(Tape<T>&, Var, T);                                                                                \
  template Var detach(Tape<T>&, Var);                                                                                  \
  template Var sum(Tape<T>&, Var);                                                                                     \
  template Var sum_squares(Tape<T>&, Var);

DEEPMTS_INSTANTIATE_OPS(float)
DEEPMTS_INSTANTIATE_OPS(double)

}  // namespace deepmts::nn
