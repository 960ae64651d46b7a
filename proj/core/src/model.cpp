#include "deepmts/model.hpp"

#include <cmath>
#include <numeric>

#include "deepmts/error.hpp"

namespace deepmts::model {

using nn::LayerKind;
using nn::LayerSpec;
using nn::Mode;
using nn::Var;

// ---- enums -----------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::deep_mts: return "DeepMTS";
    case Variant::seg_backbone: return "Seg-Backbone";
    case Variant::sur_hs: return "Sur-HS";
    case Variant::sur_casnet: return "Sur-CasNet";
    case Variant::mt_hs: return "MT-HS";
    case Variant::mt_casnet: return "MT-CasNet";
  }
  return "?";
}

std::string to_string(Backbone b) { return b == Backbone::custom_residual ? "custom-residual" : "plain-unet"; }

std::string to_string(CsnInput c) {
  switch (c) {
    case CsnInput::concatenation: return "concatenation";
    case CsnInput::multiplication: return "multiplication";
    case CsnInput::pet_ct_only: return "pet-ct-only";
    case CsnInput::mask_only: return "mask-only";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::deep_mts, Variant::seg_backbone, Variant::sur_hs, Variant::sur_casnet, Variant::mt_hs,
                    Variant::mt_casnet}) {
    if (s == to_string(v)) return v;
  }
  throw ValidationError("unknown variant '" + s + "'");
}

Backbone parse_backbone(const std::string& s) {
  if (s == "custom-residual") return Backbone::custom_residual;
  if (s == "plain-unet") return Backbone::plain_unet;
  throw ValidationError("unknown backbone '" + s + "'");
}

CsnInput parse_csn_input(const std::string& s) {
  for (CsnInput c : {CsnInput::concatenation, CsnInput::multiplication, CsnInput::pet_ct_only, CsnInput::mask_only}) {
    if (s == to_string(c)) return c;
  }
  throw ValidationError("unknown csn input strategy '" + s + "'");
}

// ---- ArchSpec --------------------------------------------------------------

ArchSpec ArchSpec::for_variant(Variant v) {
  ArchSpec s;
  s.variant = v;
  s.csn_input = v == Variant::sur_casnet ? CsnInput::pet_ct_only : CsnInput::concatenation;
  return s;
}

void ArchSpec::validate() const {
  if (!(width > 0.0) || !std::isfinite(width)) throw ValidationError("arch: width multiplier must be positive");
  for (std::size_t e : extent) {
    if (e == 0 || e % 16 != 0) {
      throw ValidationError("arch: input extents must be positive multiples of 16 (four 2x downsamplings), got " +
                            std::to_string(extent[0]) + "x" + std::to_string(extent[1]) + "x" + std::to_string(extent[2]));
    }
  }
}

std::size_t ArchSpec::scaled(std::size_t channels) const {
  return static_cast<std::size_t>(std::ceil(width * static_cast<double>(channels) - 1e-9));
}

ChannelPlan channel_plan(const ArchSpec& spec) {
  ChannelPlan p;
  const std::size_t enc_convs[5] = {1, 2, 2, 2, 2};
  const std::size_t enc_ch[5] = {16, 32, 64, 128, 256};
  const bool plain = spec.backbone == Backbone::plain_unet;
  for (std::size_t s = 0; s < 5; ++s) p.encoder.push_back({plain ? 2 : enc_convs[s], spec.scaled(enc_ch[s])});
  for (std::size_t s = 4; s-- > 0;) p.decoder.push_back({plain ? 2 : enc_convs[s], spec.scaled(enc_ch[s])});
  if (plain) {
    p.backbone_taps = {spec.scaled(64)};
  } else {
    for (std::size_t t : {4, 8, 16, 32, 64}) p.backbone_taps.push_back(spec.scaled(t));
  }
  p.csn_stem = spec.scaled(32);
  p.csn_growth = spec.scaled(16);
  p.csn_bottleneck = 4 * p.csn_growth;
  p.csn_block_layers = {4, 8, 16};
  for (std::size_t t : {16, 32, 64}) p.csn_transitions.push_back(spec.scaled(t));
  return p;
}

std::size_t csn_input_channels(CsnInput c) {
  switch (c) {
    case CsnInput::concatenation: return 3;
    case CsnInput::multiplication: return 2;
    case CsnInput::pet_ct_only: return 2;
    case CsnInput::mask_only: return 1;
  }
  return 0;
}

// ---- shape walker ----------------------------------------------------------

ShapeWalk walk_shapes(const ArchSpec& spec, std::size_t batch) {
  spec.validate();
  const ChannelPlan plan = channel_plan(spec);
  ShapeWalk w;
  auto step = [&](const std::string& name, const LayerSpec& layer, std::vector<Shape> in) {
    Shape out = nn::infer_shape(layer, in);
    w.layers.emplace_back(name, out);
    return out;
  };
  const Shape input{batch, 2, spec.extent[0], spec.extent[1], spec.extent[2]};
  std::vector<Shape> enc;
  std::size_t tap_total = 0;
  if (spec.has_encoder()) {
    Shape x = input;
    for (std::size_t s = 0; s < plan.encoder.size(); ++s) {
      if (s > 0) x = step("enc" + std::to_string(s) + ".pool", LayerSpec::pool(LayerKind::maxpool3d), {x});
      for (std::size_t i = 0; i < plan.encoder[s].convs; ++i) {
        x = step("enc" + std::to_string(s) + ".conv" + std::to_string(i), LayerSpec::conv(plan.encoder[s].channels, 3), {x});
      }
      enc.push_back(x);
    }
    if (spec.has_taps()) {
      const std::size_t first = spec.backbone == Backbone::plain_unet ? enc.size() - 1 : 0;
      std::vector<Shape> taps;
      for (std::size_t s = first; s < enc.size(); ++s) {
        Shape t = step("tap" + std::to_string(s) + ".conv", LayerSpec::conv(plan.backbone_taps[s - first], 1), {enc[s]});
        taps.push_back(step("tap" + std::to_string(s) + ".gap", LayerSpec::of(LayerKind::gap), {t}));
      }
      tap_total = step("taps.concat", LayerSpec::of(LayerKind::concat), taps)[1];
    }
    if (spec.has_decoder()) {
      Shape d = enc.back();
      for (std::size_t k = 0; k < plan.decoder.size(); ++k) {
        const std::size_t s = enc.size() - 2 - k;
        d = step("dec" + std::to_string(s) + ".up", LayerSpec::pool(LayerKind::upsample3d), {d});
        d = step("dec" + std::to_string(s) + ".concat", LayerSpec::of(LayerKind::concat), {d, enc[s]});
        for (std::size_t i = 0; i < plan.decoder[k].convs; ++i) {
          d = step("dec" + std::to_string(s) + ".conv" + std::to_string(i), LayerSpec::conv(plan.decoder[k].channels, 3), {d});
        }
      }
      d = step("out.conv", LayerSpec::conv(2, 1), {d});
      w.prob_map = step("out.softmax", LayerSpec::of(LayerKind::softmax_channel), {d});
    }
  }
  std::size_t csn_total = 0;
  if (spec.has_csn()) {
    Shape x = input;
    x[1] = csn_input_channels(spec.csn_input);
    x = step("csn.stem", LayerSpec::conv(plan.csn_stem, 3, 2), {x});
    x = step("csn.pool", LayerSpec::pool(LayerKind::maxpool3d), {x});
    std::vector<Shape> taps;
    for (std::size_t b = 0; b < plan.csn_block_layers.size(); ++b) {
      for (std::size_t l = 0; l < plan.csn_block_layers[b]; ++l) {
        Shape y = step("csn.dense" + std::to_string(b) + ".conv1", LayerSpec::conv(plan.csn_bottleneck, 1), {x});
        y = step("csn.dense" + std::to_string(b) + ".conv2", LayerSpec::conv(plan.csn_growth, 3), {y});
        x = step("csn.dense" + std::to_string(b) + ".concat", LayerSpec::of(LayerKind::concat), {x, y});
      }
      x = step("csn.trans" + std::to_string(b), LayerSpec::conv(plan.csn_transitions[b], 1), {x});
      taps.push_back(step("csn.tap" + std::to_string(b), LayerSpec::of(LayerKind::gap), {x}));
      if (b + 1 < plan.csn_block_layers.size()) x = step("csn.avgpool" + std::to_string(b), LayerSpec::pool(LayerKind::avgpool3d), {x});
    }
    csn_total = step("csn.taps.concat", LayerSpec::of(LayerKind::concat), taps)[1];
  }
  w.dims.backbone = tap_total;
  w.dims.csn = csn_total;
  if (spec.has_head()) {
    std::size_t head = spec.clinical_dim;
    if (spec.has_taps()) head += kHeadUnits;
    if (spec.has_csn()) head += kHeadUnits;
    w.dims.head_input = head;
  }
  return w;
}

// ---- building blocks -------------------------------------------------------

namespace {

template <class T>
struct Ctx {
  nn::Tape<T>& tape;
  nn::ParamStore<T>& store;
  Mode mode;
  Rng& rng;
};

template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, sd));
  return t;
}

template <class T>
void add_conv(nn::ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              Rng& rng) {
  store.add(prefix + ".weight", he_normal<T>({cout, cin, k, k, k}, cin * k * k * k, rng));
  store.add(prefix + ".bias", Tensor<T>({cout}));
}

template <class T>
void add_bn(nn::ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  store.add(prefix + ".gamma", Tensor<T>({c}, T{1}));
  store.add(prefix + ".beta", Tensor<T>({c}));
  store.add(prefix + ".running_mean", Tensor<T>({c}), false);
  store.add(prefix + ".running_var", Tensor<T>({c}, T{1}), false);
}

template <class T>
void add_dense(nn::ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  store.add(prefix + ".weight", he_normal<T>({in, out}, in, rng));
  store.add(prefix + ".bias", Tensor<T>({out}));
}

template <class T>
Var conv(Ctx<T>& c, const std::string& prefix, Var x, std::size_t k, std::size_t stride = 1) {
  auto& w = c.store.at(prefix + ".weight");
  LayerSpec spec = LayerSpec::conv(w.value.dim(0), k, stride);
  return nn::conv3d(c.tape, x, c.tape.parameter(w), c.tape.parameter(c.store.at(prefix + ".bias")), spec);
}

template <class T>
Var bn(Ctx<T>& c, const std::string& prefix, Var x) {
  return nn::batchnorm(c.tape, x, c.tape.parameter(c.store.at(prefix + ".gamma")), c.tape.parameter(c.store.at(prefix + ".beta")),
                       c.store.at(prefix + ".running_mean").value, c.store.at(prefix + ".running_var").value, c.mode);
}

template <class T>
Var dense(Ctx<T>& c, const std::string& prefix, Var x) {
  return nn::dense(c.tape, x, c.tape.parameter(c.store.at(prefix + ".weight")), c.tape.parameter(c.store.at(prefix + ".bias")));
}

// conv -> BN -> ReLU
template <class T>
void add_cbr(nn::ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
  add_conv(store, prefix + ".conv", cin, cout, k, rng);
  add_bn(store, prefix + ".bn", cout);
}

template <class T>
Var cbr(Ctx<T>& c, const std::string& prefix, Var x, std::size_t k, std::size_t stride = 1) {
  return nn::relu(c.tape, bn(c, prefix + ".bn", conv(c, prefix + ".conv", x, k, stride)));
}

std::string enc_prefix(std::size_t s) { return "backbone.encoder.b" + std::to_string(s); }
std::string dec_prefix(std::size_t s) { return "backbone.decoder.b" + std::to_string(s); }

// Residual block: the first conv carries a 1x1x1 conv-BN-ReLU projection
// shortcut, the rest identity shortcuts. The plain variant stacks convs only.
template <class T>
void add_block(nn::ParamStore<T>& store, const std::string& prefix, std::size_t cin, const BlockPlan& b, bool residual, Rng& rng) {
  for (std::size_t i = 0; i < b.convs; ++i) add_cbr(store, prefix + ".c" + std::to_string(i), i == 0 ? cin : b.channels, b.channels, 3, rng);
  if (residual) add_cbr(store, prefix + ".proj", cin, b.channels, 1, rng);
}

template <class T>
Var block(Ctx<T>& c, const std::string& prefix, Var x, const BlockPlan& b, bool residual) {
  Var y = cbr(c, prefix + ".c0", x, 3);
  if (residual) y = nn::add(c.tape, y, cbr(c, prefix + ".proj", x, 1));
  for (std::size_t i = 1; i < b.convs; ++i) {
    Var z = cbr(c, prefix + ".c" + std::to_string(i), y, 3);
    y = residual ? nn::add(c.tape, z, y) : z;
  }
  return y;
}

template <class T>
Var bn_relu(Ctx<T>& c, const std::string& prefix, Var x) {
  return nn::relu(c.tape, bn(c, prefix, x));
}

}  // namespace

// ---- CSN input assembly ----------------------------------------------------

template <class T>
Var assemble_csn_input(nn::Tape<T>& tape, Var pet_ct, std::optional<Var> mask, CsnInput strategy) {
  const Shape& img = tape.value(pet_ct).shape();
  if (img.size() != 5 || img[1] != 2) throw ValidationError("csn input: PET/CT must be (N, 2, D, H, W), got " + to_string(img));
  if (strategy == CsnInput::pet_ct_only) return pet_ct;
  if (!mask) throw ValidationError("csn input: strategy '" + to_string(strategy) + "' needs a tumour mask");
  Shape expect = img;
  expect[1] = 1;
  if (tape.value(*mask).shape() != expect) {
    throw ValidationError("csn input: mask grid " + to_string(tape.value(*mask).shape()) + " does not match " + to_string(expect));
  }
  switch (strategy) {
    case CsnInput::concatenation: return nn::concat_channels(tape, {pet_ct, *mask});
    case CsnInput::multiplication: return nn::multiply(tape, pet_ct, *mask);
    case CsnInput::mask_only: return *mask;
    case CsnInput::pet_ct_only: break;
  }
  return pet_ct;
}

template <class T>
Tensor<T> assemble_csn_input(const Tensor<T>& pet_ct, const Tensor<T>* mask, CsnInput strategy) {
  nn::Tape<T> tape;
  Var img = tape.input(pet_ct);
  std::optional<Var> m;
  if (mask != nullptr) m = tape.input(*mask);
  return tape.value(assemble_csn_input(tape, img, m, strategy));
}

// ---- Network ---------------------------------------------------------------

template <class T>
Network<T>::Network(ArchSpec spec, std::uint64_t init_seed) : spec_(spec), plan_(channel_plan(spec)) {
  spec_.validate();
  Rng rng(init_seed);
  auto& s = params_;
  const bool residual = spec_.backbone == Backbone::custom_residual;
  if (spec_.has_encoder()) {
    std::size_t cin = 2;
    for (std::size_t i = 0; i < plan_.encoder.size(); ++i) {
      add_block(s, enc_prefix(i), cin, plan_.encoder[i], residual, rng);
      cin = plan_.encoder[i].channels;
    }
    if (spec_.has_taps()) {
      const std::size_t first = residual ? 0 : plan_.encoder.size() - 1;
      for (std::size_t i = first; i < plan_.encoder.size(); ++i) {
        add_cbr(s, "backbone.taps.t" + std::to_string(i), plan_.encoder[i].channels, plan_.backbone_taps[i - first], 1, rng);
      }
    }
    if (spec_.has_decoder()) {
      std::size_t below = plan_.encoder.back().channels;
      for (std::size_t k = 0; k < plan_.decoder.size(); ++k) {
        const std::size_t scale = plan_.encoder.size() - 2 - k;
        add_block(s, dec_prefix(scale), below + plan_.encoder[scale].channels, plan_.decoder[k], residual, rng);
        below = plan_.decoder[k].channels;
      }
      add_conv(s, "backbone.decoder.out", below, 2, 1, rng);
    }
  }
  if (spec_.has_csn()) {
    add_cbr(s, "csn.stem", csn_input_channels(spec_.csn_input), plan_.csn_stem, 3, rng);
    std::size_t ch = plan_.csn_stem;
    for (std::size_t b = 0; b < plan_.csn_block_layers.size(); ++b) {
      for (std::size_t l = 0; l < plan_.csn_block_layers[b]; ++l) {
        const std::string p = "csn.dense" + std::to_string(b) + ".l" + std::to_string(l);
        add_bn(s, p + ".bn1", ch);
        add_conv(s, p + ".conv1", ch, plan_.csn_bottleneck, 1, rng);
        add_bn(s, p + ".bn2", plan_.csn_bottleneck);
        add_conv(s, p + ".conv2", plan_.csn_bottleneck, plan_.csn_growth, 3, rng);
        ch += plan_.csn_growth;
      }
      const std::string t = "csn.trans" + std::to_string(b);
      add_bn(s, t + ".bn", ch);
      add_conv(s, t + ".conv", ch, plan_.csn_transitions[b], 1, rng);
      ch = plan_.csn_transitions[b];
      add_bn(s, "csn.tap" + std::to_string(b) + ".bn", ch);
    }
  }
  if (spec_.has_head()) {
    const FeatureDims dims = feature_dims();
    if (spec_.has_taps()) add_dense(s, "head.fc1", dims.backbone, kHeadUnits, rng);
    if (spec_.has_csn()) add_dense(s, "head.fc2", dims.csn, kHeadUnits, rng);
    add_dense(s, "head.fc3", dims.head_input, 1, rng);
  }
}

template <class T>
ModelOutput Network<T>::forward(nn::Tape<T>& tape, const Tensor<T>& images, const Tensor<T>& clinical, Mode mode, Rng& rng,
                                const Tensor<T>* manual_mask) {
  const Shape expect{images.rank() == 5 ? images.dim(0) : 0, 2, spec_.extent[0], spec_.extent[1], spec_.extent[2]};
  if (images.shape() != expect) {
    throw ValidationError("forward: images " + to_string(images.shape()) + " do not match arch input " + to_string(expect));
  }
  const std::size_t n = images.dim(0);
  if (spec_.has_head()) {
    const bool ok = spec_.clinical_dim == 0 ? (clinical.empty() || (clinical.rank() == 2 && clinical.dim(1) == 0))
                                            : (clinical.rank() == 2 && clinical.dim(0) == n && clinical.dim(1) == spec_.clinical_dim);
    if (!ok) {
      throw ValidationError("forward: clinical vector length does not match clinical_dim=" + std::to_string(spec_.clinical_dim));
    }
  }
  Ctx<T> c{tape, params_, mode, rng};
  ModelOutput out;
  const bool residual = spec_.backbone == Backbone::custom_residual;
  Var x = tape.input(images);

  if (spec_.has_encoder()) {
    std::vector<Var> enc;
    Var h = x;
    for (std::size_t i = 0; i < plan_.encoder.size(); ++i) {
      if (i > 0) h = nn::maxpool3d(tape, h);
      h = block(c, enc_prefix(i), h, plan_.encoder[i], residual);
      enc.push_back(h);
    }
    if (spec_.has_taps()) {
      std::vector<Var> taps;
      const std::size_t first = residual ? 0 : enc.size() - 1;
      for (std::size_t i = first; i < enc.size(); ++i) {
        taps.push_back(nn::global_avg_pool(tape, cbr(c, "backbone.taps.t" + std::to_string(i), enc[i], 1)));
      }
      out.backbone_features = nn::concat_channels(tape, taps);
    }
    if (spec_.has_decoder()) {
      Var d = enc.back();
      for (std::size_t k = 0; k < plan_.decoder.size(); ++k) {
        const std::size_t scale = enc.size() - 2 - k;
        d = nn::concat_channels(tape, {nn::upsample3d(tape, d), enc[scale]});
        d = block(c, dec_prefix(scale), d, plan_.decoder[k], residual);
      }
      out.prob_map = nn::softmax_channels(tape, conv(c, "backbone.decoder.out", d, 1));
    }
  }

  if (spec_.has_csn()) {
    std::optional<Var> mask;
    if (spec_.csn_needs_mask()) {
      if (out.prob_map) {
        mask = nn::detach(tape, nn::slice_channels(tape, *out.prob_map, 1, 1));
      } else {
        if (manual_mask == nullptr) throw ValidationError("forward: " + to_string(spec_.variant) + " with '" + to_string(spec_.csn_input) + "' input needs a manual mask");
        mask = tape.input(*manual_mask);
      }
    }
    Var h = assemble_csn_input(tape, x, mask, spec_.csn_input);
    h = cbr(c, "csn.stem", h, 3, 2);
    h = nn::maxpool3d(tape, h);
    std::vector<Var> taps;
    for (std::size_t b = 0; b < plan_.csn_block_layers.size(); ++b) {
      for (std::size_t l = 0; l < plan_.csn_block_layers[b]; ++l) {
        const std::string p = "csn.dense" + std::to_string(b) + ".l" + std::to_string(l);
        Var y = conv(c, p + ".conv1", bn_relu(c, p + ".bn1", h), 1);
        y = nn::dropout(tape, y, kCsnDropout, mode, rng);
        y = conv(c, p + ".conv2", bn_relu(c, p + ".bn2", y), 3);
        y = nn::dropout(tape, y, kCsnDropout, mode, rng);
        h = nn::concat_channels(tape, {h, y});
      }
      const std::string t = "csn.trans" + std::to_string(b);
      h = nn::dropout(tape, conv(c, t + ".conv", bn_relu(c, t + ".bn", h), 1), kCsnDropout, mode, rng);
      taps.push_back(nn::global_avg_pool(tape, bn_relu(c, "csn.tap" + std::to_string(b) + ".bn", h)));
      if (b + 1 < plan_.csn_block_layers.size()) h = nn::avgpool3d(tape, h);
    }
    out.csn_features = nn::concat_channels(tape, taps);
  }

  std::vector<Var> fc_weights;
  if (spec_.has_head()) {
    std::vector<Var> parts;
    auto fc = [&](const std::string& name, Var in, bool activate) {
      Var y = dense(c, name, nn::dropout(tape, in, kHeadDropout, mode, rng));
      return activate ? nn::relu(tape, y) : y;
    };
    if (spec_.has_taps()) parts.push_back(fc("head.fc1", *out.backbone_features, true));
    if (spec_.has_csn()) parts.push_back(fc("head.fc2", *out.csn_features, true));
    if (spec_.clinical_dim > 0) parts.push_back(tape.input(clinical));
    out.head_input = nn::concat_channels(tape, parts);
    out.risk = fc("head.fc3", *out.head_input, false);
    for (const char* name : {"head.fc1", "head.fc2", "head.fc3"}) {
      const std::string key = std::string(name) + ".weight";
      if (params_.contains(key)) fc_weights.push_back(nn::sum_squares(tape, tape.parameter(params_.at(key))));
    }
  }
  if (fc_weights.empty()) {
    out.l2 = tape.input(Tensor<T>({1}));
  } else {
    out.l2 = fc_weights.front();
    for (std::size_t i = 1; i < fc_weights.size(); ++i) out.l2 = nn::add(tape, out.l2, fc_weights[i]);
  }
  return out;
}

template <class T>
std::vector<std::string> Network<T>::keys_with_prefix(const std::string& prefix) const {
  std::vector<std::string> keys;
  for (const auto& [key, p] : params_) {
    if (key.rfind(prefix, 0) == 0) keys.push_back(key);
  }
  return keys;
}

template class Network<float>;
template class Network<double>;
template Var assemble_csn_input(nn::Tape<float>&, Var, std::optional<Var>, CsnInput);
template Var assemble_csn_input(nn::Tape<double>&, Var, std::optional<Var>, CsnInput);
template Tensor<float> assemble_csn_input(const Tensor<float>&, const Tensor<float>*, CsnInput);
template Tensor<double> assemble_csn_input(const Tensor<double>&, const Tensor<double>*, CsnInput);

}  // namespace deepmts::model
