#include <gtest/gtest.h>

#include <cmath>

#include "deepmts/error.hpp"
#include "deepmts/losses.hpp"
#include "deepmts/model.hpp"

using namespace deepmts;
using namespace deepmts::model;

namespace {

ArchSpec spec_for(Variant v, double width = 0.25, Extent3 extent = {32, 32, 16}) {
  auto s = ArchSpec::for_variant(v);
  s.width = width;
  s.extent = extent;
  return s;
}

template <class T>
Tensor<T> random_images(std::size_t n, Extent3 e, Rng& rng) {
  Tensor<T> x({n, 2, e[0], e[1], e[2]});
  for (auto& v : x.values()) v = static_cast<T>(rng.uniform());
  return x;
}

const Variant kAll[] = {Variant::deep_mts, Variant::seg_backbone, Variant::sur_hs,
                        Variant::sur_casnet, Variant::mt_hs, Variant::mt_casnet};

}  // namespace

TEST(FeatureDims, WidthOneTotals) {
  const auto d = walk_shapes(spec_for(Variant::deep_mts, 1.0)).dims;
  EXPECT_EQ(d.backbone, 124u);
  EXPECT_EQ(d.csn, 112u);
  EXPECT_EQ(d.head_input, 129u);
}

TEST(FeatureDims, QuarterWidth) {
  const auto d = walk_shapes(spec_for(Variant::deep_mts)).dims;
  EXPECT_EQ(d.backbone, 31u);
  EXPECT_EQ(d.csn, 28u);
  EXPECT_EQ(d.head_input, 129u);  // head widths are not scaled
}

TEST(FeatureDims, SurHsWithoutClinical) {
  auto s = spec_for(Variant::sur_hs);
  s.clinical_dim = 0;
  EXPECT_EQ(walk_shapes(s).dims.head_input, 64u);
  EXPECT_EQ(walk_shapes(s).dims.csn, 0u);
}

TEST(FeatureDims, FullScaleShapes) {
  const auto w = walk_shapes(spec_for(Variant::deep_mts, 1.0, {128, 128, 112}));
  ASSERT_TRUE(w.prob_map.has_value());
  EXPECT_EQ(*w.prob_map, (Shape{1, 2, 128, 128, 112}));
  EXPECT_EQ(w.dims.backbone, 124u);
}

TEST(FeatureDims, PlainUnetSingleTap) {
  auto s = spec_for(Variant::deep_mts, 1.0);
  s.backbone = Backbone::plain_unet;
  EXPECT_EQ(walk_shapes(s).dims.backbone, 64u);
}

TEST(FeatureDims, ForwardAgreesWithWalker) {
  Rng rng(1);
  for (Variant v : kAll) {
    const auto s = spec_for(v, 0.25, {16, 16, 16});
    Network<float> net(s, 3);
    nn::Tape<float> tape;
    Tensor<float> clinical({2, 1});
    Tensor<float> mask({2, 1, 16, 16, 16}, 1.0f);
    const auto out = net.forward(tape, random_images<float>(2, s.extent, rng), clinical, nn::Mode::eval, rng, &mask);
    const auto dims = net.feature_dims();
    EXPECT_EQ(out.backbone_features.has_value(), dims.backbone > 0) << to_string(v);
    if (out.backbone_features) {
      EXPECT_EQ(tape.value(*out.backbone_features).shape(), (Shape{2, dims.backbone}));
    }
    if (out.csn_features) {
      EXPECT_EQ(tape.value(*out.csn_features).shape(), (Shape{2, dims.csn}));
    }
    if (out.head_input) {
      EXPECT_EQ(tape.value(*out.head_input).shape(), (Shape{2, dims.head_input}));
    }
    EXPECT_EQ(out.risk.has_value(), v != Variant::seg_backbone) << to_string(v);
    EXPECT_EQ(out.prob_map.has_value(), s.has_decoder()) << to_string(v);
  }
}

TEST(ArchSpecRules, RejectsBadExtent) {
  EXPECT_THROW(spec_for(Variant::deep_mts, 0.25, {32, 32, 12}).validate(), ValidationError);
  EXPECT_THROW(spec_for(Variant::deep_mts, 0.0).validate(), ValidationError);
  EXPECT_NO_THROW(spec_for(Variant::deep_mts).validate());
}

TEST(ArchSpecRules, DefaultCsnInput) {
  EXPECT_EQ(ArchSpec::for_variant(Variant::sur_casnet).csn_input, CsnInput::pet_ct_only);
  EXPECT_EQ(ArchSpec::for_variant(Variant::mt_casnet).csn_input, CsnInput::concatenation);
  EXPECT_EQ(ArchSpec::for_variant(Variant::deep_mts).csn_input, CsnInput::concatenation);
}

TEST(ArchSpecRules, NamesRoundTrip) {
  for (Variant v : kAll) EXPECT_EQ(parse_variant(to_string(v)), v);
  for (CsnInput c : {CsnInput::concatenation, CsnInput::multiplication, CsnInput::pet_ct_only, CsnInput::mask_only})
    EXPECT_EQ(parse_csn_input(to_string(c)), c);
  EXPECT_THROW(parse_variant("DeepMTS2"), ValidationError);
}

TEST(ParameterCount, Monotone) {
  const auto count = [](Variant v) { return Network<float>(spec_for(v), 0).parameter_count(); };
  EXPECT_LT(count(Variant::sur_hs), count(Variant::mt_hs));
  EXPECT_LT(count(Variant::mt_hs), count(Variant::deep_mts));
  EXPECT_LT(count(Variant::sur_casnet), count(Variant::mt_casnet));
  EXPECT_LT(count(Variant::mt_casnet), count(Variant::deep_mts));
}

TEST(Forward, SoftmaxSumsToOne) {
  Rng rng(2);
  const auto s = spec_for(Variant::seg_backbone);
  Network<float> net(s, 1);
  nn::Tape<float> tape;
  const auto out = net.forward(tape, random_images<float>(1, s.extent, rng), Tensor<float>({1, 1}), nn::Mode::eval, rng);
  const auto& p = tape.value(*out.prob_map);
  const std::size_t vox = p.size() / 2;
  for (std::size_t i = 0; i < vox; ++i) {
    EXPECT_NEAR(p[i] + p[vox + i], 1.0, 1e-6);
    EXPECT_GE(p[vox + i], 0.0f);
    EXPECT_LE(p[vox + i], 1.0f);
  }
}

TEST(Forward, EvalModeIsDeterministic) {
  Rng rng(3);
  const auto s = spec_for(Variant::deep_mts);
  Network<float> net(s, 1);
  const auto x = random_images<float>(2, s.extent, rng);
  Tensor<float> clinical({2, 1});
  clinical[1] = 1;
  nn::Tape<float> t1, t2;
  Rng r1(5), r2(9);
  const auto a = net.forward(t1, x, clinical, nn::Mode::eval, r1);
  const auto b = net.forward(t2, x, clinical, nn::Mode::eval, r2);
  EXPECT_EQ(t1.value(*a.risk), t2.value(*b.risk));
  EXPECT_EQ(t1.value(*a.prob_map), t2.value(*b.prob_map));
}

TEST(Forward, ZeroInputIsFinite) {
  Rng rng(4);
  for (Variant v : {Variant::sur_casnet, Variant::deep_mts}) {
    const auto s = spec_for(v);
    Network<float> net(s, 1);
    nn::Tape<float> tape;
    Tensor<float> zero({1, 2, 32, 32, 16});
    const auto out = net.forward(tape, zero, Tensor<float>({1, 1}), nn::Mode::eval, rng);
    EXPECT_TRUE(tape.value(*out.risk).all_finite());
  }
}

TEST(Forward, ClinicalWidthMismatchThrows) {
  Rng rng(5);
  const auto s = spec_for(Variant::sur_hs);
  Network<float> net(s, 1);
  nn::Tape<float> tape;
  EXPECT_THROW(net.forward(tape, random_images<float>(1, s.extent, rng), Tensor<float>({1, 2}), nn::Mode::eval, rng),
               ValidationError);
}

TEST(Forward, ExtentMismatchThrows) {
  Rng rng(6);
  const auto s = spec_for(Variant::sur_hs);
  Network<float> net(s, 1);
  nn::Tape<float> tape;
  EXPECT_THROW(net.forward(tape, random_images<float>(1, {16, 16, 16}, rng), Tensor<float>({1, 1}), nn::Mode::eval, rng),
               ValidationError);
}

TEST(Forward, FullDeepMtsTrainStepIsFinite) {
  Rng rng(7);
  const auto s = spec_for(Variant::deep_mts);
  Network<float> net(s, 11);
  nn::Tape<float> tape;
  Tensor<float> clinical({2, 1});
  clinical[0] = 1;
  const auto out = net.forward(tape, random_images<float>(2, s.extent, rng), clinical, nn::Mode::train, rng);
  std::vector<std::uint8_t> truth(2 * 32 * 32 * 16, 0);
  for (std::size_t i = 0; i < truth.size(); i += 7) truth[i] = 1;
  const std::vector<SurvivalLabel> labels = {{1.0, true}, {2.0, false}};
  const auto fg = nn::slice_channels(tape, *out.prob_map, 1, 1);
  auto total = nn::add(tape, dice_loss(tape, fg, std::span<const std::uint8_t>(truth)),
                       cox_ph_loss(tape, *out.risk, std::span<const SurvivalLabel>(labels)));
  total = nn::add(tape, total, nn::scale(tape, out.l2, 0.1f));
  EXPECT_TRUE(std::isfinite(tape.value(total)[0]));
  net.params().zero_grad();
  tape.backward(total);
  std::size_t nonzero = 0;
  for (const auto& [key, p] : net.params()) {
    EXPECT_TRUE(p.grad.all_finite()) << key;
    for (float g : p.grad.values()) nonzero += g != 0.0f;
  }
  EXPECT_GT(nonzero, 0u);
}

namespace {

double grad_norm(const Network<double>& net, const std::string& prefix) {
  double acc = 0.0;
  for (const auto& key : net.keys_with_prefix(prefix))
    for (double g : net.params().at(key).grad.values()) acc += g * g;
  return acc;
}

// Survival loss only, so any gradient reaching the decoder would have to
// pass through the probability map.
Network<double> survival_backward(Variant v) {
  Rng rng(8);
  const auto s = spec_for(v, 0.25, {16, 16, 16});
  Network<double> net(s, 13);
  nn::Tape<double> tape;
  const auto out = net.forward(tape, random_images<double>(4, s.extent, rng), Tensor<double>({4, 1}), nn::Mode::eval, rng);
  const std::vector<SurvivalLabel> labels = {{1, true}, {2, true}, {3, false}, {4, true}};
  const auto loss = cox_ph_loss(tape, *out.risk, std::span<const SurvivalLabel>(labels));
  net.params().zero_grad();
  tape.backward(loss);
  return net;
}

}  // namespace

TEST(GradientRouting, SurHsHasNoDecoder) {
  const auto net = survival_backward(Variant::sur_hs);
  EXPECT_TRUE(net.keys_with_prefix("backbone.decoder").empty());
  EXPECT_GT(grad_norm(net, "backbone.encoder"), 0.0);
}

TEST(GradientRouting, MtCasNetSurvivalLossSkipsBackbone) {
  const auto net = survival_backward(Variant::mt_casnet);
  EXPECT_FALSE(net.keys_with_prefix("backbone.decoder").empty());
  EXPECT_TRUE(net.keys_with_prefix("backbone.taps").empty());
  EXPECT_EQ(grad_norm(net, "backbone"), 0.0);
  EXPECT_GT(grad_norm(net, "csn"), 0.0);
}

TEST(GradientRouting, DeepMtsSurvivalReachesEncoderViaTapsOnly) {
  const auto net = survival_backward(Variant::deep_mts);
  EXPECT_GT(grad_norm(net, "backbone.taps"), 0.0);
  EXPECT_GT(grad_norm(net, "backbone.encoder"), 0.0);
  EXPECT_EQ(grad_norm(net, "backbone.decoder"), 0.0);
}

TEST(CsnInput, Channels) {
  Rng rng(9);
  const auto img = random_images<double>(1, {4, 4, 4}, rng);
  Tensor<double> mask({1, 1, 4, 4, 4}, 0.5);
  EXPECT_EQ(assemble_csn_input(img, &mask, CsnInput::concatenation).dim(1), 3u);
  EXPECT_EQ(assemble_csn_input(img, &mask, CsnInput::multiplication).dim(1), 2u);
  EXPECT_EQ(assemble_csn_input(img, &mask, CsnInput::pet_ct_only).dim(1), 2u);
  EXPECT_EQ(assemble_csn_input(img, &mask, CsnInput::mask_only).dim(1), 1u);
  EXPECT_THROW(assemble_csn_input<double>(img, nullptr, CsnInput::multiplication), ValidationError);
  Tensor<double> wrong({1, 1, 4, 4, 2});
  EXPECT_THROW(assemble_csn_input(img, &wrong, CsnInput::concatenation), ValidationError);
}

TEST(CsnInput, IdentityAndZeroMasks) {
  Rng rng(10);
  const auto img = random_images<double>(2, {4, 4, 4}, rng);
  Tensor<double> ones({2, 1, 4, 4, 4}, 1.0), zeros({2, 1, 4, 4, 4});
  EXPECT_EQ(assemble_csn_input(img, &ones, CsnInput::multiplication),
            assemble_csn_input<double>(img, nullptr, CsnInput::pet_ct_only));
  const auto masked = assemble_csn_input(img, &zeros, CsnInput::multiplication);
  for (double v : masked.values()) EXPECT_EQ(v, 0.0);
}

TEST(CsnInput, MultiplicationIgnoresOutsideMask) {
  Rng rng(11);
  auto s = spec_for(Variant::sur_casnet, 0.25, {16, 16, 16});
  s.csn_input = CsnInput::multiplication;
  Network<double> net(s, 2);
  auto x = random_images<double>(1, s.extent, rng);
  Tensor<double> mask({1, 1, 16, 16, 16});
  for (std::size_t z = 4; z < 10; ++z)
    for (std::size_t y = 4; y < 10; ++y)
      for (std::size_t w = 4; w < 10; ++w) mask[(z * 16 + y) * 16 + w] = 1.0;
  const auto risk = [&](const Tensor<double>& in) {
    nn::Tape<double> tape;
    return tape.value(*net.forward(tape, in, Tensor<double>({1, 1}), nn::Mode::eval, rng, &mask).risk)[0];
  };
  const double base = risk(x);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4096; ++i)
      if (mask[i] == 0.0) x[c * 4096 + i] += rng.normal(0, 3);
  EXPECT_EQ(risk(x), base);
}
