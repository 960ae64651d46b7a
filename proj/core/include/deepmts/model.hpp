#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deepmts/ops.hpp"
#include "deepmts/param_store.hpp"
#include "deepmts/rng.hpp"
#include "deepmts/tape.hpp"

namespace deepmts::model {

using deepmts::to_string;
using nn::Extent3;

/// The full model and its five ablations.
enum class Variant { deep_mts, seg_backbone, sur_hs, sur_casnet, mt_hs, mt_casnet };
enum class Backbone { custom_residual, plain_unet };
/// How the cascaded survival network sees the tumour mask.
enum class CsnInput { concatenation, multiplication, pet_ct_only, mask_only };

std::string to_string(Variant v);
std::string to_string(Backbone b);
std::string to_string(CsnInput c);
Variant parse_variant(const std::string& s);
Backbone parse_backbone(const std::string& s);
CsnInput parse_csn_input(const std::string& s);

inline constexpr std::size_t kHeadUnits = 64;
inline constexpr double kHeadDropout = 0.5;
inline constexpr double kCsnDropout = 0.05;

struct ArchSpec {
  Variant variant = Variant::deep_mts;
  Backbone backbone = Backbone::custom_residual;
  CsnInput csn_input = CsnInput::concatenation;
  double width = 0.25;
  Extent3 extent{32, 32, 16};
  std::size_t clinical_dim = 1;

  /// Defaults for a variant: Sur-CasNet reads PET/CT only, the others
  /// concatenate the mask.
  static ArchSpec for_variant(Variant v);

  void validate() const;

  bool has_encoder() const { return variant != Variant::sur_casnet; }
  bool has_decoder() const {
    return variant == Variant::seg_backbone || variant == Variant::mt_hs || variant == Variant::mt_casnet ||
           variant == Variant::deep_mts;
  }
  bool has_taps() const { return variant == Variant::sur_hs || variant == Variant::mt_hs || variant == Variant::deep_mts; }
  bool has_csn() const {
    return variant == Variant::sur_casnet || variant == Variant::mt_casnet || variant == Variant::deep_mts;
  }
  bool has_head() const { return variant != Variant::seg_backbone; }
  bool csn_needs_mask() const { return has_csn() && csn_input != CsnInput::pet_ct_only; }
  /// Sur-CasNet has no segmentation branch, so its mask comes from labels.
  bool needs_manual_mask() const { return variant == Variant::sur_casnet && csn_needs_mask(); }
  bool trains_segmentation() const { return has_decoder(); }
  bool trains_survival() const { return has_head(); }

  /// ceil(width * m) with a small guard against rounding noise.
  std::size_t scaled(std::size_t channels) const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// Residual block "n x m": n stacked 3x3x3 convs with m filters.
struct BlockPlan {
  std::size_t convs;
  std::size_t channels;
};

struct ChannelPlan {
  std::vector<BlockPlan> encoder;  // scales 1, 1/2, ..., 1/16
  std::vector<BlockPlan> decoder;  // scales 1/8 ... 1
  std::vector<std::size_t> backbone_taps;
  std::size_t csn_stem = 0;
  std::size_t csn_growth = 0;
  std::size_t csn_bottleneck = 0;
  std::vector<std::size_t> csn_block_layers;  // 4, 8, 16
  std::vector<std::size_t> csn_transitions;
};

ChannelPlan channel_plan(const ArchSpec& spec);

struct FeatureDims {
  std::size_t backbone = 0;  // F_b, 0 when the variant has no taps
  std::size_t csn = 0;       // F_c, 0 without a CSN
  std::size_t head_input = 0;  // FC3 input width
};

/// Shapes derived purely from the layer shape rules, without running the
/// network.
struct ShapeWalk {
  std::vector<std::pair<std::string, Shape>> layers;
  std::optional<Shape> prob_map;
  FeatureDims dims;
};

ShapeWalk walk_shapes(const ArchSpec& spec, std::size_t batch = 1);

struct ModelOutput {
  std::optional<nn::Var> risk;               // (N, 1)
  std::optional<nn::Var> prob_map;           // (N, 2, D, H, W), channel 1 = tumour
  std::optional<nn::Var> backbone_features;  // (N, F_b)
  std::optional<nn::Var> csn_features;       // (N, F_c)
  std::optional<nn::Var> head_input;         // (N, FC3 inputs)
  nn::Var l2;                                // sum of squared FC weights
};

/// Stack PET/CT (N, 2, ...) with a mask (N, 1, ...) per strategy.
template <class T>
nn::Var assemble_csn_input(nn::Tape<T>& tape, nn::Var pet_ct, std::optional<nn::Var> mask, CsnInput strategy);

template <class T>
Tensor<T> assemble_csn_input(const Tensor<T>& pet_ct, const Tensor<T>* mask, CsnInput strategy);

template <class T>
class Network {
 public:
  Network(ArchSpec spec, std::uint64_t init_seed);

  const ArchSpec& spec() const noexcept { return spec_; }
  nn::ParamStore<T>& params() noexcept { return params_; }
  const nn::ParamStore<T>& params() const noexcept { return params_; }
  std::size_t parameter_count() const { return params_.trainable_count(); }
  FeatureDims feature_dims() const { return walk_shapes(spec_).dims; }

  /// images: (N, 2, D, H, W) PET then CT. clinical: (N, clinical_dim).
  /// manual_mask: (N, 1, D, H, W), consulted only by Sur-CasNet.
  ModelOutput forward(nn::Tape<T>& tape, const Tensor<T>& images, const Tensor<T>& clinical, nn::Mode mode, Rng& rng,
                      const Tensor<T>* manual_mask = nullptr);

  /// Keys of parameters that belong to a component ("backbone.encoder",
  /// "backbone.decoder", "backbone.taps", "csn", "head").
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

 private:
  ArchSpec spec_;
  ChannelPlan plan_;
  nn::ParamStore<T> params_;
};

using Model = Network<float>;

}  // namespace deepmts::model
