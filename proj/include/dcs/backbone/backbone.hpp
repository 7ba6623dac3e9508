#pragma once

#include <string>
#include <vector>

#include "dcs/core/nn.hpp"
#include "dcs/geometry/grouping.hpp"

namespace dcs {

struct BackboneConfig {
  std::size_t width = 96;
  std::size_t encoder_blocks = 3;
  std::size_t heads = 4;
  std::size_t decoder_blocks = 1;
  std::size_t mlp_ratio = 4;
  double mask_ratio = 0.6;
  double dropout = 0.5;

  void validate() const;
};

/// Shared per-point MLP 3 -> 64 -> D followed by a max-pool over each patch.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParameterSet& params, const std::string& name, std::size_t width, Rng& init);

  /// [(G*k) x 3] stacked patches -> [G x D].
  Tensor operator()(const Tensor& patches, std::size_t k) const;

 private:
  Linear fc1_;
  Linear fc2_;
};

/// Row-stochastic attention maps recorded during a forward pass, one
/// [T x T] tensor per block and head.
struct AttentionTrace {
  std::vector<Tensor> maps;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, const std::string& name, std::size_t width,
                     std::size_t heads, Rng& init);

  Tensor operator()(const Tensor& x, AttentionTrace* trace = nullptr) const;

 private:
  Linear qkv_;
  Linear proj_;
  std::size_t heads_ = 1;
  std::size_t width_ = 0;
};

/// Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterSet& params, const std::string& name, const BackboneConfig& config,
                   Rng& init);

  Tensor operator()(const Tensor& x, AttentionTrace* trace = nullptr) const;

 private:
  LayerNorm norm1_;
  MultiHeadAttention attn_;
  LayerNorm norm2_;
  Linear fc1_;
  Linear fc2_;
};

struct MaskSplit {
  std::vector<std::size_t> masked;   ///< ascending
  std::vector<std::size_t> visible;  ///< ascending
};

/// floor(ratio * groups) masked tokens chosen uniformly. Throws when either
/// side would be empty.
MaskSplit random_mask(std::size_t groups, double ratio, Rng& rng);
MaskSplit random_mask(std::size_t groups, double ratio, std::uint64_t seed);

/// Rows of the masked patches of `patches`, in the order of `split.masked`.
Tensor masked_patch_rows(const Patches& patches, const MaskSplit& split);

/// Small masked point autoencoder with a classification head.
///
/// Parameter names: "backbone.*" for the patch embedding, positional MLP,
/// encoder blocks and final norm; "mae.*" for the mask token and decoder;
/// "head.*" for the classification token and MLP.
class PointTransformer {
 public:
  PointTransformer() = default;
  PointTransformer(ParameterSet& params, const BackboneConfig& config, std::size_t patch_points,
                   std::size_t classes, Rng& init);

  /// Patch tokens [G x D].
  Tensor embed(const Patches& patches) const;
  /// Positional encoding [G x D] of centers [G x 3].
  Tensor position(const Tensor& centers) const;

  /// Encodes the visible tokens and decodes the masked ones to
  /// [(masked * k) x 3] relative coordinates.
  Tensor encode_decode(const Tensor& tokens, const Tensor& centers, const MaskSplit& split,
                       AttentionTrace* trace = nullptr) const;

  /// Classification-token feature [1 x D] after the encoder.
  Tensor features(const Tensor& tokens, const Tensor& centers) const;
  /// Class logits [1 x C].
  Tensor classify(const Tensor& tokens, const Tensor& centers, const ForwardContext& ctx) const;

  const BackboneConfig& config() const { return config_; }
  std::size_t patch_points() const { return k_; }
  std::size_t classes() const { return classes_; }

 private:
  Tensor encode(Tensor x, const Tensor& pos, AttentionTrace* trace) const;

  BackboneConfig config_;
  std::size_t k_ = 0;
  std::size_t classes_ = 0;
  PatchEmbed embed_;
  Linear pos1_, pos2_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm norm_;
  Tensor mask_token_;
  Linear dpos1_, dpos2_;
  std::vector<TransformerBlock> dec_blocks_;
  LayerNorm dec_norm_;
  Linear rec_head_;
  Tensor cls_token_;
  Tensor cls_pos_;
  Linear head1_, head2_;
};

/// Mean over patches of the L2 chamfer distance between predicted and true
/// [(P*k) x 3] relative patches.
Tensor local_recon_loss(const Tensor& predicted, const Tensor& truth, std::size_t k);

}  // namespace dcs
