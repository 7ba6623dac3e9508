#include "dcs/backbone/backbone.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "dcs/core/error.hpp"
#include "dcs/geometry/distance.hpp"

namespace dcs {

void BackboneConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw Error(fmt::format("backbone: width {} not divisible by {} heads", width, heads));
  }
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
    throw Error(fmt::format("backbone: mask ratio must be in (0, 1), got {}", mask_ratio));
  }
  if (encoder_blocks == 0) throw Error("backbone: need at least one encoder block");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("backbone: dropout must be in [0, 1)");
}

PatchEmbed::PatchEmbed(ParameterSet& params, const std::string& name, std::size_t width, Rng& init)
    : fc1_(params, name + ".fc1", 3, 64, init), fc2_(params, name + ".fc2", 64, width, init) {}

Tensor PatchEmbed::operator()(const Tensor& patches, std::size_t k) const {
  if (k == 0 || patches.dim() != 2 || patches.size(0) == 0 || patches.size(0) % k != 0) {
    throw Error(fmt::format("patch embed: {} rows is not a whole number of non-empty patches of {}",
                            patches.dim() == 2 ? patches.size(0) : 0, k));
  }
  const Tensor f = fc2_(relu(fc1_(patches)));
  return max(reshape(f, Shape{patches.size(0) / k, k, fc2_.out_features()}), 1);
}

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& name,
                                       std::size_t width, std::size_t heads, Rng& init)
    : qkv_(params, name + ".qkv", width, 3 * width, init),
      proj_(params, name + ".proj", width, width, init),
      heads_(heads),
      width_(width) {}

Tensor MultiHeadAttention::operator()(const Tensor& x, AttentionTrace* trace) const {
  const std::size_t dh = width_ / heads_;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor qkv = qkv_(x);
  std::vector<Tensor> outs;
  outs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor q = slice(qkv, 1, h * dh, (h + 1) * dh);
    const Tensor k = slice(qkv, 1, width_ + h * dh, width_ + (h + 1) * dh);
    const Tensor v = slice(qkv, 1, 2 * width_ + h * dh, 2 * width_ + (h + 1) * dh);
    const Tensor attn = softmax(scale(matmul(q, transpose(k)), scale_f), 1);
    if (trace) trace->maps.push_back(attn.detach());
    outs.push_back(matmul(attn, v));
  }
  return proj_(concat(outs, 1));
}

TransformerBlock::TransformerBlock(ParameterSet& params, const std::string& name,
                                   const BackboneConfig& config, Rng& init)
    : norm1_(params, name + ".norm1", config.width),
      attn_(params, name + ".attn", config.width, config.heads, init),
      norm2_(params, name + ".norm2", config.width),
      fc1_(params, name + ".fc1", config.width, config.width * config.mlp_ratio, init),
      fc2_(params, name + ".fc2", config.width * config.mlp_ratio, config.width, init) {}

Tensor TransformerBlock::operator()(const Tensor& x, AttentionTrace* trace) const {
  const Tensor y = add(x, attn_(norm1_(x), trace));
  return add(y, fc2_(relu(fc1_(norm2_(y)))));
}

MaskSplit random_mask(std::size_t groups, double ratio, Rng& rng) {
  const auto m = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(groups)));
  if (m == 0 || m >= groups) {
    throw Error(fmt::format("mask ratio {} with {} groups leaves {} masked and {} visible tokens",
                            ratio, groups, m, groups - std::min(m, groups)));
  }
  auto perm = rng.permutation(groups);
  MaskSplit s;
  s.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  s.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  std::sort(s.masked.begin(), s.masked.end());
  std::sort(s.visible.begin(), s.visible.end());
  return s;
}

MaskSplit random_mask(std::size_t groups, double ratio, std::uint64_t seed) {
  Rng rng(seed);
  return random_mask(groups, ratio, rng);
}

Tensor masked_patch_rows(const Patches& patches, const MaskSplit& split) {
  std::vector<std::size_t> rows;
  rows.reserve(split.masked.size() * patches.k);
  for (std::size_t j : split.masked)
    for (std::size_t r = 0; r < patches.k; ++r) rows.push_back(j * patches.k + r);
  return gather_rows(patches.relative, rows);
}

namespace {

Tensor small_normal(Shape shape, Rng& init) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = 0.02 * init.normal();
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

PointTransformer::PointTransformer(ParameterSet& params, const BackboneConfig& config,
                                   std::size_t patch_points, std::size_t classes, Rng& init)
    : config_(config), k_(patch_points), classes_(classes) {
  config.validate();
  const std::size_t d = config.width;
  embed_ = PatchEmbed(params, "backbone.embed", d, init);
  pos1_ = Linear(params, "backbone.pos.fc1", 3, 128, init);
  pos2_ = Linear(params, "backbone.pos.fc2", 128, d, init);
  for (std::size_t b = 0; b < config.encoder_blocks; ++b)
    blocks_.emplace_back(params, fmt::format("backbone.blocks.{}", b), config, init);
  norm_ = LayerNorm(params, "backbone.norm", d);

  mask_token_ = params.add("mae.mask_token", small_normal(Shape{1, d}, init));
  dpos1_ = Linear(params, "mae.pos.fc1", 3, 128, init);
  dpos2_ = Linear(params, "mae.pos.fc2", 128, d, init);
  for (std::size_t b = 0; b < config.decoder_blocks; ++b)
    dec_blocks_.emplace_back(params, fmt::format("mae.blocks.{}", b), config, init);
  dec_norm_ = LayerNorm(params, "mae.norm", d);
  rec_head_ = Linear(params, "mae.head", d, 3 * patch_points, init);

  cls_token_ = params.add("head.cls_token", small_normal(Shape{1, d}, init));
  cls_pos_ = params.add("head.cls_pos", small_normal(Shape{1, d}, init));
  head1_ = Linear(params, "head.fc1", d, d / 2, init);
  head2_ = Linear(params, "head.fc2", d / 2, classes, init);
}

Tensor PointTransformer::embed(const Patches& patches) const {
  if (patches.k != k_) {
    throw Error(fmt::format("backbone: patches of {} points, model expects {}", patches.k, k_));
  }
  return embed_(patches.relative, k_);
}

Tensor PointTransformer::position(const Tensor& centers) const {
  return pos2_(relu(pos1_(centers)));
}

Tensor PointTransformer::encode(Tensor x, const Tensor& pos, AttentionTrace* trace) const {
  for (const auto& block : blocks_) x = block(add(x, pos), trace);
  return norm_(x);
}

Tensor PointTransformer::encode_decode(const Tensor& tokens, const Tensor& centers,
                                       const MaskSplit& split, AttentionTrace* trace) const {
  const std::size_t g = tokens.size(0);
  if (centers.size(0) != g || split.masked.size() + split.visible.size() != g) {
    throw Error(fmt::format("encode_decode: {} tokens, {} centers, mask over {}", g, centers.size(0),
                            split.masked.size() + split.visible.size()));
  }
  if (split.masked.empty() || split.visible.empty()) {
    throw Error("encode_decode: need at least one masked and one visible token");
  }
  const std::size_t m = split.masked.size();
  const Tensor vis_centers = gather_rows(centers, split.visible);
  const Tensor mask_centers = gather_rows(centers, split.masked);
  const Tensor encoded = encode(gather_rows(tokens, split.visible), position(vis_centers), trace);

  Tensor x = concat({encoded, broadcast_to(mask_token_, Shape{m, config_.width})}, 0);
  const Tensor dpos = dpos2_(relu(dpos1_(concat({vis_centers, mask_centers}, 0))));
  for (const auto& block : dec_blocks_) x = block(add(x, dpos), trace);
  x = dec_norm_(x);
  const Tensor out = rec_head_(slice(x, 0, g - m, g));
  return reshape(out, Shape{m * k_, 3});
}

Tensor PointTransformer::features(const Tensor& tokens, const Tensor& centers) const {
  const Tensor x = concat({cls_token_, tokens}, 0);
  const Tensor pos = concat({cls_pos_, position(centers)}, 0);
  return slice(encode(x, pos, nullptr), 0, 0, 1);
}

Tensor PointTransformer::classify(const Tensor& tokens, const Tensor& centers,
                                  const ForwardContext& ctx) const {
  const Tensor f = features(tokens, centers);
  return head2_(dropout(relu(head1_(f)), config_.dropout, ctx));
}

Tensor local_recon_loss(const Tensor& predicted, const Tensor& truth, std::size_t k) {
  if (predicted.shape() != truth.shape()) {
    throw Error(fmt::format("local loss: shape mismatch {} vs {}", shape_string(predicted.shape()),
                            shape_string(truth.shape())));
  }
  if (k == 0 || predicted.dim() != 2 || predicted.size(0) % k != 0 || predicted.size(0) == 0) {
    throw Error(fmt::format("local loss: {} is not a whole number of {}-point patches",
                            shape_string(predicted.shape()), k));
  }
  const std::size_t p = predicted.size(0) / k;
  Tensor total;
  for (std::size_t j = 0; j < p; ++j) {
    Tensor l = chamfer(slice(predicted, 0, j * k, (j + 1) * k), slice(truth, 0, j * k, (j + 1) * k),
                       ChamferForm::L2);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(p));
}

}  // namespace dcs
