#pragma once

// Instruction-routed transformer UNet. A 3x3 shallow embedding feeds a 4-level
// encoder / bottleneck / decoder of channel-attention transformer blocks, a
// refinement stack, and a 3x3 head whose output is added to the input image.
// Spatial routers sit in front of encoder levels 1-3; channel routers sit in
// front of the bottleneck and decoder levels 3, 2, 1.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "amir/routing.hpp"

namespace amir {

struct AmirConfig {
  std::int64_t channels = 42;
  std::array<std::int64_t, 4> blocks = {5, 7, 7, 9};  // encoder levels 1-3 and bottleneck
  std::int64_t refinement_blocks = 4;
  std::array<std::int64_t, 4> heads = {1, 2, 4, 8};
  double ffn_expansion = 2.66;
  std::int64_t dictionary_size = 16;
  std::int64_t experts = 4;
  std::int64_t top_k = 2;
  bool enable_srm = true;
  bool enable_crm = true;
  bool use_dictionary = true;

  bool routing_enabled() const { return enable_srm || enable_crm; }

  /// Throws a config error naming the offending field.
  void validate() const;

  static AmirConfig paper_default();
  static AmirConfig desk_scale();
  /// Routing-free network at the reference width (C=48, blocks 4/6/6/8, 4 refinement).
  static AmirConfig restormer_reference();
};

/// Layer norm across channels at each pixel, with affine weight and bias.
class ChannelLayerNormImpl : public torch::nn::Module {
 public:
  explicit ChannelLayerNormImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;
};
TORCH_MODULE(ChannelLayerNorm);

/// Multi-head attention across channels (transposed attention): queries and
/// keys are L2-normalized along the spatial axis and the C/h x C/h attention
/// map is scaled by a learned per-head temperature.
class ChannelAttentionImpl : public torch::nn::Module {
 public:
  ChannelAttentionImpl(std::int64_t channels, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  std::int64_t heads_;
  torch::Tensor temperature_;
  torch::nn::Conv2d qkv_{nullptr};
  torch::nn::Conv2d qkv_dw_{nullptr};
  torch::nn::Conv2d project_out_{nullptr};
};
TORCH_MODULE(ChannelAttention);

/// Gated depthwise-conv feed-forward: GELU(a) * b with [a, b] = dw(pw(x)).
class GatedFeedForwardImpl : public torch::nn::Module {
 public:
  GatedFeedForwardImpl(std::int64_t channels, double expansion);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d project_in_{nullptr};
  torch::nn::Conv2d dw_{nullptr};
  torch::nn::Conv2d project_out_{nullptr};
};
TORCH_MODULE(GatedFeedForward);

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(std::int64_t channels, std::int64_t heads, double expansion);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ChannelLayerNorm norm1_{nullptr};
  ChannelAttention attn_{nullptr};
  ChannelLayerNorm norm2_{nullptr};
  GatedFeedForward ffn_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// [B, C, H, W] -> [B, 2C, H/2, W/2] via a 3x3 conv to C/2 and pixel-unshuffle.
class DownsampleImpl : public torch::nn::Module {
 public:
  explicit DownsampleImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Downsample);

/// [B, C, H, W] -> [B, C/2, 2H, 2W] via a 3x3 conv to 2C and pixel-shuffle.
class UpsampleImpl : public torch::nn::Module {
 public:
  explicit UpsampleImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(Upsample);

struct ForwardResult {
  torch::Tensor output;               // [B, 1, H, W]
  Instruction instruction;            // undefined when routing is disabled
  std::vector<GateDecision> gates;    // one per spatial router, in forward order
};

class AmirModelImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kSpatialMultiple = 8;

  explicit AmirModelImpl(const AmirConfig& config);

  /// Infers the instruction from `image` and restores it. `image` is
  /// [B, 1, H, W] with H and W divisible by 8.
  ForwardResult forward(const torch::Tensor& image);

  /// Restores with an externally supplied instruction shared by every router.
  ForwardResult forward(const torch::Tensor& image, const Instruction& instruction);

  Instruction infer_instruction(const torch::Tensor& image);

  const AmirConfig& config() const { return config_; }

  /// Ordered stage names of one forward pass, e.g. "srm1", "encoder1", ...
  std::vector<std::string> topology() const;

  /// Parameter-name prefixes of every transformer block in forward order.
  std::vector<std::string> block_prefixes() const;

  std::int64_t spatial_router_count() const { return static_cast<std::int64_t>(srms_.size()); }
  std::int64_t channel_router_count() const { return static_cast<std::int64_t>(crms_.size()); }
  SpatialRouter spatial_router(std::int64_t i) const { return srms_.at(static_cast<std::size_t>(i)); }
  RoutingInstructionNetwork instruction_network() const { return rin_; }

  /// Zeroes the output conv so the network returns its input unchanged.
  void zero_residual_head();

  /// Enables the per-block finite check (on by default in debug builds).
  void set_debug_checks(bool on) { debug_checks_ = on; }

 private:
  torch::Tensor run_stack(torch::nn::ModuleList& stack, torch::Tensor x, const char* name) const;

  AmirConfig config_;
  bool debug_checks_;

  RoutingInstructionNetwork rin_{nullptr};
  std::vector<SpatialRouter> srms_;
  std::vector<ChannelRouter> crms_;  // latent, decoder3, decoder2, decoder1

  torch::nn::Conv2d shallow_{nullptr};
  torch::nn::ModuleList encoder1_, encoder2_, encoder3_, latent_;
  Downsample down1_{nullptr}, down2_{nullptr}, down3_{nullptr};
  Upsample up3_{nullptr}, up2_{nullptr}, up1_{nullptr};
  torch::nn::Conv2d reduce3_{nullptr}, reduce2_{nullptr};
  torch::nn::ModuleList decoder3_, decoder2_, decoder1_, refinement_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(AmirModel);

std::int64_t count_parameters(const torch::nn::Module& module);

/// Routing-free configuration whose parameter count is as close as possible to
/// `target_params`: the widest even width not exceeding the budget, then the
/// FFN expansion factor tuned to close the remaining gap.
AmirConfig budget_matched_backbone(const AmirConfig& base, std::int64_t target_params);

/// Reflect-pads [H, W] (or [B, 1, H, W]) to the next multiple of 8, runs the
/// model without gradients, and crops back. H, W must be at least 32.
torch::Tensor restore_image(AmirModel& model, const torch::Tensor& image);

}  // namespace amir
