#pragma once

// Task-adaptive routing primitives: instruction inference from the input image,
// instruction-guided sparse mixture-of-experts over spatial tokens, and
// instruction-derived channel masking.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace amir {

inline constexpr std::int64_t kInstructionDim = 256;

/// Input-conditioned instruction. `vector` is [B, 256]; `weights` is [B, N] and
/// holds the softmax mixing weights over the dictionary (undefined when the
/// network runs without a dictionary).
struct Instruction {
  torch::Tensor vector;
  torch::Tensor weights;
};

/// alpha = softmax(logits) over the last dim, vector = alpha * dictionary.
/// `logits` is [B, N], `dictionary` is [N, 256].
Instruction mix_dictionary(const torch::Tensor& logits, const torch::Tensor& dictionary);

/// Five stride-2 3x3 conv stages (1 -> 32 -> 64 -> 128 -> 256 -> out_channels)
/// followed by global average pooling. Returns [B, out_channels].
class InstructionEncoderImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kMinSpatial = 32;

  explicit InstructionEncoderImpl(std::int64_t out_channels);

  torch::Tensor forward(const torch::Tensor& image);

  /// Pre-pooling feature map of the last stage.
  torch::Tensor features(const torch::Tensor& image);

  std::int64_t out_channels() const { return out_channels_; }

 private:
  std::int64_t out_channels_;
  std::vector<torch::nn::Conv2d> stages_;
};
TORCH_MODULE(InstructionEncoder);

/// Routing instruction network: encoder logits mixed over a learnable
/// dictionary of N 256-dim entries. With `use_dictionary == false` the encoder
/// emits 256 channels directly and the pooled output is the instruction.
class RoutingInstructionNetworkImpl : public torch::nn::Module {
 public:
  RoutingInstructionNetworkImpl(std::int64_t dictionary_size, bool use_dictionary = true);

  /// `image` is [B, 1, H, W] with H, W >= 32. Throws a shape error for smaller
  /// inputs and a numerical error if any pooled logit is non-finite.
  Instruction forward(const torch::Tensor& image);

  bool uses_dictionary() const { return use_dictionary_; }
  std::int64_t dictionary_size() const { return dictionary_size_; }

  InstructionEncoder encoder{nullptr};
  torch::Tensor dictionary;  // [N, 256]; undefined without a dictionary

 private:
  std::int64_t dictionary_size_;
  bool use_dictionary_;
};
TORCH_MODULE(RoutingInstructionNetwork);

/// Sparse per-token expert weights. `weights` is [T, M] with exactly K nonzero
/// entries per row; each kept entry is the unrenormalized softmax probability.
/// `selected` is [T, K] (int64), ordered by decreasing weight with ties going
/// to the lower expert index, so column 0 is the top-1 expert.
struct GateDecision {
  torch::Tensor weights;
  torch::Tensor selected;

  std::int64_t num_tokens() const { return weights.size(0); }
  std::int64_t num_experts() const { return weights.size(1); }
  std::int64_t top_k() const { return selected.size(1); }
};

/// softmax over M followed by Top-K (all but the K largest probabilities set to
/// exact zero). Throws a config error when k is outside [1, M].
GateDecision top_k_gate(const torch::Tensor& logits, std::int64_t k);

/// Softmax weights restricted to a given selection [T, K]; differentiable in
/// `logits` with the support held fixed.
GateDecision gate_with_selection(const torch::Tensor& logits, const torch::Tensor& selected);

/// Gating network G(x, I) = Top-K(Softmax(FC([x, FC(I)]))). The instruction is
/// projected to the token width before concatenation.
class GateImpl : public torch::nn::Module {
 public:
  GateImpl(std::int64_t channels, std::int64_t num_experts, std::int64_t top_k);

  /// `tokens` is [B, T, C]; `instruction` is [B, 256]. Returns a decision over
  /// all B*T tokens (row b*T + t).
  GateDecision forward(const torch::Tensor& tokens, const torch::Tensor& instruction);

  torch::Tensor logits(const torch::Tensor& tokens, const torch::Tensor& instruction);

  std::int64_t channels() const { return channels_; }
  std::int64_t top_k() const { return top_k_; }

  torch::nn::Linear instruction_proj{nullptr};
  torch::nn::Linear router{nullptr};

 private:
  std::int64_t channels_;
  std::int64_t top_k_;
};
TORCH_MODULE(Gate);

using ExpertFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// out[t] = sum_e weights[t, e] * expert_e(tokens[t]), evaluating each expert
/// only on the tokens that selected it. `tokens` is [T, C].
torch::Tensor combine_experts(const torch::Tensor& tokens, const GateDecision& decision,
                              std::span<const ExpertFn> experts);

/// M independent token-wise MLPs C -> 2C -> C with GELU.
class ExpertBankImpl : public torch::nn::Module {
 public:
  ExpertBankImpl(std::int64_t channels, std::int64_t num_experts);

  torch::Tensor forward(const torch::Tensor& tokens, const GateDecision& decision);

  std::int64_t channels() const { return channels_; }
  std::int64_t size() const { return static_cast<std::int64_t>(experts_.size()); }
  torch::nn::Sequential expert(std::int64_t e) const { return experts_.at(static_cast<std::size_t>(e)); }

 private:
  std::int64_t channels_;
  std::vector<torch::nn::Sequential> experts_;
};
TORCH_MODULE(ExpertBank);

struct RoutedFeatures {
  torch::Tensor features;  // [B, C, H, W]
  GateDecision decision;
};

/// Spatial routing module: every pixel of a [B, C, H, W] map is a token routed
/// to its top-K experts; the output keeps the input shape.
class SpatialRouterImpl : public torch::nn::Module {
 public:
  SpatialRouterImpl(std::int64_t channels, std::int64_t num_experts, std::int64_t top_k);

  RoutedFeatures forward(const torch::Tensor& features, const Instruction& instruction);

  /// Routes with a caller-supplied decision (selection held fixed).
  torch::Tensor route_with(const torch::Tensor& features, const GateDecision& decision);

  Gate gate{nullptr};
  ExpertBank experts{nullptr};
};
TORCH_MODULE(SpatialRouter);

/// sigmoid(logits), kept strictly inside (0, 1) for the tensor's dtype.
torch::Tensor soft_binary_mask(const torch::Tensor& logits);

/// Channel routing module: X' = X * sigmoid(FC(I)), the same mask at every pixel.
class ChannelRouterImpl : public torch::nn::Module {
 public:
  explicit ChannelRouterImpl(std::int64_t channels);

  torch::Tensor mask(const Instruction& instruction);  // [B, C]
  torch::Tensor forward(const torch::Tensor& features, const Instruction& instruction);

  std::int64_t channels() const { return channels_; }

  torch::nn::Linear fc{nullptr};

 private:
  std::int64_t channels_;
};
TORCH_MODULE(ChannelRouter);

/// [B, C, H, W] -> [B, H*W, C]
torch::Tensor to_tokens(const torch::Tensor& features);
/// [B*H*W, C] -> [B, C, H, W]
torch::Tensor from_tokens(const torch::Tensor& tokens, std::int64_t batch, std::int64_t height, std::int64_t width);

/// Per-expert importance: sum over all tokens of the gate weight. Returns [M].
torch::Tensor expert_importance(std::span<const GateDecision> decisions);

/// Squared coefficient of variation with population variance. Throws an
/// invariant error if the mean is zero.
torch::Tensor cv_squared(const torch::Tensor& importance);

/// CV^2 of the importance accumulated over a batch of decisions from one
/// routing module. Differentiable with respect to the kept weights.
torch::Tensor balance_loss(std::span<const GateDecision> decisions);

}  // namespace amir
