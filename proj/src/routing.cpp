#include "amir/routing.hpp"

#include <array>
#include <limits>
#include <string>

#include "amir/errors.hpp"

namespace amir {

namespace F = torch::nn::functional;

Instruction mix_dictionary(const torch::Tensor& logits, const torch::Tensor& dictionary) {
  if (logits.dim() != 2 || dictionary.dim() != 2 || logits.size(1) != dictionary.size(0)) {
    throw_shape("dictionary mixing expects logits [B, N] and dictionary [N, D]");
  }
  auto alpha = torch::softmax(logits, /*dim=*/1);
  return {torch::matmul(alpha, dictionary), alpha};
}

InstructionEncoderImpl::InstructionEncoderImpl(std::int64_t out_channels) : out_channels_(out_channels) {
  const std::array<std::int64_t, 6> widths = {1, 32, 64, 128, 256, out_channels};
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    auto conv = torch::nn::Conv2d(
        torch::nn::Conv2dOptions(widths[i], widths[i + 1], 3).stride(2).padding(1).bias(true));
    stages_.push_back(register_module("stage" + std::to_string(i), conv));
  }
}

torch::Tensor InstructionEncoderImpl::features(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 1) throw_shape("instruction encoder expects [B, 1, H, W]");
  if (image.size(2) < kMinSpatial || image.size(3) < kMinSpatial) {
    throw_shape("instruction encoder needs at least " + std::to_string(kMinSpatial) + "x" +
                std::to_string(kMinSpatial) + " input, got " + std::to_string(image.size(2)) + "x" +
                std::to_string(image.size(3)));
  }
  auto x = image;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    x = stages_[i]->forward(x);
    // the last stage emits the mixing logits directly
    if (i + 1 < stages_.size()) x = F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(0.2));
  }
  return x;
}

torch::Tensor InstructionEncoderImpl::forward(const torch::Tensor& image) {
  return features(image).mean({2, 3});
}

RoutingInstructionNetworkImpl::RoutingInstructionNetworkImpl(std::int64_t dictionary_size, bool use_dictionary)
    : dictionary_size_(dictionary_size), use_dictionary_(use_dictionary) {
  if (dictionary_size <= 0) throw_config("dictionary_size must be positive");
  encoder = register_module("encoder", InstructionEncoder(use_dictionary ? dictionary_size : kInstructionDim));
  if (use_dictionary) {
    dictionary = register_parameter("dictionary", torch::randn({dictionary_size, kInstructionDim}) * 0.02);
  }
}

Instruction RoutingInstructionNetworkImpl::forward(const torch::Tensor& image) {
  auto logits = encoder->forward(image);
  if (!torch::isfinite(logits).all().item<bool>()) {
    throw_numerical("instruction encoder produced non-finite activations");
  }
  if (!use_dictionary_) return {logits, torch::Tensor()};
  return mix_dictionary(logits, dictionary);
}

GateDecision top_k_gate(const torch::Tensor& logits, std::int64_t k) {
  if (logits.dim() != 2) throw_shape("gate logits must be [T, M]");
  const auto m = logits.size(1);
  if (k < 1 || k > m) {
    throw_config("top_k must satisfy 1 <= top_k <= experts (got top_k=" + std::to_string(k) +
                 ", experts=" + std::to_string(m) + ")");
  }
  auto probs = torch::softmax(logits, /*dim=*/1);
  // A stable descending sort keeps equal probabilities in index order, so ties
  // resolve to the lowest expert index.
  auto order = std::get<1>(torch::sort(probs.detach(), /*stable=*/true, /*dim=*/1, /*descending=*/true));
  return gate_with_selection(logits, order.narrow(1, 0, k).contiguous());
}

GateDecision gate_with_selection(const torch::Tensor& logits, const torch::Tensor& selected) {
  if (logits.dim() != 2 || selected.dim() != 2 || selected.size(0) != logits.size(0)) {
    throw_shape("selection must be [T, K] for logits [T, M]");
  }
  auto probs = torch::softmax(logits, /*dim=*/1);
  auto keep = torch::zeros_like(probs).scatter_(1, selected, 1.0);
  return {probs * keep, selected};
}

GateImpl::GateImpl(std::int64_t channels, std::int64_t num_experts, std::int64_t top_k)
    : channels_(channels), top_k_(top_k) {
  if (top_k < 1 || top_k > num_experts) {
    throw_config("top_k must satisfy 1 <= top_k <= experts (got top_k=" + std::to_string(top_k) +
                 ", experts=" + std::to_string(num_experts) + ")");
  }
  instruction_proj = register_module("instruction_proj", torch::nn::Linear(kInstructionDim, channels));
  router = register_module("router", torch::nn::Linear(2 * channels, num_experts));
}

torch::Tensor GateImpl::logits(const torch::Tensor& tokens, const torch::Tensor& instruction) {
  if (tokens.dim() != 3 || tokens.size(2) != channels_) {
    throw_shape("gate expects tokens [B, T, " + std::to_string(channels_) + "]");
  }
  if (instruction.dim() != 2 || instruction.size(0) != tokens.size(0)) {
    throw_shape("gate expects one instruction per batch element");
  }
  const auto b = tokens.size(0);
  const auto t = tokens.size(1);
  auto projected = instruction_proj->forward(instruction).unsqueeze(1).expand({b, t, channels_});
  auto joint = torch::cat({tokens, projected}, /*dim=*/2).reshape({b * t, 2 * channels_});
  return router->forward(joint);
}

GateDecision GateImpl::forward(const torch::Tensor& tokens, const torch::Tensor& instruction) {
  return top_k_gate(logits(tokens, instruction), top_k_);
}

torch::Tensor combine_experts(const torch::Tensor& tokens, const GateDecision& decision,
                              std::span<const ExpertFn> experts) {
  if (tokens.dim() != 2 || tokens.size(0) != decision.num_tokens()) {
    throw_shape("combine_experts expects tokens [T, C] matching the gate decision");
  }
  if (static_cast<std::int64_t>(experts.size()) != decision.num_experts()) {
    throw_shape("expert bank size differs from the gate width");
  }
  auto out = torch::zeros_like(tokens);
  for (std::int64_t e = 0; e < decision.num_experts(); ++e) {
    auto rows = (decision.selected == e).any(/*dim=*/1).nonzero().squeeze(1);
    if (rows.numel() == 0) continue;
    auto weight = decision.weights.index_select(0, rows).select(1, e).unsqueeze(1);
    auto contribution = experts[static_cast<std::size_t>(e)](tokens.index_select(0, rows));
    out = out.index_add(0, rows, weight * contribution);
  }
  return out;
}

ExpertBankImpl::ExpertBankImpl(std::int64_t channels, std::int64_t num_experts) : channels_(channels) {
  for (std::int64_t e = 0; e < num_experts; ++e) {
    auto mlp = torch::nn::Sequential(torch::nn::Linear(channels, 2 * channels), torch::nn::GELU(),
                                     torch::nn::Linear(2 * channels, channels));
    experts_.push_back(register_module("expert" + std::to_string(e), mlp));
  }
}

torch::Tensor ExpertBankImpl::forward(const torch::Tensor& tokens, const GateDecision& decision) {
  if (tokens.dim() != 2 || tokens.size(1) != channels_) {
    throw_shape("expert bank of width " + std::to_string(channels_) + " got tokens of width " +
                std::to_string(tokens.dim() == 2 ? tokens.size(1) : -1));
  }
  std::vector<ExpertFn> fns;
  fns.reserve(experts_.size());
  for (auto& mlp : experts_) fns.emplace_back([mlp](const torch::Tensor& x) mutable { return mlp->forward(x); });
  return combine_experts(tokens, decision, fns);
}

torch::Tensor to_tokens(const torch::Tensor& features) {
  const auto b = features.size(0);
  const auto c = features.size(1);
  return features.permute({0, 2, 3, 1}).reshape({b, features.size(2) * features.size(3), c});
}

torch::Tensor from_tokens(const torch::Tensor& tokens, std::int64_t batch, std::int64_t height, std::int64_t width) {
  return tokens.reshape({batch, height, width, tokens.size(-1)}).permute({0, 3, 1, 2}).contiguous();
}

SpatialRouterImpl::SpatialRouterImpl(std::int64_t channels, std::int64_t num_experts, std::int64_t top_k) {
  gate = register_module("gate", Gate(channels, num_experts, top_k));
  experts = register_module("experts", ExpertBank(channels, num_experts));
}

RoutedFeatures SpatialRouterImpl::forward(const torch::Tensor& features, const Instruction& instruction) {
  if (features.dim() != 4 || features.size(1) != experts->channels()) {
    throw_shape("spatial router of width " + std::to_string(experts->channels()) +
                " got a feature map with " + std::to_string(features.dim() == 4 ? features.size(1) : -1) +
                " channels");
  }
  auto decision = gate->forward(to_tokens(features), instruction.vector);
  return {route_with(features, decision), decision};
}

torch::Tensor SpatialRouterImpl::route_with(const torch::Tensor& features, const GateDecision& decision) {
  const auto b = features.size(0);
  const auto c = features.size(1);
  auto tokens = to_tokens(features).reshape({-1, c});
  return from_tokens(experts->forward(tokens, decision), b, features.size(2), features.size(3));
}

torch::Tensor soft_binary_mask(const torch::Tensor& logits) {
  // Plain sigmoid rounds to 0 or 1 for large |logit| in float32.
  const double eps = logits.scalar_type() == torch::kFloat64 ? std::numeric_limits<double>::epsilon()
                                                             : std::numeric_limits<float>::epsilon();
  return torch::sigmoid(logits).clamp(eps, 1.0 - eps);
}

ChannelRouterImpl::ChannelRouterImpl(std::int64_t channels) : channels_(channels) {
  fc = register_module("fc", torch::nn::Linear(kInstructionDim, channels));
}

torch::Tensor ChannelRouterImpl::mask(const Instruction& instruction) {
  return soft_binary_mask(fc->forward(instruction.vector));
}

torch::Tensor ChannelRouterImpl::forward(const torch::Tensor& features, const Instruction& instruction) {
  if (features.dim() != 4 || features.size(1) != channels_) {
    throw_shape("channel router of width " + std::to_string(channels_) + " got a mismatched feature map");
  }
  auto m = mask(instruction);
  return features * m.view({m.size(0), channels_, 1, 1});
}

torch::Tensor expert_importance(std::span<const GateDecision> decisions) {
  if (decisions.empty()) throw_parameter("balance loss needs at least one gate decision");
  auto total = decisions.front().weights.sum(0);
  for (std::size_t i = 1; i < decisions.size(); ++i) total = total + decisions[i].weights.sum(0);
  return total;
}

torch::Tensor cv_squared(const torch::Tensor& importance) {
  auto mean = importance.mean();
  if (mean.item<double>() == 0.0) throw_invariant("expert importance is identically zero");
  auto variance = (importance - mean).pow(2).mean();
  return variance / mean.pow(2);
}

torch::Tensor balance_loss(std::span<const GateDecision> decisions) {
  return cv_squared(expert_importance(decisions));
}

}  // namespace amir
