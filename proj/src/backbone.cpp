#include "amir/backbone.hpp"

#include <cmath>

#include "amir/errors.hpp"

namespace amir {

namespace F = torch::nn::functional;

namespace {

torch::nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t groups = 1) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, kernel).padding(kernel / 2).groups(groups).bias(false));
}

std::string field(const std::string& name, std::int64_t value) {
  return name + "=" + std::to_string(value);
}

}  // namespace

void AmirConfig::validate() const {
  if (channels <= 0 || channels % 2 != 0) throw_config(field("channels", channels) + " must be positive and even");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i] <= 0) throw_config(field("blocks[" + std::to_string(i) + "]", blocks[i]) + " must be positive");
    if (heads[i] <= 0) throw_config(field("heads[" + std::to_string(i) + "]", heads[i]) + " must be positive");
    const auto width = channels << i;
    if (width % heads[i] != 0) {
      throw_config("level " + std::to_string(i + 1) + " width " + std::to_string(width) +
                   " is not divisible by " + field("heads[" + std::to_string(i) + "]", heads[i]));
    }
  }
  if (channels % heads[0] != 0) throw_config("channels must be divisible by heads[0]");
  if (refinement_blocks <= 0) throw_config(field("refinement_blocks", refinement_blocks) + " must be positive");
  if (!(ffn_expansion > 0.0)) throw_config("ffn_expansion must be positive");
  if (dictionary_size <= 0) throw_config(field("dictionary_size", dictionary_size) + " must be positive");
  if (experts <= 0) throw_config(field("experts", experts) + " must be positive");
  if (top_k < 1 || top_k > experts) {
    throw_config(field("top_k", top_k) + " violates 1 <= top_k <= experts (" + field("experts", experts) + ")");
  }
}

AmirConfig AmirConfig::paper_default() { return AmirConfig{}; }

AmirConfig AmirConfig::desk_scale() {
  AmirConfig c;
  c.channels = 16;
  c.blocks = {1, 1, 1, 2};
  c.refinement_blocks = 1;
  return c;
}

AmirConfig AmirConfig::restormer_reference() {
  AmirConfig c;
  c.channels = 48;
  c.blocks = {4, 6, 6, 8};
  c.refinement_blocks = 4;
  c.enable_srm = false;
  c.enable_crm = false;
  return c;
}

ChannelLayerNormImpl::ChannelLayerNormImpl(std::int64_t channels) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor ChannelLayerNormImpl::forward(const torch::Tensor& x) {
  auto mu = x.mean(1, /*keepdim=*/true);
  auto var = x.var(1, /*unbiased=*/false, /*keepdim=*/true);
  auto c = weight.size(0);
  return (x - mu) / torch::sqrt(var + 1e-5) * weight.view({1, c, 1, 1}) + bias.view({1, c, 1, 1});
}

ChannelAttentionImpl::ChannelAttentionImpl(std::int64_t channels, std::int64_t heads) : heads_(heads) {
  temperature_ = register_parameter("temperature", torch::ones({heads, 1, 1}));
  qkv_ = register_module("qkv", conv(channels, 3 * channels, 1));
  qkv_dw_ = register_module("qkv_dw", conv(3 * channels, 3 * channels, 3, 3 * channels));
  project_out_ = register_module("project_out", conv(channels, channels, 1));
}

torch::Tensor ChannelAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto c = x.size(1);
  const auto h = x.size(2);
  const auto w = x.size(3);
  auto qkv = qkv_dw_->forward(qkv_->forward(x)).chunk(3, 1);
  auto heads = [&](const torch::Tensor& t) { return t.reshape({b, heads_, c / heads_, h * w}); };
  auto q = F::normalize(heads(qkv[0]), F::NormalizeFuncOptions().dim(-1));
  auto k = F::normalize(heads(qkv[1]), F::NormalizeFuncOptions().dim(-1));
  auto v = heads(qkv[2]);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * temperature_, -1);
  return project_out_->forward(torch::matmul(attn, v).reshape({b, c, h, w}));
}

GatedFeedForwardImpl::GatedFeedForwardImpl(std::int64_t channels, double expansion) {
  const auto hidden = static_cast<std::int64_t>(static_cast<double>(channels) * expansion);
  project_in_ = register_module("project_in", conv(channels, 2 * hidden, 1));
  dw_ = register_module("dw", conv(2 * hidden, 2 * hidden, 3, 2 * hidden));
  project_out_ = register_module("project_out", conv(hidden, channels, 1));
}

torch::Tensor GatedFeedForwardImpl::forward(const torch::Tensor& x) {
  auto halves = dw_->forward(project_in_->forward(x)).chunk(2, 1);
  return project_out_->forward(F::gelu(halves[0]) * halves[1]);
}

TransformerBlockImpl::TransformerBlockImpl(std::int64_t channels, std::int64_t heads, double expansion) {
  norm1_ = register_module("norm1", ChannelLayerNorm(channels));
  attn_ = register_module("attn", ChannelAttention(channels, heads));
  norm2_ = register_module("norm2", ChannelLayerNorm(channels));
  ffn_ = register_module("ffn", GatedFeedForward(channels, expansion));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  auto y = x + attn_->forward(norm1_->forward(x));
  return y + ffn_->forward(norm2_->forward(y));
}

DownsampleImpl::DownsampleImpl(std::int64_t channels) {
  conv_ = register_module("conv", conv(channels, channels / 2, 3));
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) {
  if (x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
    throw_shape("downsample needs even spatial size, got " + std::to_string(x.size(2)) + "x" +
                std::to_string(x.size(3)));
  }
  return F::pixel_unshuffle(conv_->forward(x), 2);
}

UpsampleImpl::UpsampleImpl(std::int64_t channels) {
  conv_ = register_module("conv", conv(channels, channels * 2, 3));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) { return F::pixel_shuffle(conv_->forward(x), 2); }

AmirModelImpl::AmirModelImpl(const AmirConfig& config) : config_(config) {
#ifdef NDEBUG
  debug_checks_ = false;
#else
  debug_checks_ = true;
#endif
  config_.validate();
  const auto c = config_.channels;
  const auto e = config_.ffn_expansion;
  auto stack = [&](const std::string& name, std::int64_t count, std::int64_t width, std::int64_t heads) {
    torch::nn::ModuleList list;
    for (std::int64_t i = 0; i < count; ++i) list->push_back(TransformerBlock(width, heads, e));
    return register_module(name, list);
  };

  if (config_.routing_enabled()) {
    rin_ = register_module("rin", RoutingInstructionNetwork(config_.dictionary_size, config_.use_dictionary));
  }
  shallow_ = register_module("shallow", conv(1, c, 3));
  if (config_.enable_srm) {
    for (int level = 0; level < 3; ++level) {
      srms_.push_back(register_module("srm" + std::to_string(level + 1),
                                      SpatialRouter(c << level, config_.experts, config_.top_k)));
    }
  }
  encoder1_ = stack("encoder1", config_.blocks[0], c, config_.heads[0]);
  down1_ = register_module("down1", Downsample(c));
  encoder2_ = stack("encoder2", config_.blocks[1], 2 * c, config_.heads[1]);
  down2_ = register_module("down2", Downsample(2 * c));
  encoder3_ = stack("encoder3", config_.blocks[2], 4 * c, config_.heads[2]);
  down3_ = register_module("down3", Downsample(4 * c));
  if (config_.enable_crm) {
    // Decoder level 1 runs at 2C after concatenating the level-1 skip.
    const std::array<std::pair<const char*, std::int64_t>, 4> sites = {
        {{"crm_latent", 8 * c}, {"crm3", 4 * c}, {"crm2", 2 * c}, {"crm1", 2 * c}}};
    for (const auto& [name, width] : sites) crms_.push_back(register_module(name, ChannelRouter(width)));
  }
  latent_ = stack("latent", config_.blocks[3], 8 * c, config_.heads[3]);
  up3_ = register_module("up3", Upsample(8 * c));
  reduce3_ = register_module("reduce3", conv(8 * c, 4 * c, 1));
  decoder3_ = stack("decoder3", config_.blocks[2], 4 * c, config_.heads[2]);
  up2_ = register_module("up2", Upsample(4 * c));
  reduce2_ = register_module("reduce2", conv(4 * c, 2 * c, 1));
  decoder2_ = stack("decoder2", config_.blocks[1], 2 * c, config_.heads[1]);
  up1_ = register_module("up1", Upsample(2 * c));
  decoder1_ = stack("decoder1", config_.blocks[0], 2 * c, config_.heads[0]);
  refinement_ = stack("refinement", config_.refinement_blocks, 2 * c, config_.heads[0]);
  head_ = register_module("head", conv(2 * c, 1, 3));
}

torch::Tensor AmirModelImpl::run_stack(torch::nn::ModuleList& stack, torch::Tensor x, const char* name) const {
  for (std::size_t i = 0; i < stack->size(); ++i) {
    x = stack[i]->as<TransformerBlockImpl>()->forward(x);
    if (debug_checks_ && !torch::isfinite(x).all().item<bool>()) {
      throw_numerical(std::string("non-finite activations after ") + name + "." + std::to_string(i));
    }
  }
  return x;
}

Instruction AmirModelImpl::infer_instruction(const torch::Tensor& image) {
  if (!rin_) return {};
  return rin_->forward(image);
}

ForwardResult AmirModelImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 1) throw_shape("model expects [B, 1, H, W]");
  return forward(image, infer_instruction(image));
}

ForwardResult AmirModelImpl::forward(const torch::Tensor& image, const Instruction& instruction) {
  if (image.dim() != 4 || image.size(1) != 1) throw_shape("model expects [B, 1, H, W]");
  if (image.size(2) % kSpatialMultiple != 0 || image.size(3) % kSpatialMultiple != 0) {
    throw_shape("model input " + std::to_string(image.size(2)) + "x" + std::to_string(image.size(3)) +
                " is not divisible by 8; use restore_image for arbitrary sizes");
  }
  if (config_.routing_enabled() && !instruction.vector.defined()) throw_shape("routing requires an instruction");

  ForwardResult result;
  result.instruction = instruction;
  auto spatial = [&](std::size_t i, const torch::Tensor& x) {
    if (srms_.empty()) return x;
    auto routed = srms_[i]->forward(x, instruction);
    result.gates.push_back(routed.decision);
    return routed.features;
  };
  auto channel = [&](std::size_t i, const torch::Tensor& x) {
    return crms_.empty() ? x : crms_[i]->forward(x, instruction);
  };

  auto e1 = run_stack(encoder1_, spatial(0, shallow_->forward(image)), "encoder1");
  auto e2 = run_stack(encoder2_, spatial(1, down1_->forward(e1)), "encoder2");
  auto e3 = run_stack(encoder3_, spatial(2, down2_->forward(e2)), "encoder3");
  auto latent = run_stack(latent_, channel(0, down3_->forward(e3)), "latent");

  auto d3 = reduce3_->forward(torch::cat({up3_->forward(latent), e3}, 1));
  d3 = run_stack(decoder3_, channel(1, d3), "decoder3");
  auto d2 = reduce2_->forward(torch::cat({up2_->forward(d3), e2}, 1));
  d2 = run_stack(decoder2_, channel(2, d2), "decoder2");
  auto d1 = torch::cat({up1_->forward(d2), e1}, 1);
  d1 = run_stack(decoder1_, channel(3, d1), "decoder1");
  d1 = run_stack(refinement_, d1, "refinement");

  result.output = head_->forward(d1) + image;
  return result;
}

std::vector<std::string> AmirModelImpl::topology() const {
  std::vector<std::string> t;
  if (rin_) t.emplace_back("rin");
  t.emplace_back("shallow");
  const bool srm = !srms_.empty();
  const bool crm = !crms_.empty();
  if (srm) t.emplace_back("srm1");
  t.insert(t.end(), {"encoder1", "down1"});
  if (srm) t.emplace_back("srm2");
  t.insert(t.end(), {"encoder2", "down2"});
  if (srm) t.emplace_back("srm3");
  t.insert(t.end(), {"encoder3", "down3"});
  if (crm) t.emplace_back("crm_latent");
  t.insert(t.end(), {"latent", "up3", "reduce3"});
  if (crm) t.emplace_back("crm3");
  t.insert(t.end(), {"decoder3", "up2", "reduce2"});
  if (crm) t.emplace_back("crm2");
  t.insert(t.end(), {"decoder2", "up1"});
  if (crm) t.emplace_back("crm1");
  t.insert(t.end(), {"decoder1", "refinement", "head"});
  return t;
}

std::vector<std::string> AmirModelImpl::block_prefixes() const {
  std::vector<std::string> out;
  auto add = [&](const char* name, std::int64_t count) {
    for (std::int64_t i = 0; i < count; ++i) out.push_back(std::string(name) + "." + std::to_string(i) + ".");
  };
  add("encoder1", config_.blocks[0]);
  add("encoder2", config_.blocks[1]);
  add("encoder3", config_.blocks[2]);
  add("latent", config_.blocks[3]);
  add("decoder3", config_.blocks[2]);
  add("decoder2", config_.blocks[1]);
  add("decoder1", config_.blocks[0]);
  add("refinement", config_.refinement_blocks);
  return out;
}

void AmirModelImpl::zero_residual_head() {
  torch::NoGradGuard guard;
  head_->weight.zero_();
}

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return n;
}

AmirConfig budget_matched_backbone(const AmirConfig& base, std::int64_t target_params) {
  AmirConfig cfg = base;
  cfg.enable_srm = false;
  cfg.enable_crm = false;
  auto params_of = [](const AmirConfig& c) { return count_parameters(*AmirModel(c)); };

  // Widest valid width within budget.
  auto best = cfg;
  for (std::int64_t c = 2;; c += 2) {
    auto trial = cfg;
    trial.channels = c;
    try {
      trial.validate();
    } catch (const Error&) {
      continue;
    }
    if (params_of(trial) > target_params) break;
    best = trial;
  }
  // Bisection on the FFN expansion factor; the count is monotone in it.
  double lo = best.ffn_expansion;
  double hi = best.ffn_expansion * 4.0;
  for (int iter = 0; iter < 40; ++iter) {
    auto mid = best;
    mid.ffn_expansion = 0.5 * (lo + hi);
    if (params_of(mid) <= target_params) lo = mid.ffn_expansion; else hi = mid.ffn_expansion;
  }
  best.ffn_expansion = lo;
  return best;
}

torch::Tensor restore_image(AmirModel& model, const torch::Tensor& image) {
  const bool plain = image.dim() == 2;
  auto x = plain ? image.unsqueeze(0).unsqueeze(0) : image;
  if (x.dim() != 4 || x.size(1) != 1) throw_shape("restore_image expects [H, W] or [B, 1, H, W]");
  const auto h = x.size(2);
  const auto w = x.size(3);
  if (h < 32 || w < 32) {
    throw_shape("restore_image needs at least 32x32, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  const auto m = AmirModelImpl::kSpatialMultiple;
  const auto pad_h = (m - h % m) % m;
  const auto pad_w = (m - w % m) % m;

  torch::NoGradGuard no_grad;
  const bool was_training = model->is_training();
  model->eval();
  auto padded = (pad_h || pad_w)
                    ? F::pad(x, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReflect))
                    : x;
  auto out = model->forward(padded).output;
  if (pad_h || pad_w) out = out.narrow(2, 0, h).narrow(3, 0, w).contiguous();
  if (was_training) model->train();
  return plain ? out.squeeze(0).squeeze(0) : out;
}

}  // namespace amir
