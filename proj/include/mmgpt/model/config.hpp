#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

namespace mmgpt::model {

enum class LoraTarget { SelfAttn, CrossAttn, Ffn };

std::string to_string(LoraTarget target);
/// Accepts "self_attn", "cross_attn", "ffn"; anything else is a ConfigError.
LoraTarget parse_lora_target(const std::string& name);

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 32;
  std::size_t n_decoder_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;

  std::size_t image_size = 16;
  std::size_t image_channels = 3;
  std::size_t patch_size = 4;

  std::size_t n_resampler_latents = 8;
  std::size_t n_resampler_layers = 1;
  /// A gated cross-attention block precedes every k-th decoder layer.
  std::size_t xattn_every = 1;

  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::set<LoraTarget> lora_targets{LoraTarget::SelfAttn, LoraTarget::CrossAttn, LoraTarget::Ffn};

  std::size_t max_seq_len = 256;
  std::uint64_t init_seed = 0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
  bool has_xattn(std::size_t layer) const { return layer % xattn_every == 0; }

  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace mmgpt::model
