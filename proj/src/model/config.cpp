#include "mmgpt/model/config.hpp"

#include "mmgpt/common/error.hpp"

namespace mmgpt::model {

std::string to_string(LoraTarget target) {
  switch (target) {
    case LoraTarget::SelfAttn:
      return "self_attn";
    case LoraTarget::CrossAttn:
      return "cross_attn";
    case LoraTarget::Ffn:
      return "ffn";
  }
  return "?";
}

LoraTarget parse_lora_target(const std::string& name) {
  if (name == "self_attn") return LoraTarget::SelfAttn;
  if (name == "cross_attn") return LoraTarget::CrossAttn;
  if (name == "ffn") return LoraTarget::Ffn;
  throw ConfigError("unknown LoRA target '" + name + "' (expected self_attn, cross_attn or ffn)");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(vocab_size >= 1, "vocab_size must be positive");
  require(d_model >= 1 && n_heads >= 1, "d_model and n_heads must be positive");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(n_decoder_layers >= 1, "n_decoder_layers must be positive");
  require(ffn_mult >= 1, "ffn_mult must be positive");
  require(patch_size >= 1 && image_size % patch_size == 0, "image_size must be divisible by patch_size");
  require(image_channels >= 1, "image_channels must be positive");
  require(n_resampler_latents >= 1, "n_resampler_latents must be positive");
  require(xattn_every >= 1, "xattn_every must be positive");
  require(lora_rank >= 1, "lora_rank must be >= 1");
  require(max_seq_len >= 2, "max_seq_len must be at least 2");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json targets = nlohmann::json::array();
  for (auto t : lora_targets) targets.push_back(to_string(t));
  return {
      {"vocab_size", vocab_size},
      {"d_model", d_model},
      {"n_decoder_layers", n_decoder_layers},
      {"n_heads", n_heads},
      {"ffn_mult", ffn_mult},
      {"image_size", image_size},
      {"image_channels", image_channels},
      {"patch_size", patch_size},
      {"n_resampler_latents", n_resampler_latents},
      {"n_resampler_layers", n_resampler_layers},
      {"xattn_every", xattn_every},
      {"lora_rank", lora_rank},
      {"lora_alpha", lora_alpha},
      {"lora_targets", targets},
      {"max_seq_len", max_seq_len},
      {"init_seed", init_seed},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_decoder_layers = j.value("n_decoder_layers", c.n_decoder_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.image_size = j.value("image_size", c.image_size);
    c.image_channels = j.value("image_channels", c.image_channels);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.n_resampler_latents = j.value("n_resampler_latents", c.n_resampler_latents);
    c.n_resampler_layers = j.value("n_resampler_layers", c.n_resampler_layers);
    c.xattn_every = j.value("xattn_every", c.xattn_every);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
    if (auto it = j.find("lora_targets"); it != j.end()) {
      c.lora_targets.clear();
      for (const auto& t : *it) c.lora_targets.insert(parse_lora_target(t.get<std::string>()));
    }
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.init_seed = j.value("init_seed", c.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: bad field: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace mmgpt::model
