#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mmgpt/common/error.hpp"
#include "mmgpt/common/rng.hpp"
#include "mmgpt/data/toy_image.hpp"
#include "mmgpt/model/config.hpp"
#include "mmgpt/numerics/autograd.hpp"
#include "mmgpt/text/tokenizer.hpp"

namespace mmgpt::model {

using nn::Tape;
using nn::Tensor;
using nn::Var;

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

/// Owns every parameter tensor. Addresses stay valid for the store's life.
template <typename T>
class ParameterStore {
 public:
  Tensor<T>* add(std::string name, Tensor<T> tensor);
  Tensor<T>* find(const std::string& name);
  const Tensor<T>* find(const std::string& name) const;
  Tensor<T>& at(const std::string& name);

  std::vector<NamedParam<T>*> all();
  std::vector<const NamedParam<T>*> all() const;
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<NamedParam<T>>> params_;
};

/// y = x W^T (+ b) (+ scale * (x A^T) B^T when an adapter is attached).
template <typename T>
struct Linear {
  std::string name;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  Tensor<T>* weight = nullptr;
  Tensor<T>* bias = nullptr;
  Tensor<T>* lora_a = nullptr;
  Tensor<T>* lora_b = nullptr;
  T lora_scale = T(0);

  bool has_lora() const { return lora_a != nullptr; }
};

template <typename T>
Var<T> lora_forward(Tape<T>& tape, const Linear<T>& layer, Var<T> x);

template <typename T>
struct LayerNorm {
  Tensor<T>* gain = nullptr;
  Tensor<T>* bias = nullptr;
};

template <typename T>
struct Attention {
  Linear<T> q, k, v, o;
  std::size_t n_heads = 1;
};

template <typename T>
struct FeedForward {
  Linear<T> up, down;
};

template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln_attn;
  Attention<T> attn;
  LayerNorm<T> ln_ffn;
  FeedForward<T> ffn;
};

template <typename T>
struct ResamplerLayer {
  LayerNorm<T> ln_media;
  LayerNorm<T> ln_latents;
  Attention<T> attn;
  LayerNorm<T> ln_ffw;
  FeedForward<T> ffw;
};

template <typename T>
struct GatedXAttn {
  LayerNorm<T> ln_attn;
  Attention<T> attn;
  Tensor<T>* gate_attn = nullptr;
  LayerNorm<T> ln_ffw;
  FeedForward<T> ffw;
  Tensor<T>* gate_ffw = nullptr;
};

template <typename T>
struct DecoderLayer {
  std::optional<GatedXAttn<T>> xattn;
  LayerNorm<T> ln_attn;
  Attention<T> self_attn;
  LayerNorm<T> ln_ffn;
  FeedForward<T> ffn;
};

struct GenerateOptions {
  std::size_t max_new = 64;
  /// Unset means greedy decoding.
  std::optional<double> temperature;
  std::uint64_t seed = 0;
  /// Only ids below this are candidates, for models whose embedding table is
  /// larger than the tokenizer's vocabulary.
  std::optional<std::size_t> vocab_limit;
};

/// Vision encoder, perceiver resampler and a decoder with gated
/// cross-attention. Parameter names follow "module.path", for example
/// "decoder.layers.0.self_attn.q.weight".
template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  /// [P x d_model] patch features.
  Var<T> vision_encode(Tape<T>& tape, const data::ToyImage& image) const;
  /// [R x d_model] regardless of P.
  Var<T> perceiver_resample(Tape<T>& tape, Var<T> features) const;
  Var<T> encode_image(Tape<T>& tape, const data::ToyImage& image) const;
  /// [T x vocab] logits. Cross-attention applies from the first media
  /// position onward, and only when visual is given.
  Var<T> decoder_forward(Tape<T>& tape, std::span<const text::TokenId> ids,
                         std::span<const std::size_t> media_positions, std::optional<Var<T>> visual) const;
  Var<T> forward(Tape<T>& tape, std::span<const text::TokenId> ids, std::span<const std::size_t> media_positions,
                 const data::ToyImage* image) const;
  /// Inference-only convenience.
  Tensor<T> logits(std::span<const text::TokenId> ids, std::span<const std::size_t> media_positions,
                   const data::ToyImage* image) const;

  /// Attaches adapters to every projection of the configured targets and
  /// freezes all other parameters.
  void inject_lora();
  void inject_lora(const std::set<LoraTarget>& targets);
  /// Sets adapter hyperparameters ahead of inject_lora.
  void configure_lora(std::size_t rank, double alpha, const std::set<LoraTarget>& targets);
  bool has_lora() const { return has_lora_; }
  /// Marks every parameter trainable. Only meaningful before inject_lora.
  void unfreeze_all();

  std::size_t parameter_count() const;
  std::size_t trainable_count() const;
  /// Closed-form sum of r*(d_in+d_out) over adapted projections.
  std::size_t expected_lora_count(const std::set<LoraTarget>& targets) const;
  std::vector<const Linear<T>*> linears() const;

  /// Newly generated ids, stopping after <EOS> (which is included) or
  /// max_new tokens or the context limit.
  std::vector<text::TokenId> generate(std::span<const text::TokenId> prompt,
                                      std::span<const std::size_t> media_positions, const data::ToyImage* image,
                                      const GenerateOptions& options) const;

  /// Copies values by name from a model of possibly different precision.
  template <typename U>
  void copy_values_from(const Model<U>& other);

 private:
  Var<T> linear(Tape<T>& tape, const Linear<T>& l, Var<T> x) const { return lora_forward(tape, l, x); }
  Var<T> norm(Tape<T>& tape, const LayerNorm<T>& ln, Var<T> x) const;
  Var<T> attention(Tape<T>& tape, const Attention<T>& a, Var<T> xq, Var<T> xkv, bool causal) const;
  Var<T> feed_forward(Tape<T>& tape, const FeedForward<T>& f, Var<T> x) const;
  Var<T> decode_with_latents(Tape<T>& tape, std::span<const text::TokenId> ids,
                             std::span<const std::size_t> media_positions, const Tensor<T>* latents) const;

  Linear<T> make_linear(const std::string& name, std::size_t d_in, std::size_t d_out, bool bias);
  LayerNorm<T> make_norm(const std::string& name);
  Attention<T> make_attention(const std::string& name);
  FeedForward<T> make_ffn(const std::string& name);
  void attach(Linear<T>& l);

  ModelConfig config_;
  ParameterStore<T> store_;
  Rng rng_;
  bool has_lora_ = false;

  Linear<T> patch_embed_;
  Tensor<T>* patch_pos_ = nullptr;
  EncoderBlock<T> vision_block_;

  Tensor<T>* latents_ = nullptr;
  std::vector<ResamplerLayer<T>> resampler_;
  LayerNorm<T> resampler_norm_;

  Tensor<T>* tok_embed_ = nullptr;
  Tensor<T>* pos_embed_ = nullptr;
  std::vector<DecoderLayer<T>> layers_;
  LayerNorm<T> final_norm_;
  Linear<T> lm_head_;
};

/// Rows of non-overlapping patches, each flattened (y, x, c).
template <typename T>
Tensor<T> patchify(const data::ToyImage& image, std::size_t patch_size);

template <typename T>
template <typename U>
void Model<T>::copy_values_from(const Model<U>& other) {
  for (const auto* p : other.params().all()) {
    Tensor<T>* mine = store_.find(p->name);
    if (mine == nullptr) throw ConfigError("parameter '" + p->name + "' not present in target model");
    if (mine->shape != p->tensor.shape) throw DimensionError("shape mismatch for '" + p->name + "'");
    for (std::size_t i = 0; i < mine->data.size(); ++i) mine->data[i] = static_cast<T>(p->tensor.data[i]);
  }
}

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace mmgpt::model
