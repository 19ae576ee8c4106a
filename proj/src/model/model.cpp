#include "mmgpt/model/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace mmgpt::model {

namespace {
constexpr double kInitStd = 0.02;
}

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
Tensor<T>* ParameterStore<T>::add(std::string name, Tensor<T> tensor) {
  if (find(name) != nullptr) throw Error("duplicate parameter name '" + name + "'");
  params_.push_back(std::make_unique<NamedParam<T>>(NamedParam<T>{std::move(name), std::move(tensor)}));
  return &params_.back()->tensor;
}

template <typename T>
Tensor<T>* ParameterStore<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return &p->tensor;
  return nullptr;
}

template <typename T>
const Tensor<T>* ParameterStore<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return &p->tensor;
  return nullptr;
}

template <typename T>
Tensor<T>& ParameterStore<T>::at(const std::string& name) {
  Tensor<T>* t = find(name);
  if (t == nullptr) throw Error("no parameter named '" + name + "'");
  return *t;
}

template <typename T>
std::vector<NamedParam<T>*> ParameterStore<T>::all() {
  std::vector<NamedParam<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::vector<const NamedParam<T>*> ParameterStore<T>::all() const {
  std::vector<const NamedParam<T>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Var<T> lora_forward(Tape<T>& tape, const Linear<T>& layer, Var<T> x) {
  if (x.value().cols() != layer.d_in)
    throw DimensionError(layer.name + ": input has " + std::to_string(x.value().cols()) + " features, expected " +
                         std::to_string(layer.d_in));
  Var<T> y = nn::matmul_nt(x, tape.param(*layer.weight));
  if (layer.bias != nullptr) y = nn::add_row(y, tape.param(*layer.bias));
  if (layer.has_lora()) {
    Var<T> low = nn::matmul_nt(x, tape.param(*layer.lora_a));
    Var<T> delta = nn::matmul_nt(low, tape.param(*layer.lora_b));
    y = nn::add(y, nn::scale(delta, layer.lora_scale));
  }
  return y;
}

template <typename T>
Tensor<T> patchify(const data::ToyImage& image, std::size_t patch_size) {
  if (patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0)
    throw ConfigError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                      " is not divisible by patch size " + std::to_string(patch_size));
  if (image.pixels.size() != image.height * image.width * image.channels)
    throw DimensionError("image pixel count does not match its header");
  const std::size_t ph = image.height / patch_size, pw = image.width / patch_size;
  const std::size_t dim = patch_size * patch_size * image.channels;
  auto out = Tensor<T>::zeros({ph * pw, dim});
  for (std::size_t py = 0; py < ph; ++py)
    for (std::size_t px = 0; px < pw; ++px) {
      T* row = out.data.data() + (py * pw + px) * dim;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch_size; ++y)
        for (std::size_t x = 0; x < patch_size; ++x)
          for (std::size_t c = 0; c < image.channels; ++c)
            row[k++] = static_cast<T>(image.at(py * patch_size + y, px * patch_size + x, c));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Construction

template <typename T>
Linear<T> Model<T>::make_linear(const std::string& name, std::size_t d_in, std::size_t d_out, bool bias) {
  Linear<T> l;
  l.name = name;
  l.d_in = d_in;
  l.d_out = d_out;
  std::vector<T> w(d_in * d_out);
  for (auto& v : w) v = static_cast<T>(rng_.normal(0.0, kInitStd));
  l.weight = store_.add(name + ".weight", Tensor<T>({d_out, d_in}, std::move(w), true));
  if (bias) l.bias = store_.add(name + ".bias", Tensor<T>({d_out}, std::vector<T>(d_out, T(0)), true));
  return l;
}

template <typename T>
LayerNorm<T> Model<T>::make_norm(const std::string& name) {
  const std::size_t d = config_.d_model;
  LayerNorm<T> ln;
  ln.gain = store_.add(name + ".gain", Tensor<T>({d}, std::vector<T>(d, T(1)), true));
  ln.bias = store_.add(name + ".bias", Tensor<T>({d}, std::vector<T>(d, T(0)), true));
  return ln;
}

template <typename T>
Attention<T> Model<T>::make_attention(const std::string& name) {
  const std::size_t d = config_.d_model;
  Attention<T> a;
  a.n_heads = config_.n_heads;
  a.q = make_linear(name + ".q", d, d, false);
  a.k = make_linear(name + ".k", d, d, false);
  a.v = make_linear(name + ".v", d, d, false);
  a.o = make_linear(name + ".o", d, d, false);
  return a;
}

template <typename T>
FeedForward<T> Model<T>::make_ffn(const std::string& name) {
  const std::size_t d = config_.d_model, h = config_.d_model * config_.ffn_mult;
  return {make_linear(name + ".up", d, h, true), make_linear(name + ".down", h, d, true)};
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config), rng_(derive_seed(config.init_seed, "init")) {
  config_.validate();
  const std::size_t d = config_.d_model;
  auto gaussian = [&](std::size_t rows, std::size_t cols) {
    std::vector<T> v(rows * cols);
    for (auto& x : v) x = static_cast<T>(rng_.normal(0.0, kInitStd));
    return Tensor<T>({rows, cols}, std::move(v), true);
  };

  const std::size_t patch_dim = config_.patch_size * config_.patch_size * config_.image_channels;
  patch_embed_ = make_linear("vision.patch_embed", patch_dim, d, true);
  patch_pos_ = store_.add("vision.pos_embed", gaussian(config_.n_patches(), d));
  vision_block_ = {make_norm("vision.block.ln_attn"), make_attention("vision.block.attn"),
                   make_norm("vision.block.ln_ffn"), make_ffn("vision.block.ffn")};

  latents_ = store_.add("resampler.latents", gaussian(config_.n_resampler_latents, d));
  for (std::size_t i = 0; i < config_.n_resampler_layers; ++i) {
    const std::string p = "resampler.layers." + std::to_string(i);
    resampler_.push_back({make_norm(p + ".ln_media"), make_norm(p + ".ln_latents"), make_attention(p + ".attn"),
                          make_norm(p + ".ln_ffw"), make_ffn(p + ".ffw")});
  }
  resampler_norm_ = make_norm("resampler.norm");

  tok_embed_ = store_.add("decoder.tok_embed", gaussian(config_.vocab_size, d));
  pos_embed_ = store_.add("decoder.pos_embed", gaussian(config_.max_seq_len, d));
  for (std::size_t i = 0; i < config_.n_decoder_layers; ++i) {
    const std::string p = "decoder.layers." + std::to_string(i);
    DecoderLayer<T> layer;
    if (config_.has_xattn(i)) {
      GatedXAttn<T> x;
      x.ln_attn = make_norm(p + ".xattn.ln_attn");
      x.attn = make_attention(p + ".xattn.attn");
      x.gate_attn = store_.add(p + ".xattn.gate_attn", Tensor<T>({1}, {T(0)}, true));
      x.ln_ffw = make_norm(p + ".xattn.ln_ffw");
      x.ffw = make_ffn(p + ".xattn.ffw");
      x.gate_ffw = store_.add(p + ".xattn.gate_ffw", Tensor<T>({1}, {T(0)}, true));
      layer.xattn = std::move(x);
    }
    layer.ln_attn = make_norm(p + ".ln_attn");
    layer.self_attn = make_attention(p + ".self_attn");
    layer.ln_ffn = make_norm(p + ".ln_ffn");
    layer.ffn = make_ffn(p + ".ffn");
    layers_.push_back(std::move(layer));
  }
  final_norm_ = make_norm("decoder.final_norm");
  lm_head_ = make_linear("decoder.lm_head", d, config_.vocab_size, false);
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
Var<T> Model<T>::norm(Tape<T>& tape, const LayerNorm<T>& ln, Var<T> x) const {
  return nn::layer_norm(x, tape.param(*ln.gain), tape.param(*ln.bias));
}

template <typename T>
Var<T> Model<T>::attention(Tape<T>& tape, const Attention<T>& a, Var<T> xq, Var<T> xkv, bool causal) const {
  Var<T> q = linear(tape, a.q, xq);
  Var<T> k = linear(tape, a.k, xkv);
  Var<T> v = linear(tape, a.v, xkv);
  const std::size_t dh = config_.d_model / a.n_heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Var<T>> heads;
  heads.reserve(a.n_heads);
  for (std::size_t h = 0; h < a.n_heads; ++h) {
    Var<T> qh = nn::slice_cols(q, h * dh, (h + 1) * dh);
    Var<T> kh = nn::slice_cols(k, h * dh, (h + 1) * dh);
    Var<T> vh = nn::slice_cols(v, h * dh, (h + 1) * dh);
    Var<T> scores = nn::scale(nn::matmul_nt(qh, kh), inv_sqrt);
    Var<T> probs = causal ? nn::causal_softmax(scores) : nn::softmax_lastdim(scores);
    heads.push_back(nn::matmul(probs, vh));
  }
  Var<T> merged = a.n_heads == 1 ? heads[0] : nn::concat_cols<T>(heads);
  return linear(tape, a.o, merged);
}

template <typename T>
Var<T> Model<T>::feed_forward(Tape<T>& tape, const FeedForward<T>& f, Var<T> x) const {
  return linear(tape, f.down, nn::gelu(linear(tape, f.up, x)));
}

template <typename T>
Var<T> Model<T>::vision_encode(Tape<T>& tape, const data::ToyImage& image) const {
  if (image.channels != config_.image_channels)
    throw ConfigError("image has " + std::to_string(image.channels) + " channels, model expects " +
                      std::to_string(config_.image_channels));
  Tensor<T> patches = patchify<T>(image, config_.patch_size);
  const std::size_t p = patches.rows();
  if (p > config_.n_patches())
    throw ConfigError("image yields " + std::to_string(p) + " patches, model supports at most " +
                      std::to_string(config_.n_patches()));
  Var<T> x = linear(tape, patch_embed_, tape.constant(std::move(patches)));
  Var<T> pos = tape.param(*patch_pos_);
  if (p < config_.n_patches()) pos = nn::slice_rows(pos, 0, p);
  x = nn::add(x, pos);
  Var<T> h = norm(tape, vision_block_.ln_attn, x);
  x = nn::add(x, attention(tape, vision_block_.attn, h, h, false));
  x = nn::add(x, feed_forward(tape, vision_block_.ffn, norm(tape, vision_block_.ln_ffn, x)));
  return x;
}

template <typename T>
Var<T> Model<T>::perceiver_resample(Tape<T>& tape, Var<T> features) const {
  if (features.value().shape.size() != 2 || features.value().cols() != config_.d_model)
    throw DimensionError("resampler expects [P x " + std::to_string(config_.d_model) + "] features, got " +
                         nn::shape_str(features.value().shape));
  Var<T> latents = tape.param(*latents_);
  for (const auto& layer : resampler_) {
    Var<T> media = norm(tape, layer.ln_media, features);
    Var<T> lat = norm(tape, layer.ln_latents, latents);
    const std::array<Var<T>, 2> parts{media, lat};
    Var<T> kv = nn::concat_rows<T>(parts);
    latents = nn::add(latents, attention(tape, layer.attn, lat, kv, false));
    latents = nn::add(latents, feed_forward(tape, layer.ffw, norm(tape, layer.ln_ffw, latents)));
  }
  return norm(tape, resampler_norm_, latents);
}

template <typename T>
Var<T> Model<T>::encode_image(Tape<T>& tape, const data::ToyImage& image) const {
  return perceiver_resample(tape, vision_encode(tape, image));
}

template <typename T>
Var<T> Model<T>::decoder_forward(Tape<T>& tape, std::span<const text::TokenId> ids,
                                 std::span<const std::size_t> media_positions, std::optional<Var<T>> visual) const {
  const std::size_t n = ids.size();
  if (n == 0) throw LengthError("decoder input is empty");
  if (n > config_.max_seq_len)
    throw LengthError("sequence of " + std::to_string(n) + " tokens exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size)
      throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(config_.vocab_size));

  std::optional<std::size_t> first_media;
  for (std::size_t m : media_positions) {
    if (m >= n) throw DimensionError("media position " + std::to_string(m) + " outside sequence");
    first_media = first_media ? std::min(*first_media, m) : m;
  }
  const bool conditioned = visual.has_value() && first_media.has_value();
  std::unique_ptr<bool[]> keep(new bool[n]);
  for (std::size_t i = 0; i < n; ++i) keep[i] = conditioned && i >= *first_media;
  const std::span<const bool> keep_span(keep.get(), n);
  const bool all_rows = conditioned && *first_media == 0;

  Var<T> h = nn::gather_rows(tape.param(*tok_embed_), ids);
  Var<T> pos = tape.param(*pos_embed_);
  if (n < config_.max_seq_len) pos = nn::slice_rows(pos, 0, n);
  h = nn::add(h, pos);

  for (const auto& layer : layers_) {
    if (conditioned && layer.xattn) {
      const auto& x = *layer.xattn;
      Var<T> attn = attention(tape, x.attn, norm(tape, x.ln_attn, h), *visual, false);
      attn = nn::mul_scalar(nn::tanh(tape.param(*x.gate_attn)), attn);
      if (!all_rows) attn = nn::mask_rows(attn, keep_span);
      h = nn::add(h, attn);
      Var<T> ffw = feed_forward(tape, x.ffw, norm(tape, x.ln_ffw, h));
      ffw = nn::mul_scalar(nn::tanh(tape.param(*x.gate_ffw)), ffw);
      if (!all_rows) ffw = nn::mask_rows(ffw, keep_span);
      h = nn::add(h, ffw);
    }
    Var<T> a = norm(tape, layer.ln_attn, h);
    h = nn::add(h, attention(tape, layer.self_attn, a, a, true));
    h = nn::add(h, feed_forward(tape, layer.ffn, norm(tape, layer.ln_ffn, h)));
  }
  return linear(tape, lm_head_, norm(tape, final_norm_, h));
}

template <typename T>
Var<T> Model<T>::forward(Tape<T>& tape, std::span<const text::TokenId> ids,
                         std::span<const std::size_t> media_positions, const data::ToyImage* image) const {
  std::optional<Var<T>> visual;
  if (image != nullptr) visual = encode_image(tape, *image);
  return decoder_forward(tape, ids, media_positions, visual);
}

template <typename T>
Tensor<T> Model<T>::logits(std::span<const text::TokenId> ids, std::span<const std::size_t> media_positions,
                           const data::ToyImage* image) const {
  Tape<T> tape(false);
  Tensor<T> out = forward(tape, ids, media_positions, image).value();
  return out;
}

template <typename T>
Var<T> Model<T>::decode_with_latents(Tape<T>& tape, std::span<const text::TokenId> ids,
                                     std::span<const std::size_t> media_positions, const Tensor<T>* latents) const {
  std::optional<Var<T>> visual;
  if (latents != nullptr) visual = tape.constant(Tensor<T>(latents->shape, latents->data));
  return decoder_forward(tape, ids, media_positions, visual);
}

// ---------------------------------------------------------------------------
// LoRA

template <typename T>
void Model<T>::attach(Linear<T>& l) {
  const std::size_t r = config_.lora_rank;
  std::vector<T> a(r * l.d_in);
  for (auto& v : a) v = static_cast<T>(rng_.normal(0.0, kInitStd));
  l.lora_a = store_.add(l.name + ".lora_a", Tensor<T>({r, l.d_in}, std::move(a), true));
  l.lora_b = store_.add(l.name + ".lora_b", Tensor<T>::zeros({l.d_out, r}));
  l.lora_b->requires_grad = true;
  l.lora_scale = static_cast<T>(config_.lora_scale());
}

template <typename T>
void Model<T>::inject_lora() {
  inject_lora(config_.lora_targets);
}

template <typename T>
void Model<T>::inject_lora(const std::set<LoraTarget>& targets) {
  if (has_lora_) throw ConfigError("LoRA adapters are already attached");
  if (targets.empty()) throw ConfigError("LoRA needs at least one target");
  for (auto* p : store_.all()) p->tensor.requires_grad = false;
  rng_ = Rng(derive_seed(config_.init_seed, "lora"));
  auto attach_attention = [&](Attention<T>& a) {
    for (Linear<T>* l : {&a.q, &a.k, &a.v, &a.o}) attach(*l);
  };
  for (auto& layer : layers_) {
    if (targets.count(LoraTarget::CrossAttn) && layer.xattn) {
      attach_attention(layer.xattn->attn);
      attach(layer.xattn->ffw.up);
      attach(layer.xattn->ffw.down);
    }
    if (targets.count(LoraTarget::SelfAttn)) attach_attention(layer.self_attn);
    if (targets.count(LoraTarget::Ffn)) {
      attach(layer.ffn.up);
      attach(layer.ffn.down);
    }
  }
  config_.lora_targets = targets;
  has_lora_ = true;
}

template <typename T>
void Model<T>::configure_lora(std::size_t rank, double alpha, const std::set<LoraTarget>& targets) {
  if (has_lora_) throw ConfigError("LoRA adapters are already attached");
  ModelConfig next = config_;
  next.lora_rank = rank;
  next.lora_alpha = alpha;
  next.lora_targets = targets;
  next.validate();
  if (targets.empty()) throw ConfigError("LoRA needs at least one target");
  config_ = next;
}

template <typename T>
void Model<T>::unfreeze_all() {
  if (has_lora_) throw ConfigError("cannot unfreeze a model with LoRA adapters attached");
  for (auto* p : store_.all()) p->tensor.requires_grad = true;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : store_.all()) n += p->tensor.size();
  return n;
}

template <typename T>
std::size_t Model<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto* p : store_.all())
    if (p->tensor.requires_grad) n += p->tensor.size();
  return n;
}

template <typename T>
std::size_t Model<T>::expected_lora_count(const std::set<LoraTarget>& targets) const {
  const std::size_t r = config_.lora_rank, d = config_.d_model, h = config_.d_model * config_.ffn_mult;
  const std::size_t attn = 4 * r * (d + d);
  const std::size_t ffn = 2 * r * (d + h);
  std::size_t n = 0;
  for (std::size_t i = 0; i < config_.n_decoder_layers; ++i) {
    if (targets.count(LoraTarget::CrossAttn) && config_.has_xattn(i)) n += attn + ffn;
    if (targets.count(LoraTarget::SelfAttn)) n += attn;
    if (targets.count(LoraTarget::Ffn)) n += ffn;
  }
  return n;
}

template <typename T>
std::vector<const Linear<T>*> Model<T>::linears() const {
  std::vector<const Linear<T>*> out;
  auto add_attention = [&](const Attention<T>& a) {
    for (const Linear<T>* l : {&a.q, &a.k, &a.v, &a.o}) out.push_back(l);
  };
  auto add_ffn = [&](const FeedForward<T>& f) {
    out.push_back(&f.up);
    out.push_back(&f.down);
  };
  out.push_back(&patch_embed_);
  add_attention(vision_block_.attn);
  add_ffn(vision_block_.ffn);
  for (const auto& l : resampler_) {
    add_attention(l.attn);
    add_ffn(l.ffw);
  }
  for (const auto& layer : layers_) {
    if (layer.xattn) {
      add_attention(layer.xattn->attn);
      add_ffn(layer.xattn->ffw);
    }
    add_attention(layer.self_attn);
    add_ffn(layer.ffn);
  }
  out.push_back(&lm_head_);
  return out;
}

// ---------------------------------------------------------------------------
// Generation

template <typename T>
std::vector<text::TokenId> Model<T>::generate(std::span<const text::TokenId> prompt,
                                              std::span<const std::size_t> media_positions,
                                              const data::ToyImage* image, const GenerateOptions& options) const {
  if (prompt.empty()) throw LengthError("generation prompt is empty");
  if (prompt.size() > config_.max_seq_len)
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  if (options.temperature && !(*options.temperature > 0.0))
    throw ConfigError("sampling temperature must be positive");
  if (options.vocab_limit && *options.vocab_limit == 0) throw ConfigError("vocab_limit must be positive");

  std::optional<Tensor<T>> latents;
  if (image != nullptr) {
    Tape<T> tape(false);
    latents = encode_image(tape, *image).value();
  }
  Rng rng(options.seed);
  std::vector<text::TokenId> seq(prompt.begin(), prompt.end());
  std::vector<text::TokenId> out;
  while (out.size() < options.max_new && seq.size() < config_.max_seq_len) {
    Tape<T> tape(false);
    const Tensor<T>& logits = decode_with_latents(tape, seq, media_positions, latents ? &*latents : nullptr).value();
    auto last = logits.row(logits.rows() - 1);
    if (options.vocab_limit && *options.vocab_limit < last.size()) last = last.first(*options.vocab_limit);
    text::TokenId next = 0;
    if (!options.temperature) {
      next = static_cast<text::TokenId>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      const double tau = *options.temperature;
      const double top = static_cast<double>(*std::max_element(last.begin(), last.end()));
      std::vector<double> weights(last.size());
      double total = 0.0;
      for (std::size_t i = 0; i < last.size(); ++i) total += weights[i] = std::exp((static_cast<double>(last[i]) - top) / tau);
      double u = rng.uniform() * total;
      std::size_t pick = last.size() - 1;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (u < weights[i]) {
          pick = i;
          break;
        }
        u -= weights[i];
      }
      next = static_cast<text::TokenId>(pick);
    }
    seq.push_back(next);
    out.push_back(next);
    if (next == text::Vocab::kEos) break;
  }
  return out;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Model<float>;
template class Model<double>;
template Var<float> lora_forward(Tape<float>&, const Linear<float>&, Var<float>);
template Var<double> lora_forward(Tape<double>&, const Linear<double>&, Var<double>);
template Tensor<float> patchify(const data::ToyImage&, std::size_t);
template Tensor<double> patchify(const data::ToyImage&, std::size_t);

}  // namespace mmgpt::model
