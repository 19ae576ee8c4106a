#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <unistd.h>

#include "doctest.h"
#include "mmgpt/common/rng.hpp"
#include "mmgpt/data/synth.hpp"
#include "mmgpt/model/checkpoint.hpp"
#include "mmgpt/model/model.hpp"
#include "mmgpt/numerics/grad_check.hpp"

using namespace mmgpt;
using namespace mmgpt::model;
using text::TokenId;

namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 40;
  c.d_model = 16;
  c.n_decoder_layers = 2;
  c.n_heads = 2;
  c.n_resampler_latents = 4;
  c.max_seq_len = 24;
  c.lora_rank = 2;
  c.lora_alpha = 4;
  c.init_seed = 7;
  return c;
}

data::ToyImage scene(std::uint64_t seed) {
  Rng rng(seed);
  return data::generate_scene(rng);
}

std::vector<TokenId> tokens(std::size_t n, std::uint64_t seed, std::size_t vocab) {
  Rng rng(seed);
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(3 + rng.below(vocab - 3));
  return ids;
}

template <typename T>
double max_abs_diff(const nn::Tensor<T>& a, const nn::Tensor<T>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a.data[i] - b.data[i])));
  return m;
}

template <typename T>
void open_gates(Model<T>& model, T value) {
  for (auto* p : model.params().all())
    if (p->name.find(".gate_") != std::string::npos) p->tensor.data[0] = value;
}

double frobenius(const nn::Tensor<double>& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("mmgpt_model_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config json round trip and validation") {
  ModelConfig c = tiny_config();
  c.lora_targets = {LoraTarget::SelfAttn};
  CHECK(ModelConfig::from_json(c.to_json()) == c);

  ModelConfig bad = tiny_config();
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.lora_rank = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(parse_lora_target("mlp"), ConfigError);
}

TEST_CASE("vision encoder yields one row per patch") {
  Model<double> model(tiny_config());
  const auto img = scene(1);
  nn::Tape<double> tape(false);
  auto f1 = model.vision_encode(tape, img);
  CHECK(f1.shape() == nn::Shape{16, 16});
  auto f2 = model.vision_encode(tape, img);
  CHECK(f1.value().data == f2.value().data);

  data::ToyImage odd = img;
  odd.height = odd.width = 6;
  odd.pixels.resize(6 * 6 * 3);
  CHECK_THROWS_AS(model.vision_encode(tape, odd), ConfigError);
}

TEST_CASE("resampler output has R rows for any patch count") {
  ModelConfig c = tiny_config();
  c.d_model = 32;
  c.n_heads = 4;
  c.n_resampler_latents = 8;
  Model<double> model(c);
  Rng rng(3);
  for (std::size_t p : {16u, 64u}) {
    std::vector<double> v(p * 32);
    for (auto& x : v) x = rng.normal();
    nn::Tensor<double> features({p, 32}, v);
    nn::Tape<double> tape(false);
    const auto out = model.perceiver_resample(tape, tape.constant(features)).value();
    CHECK(out.shape == nn::Shape{8, 32});
    for (double x : out.data) CHECK(std::isfinite(x));
    CHECK(frobenius(out) <= 10.0 * frobenius(features));
  }
}

TEST_CASE("closed gates make the decoder ignore the image") {
  Model<double> model(tiny_config());
  const auto img = scene(2);
  const auto ids = tokens(12, 5, 40);
  const std::vector<std::size_t> media{3};
  const auto text_only = model.logits(ids, {}, nullptr);
  const auto with_image = model.logits(ids, media, &img);
  CHECK(max_abs_diff(text_only, with_image) <= 1e-6);

  // An image without any media position in the sequence is never attended.
  open_gates(model, 0.7);
  CHECK(max_abs_diff(model.logits(ids, {}, nullptr), model.logits(ids, {}, &img)) == 0.0);

  // With open gates, rows before the media position stay text-only.
  const auto open = model.logits(ids, media, &img);
  const auto plain = model.logits(ids, {}, nullptr);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 40; ++j) CHECK(open.at(i, j) == plain.at(i, j));
  CHECK(max_abs_diff(open, plain) > 1e-6);
}

TEST_CASE("logits are causal") {
  Model<double> model(tiny_config());
  open_gates(model, 0.5);
  const auto img = scene(4);
  const std::vector<std::size_t> media{1};
  const auto ids = tokens(14, 9, 40);
  const auto base = model.logits(ids, media, &img);
  for (std::size_t j = 2; j < ids.size(); j += 3) {
    auto changed = ids;
    changed[j] = changed[j] == 5 ? 6 : 5;
    const auto probe = model.logits(changed, media, &img);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t k = 0; k < 40; ++k) REQUIRE(probe.at(i, k) == base.at(i, k));
    double diff = 0.0;
    for (std::size_t k = 0; k < 40; ++k) diff = std::max(diff, std::abs(probe.at(j, k) - base.at(j, k)));
    CHECK(diff > 0.0);
  }
}

TEST_CASE("sequence length limit") {
  Model<float> model(tiny_config());
  const auto ids = tokens(25, 1, 40);
  CHECK_THROWS_AS(model.logits(ids, {}, nullptr), LengthError);
  CHECK_THROWS_AS(model.logits(std::vector<TokenId>{}, {}, nullptr), LengthError);
}

TEST_CASE("lora_forward examples") {
  SUBCASE("zero B leaves the base projection") {
    Model<double> model(tiny_config());
    model.inject_lora({LoraTarget::SelfAttn});
    const Linear<double>* q = nullptr;
    for (const auto* l : model.linears())
      if (l->name == "decoder.layers.0.self_attn.q") q = l;
    REQUIRE(q != nullptr);
    REQUIRE(q->has_lora());
    Rng rng(1);
    std::vector<double> xs(3 * 16);
    for (auto& v : xs) v = rng.normal();
    nn::Tape<double> tape;
    auto x = tape.constant(nn::Tensor<double>({3, 16}, xs));
    const auto y = lora_forward(tape, *q, x).value();
    const auto base = nn::matmul_nt(x, tape.constant(*q->weight)).value();
    CHECK(y.data == base.data);
  }

  SUBCASE("identity slices pass the rank window through") {
    nn::Tensor<double> w = nn::Tensor<double>::zeros({4, 4});
    nn::Tensor<double> a = nn::Tensor<double>::zeros({2, 4});
    nn::Tensor<double> b = nn::Tensor<double>::zeros({4, 2});
    a.at(0, 0) = a.at(1, 1) = 1.0;
    b.at(0, 0) = b.at(1, 1) = 1.0;
    Linear<double> l{"probe", 4, 4, &w, nullptr, &a, &b, 1.0};
    nn::Tape<double> tape;
    const auto y = lora_forward(tape, l, tape.constant(nn::Tensor<double>({1, 4}, {1, 2, 3, 4}))).value();
    CHECK(y.data == std::vector<double>{1, 2, 0, 0});
  }

  SUBCASE("random case matches the two-step computation") {
    Rng rng(11);
    auto rnd = [&](nn::Shape s) {
      std::vector<double> v(nn::numel(s));
      for (auto& x : v) x = rng.normal();
      return nn::Tensor<double>(s, v, true);
    };
    auto w = rnd({3, 5});
    auto bias = rnd({3});
    auto a = rnd({2, 5});
    auto b = rnd({3, 2});
    auto x = rnd({4, 5});
    Linear<double> l{"probe", 5, 3, &w, &bias, &a, &b, 0.75};
    nn::Tape<double> tape;
    const auto y = lora_forward(tape, l, tape.constant(x)).value();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t o = 0; o < 3; ++o) {
        double base = bias.data[o];
        for (std::size_t k = 0; k < 5; ++k) base += w.at(o, k) * x.at(i, k);
        double low[2] = {0, 0};
        for (std::size_t r = 0; r < 2; ++r)
          for (std::size_t k = 0; k < 5; ++k) low[r] += a.at(r, k) * x.at(i, k);
        const double delta = b.at(o, 0) * low[0] + b.at(o, 1) * low[1];
        CHECK(y.at(i, o) == doctest::Approx(base + 0.75 * delta).epsilon(1e-12));
      }
  }
}

TEST_CASE("inject_lora is transparent and freezes the base") {
  Model<float> model(tiny_config());
  open_gates(model, 0.3f);
  const auto img = scene(6);
  const auto ids = tokens(16, 2, 40);
  const std::vector<std::size_t> media{2};
  const auto before = model.logits(ids, media, &img);
  const std::size_t total_before = model.parameter_count();
  model.inject_lora();
  const auto after = model.logits(ids, media, &img);
  CHECK(max_abs_diff(before, after) == 0.0);

  const std::set<LoraTarget> all{LoraTarget::SelfAttn, LoraTarget::CrossAttn, LoraTarget::Ffn};
  CHECK(model.trainable_count() == model.expected_lora_count(all));
  CHECK(model.parameter_count() == total_before + model.expected_lora_count(all));

  std::size_t enumerated = 0;
  for (const auto* l : model.linears())
    if (l->has_lora()) enumerated += model.config().lora_rank * (l->d_in + l->d_out);
  CHECK(enumerated == model.trainable_count());

  for (const auto* p : model.params().all()) {
    const bool adapter = p->name.find(".lora_") != std::string::npos;
    CHECK_MESSAGE(p->tensor.requires_grad == adapter, p->name);
  }
  CHECK_THROWS_AS(model.inject_lora(), ConfigError);
}

TEST_CASE("inject_lora target selection") {
  Model<float> model(tiny_config());
  model.inject_lora({LoraTarget::SelfAttn});
  for (const auto* l : model.linears()) {
    const bool self = l->name.find(".self_attn.") != std::string::npos && l->name.rfind("decoder.", 0) == 0;
    CHECK_MESSAGE(l->has_lora() == self, l->name);
  }
  CHECK(model.trainable_count() == model.expected_lora_count({LoraTarget::SelfAttn}));

  Model<float> other(tiny_config());
  CHECK_THROWS_AS(other.inject_lora({}), ConfigError);
}

TEST_CASE("frozen parameters receive no gradient") {
  Model<float> model(tiny_config());
  model.inject_lora();
  for (auto* p : model.params().all())
    if (p->name.find(".lora_b") != std::string::npos) p->tensor.data.assign(p->tensor.size(), 0.01f);
  const auto img = scene(8);
  const auto ids = tokens(10, 4, 40);
  std::vector<TokenId> targets(ids.begin() + 1, ids.end());
  targets.push_back(1);
  std::unique_ptr<bool[]> mask(new bool[ids.size()]);
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = true;
  nn::Tape<float> tape;
  const std::vector<std::size_t> media{0};
  auto loss = nn::cross_entropy_masked(model.forward(tape, ids, media, &img), std::span<const TokenId>(targets),
                                       std::span<const bool>(mask.get(), ids.size()));
  tape.backward(loss);
  std::size_t adapters_with_grad = 0;
  for (const auto* p : model.params().all()) {
    if (!p->tensor.requires_grad) {
      CHECK_MESSAGE(!p->tensor.grad.has_value(), p->name);
    } else if (p->tensor.grad) {
      for (float g : *p->tensor.grad)
        if (g != 0.0f) {
          ++adapters_with_grad;
          break;
        }
    }
  }
  CHECK(adapters_with_grad > 0);
}

TEST_CASE("full-model gradient check in double precision") {
  ModelConfig c = tiny_config();
  const auto img = scene(12);
  const auto ids = tokens(12, 13, 40);
  std::vector<TokenId> targets(ids.begin() + 1, ids.end());
  targets.push_back(1);
  std::unique_ptr<bool[]> mask(new bool[ids.size()]);
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = i >= 4;
  const std::vector<std::size_t> media{1};

  auto check = [&](Model<double>& model) {
    std::vector<nn::NamedTensor> params;
    for (auto* p : model.params().all())
      if (p->tensor.requires_grad) params.push_back({p->name, &p->tensor});
    auto loss = [&](nn::Tape<double>& tape) {
      return nn::cross_entropy_masked(model.forward(tape, ids, media, &img), std::span<const TokenId>(targets),
                                      std::span<const bool>(mask.get(), ids.size()));
    };
    nn::GradCheckOptions options;
    options.max_entries_per_tensor = 6;
    options.seed = 21;
    return nn::grad_check_params(loss, params, options);
  };

  SUBCASE("pretrain mode") {
    Model<double> model(c);
    open_gates(model, 0.4);
    const auto report = check(model);
    INFO("worst: ", report.worst_tensor, "[", report.worst_index, "] analytic ", report.worst_analytic, " numeric ",
         report.worst_numeric);
    CHECK(report.entries_checked > 300);
    CHECK(report.max_rel_error < 1e-4);
  }
  SUBCASE("adapter mode") {
    Model<double> model(c);
    open_gates(model, 0.4);
    model.inject_lora();
    Rng rng(5);
    for (auto* p : model.params().all())
      if (p->name.find(".lora_b") != std::string::npos)
        for (auto& v : p->tensor.data) v = rng.normal(0.0, 0.05);
    const auto report = check(model);
    INFO("worst: ", report.worst_tensor);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("generation") {
  Model<float> model(tiny_config());
  const auto img = scene(3);
  const auto prompt = tokens(6, 3, 40);
  const std::vector<std::size_t> media{0};
  GenerateOptions greedy;
  greedy.max_new = 0;
  CHECK(model.generate(prompt, media, &img, greedy).empty());

  greedy.max_new = 5;
  const auto a = model.generate(prompt, media, &img, greedy);
  CHECK(a == model.generate(prompt, media, &img, greedy));
  CHECK(!a.empty());
  CHECK(a.size() <= 5);

  GenerateOptions sampled{5, 1.0, 99};
  CHECK(model.generate(prompt, media, &img, sampled) == model.generate(prompt, media, &img, sampled));

  // Generation stops at the context limit.
  greedy.max_new = 100;
  CHECK(model.generate(prompt, media, &img, greedy).size() <= 24 - 6);

  CHECK_THROWS_AS(model.generate(tokens(25, 1, 40), {}, nullptr, greedy), LengthError);
  CHECK_THROWS_AS(model.generate(std::vector<TokenId>{}, {}, nullptr, greedy), LengthError);
  GenerateOptions cold{5, 0.0, 1};
  CHECK_THROWS_AS(model.generate(prompt, {}, nullptr, cold), ConfigError);

  GenerateOptions narrow{8, 3.0, 4, 6};
  for (auto id : model.generate(prompt, media, &img, narrow)) CHECK(id < 6);
  narrow.temperature.reset();
  for (auto id : model.generate(prompt, media, &img, narrow)) CHECK(id < 6);
}

TEST_CASE("checkpoint round trips") {
  const auto dir = temp_dir("ckpt");
  Model<float> model(tiny_config());
  open_gates(model, 0.25f);
  const auto img = scene(10);
  const auto ids = tokens(9, 8, 40);
  const std::vector<std::size_t> media{0};

  save_checkpoint(model, dir / "base.ckpt");
  auto reloaded = load_model<float>(dir / "base.ckpt");
  CHECK(reloaded->config() == model.config());
  CHECK(max_abs_diff(model.logits(ids, media, &img), reloaded->logits(ids, media, &img)) == 0.0);

  model.inject_lora();
  Rng rng(2);
  for (auto* p : model.params().all())
    if (p->name.find(".lora_b") != std::string::npos)
      for (auto& v : p->tensor.data) v = static_cast<float>(rng.normal(0.0, 0.1));
  const auto tuned = model.logits(ids, media, &img);

  save_checkpoint(model, dir / "full.ckpt");
  auto full = load_model<float>(dir / "full.ckpt");
  CHECK(full->has_lora());
  CHECK(full->trainable_count() == model.trainable_count());
  CHECK(max_abs_diff(tuned, full->logits(ids, media, &img)) == 0.0);

  save_checkpoint(model, dir / "lora.ckpt", CheckpointKind::Lora);
  const auto lora = read_checkpoint(dir / "lora.ckpt");
  for (const auto& e : lora.entries) {
    const bool adapter = e.name.find(".lora_") != std::string::npos || e.name.find(".gate_") != std::string::npos;
    CHECK_MESSAGE(adapter, e.name);
  }
  auto base = load_model<float>(dir / "base.ckpt");
  attach_lora(*base, dir / "lora.ckpt");
  CHECK(max_abs_diff(tuned, base->logits(ids, media, &img)) == 0.0);

  CHECK_THROWS_AS(load_model<float>(dir / "lora.ckpt"), ConfigError);

  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << "MMGPTCKP garbage";
  }
  CHECK_THROWS_AS(load_model<float>(dir / "bad.ckpt"), IoError);
  CHECK_THROWS_AS(load_model<float>(dir / "missing.ckpt"), IoError);

  auto bytes = encode_checkpoint(read_checkpoint(dir / "base.ckpt"));
  bytes.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bytes), IoError);
  fs::remove_all(dir);
}

TEST_CASE("double model reproduces float model") {
  Model<float> f(tiny_config());
  Model<double> d(tiny_config());
  d.copy_values_from(f);
  const auto ids = tokens(8, 1, 40);
  const auto lf = f.logits(ids, {}, nullptr);
  const auto ld = d.logits(ids, {}, nullptr);
  for (std::size_t i = 0; i < lf.size(); ++i) CHECK(static_cast<double>(lf.data[i]) == doctest::Approx(ld.data[i]).epsilon(1e-4));
}
