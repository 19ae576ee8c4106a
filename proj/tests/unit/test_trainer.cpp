#include <cmath>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "doctest.h"
#include "mmgpt/model/checkpoint.hpp"
#include "mmgpt/train/trainer.hpp"
#include "../support/toy_corpus.hpp"

using namespace mmgpt;
using namespace mmgpt::train;
using model::Model;

namespace fs = std::filesystem;

namespace {

TrainConfig quick_config(TrainMode mode) {
  TrainConfig c;
  c.base_lr = 1e-2;
  c.accumulation_steps = 2;
  c.simulated_devices = 1;
  c.mode = mode;
  c.seed = 17;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
std::vector<std::vector<T>> snapshot(const Model<T>& m) {
  std::vector<std::vector<T>> out;
  for (const auto* p : m.params().all()) out.push_back(p->tensor.data);
  return out;
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(0, 100, 1e-5) == 1e-5);
  CHECK(cosine_lr(100, 100, 1e-5) <= 1e-12);
  CHECK(cosine_lr(50, 100, 1e-5) == doctest::Approx(5e-6).epsilon(1e-12));
  CHECK(cosine_lr(150, 100, 1e-5) == cosine_lr(100, 100, 1e-5));
  CHECK(cosine_lr(25, 100, 1.0) > cosine_lr(26, 100, 1.0));
  CHECK_THROWS_AS(cosine_lr(0, 0, 1.0), ConfigError);
}

TEST_CASE("batching arithmetic") {
  TrainConfig defaults;
  CHECK(defaults.base_lr == 1e-5);
  CHECK(defaults.accumulation_steps == 16);
  CHECK(defaults.simulated_devices == 8);
  CHECK(defaults.effective_batch() == 256);
  CHECK(defaults.micro_steps_per_update() == 128);

  TrainConfig c;
  c.simulated_devices = 1;
  CHECK(updates_for(320, c) == 20);
  CHECK(updates_for(321, c) == 21);
  CHECK(updates_for(16, c) == 1);
}

TEST_CASE("train config json") {
  TrainConfig c = quick_config(TrainMode::Pretrain);
  c.total_updates = 12;
  c.clip_norm.reset();
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(!back.clip_norm);
  CHECK_THROWS_AS(TrainConfig::from_json({{"accumulation_steps", 0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"mode", "full"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"base_lr", "fast"}}), ConfigError);
}

TEST_CASE("next-token targets follow the mask at the target position") {
  text::EncodedSample s;
  s.ids = {0, 10, 11, 12, 1};
  s.loss_mask = {false, false, false, true, true};
  const auto t = shift_targets(s);
  CHECK(t.targets == std::vector<text::TokenId>{10, 11, 12, 1, 1});
  CHECK(std::vector<bool>(t.mask.get(), t.mask.get() + 5) == std::vector<bool>{false, false, true, true, false});
  CHECK(t.masked == 2);
}

TEST_CASE("training loop") {
  spdlog::set_level(spdlog::level::err);
  const auto dir = testing::scratch_dir("trainer");
  auto corpus = testing::make_corpus(3, 8, 8, dir);
  const auto cfg = testing::tiny_model(corpus.vocab.size());

  SUBCASE("untrained losses sit near ln V") {
    auto big = cfg;
    big.vocab_size = 512;
    big.d_model = 32;
    big.n_heads = 4;
    Model<float> m(big);
    const double ln_v = std::log(512.0);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto losses = joint_step(m, corpus.vl[i], corpus.lm[i]);
      REQUIRE(losses.vl);
      REQUIRE(losses.lm);
      CHECK(std::abs(*losses.vl - ln_v) <= 0.1 * ln_v);
      CHECK(std::abs(*losses.lm - ln_v) <= 0.1 * ln_v);
    }
    EvalOptions opts;
    opts.loss_only = true;
    const auto report = evaluate(m, corpus.vocab, corpus.all(), opts);
    CHECK(std::abs(report.perplexity - 512.0) <= 0.15 * 512.0);
  }

  SUBCASE("loss decreases on a fixed pair") {
    Model<float> m(cfg);
    AdamW<float> opt({});
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 50; ++step) {
      const auto l = joint_step(m, corpus.vl[0], corpus.lm[0]);
      if (step == 0) first = *l.vl + *l.lm;
      last = *l.vl + *l.lm;
      opt.step(m, 3e-3);
      zero_grads(m);
    }
    CHECK(last < 0.5 * first);
  }

  SUBCASE("lora descent touches adapters only") {
    Model<float> m(cfg);
    {
      AdamW<float> pre({});
      for (int step = 0; step < 40; ++step) {
        joint_step(m, corpus.vl[2], corpus.lm[2]);
        pre.step(m, 3e-3);
        zero_grads(m);
      }
    }
    m.inject_lora();
    const auto before = snapshot(m);
    AdamW<float> opt({});
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 100; ++step) {
      const auto l = joint_step(m, corpus.vl[1], corpus.lm[1]);
      for (const auto* p : m.params().all())
        if (!p->tensor.requires_grad) REQUIRE_MESSAGE(!p->tensor.grad, p->name);
      if (step == 0) first = *l.vl + *l.lm;
      last = *l.vl + *l.lm;
      opt.step(m, 1e-2);
      zero_grads(m);
    }
    CHECK(last < 0.9 * first);
    const auto after = snapshot(m);
    const auto params = m.params().all();
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!params[i]->tensor.requires_grad) CHECK_MESSAGE(before[i] == after[i], params[i]->name);
  }

  SUBCASE("empty-mask example is skipped") {
    Model<float> m(cfg);
    auto empty = corpus.lm[0];
    empty.sample.loss_mask.assign(empty.sample.loss_mask.size(), false);
    const auto l = joint_step(m, corpus.vl[0], empty);
    CHECK(l.vl);
    CHECK(!l.lm);
    nn::Tape<float> tape;
    CHECK_THROWS_AS(sample_loss(m, tape, empty), EmptyLossError);
  }

  SUBCASE("accumulated gradient equals the batch gradient") {
    Model<double> m(cfg);
    const std::size_t k = 4;
    for (std::size_t i = 0; i < k; ++i) joint_step(m, corpus.vl[i], corpus.lm[i], 1.0 / k);
    std::vector<std::vector<double>> accumulated;
    for (const auto* p : m.params().all()) accumulated.push_back(p->tensor.grad.value_or(std::vector<double>{}));
    zero_grads(m);
    std::vector<const data::TrainingExample*> vl, lm;
    for (std::size_t i = 0; i < k; ++i) {
      vl.push_back(&corpus.vl[i]);
      lm.push_back(&corpus.lm[i]);
    }
    batch_backward(m, std::span<const data::TrainingExample* const>(vl), std::span<const data::TrainingExample* const>(lm));
    double worst = 0.0;
    const auto params = m.params().all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& batch = params[i]->tensor.grad.value_or(std::vector<double>{});
      REQUIRE(batch.size() == accumulated[i].size());
      for (std::size_t j = 0; j < batch.size(); ++j) worst = std::max(worst, std::abs(batch[j] - accumulated[i][j]));
    }
    CHECK(worst <= 1e-6);
  }

  SUBCASE("update count, schedule and metrics log") {
    Model<float> m(cfg);
    TrainConfig tc = quick_config(TrainMode::Pretrain);
    tc.accumulation_steps = 16;
    tc.epochs = 40;
    TrainOutputs out;
    out.metrics_csv = dir / "metrics.csv";
    const auto result = train::train(m, corpus.vl, corpus.lm, tc, out);
    CHECK(result.micro_steps == 320);
    CHECK(result.updates == 20);
    REQUIRE(result.metrics.size() == 20);
    for (std::size_t u = 0; u < 20; ++u) {
      CHECK(result.metrics[u].update == u);
      CHECK(result.metrics[u].lr == cosine_lr(u, 20, tc.base_lr));
    }
    CHECK(result.metrics.back().loss_vl + result.metrics.back().loss_lm <
          result.metrics.front().loss_vl + result.metrics.front().loss_lm);

    std::ifstream in(dir / "metrics.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "update,lr,loss_vl,loss_lm,wall_ms");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 20);
  }

  SUBCASE("partial final group still updates") {
    Model<float> m(cfg);
    TrainConfig tc = quick_config(TrainMode::Pretrain);
    tc.accumulation_steps = 3;
    const auto result = train::train(m, corpus.vl, corpus.lm, tc);
    CHECK(result.micro_steps == 8);
    CHECK(result.updates == 3);
  }

  SUBCASE("mode checks") {
    Model<float> base(cfg);
    CHECK_THROWS_AS(train::train(base, corpus.vl, corpus.lm, quick_config(TrainMode::LoraFinetune)), ConfigError);
    base.inject_lora();
    CHECK_THROWS_AS(train::train(base, corpus.vl, corpus.lm, quick_config(TrainMode::Pretrain)), ConfigError);
    CHECK_THROWS_AS(train::train(base, std::span<const data::TrainingExample>{}, corpus.lm, quick_config(TrainMode::LoraFinetune)),
                    ConfigError);
  }

  SUBCASE("runs are deterministic per seed") {
    auto run = [&](const std::string& tag) {
      Model<float> m(cfg);
      m.inject_lora();
      TrainConfig tc = quick_config(TrainMode::LoraFinetune);
      tc.total_updates = 6;
      TrainOutputs out;
      out.metrics_csv = dir / (tag + ".csv");
      out.final_checkpoint = dir / (tag + ".ckpt");
      const auto r = train::train(m, corpus.vl, corpus.lm, tc, out);
      std::vector<std::string> rows;
      for (auto row : r.metrics) {
        row.wall_ms = 0;
        rows.push_back(format_metric(row));
      }
      return std::make_pair(rows, slurp(dir / (tag + ".ckpt")));
    };
    const auto a = run("a"), b = run("b");
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
    CHECK(!a.second.empty());
  }

  SUBCASE("frozen parameters are bit-identical after lora updates") {
    Model<float> m(cfg);
    m.inject_lora();
    model::save_checkpoint(m, dir / "initial.ckpt");
    TrainConfig tc = quick_config(TrainMode::LoraFinetune);
    tc.accumulation_steps = 1;
    tc.total_updates = 20;
    train::train(m, corpus.vl, corpus.lm, tc);
    const auto initial = model::read_checkpoint(dir / "initial.ckpt");
    std::size_t frozen = 0, moved = 0;
    for (const auto& e : initial.entries) {
      const auto* t = m.params().find(e.name);
      REQUIRE(t != nullptr);
      if (!e.trainable) {
        ++frozen;
        CHECK_MESSAGE(std::vector<float>(t->data) == e.values, e.name);
      } else if (std::vector<float>(t->data) != e.values) {
        ++moved;
      }
    }
    CHECK(frozen > 0);
    CHECK(moved > 0);
  }

  SUBCASE("divergence aborts and keeps the last checkpoint") {
    Model<float> m(cfg);
    TrainConfig tc = quick_config(TrainMode::Pretrain);
    tc.total_updates = 4;
    tc.accumulation_steps = 1;
    TrainOutputs out;
    out.final_checkpoint = dir / "run.ckpt";
    out.checkpoint_every = 1;
    out.on_update = [&](const MetricRow& row) {
      if (row.update == 1) m.params().at("decoder.lm_head.weight").data[0] = std::nanf("");
    };
    CHECK_THROWS_AS(train::train(m, corpus.vl, corpus.lm, tc, out), DivergenceError);
    CHECK(fs::exists(dir / "run.u1.ckpt"));
    CHECK(!fs::exists(dir / "run.ckpt"));
    CHECK_NOTHROW(model::load_model<float>(dir / "run.u1.ckpt"));
  }

  fs::remove_all(dir);
}

TEST_CASE("adamw first step and clipping") {
  model::ModelConfig c = testing::tiny_model(20);
  Model<double> m(c);
  auto& w = m.params().at("decoder.lm_head.weight");
  const double w0 = w.data[0];
  for (auto* p : m.params().all()) p->tensor.requires_grad = p->name == "decoder.lm_head.weight";
  w.grad = std::vector<double>(w.size(), 0.0);
  (*w.grad)[0] = 0.5;
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.01});
  opt.step(m, 0.1);
  const double expected = w0 - 0.1 * 0.01 * w0 - 0.1 * (0.05 / 0.1) / (std::sqrt(0.00025 / 0.001) + 1e-8);
  CHECK(w.data[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(opt.steps() == 1);

  w.grad = std::vector<double>(w.size(), 0.0);
  (*w.grad)[0] = 3.0;
  (*w.grad)[1] = 4.0;
  CHECK(clip_grad_norm(m, 1.0) == doctest::Approx(5.0));
  CHECK((*w.grad)[0] == doctest::Approx(0.6));
  CHECK((*w.grad)[1] == doctest::Approx(0.8));
}

TEST_CASE("token overlap") {
  CHECK(token_overlap("A picture of two red squares.", "A picture of two red squares.") == 1.0);
  CHECK(token_overlap("", "") == 1.0);
  CHECK(token_overlap("blue", "red") == 0.0);
  CHECK(token_overlap("red squares", "two red squares") == doctest::Approx(0.8));
}
