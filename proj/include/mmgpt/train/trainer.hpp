#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmgpt/data/dataset.hpp"
#include "mmgpt/model/model.hpp"
#include "mmgpt/text/tokenizer.hpp"

namespace mmgpt::train {

enum class TrainMode { Pretrain, LoraFinetune };

std::string to_string(TrainMode mode);
/// Accepts "pretrain" and "lora" (or "lora_finetune").
TrainMode parse_train_mode(const std::string& name);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  double base_lr = 1e-5;
  std::size_t accumulation_steps = 16;
  std::size_t simulated_devices = 8;
  std::size_t epochs = 1;
  /// Fixed number of optimizer updates; overrides epochs when set.
  std::optional<std::size_t> total_updates;
  /// Stop early once an update's mean of loss_vl and loss_lm falls below this.
  std::optional<double> stop_loss;
  AdamWConfig adamw;
  /// Global gradient-norm clip; unset disables clipping.
  std::optional<double> clip_norm = 1.0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::LoraFinetune;

  std::size_t micro_steps_per_update() const { return accumulation_steps * simulated_devices; }
  /// Samples per optimizer update: one VL and one LM per micro-step.
  std::size_t effective_batch() const { return 2 * micro_steps_per_update(); }

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// base * 0.5 * (1 + cos(pi * step / total)); steps past the end clamp.
double cosine_lr(std::size_t step, std::size_t total_steps, double base);

/// Update count for a run of total_micro_steps; a trailing partial group
/// still gets its own update.
std::size_t updates_for(std::size_t total_micro_steps, const TrainConfig& config);

/// Next-token targets: logits at i predict token i+1, weighted by the mask at
/// i+1. The last position has no target.
struct ShiftedTargets {
  std::vector<text::TokenId> targets;
  std::unique_ptr<bool[]> mask;
  std::size_t size = 0;
  std::size_t masked = 0;

  std::span<const bool> mask_span() const { return {mask.get(), size}; }
};
ShiftedTargets shift_targets(const text::EncodedSample& sample);

/// Masked next-token loss of one example, conditioned on its image if any.
/// Throws EmptyLossError when no target is masked.
template <typename T>
nn::Var<T> sample_loss(const model::Model<T>& model, nn::Tape<T>& tape, const data::TrainingExample& example);

struct StepLosses {
  std::optional<double> vl;
  std::optional<double> lm;
};

/// Forward and backward on one VL and one LM example. Gradients of
/// grad_scale * (loss_vl + loss_lm) accumulate into the trainable
/// parameters. An example without masked tokens is skipped with a warning.
template <typename T>
StepLosses joint_step(model::Model<T>& model, const data::TrainingExample& vl, const data::TrainingExample& lm,
                      double grad_scale = 1.0);

/// Gradient reference for accumulation: the mean over pairs of
/// (loss_vl + loss_lm) on one tape, backpropagated once.
template <typename T>
double batch_backward(model::Model<T>& model, std::span<const data::TrainingExample* const> vl,
                      std::span<const data::TrainingExample* const> lm);

template <typename T>
void zero_grads(model::Model<T>& model);

template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  /// Applies one update to every trainable parameter that holds a gradient.
  void step(model::Model<T>& model, double lr);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Scales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(model::Model<T>& model, double max_norm);

struct MetricRow {
  std::size_t update = 0;
  double lr = 0.0;
  double loss_vl = 0.0;
  double loss_lm = 0.0;
  double wall_ms = 0.0;
};

std::string metrics_header();
std::string format_metric(const MetricRow& row);

struct TrainOutputs {
  /// Appended to; the header is written when the file is new.
  std::optional<std::filesystem::path> metrics_csv;
  std::optional<std::filesystem::path> final_checkpoint;
  /// Periodic checkpoints go next to final_checkpoint as <stem>.u<N><ext>.
  std::size_t checkpoint_every = 0;
  std::function<void(const MetricRow&)> on_update;
};

struct TrainResult {
  std::size_t updates = 0;
  std::size_t micro_steps = 0;
  std::vector<MetricRow> metrics;
  bool stopped_early = false;
};

template <typename T>
TrainResult train(model::Model<T>& model, std::span<const data::TrainingExample> vl_set,
                  std::span<const data::TrainingExample> lm_set, const TrainConfig& config,
                  const TrainOutputs& outputs = {});

struct EvalOptions {
  std::size_t max_new = 48;
  /// Skip generation-based metrics.
  bool loss_only = false;
};

struct EvalReport {
  std::size_t samples = 0;
  double mean_loss = 0.0;
  double perplexity = 0.0;
  /// Greedy generations of each example's final response that match it exactly.
  std::size_t verbatim = 0;
  std::size_t generated = 0;
  std::size_t counting_correct = 0;
  std::size_t counting_total = 0;
  double caption_overlap = 0.0;
  std::size_t caption_total = 0;

  double counting_accuracy() const { return counting_total ? double(counting_correct) / double(counting_total) : 0.0; }
  double verbatim_rate() const { return generated ? double(verbatim) / double(generated) : 0.0; }
  nlohmann::json to_json() const;
};

/// Unigram F1 between whitespace-separated, lowercased tokens.
double token_overlap(const std::string& hypothesis, const std::string& reference);

template <typename T>
EvalReport evaluate(const model::Model<T>& model, const text::Vocab& vocab,
                    std::span<const data::TrainingExample> heldout, const EvalOptions& options = {});

}  // namespace mmgpt::train
