#include "mmgpt/train/trainer.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "mmgpt/common/error.hpp"
#include "mmgpt/data/synth.hpp"
#include "mmgpt/model/checkpoint.hpp"
#include "mmgpt/serve/chat.hpp"

namespace mmgpt::train {

namespace fs = std::filesystem;
using model::Model;

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(TrainMode mode) { return mode == TrainMode::Pretrain ? "pretrain" : "lora"; }

TrainMode parse_train_mode(const std::string& name) {
  if (name == "pretrain") return TrainMode::Pretrain;
  if (name == "lora" || name == "lora_finetune") return TrainMode::LoraFinetune;
  throw ConfigError("unknown training mode '" + name + "' (expected pretrain or lora)");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what);
  };
  require(base_lr > 0.0 && std::isfinite(base_lr), "base_lr must be positive");
  require(accumulation_steps >= 1, "accumulation_steps must be >= 1");
  require(simulated_devices >= 1, "simulated_devices must be >= 1");
  require(epochs >= 1 || total_updates.has_value(), "epochs must be >= 1");
  require(!total_updates || *total_updates >= 1, "total_updates must be >= 1");
  require(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0, "adamw.beta1 must be in [0, 1)");
  require(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0, "adamw.beta2 must be in [0, 1)");
  require(adamw.eps > 0.0, "adamw.eps must be positive");
  require(adamw.weight_decay >= 0.0, "adamw.weight_decay must be non-negative");
  require(!clip_norm || *clip_norm > 0.0, "clip_norm must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j{
      {"base_lr", base_lr},
      {"accumulation_steps", accumulation_steps},
      {"simulated_devices", simulated_devices},
      {"epochs", epochs},
      {"adamw",
       {{"beta1", adamw.beta1}, {"beta2", adamw.beta2}, {"eps", adamw.eps}, {"weight_decay", adamw.weight_decay}}},
      {"clip_norm", clip_norm ? nlohmann::json(*clip_norm) : nlohmann::json(nullptr)},
      {"seed", seed},
      {"mode", to_string(mode)},
  };
  if (total_updates) j["total_updates"] = *total_updates;
  if (stop_loss) j["stop_loss"] = *stop_loss;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.base_lr = j.value("base_lr", c.base_lr);
    c.accumulation_steps = j.value("accumulation_steps", c.accumulation_steps);
    c.simulated_devices = j.value("simulated_devices", c.simulated_devices);
    c.epochs = j.value("epochs", c.epochs);
    if (j.contains("total_updates") && !j["total_updates"].is_null())
      c.total_updates = j["total_updates"].get<std::size_t>();
    if (j.contains("stop_loss") && !j["stop_loss"].is_null()) c.stop_loss = j["stop_loss"].get<double>();
    if (auto it = j.find("adamw"); it != j.end()) {
      c.adamw.beta1 = it->value("beta1", c.adamw.beta1);
      c.adamw.beta2 = it->value("beta2", c.adamw.beta2);
      c.adamw.eps = it->value("eps", c.adamw.eps);
      c.adamw.weight_decay = it->value("weight_decay", c.adamw.weight_decay);
    }
    if (auto it = j.find("clip_norm"); it != j.end()) {
      if (it->is_null())
        c.clip_norm.reset();
      else
        c.clip_norm = it->get<double>();
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("mode")) c.mode = parse_train_mode(j["mode"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: bad field: ") + e.what());
  }
  c.validate();
  return c;
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base) {
  if (total_steps == 0) throw ConfigError("cosine schedule needs total_steps >= 1");
  const double frac = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::size_t updates_for(std::size_t total_micro_steps, const TrainConfig& config) {
  const std::size_t group = config.micro_steps_per_update();
  return (total_micro_steps + group - 1) / group;
}

// ---------------------------------------------------------------------------
// Losses and gradients

ShiftedTargets shift_targets(const text::EncodedSample& sample) {
  ShiftedTargets out;
  out.size = sample.ids.size();
  if (sample.loss_mask.size() != out.size) throw DimensionError("loss mask length differs from token count");
  out.targets.assign(out.size, text::Vocab::kEos);
  out.mask.reset(new bool[out.size]);
  for (std::size_t i = 0; i < out.size; ++i) {
    const bool has_next = i + 1 < out.size;
    out.targets[i] = has_next ? sample.ids[i + 1] : text::Vocab::kEos;
    out.mask[i] = has_next && sample.loss_mask[i + 1];
    out.masked += out.mask[i] ? 1 : 0;
  }
  return out;
}

template <typename T>
nn::Var<T> sample_loss(const Model<T>& model, nn::Tape<T>& tape, const data::TrainingExample& example) {
  const auto shifted = shift_targets(example.sample);
  if (shifted.masked == 0) throw EmptyLossError("example has no masked target tokens");
  const data::ToyImage* image = example.image ? &*example.image : nullptr;
  try {
    auto logits = model.forward(tape, example.sample.ids, example.sample.media_positions, image);
    return nn::cross_entropy_masked(logits, std::span<const text::TokenId>(shifted.targets), shifted.mask_span());
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("non-finite activations: ") + e.what());
  }
}

template <typename T>
StepLosses joint_step(Model<T>& model, const data::TrainingExample& vl, const data::TrainingExample& lm,
                      double grad_scale) {
  StepLosses out;
  auto run = [&](const data::TrainingExample& ex, std::optional<double>& slot, const char* kind) {
    if (ex.sample.masked_count() == 0 || shift_targets(ex.sample).masked == 0) {
      spdlog::warn("skipping {} example from '{}': no masked tokens", kind, ex.record.source);
      return;
    }
    nn::Tape<T> tape;
    auto loss = sample_loss(model, tape, ex);
    const double value = static_cast<double>(loss.value().data[0]);
    if (!std::isfinite(value)) throw DivergenceError(std::string(kind) + " loss is not finite");
    tape.backward(nn::scale(loss, static_cast<T>(grad_scale)));
    slot = value;
  };
  run(vl, out.vl, "vision-language");
  run(lm, out.lm, "language");
  return out;
}

template <typename T>
double batch_backward(Model<T>& model, std::span<const data::TrainingExample* const> vl,
                      std::span<const data::TrainingExample* const> lm) {
  if (vl.size() != lm.size() || vl.empty()) throw ConfigError("batch needs equally many VL and LM examples");
  nn::Tape<T> tape;
  const T weight = static_cast<T>(1.0 / static_cast<double>(vl.size()));
  std::optional<nn::Var<T>> total;
  for (std::size_t i = 0; i < vl.size(); ++i)
    for (const auto* ex : {vl[i], lm[i]}) {
      auto term = nn::scale(sample_loss(model, tape, *ex), weight);
      total = total ? nn::add(*total, term) : term;
    }
  tape.backward(*total);
  return static_cast<double>(total->value().data[0]);
}

template <typename T>
void zero_grads(Model<T>& model) {
  for (auto* p : model.params().all()) p->tensor.grad.reset();
}

template <typename T>
double clip_grad_norm(Model<T>& model, double max_norm) {
  double sq = 0.0;
  for (const auto* p : model.params().all())
    if (p->tensor.requires_grad && p->tensor.grad)
      for (T g : *p->tensor.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm is not finite");
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto* p : model.params().all())
      if (p->tensor.requires_grad && p->tensor.grad)
        for (T& g : *p->tensor.grad) g *= factor;
  }
  return norm;
}

template <typename T>
void AdamW<T>::step(Model<T>& model, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto* p : model.params().all()) {
    auto& tensor = p->tensor;
    if (!tensor.requires_grad || !tensor.grad) continue;
    auto& st = state_[p->name];
    if (st.m.empty()) {
      st.m.assign(tensor.size(), 0.0);
      st.v.assign(tensor.size(), 0.0);
    }
    const auto& grad = *tensor.grad;
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * g;
      st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * g * g;
      const double m_hat = st.m[i] / c1;
      const double v_hat = st.v[i] / c2;
      double w = static_cast<double>(tensor.data[i]);
      w -= lr * config_.weight_decay * w;
      w -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      tensor.data[i] = static_cast<T>(w);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

std::string metrics_header() { return "update,lr,loss_vl,loss_lm,wall_ms"; }

std::string format_metric(const MetricRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.3f", row.update, row.lr, row.loss_vl, row.loss_lm, row.wall_ms);
  return buf;
}

namespace {

fs::path periodic_path(const fs::path& final_path, std::size_t update) {
  fs::path p = final_path.parent_path() / (final_path.stem().string() + ".u" + std::to_string(update));
  p += final_path.extension();
  return p;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::optional<fs::path>& path) {
    if (!path) return;
    if (path->has_parent_path()) fs::create_directories(path->parent_path());
    const bool fresh = !fs::exists(*path) || fs::file_size(*path) == 0;
    out_.open(*path, std::ios::app);
    if (!out_) throw IoError("cannot open metrics log " + path->string());
    if (fresh) out_ << metrics_header() << '\n';
  }
  void write(const MetricRow& row) {
    if (out_.is_open()) out_ << format_metric(row) << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

}  // namespace

template <typename T>
TrainResult train(Model<T>& model, std::span<const data::TrainingExample> vl_set,
                  std::span<const data::TrainingExample> lm_set, const TrainConfig& config,
                  const TrainOutputs& outputs) {
  config.validate();
  if (vl_set.empty() || lm_set.empty()) throw ConfigError("training needs both vision-language and language examples");
  if (config.mode == TrainMode::LoraFinetune && !model.has_lora())
    throw ConfigError("lora mode needs a model with injected LoRA adapters");
  if (config.mode == TrainMode::Pretrain && model.has_lora())
    throw ConfigError("pretrain mode cannot run on a model with LoRA adapters");
  if (model.trainable_count() == 0) throw ConfigError("model has no trainable parameters");

  const std::size_t group = config.micro_steps_per_update();
  const std::size_t epoch_length = std::max(vl_set.size(), lm_set.size());
  const std::size_t total_micro = config.total_updates ? *config.total_updates * group : config.epochs * epoch_length;
  const std::size_t total_updates = updates_for(total_micro, config);
  const auto kind = config.mode == TrainMode::Pretrain ? model::CheckpointKind::Full : model::CheckpointKind::Lora;

  MetricsWriter metrics(outputs.metrics_csv);
  AdamW<T> optimizer(config.adamw);
  zero_grads(model);

  std::size_t epoch = 0;
  data::PairedIterator pairs(vl_set.size(), lm_set.size(), derive_seed(config.seed, "epoch:0"));
  TrainResult result;
  for (std::size_t update = 0; update < total_updates; ++update) {
    const auto start = std::chrono::steady_clock::now();
    const std::size_t this_group = std::min(group, total_micro - update * group);
    const double scale = 1.0 / static_cast<double>(this_group);
    double sum_vl = 0.0, sum_lm = 0.0;
    std::size_t n_vl = 0, n_lm = 0;
    for (std::size_t k = 0; k < this_group; ++k) {
      auto pair = pairs.next();
      if (!pair) {
        ++epoch;
        pairs = data::PairedIterator(vl_set.size(), lm_set.size(), derive_seed(config.seed, "epoch:" + std::to_string(epoch)));
        pair = pairs.next();
      }
      const auto losses = joint_step(model, vl_set[pair->vl], lm_set[pair->lm], scale);
      if (losses.vl) sum_vl += *losses.vl, ++n_vl;
      if (losses.lm) sum_lm += *losses.lm, ++n_lm;
      ++result.micro_steps;
    }
    if (config.clip_norm) clip_grad_norm(model, *config.clip_norm);
    const double lr = cosine_lr(update, total_updates, config.base_lr);
    optimizer.step(model, lr);
    zero_grads(model);

    MetricRow row;
    row.update = update;
    row.lr = lr;
    row.loss_vl = n_vl ? sum_vl / static_cast<double>(n_vl) : std::nan("");
    row.loss_lm = n_lm ? sum_lm / static_cast<double>(n_lm) : std::nan("");
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    metrics.write(row);
    if (outputs.on_update) outputs.on_update(row);
    result.metrics.push_back(row);
    ++result.updates;

    if (outputs.final_checkpoint && outputs.checkpoint_every && (update + 1) % outputs.checkpoint_every == 0 &&
        update + 1 < total_updates)
      model::save_checkpoint(model, periodic_path(*outputs.final_checkpoint, update + 1), kind);

    if (config.stop_loss && n_vl && n_lm && 0.5 * (row.loss_vl + row.loss_lm) < *config.stop_loss) {
      result.stopped_early = update + 1 < total_updates;
      break;
    }
  }
  if (outputs.final_checkpoint) model::save_checkpoint(model, *outputs.final_checkpoint, kind);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::vector<std::string> overlap_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string w;
  while (in >> w) {
    std::string t;
    for (char c : w)
      if (std::isalnum(static_cast<unsigned char>(c))) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

bool is_caption_instruction(const std::string& s) {
  for (auto c : text::caption_instructions())
    if (c == s) return true;
  return false;
}

}  // namespace

double token_overlap(const std::string& hypothesis, const std::string& reference) {
  const auto h = overlap_tokens(hypothesis), r = overlap_tokens(reference);
  if (h.empty() && r.empty()) return 1.0;
  if (h.empty() || r.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : r) ++counts[t];
  std::size_t common = 0;
  for (const auto& t : h)
    if (auto it = counts.find(t); it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  if (common == 0) return 0.0;
  const double p = double(common) / double(h.size()), rc = double(common) / double(r.size());
  return 2.0 * p * rc / (p + rc);
}

nlohmann::json EvalReport::to_json() const {
  return {{"samples", samples},
          {"mean_loss", mean_loss},
          {"perplexity", perplexity},
          {"verbatim", verbatim},
          {"generated", generated},
          {"counting_correct", counting_correct},
          {"counting_total", counting_total},
          {"counting_accuracy", counting_accuracy()},
          {"caption_overlap", caption_overlap},
          {"caption_total", caption_total}};
}

template <typename T>
EvalReport evaluate(const Model<T>& model, const text::Vocab& vocab, std::span<const data::TrainingExample> heldout,
                    const EvalOptions& options) {
  if (heldout.empty()) throw ConfigError("evaluation set is empty");
  EvalReport report;
  double total = 0.0;
  for (const auto& ex : heldout) {
    if (shift_targets(ex.sample).masked == 0) continue;
    nn::Tape<T> tape(false);
    total += static_cast<double>(sample_loss(model, tape, ex).value().data[0]);
    ++report.samples;
  }
  if (report.samples == 0) throw ConfigError("no evaluation example has masked tokens");
  report.mean_loss = total / static_cast<double>(report.samples);
  report.perplexity = std::exp(report.mean_loss);
  if (options.loss_only) return report;

  model::GenerateOptions greedy;
  greedy.max_new = options.max_new;
  double caption_sum = 0.0;
  for (const auto& ex : heldout) {
    const data::ToyImage* image = ex.image ? &*ex.image : nullptr;
    const auto& rounds = ex.record.rounds;
    for (std::size_t k = 0; k < rounds.size(); ++k) {
      const bool last = k + 1 == rounds.size();
      const bool counting = image && image->attributes && rounds[k].instruction == data::kCountingQuestion;
      const bool caption = image && is_caption_instruction(rounds[k].instruction);
      if (!last && !counting && !caption) continue;
      text::DialogueRecord prefix = ex.record;
      prefix.rounds.resize(k + 1);
      const std::string response = serve::respond(model, vocab, prefix, image, greedy);
      if (last) {
        ++report.generated;
        if (response == rounds[k].response) ++report.verbatim;
      }
      if (counting) {
        ++report.counting_total;
        const auto n = data::extract_count(response);
        if (n && *n == image->attributes->count) ++report.counting_correct;
      }
      if (caption) {
        ++report.caption_total;
        caption_sum += token_overlap(response, rounds[k].response);
      }
    }
  }
  report.caption_overlap = report.caption_total ? caption_sum / static_cast<double>(report.caption_total) : 0.0;
  return report;
}

#define MMGPT_INSTANTIATE_TRAIN(T)                                                                                  \
  template nn::Var<T> sample_loss(const Model<T>&, nn::Tape<T>&, const data::TrainingExample&);                     \
  template StepLosses joint_step(Model<T>&, const data::TrainingExample&, const data::TrainingExample&, double);   \
  template double batch_backward(Model<T>&, std::span<const data::TrainingExample* const>,                         \
                                 std::span<const data::TrainingExample* const>);                                   \
  template void zero_grads(Model<T>&);                                                                              \
  template double clip_grad_norm(Model<T>&, double);                                                                \
  template class AdamW<T>;                                                                                          \
  template TrainResult train(Model<T>&, std::span<const data::TrainingExample>,                                    \
                             std::span<const data::TrainingExample>, const TrainConfig&, const TrainOutputs&);     \
  template EvalReport evaluate(const Model<T>&, const text::Vocab&, std::span<const data::TrainingExample>,         \
                               const EvalOptions&);

MMGPT_INSTANTIATE_TRAIN(float)
MMGPT_INSTANTIATE_TRAIN(double)

#undef MMGPT_INSTANTIATE_TRAIN

}  // namespace mmgpt::train
