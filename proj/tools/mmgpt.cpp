#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mmgpt/common/error.hpp"
#include "mmgpt/data/dataset.hpp"
#include "mmgpt/data/synth.hpp"
#include "mmgpt/data/toy_image.hpp"
#include "mmgpt/model/checkpoint.hpp"
#include "mmgpt/serve/chat.hpp"
#include "mmgpt/serve/service.hpp"
#include "mmgpt/train/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mmgpt;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::optional<fs::path> config;
  std::optional<fs::path> checkpoint;
  bool verbose = false;
};

// --config file: {"model": {...}, "train": {...}, "eval": {...}, "vocab_size": n}
struct RunConfig {
  model::ModelConfig model;
  bool has_model = false;
  train::TrainConfig train;
  train::EvalOptions eval;
  std::size_t vocab_size = 512;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

RunConfig load_config(const Globals& g) {
  RunConfig rc;
  if (g.config) {
    json j;
    try {
      j = json::parse(read_text(*g.config));
    } catch (const json::parse_error& e) {
      throw ConfigError(g.config->string() + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError(g.config->string() + " must hold a JSON object");
    for (const auto& [key, _] : j.items())
      if (key != "model" && key != "train" && key != "eval" && key != "vocab_size")
        throw ConfigError("config: unknown field '" + key + "'");
    if (j.contains("model")) {
      rc.model = model::ModelConfig::from_json(j["model"]);
      rc.has_model = true;
    }
    if (j.contains("train")) rc.train = train::TrainConfig::from_json(j["train"]);
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      rc.eval.max_new = e.value("max_new", rc.eval.max_new);
      rc.eval.loss_only = e.value("loss_only", rc.eval.loss_only);
    }
    rc.vocab_size = j.value("vocab_size", rc.vocab_size);
  }
  if (g.seed_given) {
    rc.train.seed = g.seed;
    rc.model.init_seed = g.seed;
  }
  return rc;
}

fs::path vocab_path_for(const fs::path& checkpoint) { return checkpoint.parent_path() / "vocab.txt"; }

text::Vocab load_vocab(const Globals& g, const std::optional<fs::path>& override_path) {
  if (override_path) return text::Vocab::load(*override_path);
  if (!g.checkpoint) throw ConfigError("--checkpoint is required");
  const auto path = vocab_path_for(*g.checkpoint);
  if (!fs::exists(path)) throw ConfigError("no vocabulary at " + path.string() + "; pass --vocab");
  return text::Vocab::load(path);
}

std::unique_ptr<model::Model<float>> load_for_inference(const Globals& g, const std::optional<fs::path>& adapter) {
  if (!g.checkpoint) throw ConfigError("--checkpoint is required");
  const auto ckpt = model::read_checkpoint(*g.checkpoint);
  if (ckpt.kind == model::CheckpointKind::Lora)
    throw ConfigError(g.checkpoint->string() +
                      " holds adapter weights only; pass the base model with --checkpoint and this file with --adapter");
  auto m = model::model_from_checkpoint<float>(ckpt);
  if (adapter) model::attach_lora(*m, *adapter);
  return m;
}

std::vector<data::TrainingExample> load_split(const fs::path& dir, const std::string& name, data::SourceKind kind,
                                              const text::Vocab& vocab) {
  const auto records = data::ingest(dir / (name + ".jsonl"), kind, name);
  return data::encode_examples(records, vocab);
}

void copy_vocab(const fs::path& from, const fs::path& checkpoint) {
  const auto to = vocab_path_for(checkpoint);
  if (fs::exists(to) && fs::equivalent(from, to)) return;
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

// prepare

struct PrepareArgs {
  std::optional<fs::path> spec;
  fs::path out;
  std::optional<std::size_t> vocab_size;
};

int cmd_prepare(const Globals& g, const PrepareArgs& a) {
  const auto rc = load_config(g);
  data::MixtureSpec spec;
  if (a.spec) {
    spec = data::parse_mixture_spec(read_text(*a.spec), a.spec->parent_path());
    for (auto& src : spec.sources)
      if (src.synth) src.path = a.out / "sources" / src.path.filename();
  } else {
    spec = data::desk_scale_mixture_spec(a.out / "sources", g.seed);
  }
  if (g.seed_given) spec.seed = g.seed;
  fs::create_directories(a.out);
  data::materialize_synthetic_sources(spec);
  const auto mixture = data::build_mixture(spec);

  data::export_records(mixture.vl_set, a.out / "vl.jsonl");
  data::export_records(mixture.lm_set, a.out / "lm.jsonl");
  auto all = mixture.vl_set;
  all.insert(all.end(), mixture.lm_set.begin(), mixture.lm_set.end());
  const auto vocab = data::build_vocab_for(all, a.vocab_size.value_or(rc.vocab_size));
  vocab.save(a.out / "vocab.txt");
  {
    std::ofstream spec_out(a.out / "mixture.json");
    spec_out << data::mixture_spec_to_json(spec) << "\n";
  }
  const auto report = mixture.report.to_text();
  {
    std::ofstream report_out(a.out / "report.txt");
    report_out << report;
  }
  std::cout << report;
  std::cout << "vl " << mixture.vl_set.size() << "  lm " << mixture.lm_set.size() << "  vocab " << vocab.size()
            << "\n";
  return 0;
}

// train

struct TrainArgs {
  std::optional<std::string> mode;
  fs::path data;
  fs::path out;
  std::optional<std::size_t> updates;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> accumulation;
  std::optional<std::size_t> devices;
  std::optional<fs::path> metrics;
  std::size_t checkpoint_every = 0;
  std::size_t log_every = 10;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  auto rc = load_config(g);
  auto& tc = rc.train;
  if (a.mode) tc.mode = train::parse_train_mode(*a.mode);
  if (a.updates) tc.total_updates = *a.updates;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.lr) tc.base_lr = *a.lr;
  if (a.accumulation) tc.accumulation_steps = *a.accumulation;
  if (a.devices) tc.simulated_devices = *a.devices;
  tc.validate();

  std::unique_ptr<model::Model<float>> m;
  if (tc.mode == train::TrainMode::LoraFinetune) {
    if (!g.checkpoint) throw ConfigError("lora mode needs a base model: pass --checkpoint");
    m = model::load_model<float>(*g.checkpoint);
    if (m->has_lora()) throw ConfigError(g.checkpoint->string() + " already carries adapters");
    if (rc.has_model) m->configure_lora(rc.model.lora_rank, rc.model.lora_alpha, rc.model.lora_targets);
    m->inject_lora();
  } else if (g.checkpoint) {
    m = model::load_model<float>(*g.checkpoint);
  } else {
    m = std::make_unique<model::Model<float>>(rc.model);
  }

  const auto vocab_file = a.data / "vocab.txt";
  const auto vocab = text::Vocab::load(vocab_file);
  if (vocab.size() > m->config().vocab_size)
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " entries but the model only " +
                      std::to_string(m->config().vocab_size) + "; raise model.vocab_size");
  const auto vl = load_split(a.data, "vl", data::SourceKind::VisionLanguage, vocab);
  const auto lm = load_split(a.data, "lm", data::SourceKind::Language, vocab);
  spdlog::info("{} on {} vl / {} lm examples, {} trainable of {} parameters", train::to_string(tc.mode), vl.size(),
               lm.size(), m->trainable_count(), m->parameter_count());

  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  train::TrainOutputs outputs;
  outputs.final_checkpoint = a.out;
  outputs.checkpoint_every = a.checkpoint_every;
  outputs.metrics_csv = a.metrics ? *a.metrics : fs::path(a.out).replace_extension(".csv");
  const std::size_t log_every = std::max<std::size_t>(a.log_every, 1);
  outputs.on_update = [log_every](const train::MetricRow& row) {
    if (row.update % log_every == 0)
      spdlog::info("update {:>5}  lr {:.3e}  loss_vl {:.4f}  loss_lm {:.4f}", row.update, row.lr, row.loss_vl,
                   row.loss_lm);
  };
  const auto result = train::train(*m, vl, lm, tc, outputs);
  copy_vocab(vocab_file, a.out);

  json summary = {{"mode", train::to_string(tc.mode)},
                  {"updates", result.updates},
                  {"micro_steps", result.micro_steps},
                  {"checkpoint", a.out.string()},
                  {"metrics", outputs.metrics_csv->string()},
                  {"stopped_early", result.stopped_early}};
  if (!result.metrics.empty()) {
    summary["final_loss_vl"] = result.metrics.back().loss_vl;
    summary["final_loss_lm"] = result.metrics.back().loss_lm;
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// eval

struct EvalArgs {
  fs::path data;
  std::optional<fs::path> adapter;
  std::optional<fs::path> vocab;
  std::optional<std::size_t> max_new;
  bool loss_only = false;
  std::optional<fs::path> out;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  auto rc = load_config(g);
  const auto m = load_for_inference(g, a.adapter);
  const auto vocab = load_vocab(g, a.vocab);
  auto heldout = load_split(a.data, "vl", data::SourceKind::VisionLanguage, vocab);
  const auto lm = load_split(a.data, "lm", data::SourceKind::Language, vocab);
  heldout.insert(heldout.end(), lm.begin(), lm.end());
  if (a.max_new) rc.eval.max_new = *a.max_new;
  if (a.loss_only) rc.eval.loss_only = true;
  const auto report = train::evaluate(*m, vocab, heldout, rc.eval);
  const auto text = report.to_json().dump(2);
  if (a.out) {
    std::ofstream out(*a.out);
    out << text << "\n";
  }
  std::cout << text << "\n";
  return 0;
}

// chat

struct ChatArgs {
  std::optional<fs::path> adapter;
  std::optional<fs::path> vocab;
  std::optional<fs::path> image;
  std::optional<double> temperature;
  std::uint64_t sample_seed = 0;
  std::size_t max_new = 64;
  bool echo_prompt = false;
};

int cmd_chat(const Globals& g, const ChatArgs& a) {
  const auto m = load_for_inference(g, a.adapter);
  const auto vocab = load_vocab(g, a.vocab);
  model::GenerateOptions options;
  options.max_new = a.max_new;
  options.temperature = a.temperature;
  options.seed = a.sample_seed;

  serve::ChatSession session;
  auto attach = [&](const fs::path& path) { session.set_image(data::load_image(path), path.string()); };
  if (a.image) attach(*a.image);

  std::string line;
  while (std::getline(std::cin, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "/quit") break;
    if (line == "/reset") {
      session = serve::ChatSession{};
      continue;
    }
    if (line.rfind("/image ", 0) == 0) {
      try {
        attach(line.substr(7));
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
      }
      continue;
    }
    try {
      if (a.echo_prompt) std::cerr << serve::render_chat_prompt(session, line) << "\n";
      std::cout << serve::chat_turn(session, line, *m, vocab, options) << std::endl;
    } catch (const ContextOverflowError& e) {
      std::cerr << "error: " << e.what() << " (type /reset)\n";
    } catch (const TemplateError& e) {
      std::cerr << "error: " << e.what() << "\n";
    }
  }
  return 0;
}

// serve

struct ServeArgs {
  std::optional<fs::path> adapter;
  std::optional<fs::path> vocab;
  std::string host = "127.0.0.1";
  int port = 8080;
  fs::path image_root = ".";
};

int cmd_serve(const Globals& g, const ServeArgs& a) {
  std::shared_ptr<const model::Model<float>> m = load_for_inference(g, a.adapter);
  serve::ServiceOptions options;
  options.image_root = a.image_root;
  options.seed = g.seed;
  serve::ChatService service(m, load_vocab(g, a.vocab), options);
  httplib::Server server;
  serve::mount(server, service);
  spdlog::info("listening on http://{}:{}/api/v1", a.host, a.port);
  if (!server.listen(a.host, a.port)) throw IoError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("mmgpt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] %^%l%$ %v");

  CLI::App app{"Multimodal instruction-tuned GPT at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::string checkpoint, config;
  auto* seed_opt = app.add_option("--seed", g.seed, "Seed for data, initialization and sampling");
  app.add_option("--config", config, "JSON run configuration");
  app.add_option("--checkpoint", checkpoint, "Model checkpoint");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");

  PrepareArgs pa;
  auto* prepare = app.add_subcommand("prepare", "Build the training mixture, shards and vocabulary");
  prepare->add_option("spec", pa.spec, "Mixture spec (JSON); synthetic sources are generated under OUT/sources");
  prepare->add_option("--out", pa.out, "Output directory")->required();
  prepare->add_option("--vocab-size", pa.vocab_size, "Vocabulary size cap");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Pretrain a model or fine-tune LoRA adapters");
  train_cmd->add_option("--mode", ta.mode, "pretrain or lora")->check(CLI::IsMember({"pretrain", "lora"}));
  train_cmd->add_option("--data", ta.data, "Directory written by prepare")->required();
  train_cmd->add_option("--out", ta.out, "Checkpoint to write")->required();
  train_cmd->add_option("--updates", ta.updates, "Optimizer updates (overrides epochs)");
  train_cmd->add_option("--epochs", ta.epochs);
  train_cmd->add_option("--lr", ta.lr, "Peak learning rate");
  train_cmd->add_option("--accumulation", ta.accumulation, "Accumulation steps per device");
  train_cmd->add_option("--devices", ta.devices, "Simulated devices");
  train_cmd->add_option("--metrics", ta.metrics, "Metrics CSV (default: next to the checkpoint)");
  train_cmd->add_option("--checkpoint-every", ta.checkpoint_every, "Updates between periodic checkpoints");
  train_cmd->add_option("--log-every", ta.log_every);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Loss, perplexity and generation metrics");
  eval->add_option("--data", ea.data, "Directory with vl.jsonl and lm.jsonl")->required();
  eval->add_option("--adapter", ea.adapter, "LoRA checkpoint to attach");
  eval->add_option("--vocab", ea.vocab);
  eval->add_option("--max-new", ea.max_new);
  eval->add_flag("--loss-only", ea.loss_only);
  eval->add_option("--out", ea.out, "Also write the report here");

  ChatArgs ca;
  auto* chat = app.add_subcommand("chat", "Multi-round chat on stdin (/image PATH, /reset, /quit)");
  chat->add_option("--adapter", ca.adapter);
  chat->add_option("--vocab", ca.vocab);
  chat->add_option("--image", ca.image, "ToyImage file for the session");
  chat->add_option("--temperature", ca.temperature, "Sample instead of greedy decoding");
  chat->add_option("--sample-seed", ca.sample_seed);
  chat->add_option("--max-new", ca.max_new);
  chat->add_flag("--echo-prompt", ca.echo_prompt, "Print each rendered prompt to stderr");

  ServeArgs sa;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP chat service under /api/v1");
  serve_cmd->add_option("--adapter", sa.adapter);
  serve_cmd->add_option("--vocab", sa.vocab);
  serve_cmd->add_option("--host", sa.host);
  serve_cmd->add_option("--port", sa.port);
  serve_cmd->add_option("--image-root", sa.image_root, "Base directory for relative image references");

  CLI11_PARSE(app, argc, argv);
  g.seed_given = seed_opt->count() > 0;
  if (!config.empty()) g.config = config;
  if (!checkpoint.empty()) g.checkpoint = checkpoint;
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*prepare) return cmd_prepare(g, pa);
    if (*train_cmd) return cmd_train(g, ta);
    if (*eval) return cmd_eval(g, ea);
    if (*chat) return cmd_chat(g, ca);
    if (*serve_cmd) return cmd_serve(g, sa);
  } catch (const DivergenceError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const IngestError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
