#include "mmgpt/data/synth.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <map>

#include "mmgpt/common/error.hpp"
#include "mmgpt/text/templates.hpp"

namespace mmgpt::data {

namespace fs = std::filesystem;

namespace {

struct Color {
  const char* name;
  float rgb[3];
};

constexpr std::array<Color, 6> kColors{{
    {"red", {0.9f, 0.1f, 0.1f}},
    {"green", {0.1f, 0.8f, 0.2f}},
    {"blue", {0.1f, 0.2f, 0.9f}},
    {"yellow", {0.9f, 0.9f, 0.1f}},
    {"white", {0.95f, 0.95f, 0.95f}},
    {"purple", {0.6f, 0.1f, 0.8f}},
}};

constexpr std::array<Color, 2> kBackgrounds{{
    {"black", {0.05f, 0.05f, 0.05f}},
    {"gray", {0.5f, 0.5f, 0.5f}},
}};

constexpr std::array<const char*, 7> kNumberWords{"zero", "one", "two", "three", "four", "five", "six"};
constexpr int kMaxCount = 6;

constexpr std::array<const char*, 16> kEchoWords{"apple", "river", "stone", "cloud", "tiger", "lamp",
                                                  "garden", "silver", "window", "orange", "forest", "paper",
                                                  "music", "bridge", "candle", "rocket"};

const std::vector<std::string> kVisionFamilies{"caption", "count", "color", "background", "dialogue"};
const std::vector<std::string> kLanguageFamilies{"arithmetic", "echo", "list"};

std::vector<std::string> pick_families(const std::vector<std::string>& requested, const std::vector<std::string>& known) {
  std::vector<std::string> out;
  for (const auto& f : requested)
    if (std::find(known.begin(), known.end(), f) != known.end()) out.push_back(f);
  if (requested.empty()) return known;
  return out;
}

}  // namespace

ToyImage generate_scene(Rng& rng, std::size_t image_size, std::size_t cell_size) {
  if (cell_size < 2 || image_size % cell_size != 0) throw ConfigError("scene image size must be a multiple of cell size");
  const std::size_t cells_per_side = image_size / cell_size;
  const std::size_t n_cells = cells_per_side * cells_per_side;
  const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min<std::size_t>(kMaxCount, n_cells))));
  const Color& color = kColors[rng.below(kColors.size())];
  const Color& bg = kBackgrounds[rng.below(kBackgrounds.size())];

  ToyImage img;
  img.height = img.width = image_size;
  img.channels = 3;
  img.pixels.resize(image_size * image_size * 3);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = bg.rgb[c];

  std::vector<std::size_t> cells(n_cells);
  for (std::size_t i = 0; i < n_cells; ++i) cells[i] = i;
  rng.shuffle(cells);
  const std::size_t side = cell_size - 1;
  for (int k = 0; k < count; ++k) {
    const std::size_t cy = cells[static_cast<std::size_t>(k)] / cells_per_side;
    const std::size_t cx = cells[static_cast<std::size_t>(k)] % cells_per_side;
    const std::size_t oy = cy * cell_size + rng.below(cell_size - side + 1);
    const std::size_t ox = cx * cell_size + rng.below(cell_size - side + 1);
    for (std::size_t y = oy; y < oy + side; ++y)
      for (std::size_t x = ox; x < ox + side; ++x)
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = color.rgb[c];
  }
  img.attributes = SceneAttributes{count, color.name, "square", bg.name};
  return img;
}

std::string caption_response(const SceneAttributes& s) {
  const std::string noun = s.count == 1 ? s.shape : s.shape + "s";
  return "A picture of " + std::string(kNumberWords[static_cast<std::size_t>(s.count)]) + " " + s.color + " " + noun +
         " on a " + s.background + " background.";
}

std::string counting_response(const SceneAttributes& s) {
  if (s.count == 1) return "There is 1 " + s.shape + " in the image.";
  return "There are " + std::to_string(s.count) + " " + s.shape + "s in the image.";
}

std::string color_response(const SceneAttributes& s) {
  if (s.count == 1) return "The " + s.shape + " is " + s.color + ".";
  return "The " + s.shape + "s are " + s.color + ".";
}

std::string background_response(const SceneAttributes& s) { return "The background is " + s.background + "."; }

std::optional<int> extract_count(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(text[i]))) continue;
    int v = 0;
    std::size_t j = i;
    while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j])) && j - i < 6)
      v = v * 10 + (text[j++] - '0');
    return v;
  }
  return std::nullopt;
}

std::vector<DialogueRecord> synth_vl_records(std::uint64_t seed, std::size_t n, const fs::path& image_dir,
                                             const SynthOptions& options) {
  const auto families = pick_families(options.families, kVisionFamilies);
  if (families.empty()) throw ConfigError("no known vision-language synthesis family requested");
  const std::size_t per_image = std::max<std::size_t>(1, options.records_per_image);
  fs::create_directories(image_dir);
  const fs::path abs_dir = fs::absolute(image_dir).lexically_normal();
  Rng rng(derive_seed(seed, "vision-language"));

  std::vector<DialogueRecord> out;
  out.reserve(n);
  ToyImage scene;
  std::string image_path;
  for (std::size_t i = 0; i < n; ++i) {
    if (i % per_image == 0) {
      scene = generate_scene(rng, options.image_size, options.cell_size);
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%06zu.toyimg", options.vl_source.c_str(), i / per_image);
      image_path = (abs_dir / name).string();
      save_image(scene, image_path);
    }
    const auto& attrs = *scene.attributes;
    DialogueRecord rec;
    rec.image_ref = image_path;
    rec.source = options.vl_source;
    if (rng.uniform() < options.short_answer_fraction) {
      if (rng.below(2) == 0)
        rec.rounds.push_back({"Are there any " + attrs.color + " squares?", "yes"});
      else
        rec.rounds.push_back({std::string(kCountingQuestion), std::to_string(attrs.count)});
      out.push_back(std::move(rec));
      continue;
    }
    const std::string& family = families[rng.below(families.size())];
    if (family == "caption") {
      rec.rounds.push_back({std::string(text::caption_instruction(rng.bits())), caption_response(attrs)});
    } else if (family == "count") {
      rec.rounds.push_back({std::string(kCountingQuestion), counting_response(attrs)});
    } else if (family == "color") {
      rec.rounds.push_back({std::string(kColorQuestion), color_response(attrs)});
    } else if (family == "background") {
      rec.rounds.push_back({std::string(kBackgroundQuestion), background_response(attrs)});
    } else {
      rec.rounds.push_back({std::string(kCountingQuestion), counting_response(attrs)});
      rec.rounds.push_back({std::string(kColorQuestion), color_response(attrs)});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<DialogueRecord> synth_lm_records(std::uint64_t seed, std::size_t n, const SynthOptions& options) {
  const auto families = pick_families(options.families, kLanguageFamilies);
  if (families.empty()) throw ConfigError("no known language synthesis family requested");
  Rng rng(derive_seed(seed, "language"));
  std::vector<DialogueRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    DialogueRecord rec;
    rec.source = options.lm_source;
    if (rng.uniform() < options.short_answer_fraction) {
      const int a = static_cast<int>(rng.below(10)), b = static_cast<int>(rng.below(10));
      rec.rounds.push_back({"What is " + std::to_string(a) + " plus " + std::to_string(b) + "?", std::to_string(a + b)});
      out.push_back(std::move(rec));
      continue;
    }
    const std::string& family = families[rng.below(families.size())];
    if (family == "arithmetic") {
      const int a = static_cast<int>(rng.below(21)), b = static_cast<int>(rng.below(21));
      rec.rounds.push_back(
          {"What is " + std::to_string(a) + " plus " + std::to_string(b) + "?", "The answer is " + std::to_string(a + b) + "."});
    } else if (family == "echo") {
      const std::size_t len = 3 + rng.below(3);
      std::string words;
      for (std::size_t w = 0; w < len; ++w) {
        if (w) words += ' ';
        words += kEchoWords[rng.below(kEchoWords.size())];
      }
      rec.lm_input = words;
      rec.rounds.push_back({"Repeat the following words.", words});
    } else {
      const int start = static_cast<int>(rng.below(16));
      const int len = 3 + static_cast<int>(rng.below(3));
      std::string items;
      for (int k = 0; k < len; ++k) {
        if (k) items += ", ";
        items += std::to_string(start + k);
      }
      rec.rounds.push_back(
          {"List the numbers from " + std::to_string(start) + " to " + std::to_string(start + len - 1) + ".", items});
    }
    out.push_back(std::move(rec));
  }
  return out;
}

SynthPaths synth_corpus(std::uint64_t seed, std::size_t n_vl, std::size_t n_lm, const fs::path& out_dir,
                        const SynthOptions& options) {
  if (n_vl < 1 || n_lm < 1) throw ConfigError("synthetic corpus needs at least one record of each kind");
  fs::create_directories(out_dir);
  SynthPaths paths{out_dir / "vl.jsonl", out_dir / "lm.jsonl", out_dir / "images"};
  const auto vl = synth_vl_records(seed, n_vl, paths.image_dir, options);
  const auto lm = synth_lm_records(seed, n_lm, options);
  export_records(vl, paths.vl_records);
  export_records(lm, paths.lm_records);
  return paths;
}

MixtureSpec desk_scale_mixture_spec(const fs::path& data_dir, std::uint64_t seed) {
  MixtureSpec spec = default_mixture_spec(data_dir, seed);
  const std::map<std::string, SynthSpec> stand_ins = {
      {"dolly15k", {96, {"echo", "list"}, 1, 0.0}},
      {"alpaca_gpt4", {96, {"arithmetic", "list"}, 1, 0.0}},
      {"llava", {48, {"dialogue"}, 1, 0.0}},
      {"minigpt4", {48, {"caption"}, 1, 0.0}},
      {"aokvqa", {5600, {"count", "color", "background"}, 8, 0.05}},
      {"coco_caption", {640, {"caption"}, 1, 0.0}},
      {"ocr_vqa", {640, {"color", "background"}, 4, 0.0}},
  };
  for (auto& src : spec.sources) src.synth = stand_ins.at(src.name);
  return spec;
}

void materialize_synthetic_sources(const MixtureSpec& spec) {
  for (const auto& src : spec.sources) {
    if (!src.synth) continue;
    if (src.synth->count < 1) throw ConfigError("synth count for source '" + src.name + "' must be >= 1");
    SynthOptions options;
    options.families = src.synth->families;
    options.records_per_image = src.synth->records_per_image;
    options.short_answer_fraction = src.synth->short_answer_fraction;
    options.vl_source = options.lm_source = src.name;
    const std::uint64_t seed = derive_seed(spec.seed, "synth:" + src.name);
    std::vector<DialogueRecord> records;
    if (src.kind == SourceKind::VisionLanguage) {
      const fs::path image_dir = src.path.parent_path() / (src.name + "_images");
      records = synth_vl_records(seed, src.synth->count, image_dir, options);
    } else {
      records = synth_lm_records(seed, src.synth->count, options);
    }
    export_records(records, src.path);
  }
}

}  // namespace mmgpt::data
