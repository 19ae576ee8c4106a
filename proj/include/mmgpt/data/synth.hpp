#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmgpt/common/rng.hpp"
#include "mmgpt/data/dataset.hpp"
#include "mmgpt/data/toy_image.hpp"

namespace mmgpt::data {

inline constexpr std::string_view kCountingQuestion = "How many squares are there?";
inline constexpr std::string_view kColorQuestion = "What color are the squares?";
inline constexpr std::string_view kBackgroundQuestion = "What color is the background?";

/// Vision families: caption, count, color, background, dialogue (count then
/// color). Language families: arithmetic, echo, list. Empty means all.
struct SynthOptions {
  std::vector<std::string> families;
  std::size_t records_per_image = 1;
  /// Fraction of records given one-or-two-word answers, the failure mode
  /// the quality filter exists for.
  double short_answer_fraction = 0.0;
  std::string vl_source = "synthetic_vl";
  std::string lm_source = "synthetic_lm";
  std::size_t image_size = 16;
  std::size_t cell_size = 4;
};

struct SynthPaths {
  std::filesystem::path vl_records;
  std::filesystem::path lm_records;
  std::filesystem::path image_dir;
};

/// Squares of one color placed in distinct cells of a regular grid.
ToyImage generate_scene(Rng& rng, std::size_t image_size = 16, std::size_t cell_size = 4);

std::string caption_response(const SceneAttributes& scene);
std::string counting_response(const SceneAttributes& scene);
std::string color_response(const SceneAttributes& scene);
std::string background_response(const SceneAttributes& scene);

/// First integer written in digits, if any.
std::optional<int> extract_count(std::string_view text);

/// Generates n vision-language records, writing their images to image_dir.
std::vector<DialogueRecord> synth_vl_records(std::uint64_t seed, std::size_t n, const std::filesystem::path& image_dir,
                                             const SynthOptions& options = {});
std::vector<DialogueRecord> synth_lm_records(std::uint64_t seed, std::size_t n, const SynthOptions& options = {});

/// Writes vl.jsonl, lm.jsonl and images/ under out_dir. Same seed, same bytes.
SynthPaths synth_corpus(std::uint64_t seed, std::size_t n_vl, std::size_t n_lm, const std::filesystem::path& out_dir,
                        const SynthOptions& options = {});

/// The reference roster with a synthetic stand-in for each source, sized so
/// every counted source has more records than it asks for. The VQA-style
/// source carries some one-word answers for the quality filter to drop.
MixtureSpec desk_scale_mixture_spec(const std::filesystem::path& data_dir, std::uint64_t seed = 0);

/// Generates every source of the spec that carries a synth block into its
/// path, with images in a sibling "<name>_images" directory.
void materialize_synthetic_sources(const MixtureSpec& spec);

}  // namespace mmgpt::data
