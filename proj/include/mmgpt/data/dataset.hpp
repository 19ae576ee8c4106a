#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmgpt/common/rng.hpp"
#include "mmgpt/data/toy_image.hpp"
#include "mmgpt/text/templates.hpp"

namespace mmgpt::data {

using text::DialogueRecord;

enum class SourceKind { Language, VisionLanguage };

std::string to_string(SourceKind kind);
SourceKind parse_source_kind(const std::string& name);

/// Streaming JSONL reader. Lines follow
///   {"image"?: path, "input"?: string, "rounds": [{"instruction", "response"}], "source"?: string}
/// Relative image paths resolve against the file's directory and are stored
/// as absolute normalized paths.
class RecordReader {
 public:
  RecordReader(const std::filesystem::path& path, SourceKind kind, std::string default_source = "");

  /// Next record in file order; nullopt at end of file. Throws IngestError
  /// with the 1-based line number on malformed or invalid lines.
  std::optional<DialogueRecord> next();
  std::size_t line() const { return line_; }

 private:
  std::filesystem::path path_;
  std::filesystem::path base_dir_;
  SourceKind kind_;
  std::string default_source_;
  std::ifstream in_;
  std::size_t line_ = 0;
};

std::vector<DialogueRecord> ingest(const std::filesystem::path& path, SourceKind kind,
                                   const std::string& default_source = "");

/// Writes records as JSONL; image paths are written relative to the file's
/// directory.
void export_records(std::span<const DialogueRecord> records, const std::filesystem::path& path);
std::string record_to_json(const DialogueRecord& record, const std::filesystem::path& relative_to = {});

struct DropStats {
  std::size_t seen = 0;
  std::size_t dropped = 0;
};

struct FilterResult {
  std::vector<DialogueRecord> kept;
  std::map<std::string, DropStats> by_source;
};

std::size_t word_count(std::string_view s);

/// Drops records whose every response has fewer than min_response_words
/// whitespace-delimited words.
FilterResult quality_filter(std::vector<DialogueRecord> records, std::size_t min_response_words);

struct Take {
  /// nullopt means every record.
  std::optional<std::size_t> count;

  static Take all() { return {}; }
  static Take exactly(std::size_t n) { return {n}; }
  bool is_all() const { return !count.has_value(); }
};

struct SynthSpec {
  std::size_t count = 0;
  std::vector<std::string> families;
  std::size_t records_per_image = 1;
  double short_answer_fraction = 0.0;
};

struct SourceSpec {
  std::string name;
  SourceKind kind = SourceKind::Language;
  std::filesystem::path path;
  Take take;
  /// When set, the source is generated synthetically into `path`.
  std::optional<SynthSpec> synth;
};

struct MixtureSpec {
  std::vector<SourceSpec> sources;
  std::uint64_t seed = 0;
  std::size_t min_response_words = 3;
  /// Whole-source exclusions, the coarse form of the quality filter.
  std::vector<std::string> excluded_sources;
};

/// Roster and per-source counts of the reference recipe: every record from
/// the two language sets and the two long-form vision sets, 5000 from the
/// VQA-style set and 512 each from captioning and OCR-style sets.
MixtureSpec default_mixture_spec(const std::filesystem::path& data_dir, std::uint64_t seed = 0);
MixtureSpec parse_mixture_spec(const std::string& json_text, const std::filesystem::path& base_dir);
std::string mixture_spec_to_json(const MixtureSpec& spec);

struct SourceReport {
  std::string name;
  SourceKind kind = SourceKind::Language;
  Take take;
  std::size_t ingested = 0;
  std::size_t dropped = 0;
  std::size_t available = 0;
  std::size_t selected = 0;
  bool excluded = false;
  bool clamped = false;
};

struct MixtureReport {
  std::vector<SourceReport> sources;
  std::vector<std::string> warnings;

  std::string to_text() const;
};

struct Mixture {
  std::vector<DialogueRecord> vl_set;
  std::vector<DialogueRecord> lm_set;
  MixtureReport report;
};

/// Ingests, filters, and samples every source. Counted sources are sampled
/// uniformly without replacement with a per-source seed derived from
/// spec.seed; requests above the filtered size are clamped with a warning.
Mixture build_mixture(const MixtureSpec& spec);

/// A record ready for training: its encoding plus the loaded image, if any.
struct TrainingExample {
  DialogueRecord record;
  text::EncodedSample sample;
  std::optional<ToyImage> image;
};

std::vector<TrainingExample> encode_examples(std::span<const DialogueRecord> records, const text::Vocab& vocab);

/// Collects the text of all records (rendered templates included) for
/// vocabulary building.
text::Vocab build_vocab_for(std::span<const DialogueRecord> records, std::size_t size);

/// Yields one vision-language and one language-only example per step. An
/// epoch lasts max(|vl|, |lm|) steps: the longer set is visited once in
/// shuffled order, the shorter one is reshuffled each time it runs out.
class PairedIterator {
 public:
  struct Pair {
    std::size_t vl;
    std::size_t lm;
  };

  PairedIterator(std::size_t vl_count, std::size_t lm_count, std::uint64_t seed);

  std::size_t epoch_length() const;
  std::optional<Pair> next();

 private:
  struct Cursor {
    std::size_t size;
    std::vector<std::size_t> order;
    std::size_t pos = 0;
  };
  std::size_t take(Cursor& c);

  Rng rng_;
  Cursor vl_;
  Cursor lm_;
  std::size_t emitted_ = 0;
};

}  // namespace mmgpt::data
