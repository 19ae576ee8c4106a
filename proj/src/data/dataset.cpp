#include "mmgpt/data/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmgpt/common/error.hpp"

namespace mmgpt::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SourceKind kind) { return kind == SourceKind::Language ? "language" : "vision-language"; }

SourceKind parse_source_kind(const std::string& name) {
  if (name == "language" || name == "lm") return SourceKind::Language;
  if (name == "vision-language" || name == "vl") return SourceKind::VisionLanguage;
  throw ConfigError("unknown source kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// Ingestion

RecordReader::RecordReader(const fs::path& path, SourceKind kind, std::string default_source)
    : path_(path),
      base_dir_(fs::absolute(path).parent_path()),
      kind_(kind),
      default_source_(std::move(default_source)),
      in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open record file " + path.string());
}

std::optional<DialogueRecord> RecordReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path_.string() + ":" + std::to_string(line_);
    DialogueRecord rec;
    try {
      const json j = json::parse(line);
      if (!j.is_object()) throw IngestError(where + ": record must be a JSON object", line_);
      if (auto it = j.find("image"); it != j.end() && !it->is_null()) rec.image_ref = it->get<std::string>();
      if (auto it = j.find("input"); it != j.end() && !it->is_null()) rec.lm_input = it->get<std::string>();
      rec.source = j.value("source", default_source_);
      const auto rounds = j.at("rounds");
      if (!rounds.is_array()) throw IngestError(where + ": 'rounds' must be an array", line_);
      for (const auto& r : rounds)
        rec.rounds.push_back({r.at("instruction").get<std::string>(), r.at("response").get<std::string>()});
    } catch (const json::exception& e) {
      throw IngestError(where + ": malformed record: " + e.what(), line_);
    }
    try {
      rec.validate();
    } catch (const TemplateError& e) {
      throw IngestError(where + ": " + e.what(), line_);
    }
    if (kind_ == SourceKind::VisionLanguage && !rec.image_ref)
      throw IngestError(where + ": vision-language record without an image", line_);
    if (kind_ == SourceKind::Language && rec.image_ref)
      throw IngestError(where + ": language record carries an image", line_);
    if (rec.image_ref) {
      fs::path img(*rec.image_ref);
      if (img.is_relative()) img = base_dir_ / img;
      img = img.lexically_normal();
      if (!fs::exists(img)) throw IngestError(where + ": image file not found: " + img.string(), line_);
      rec.image_ref = img.string();
    }
    return rec;
  }
  return std::nullopt;
}

std::vector<DialogueRecord> ingest(const fs::path& path, SourceKind kind, const std::string& default_source) {
  RecordReader reader(path, kind, default_source);
  std::vector<DialogueRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  return out;
}

std::string record_to_json(const DialogueRecord& record, const fs::path& relative_to) {
  json j = json::object();
  if (record.image_ref) {
    fs::path img(*record.image_ref);
    if (!relative_to.empty() && img.is_absolute()) img = img.lexically_relative(relative_to);
    j["image"] = img.generic_string();
  }
  if (record.lm_input) j["input"] = *record.lm_input;
  json rounds = json::array();
  for (const auto& r : record.rounds) rounds.push_back({{"instruction", r.instruction}, {"response", r.response}});
  j["rounds"] = std::move(rounds);
  j["source"] = record.source;
  return j.dump();
}

void export_records(std::span<const DialogueRecord> records, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write record file " + path.string());
  const fs::path dir = fs::absolute(path).parent_path().lexically_normal();
  for (const auto& r : records) out << record_to_json(r, dir) << '\n';
}

// ---------------------------------------------------------------------------
// Quality filter

std::size_t word_count(std::string_view s) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : s) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

FilterResult quality_filter(std::vector<DialogueRecord> records, std::size_t min_response_words) {
  if (min_response_words < 1) throw ConfigError("min_response_words must be at least 1");
  FilterResult result;
  result.kept.reserve(records.size());
  for (auto& rec : records) {
    auto& stats = result.by_source[rec.source];
    ++stats.seen;
    const bool long_enough = std::any_of(rec.rounds.begin(), rec.rounds.end(), [&](const text::Round& r) {
      return word_count(r.response) >= min_response_words;
    });
    if (long_enough)
      result.kept.push_back(std::move(rec));
    else
      ++stats.dropped;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Mixture

MixtureSpec default_mixture_spec(const fs::path& data_dir, std::uint64_t seed) {
  MixtureSpec spec;
  spec.seed = seed;
  auto add = [&](std::string name, SourceKind kind, Take take) {
    spec.sources.push_back({name, kind, data_dir / (name + ".jsonl"), take, std::nullopt});
  };
  add("dolly15k", SourceKind::Language, Take::all());
  add("alpaca_gpt4", SourceKind::Language, Take::all());
  add("llava", SourceKind::VisionLanguage, Take::all());
  add("minigpt4", SourceKind::VisionLanguage, Take::all());
  add("aokvqa", SourceKind::VisionLanguage, Take::exactly(5000));
  add("coco_caption", SourceKind::VisionLanguage, Take::exactly(512));
  add("ocr_vqa", SourceKind::VisionLanguage, Take::exactly(512));
  return spec;
}

MixtureSpec parse_mixture_spec(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("mixture spec is not valid JSON: ") + e.what());
  }
  auto field = [](const json& obj, const char* name) -> const json& {
    auto it = obj.find(name);
    if (it == obj.end()) throw ConfigError(std::string("mixture spec: missing field '") + name + "'");
    return *it;
  };
  MixtureSpec spec;
  try {
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.min_response_words = j.value("min_response_words", std::size_t{3});
    if (spec.min_response_words < 1) throw ConfigError("mixture spec: field 'min_response_words' must be >= 1");
    spec.excluded_sources = j.value("excluded_sources", std::vector<std::string>{});
    for (const auto& s : field(j, "sources")) {
      SourceSpec src;
      src.name = field(s, "name").get<std::string>();
      src.kind = parse_source_kind(field(s, "kind").get<std::string>());
      fs::path p = s.value("path", src.name + ".jsonl");
      src.path = p.is_relative() ? base_dir / p : p;
      const auto& take = field(s, "take");
      if (take.is_string() && take.get<std::string>() == "all") {
        src.take = Take::all();
      } else if (take.is_number_integer() && take.get<long long>() >= 1) {
        src.take = Take::exactly(take.get<std::size_t>());
      } else {
        throw ConfigError("mixture spec: field 'take' of source '" + src.name + "' must be \"all\" or a count >= 1");
      }
      if (auto it = s.find("synth"); it != s.end()) {
        SynthSpec syn;
        syn.count = field(*it, "count").get<std::size_t>();
        syn.families = it->value("families", std::vector<std::string>{});
        syn.records_per_image = it->value("records_per_image", std::size_t{1});
        syn.short_answer_fraction = it->value("short_answer_fraction", 0.0);
        src.synth = syn;
      }
      spec.sources.push_back(std::move(src));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("mixture spec: bad field type: ") + e.what());
  }
  return spec;
}

std::string mixture_spec_to_json(const MixtureSpec& spec) {
  json j;
  j["seed"] = spec.seed;
  j["min_response_words"] = spec.min_response_words;
  j["excluded_sources"] = spec.excluded_sources;
  json sources = json::array();
  for (const auto& s : spec.sources) {
    json o{{"name", s.name}, {"kind", to_string(s.kind)}, {"path", s.path.generic_string()}};
    if (s.take.is_all())
      o["take"] = "all";
    else
      o["take"] = *s.take.count;
    if (s.synth)
      o["synth"] = {{"count", s.synth->count},
                    {"families", s.synth->families},
                    {"records_per_image", s.synth->records_per_image},
                    {"short_answer_fraction", s.synth->short_answer_fraction}};
    sources.push_back(std::move(o));
  }
  j["sources"] = std::move(sources);
  return j.dump(2);
}

std::string MixtureReport::to_text() const {
  std::ostringstream out;
  out << "source                kind             take   ingested  dropped  available  selected\n";
  for (const auto& s : sources) {
    char line[256];
    const std::string take = s.take.is_all() ? "all" : std::to_string(*s.take.count);
    std::snprintf(line, sizeof(line), "%-21s %-16s %-6s %8zu %8zu %10zu %9zu%s%s\n", s.name.c_str(),
                  to_string(s.kind).c_str(), take.c_str(), s.ingested, s.dropped, s.available, s.selected,
                  s.excluded ? "  (excluded)" : "", s.clamped ? "  (clamped)" : "");
    out << line;
  }
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  return out.str();
}

Mixture build_mixture(const MixtureSpec& spec) {
  Mixture mix;
  for (const auto& src : spec.sources) {
    SourceReport rep;
    rep.name = src.name;
    rep.kind = src.kind;
    rep.take = src.take;
    if (std::find(spec.excluded_sources.begin(), spec.excluded_sources.end(), src.name) !=
        spec.excluded_sources.end()) {
      rep.excluded = true;
      mix.report.sources.push_back(rep);
      continue;
    }
    if (!fs::exists(src.path)) throw ConfigError("source '" + src.name + "' not found at " + src.path.string());
    auto records = ingest(src.path, src.kind, src.name);
    rep.ingested = records.size();
    auto filtered = quality_filter(std::move(records), spec.min_response_words);
    rep.available = filtered.kept.size();
    rep.dropped = rep.ingested - rep.available;

    std::vector<DialogueRecord> chosen;
    if (src.take.is_all()) {
      chosen = std::move(filtered.kept);
    } else {
      std::size_t want = *src.take.count;
      if (want > rep.available) {
        mix.report.warnings.push_back("source '" + src.name + "' has " + std::to_string(rep.available) +
                                      " records after filtering, fewer than the requested " + std::to_string(want));
        want = rep.available;
        rep.clamped = true;
      }
      // Partial Fisher-Yates, then restore file order of the chosen subset.
      std::vector<std::size_t> idx(rep.available);
      std::iota(idx.begin(), idx.end(), 0);
      Rng rng(derive_seed(spec.seed, src.name));
      for (std::size_t i = 0; i < want; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
      }
      idx.resize(want);
      std::sort(idx.begin(), idx.end());
      chosen.reserve(want);
      for (std::size_t i : idx) chosen.push_back(std::move(filtered.kept[i]));
    }
    rep.selected = chosen.size();
    auto& dst = src.kind == SourceKind::VisionLanguage ? mix.vl_set : mix.lm_set;
    dst.insert(dst.end(), std::make_move_iterator(chosen.begin()), std::make_move_iterator(chosen.end()));
    mix.report.sources.push_back(rep);
  }
  if (mix.vl_set.empty()) throw ConfigError("mixture has no vision-language records");
  if (mix.lm_set.empty()) throw ConfigError("mixture has no language-only records");
  return mix;
}

// ---------------------------------------------------------------------------
// Encoding

std::vector<TrainingExample> encode_examples(std::span<const DialogueRecord> records, const text::Vocab& vocab) {
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    TrainingExample ex;
    ex.record = rec;
    ex.sample = text::encode_with_mask(text::render_record(rec), vocab);
    if (rec.image_ref) ex.image = load_image(*rec.image_ref);
    out.push_back(std::move(ex));
  }
  return out;
}

text::Vocab build_vocab_for(std::span<const DialogueRecord> records, std::size_t size) {
  text::VocabBuilder builder;
  for (const auto& rec : records) builder.add(text::render_record(rec).text);
  return builder.build(size);
}

// ---------------------------------------------------------------------------
// Pairing

PairedIterator::PairedIterator(std::size_t vl_count, std::size_t lm_count, std::uint64_t seed)
    : rng_(seed), vl_{vl_count, {}, 0}, lm_{lm_count, {}, 0} {
  if (vl_count == 0 || lm_count == 0) throw ConfigError("paired iteration needs non-empty vision and language sets");
  for (Cursor* c : {&vl_, &lm_}) {
    c->order.resize(c->size);
    std::iota(c->order.begin(), c->order.end(), 0);
    rng_.shuffle(c->order);
  }
}

std::size_t PairedIterator::epoch_length() const { return std::max(vl_.size, lm_.size); }

std::size_t PairedIterator::take(Cursor& c) {
  if (c.pos == c.size) {
    rng_.shuffle(c.order);
    c.pos = 0;
  }
  return c.order[c.pos++];
}

std::optional<PairedIterator::Pair> PairedIterator::next() {
  if (emitted_ == epoch_length()) return std::nullopt;
  ++emitted_;
  const std::size_t v = take(vl_);
  const std::size_t l = take(lm_);
  return Pair{v, l};
}

}  // namespace mmgpt::data
