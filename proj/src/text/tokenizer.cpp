#include "mmgpt/text/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "mmgpt/common/error.hpp"

namespace mmgpt::text {

namespace {

constexpr std::array<std::string_view, 3> kSpecialText{kBosText, kEosText, kImageText};
constexpr std::string_view kHeader = "# mmgpt vocab v1";

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

std::optional<TokenId> special_at(std::string_view text, std::size_t pos) {
  for (std::size_t i = 0; i < kSpecialText.size(); ++i)
    if (text.substr(pos, kSpecialText[i].size()) == kSpecialText[i]) return static_cast<TokenId>(i);
  return std::nullopt;
}

// A non-whitespace unit: a special surface form or a word.
struct Unit {
  std::size_t begin;
  std::size_t end;
  std::optional<TokenId> special;
};

std::vector<Unit> split_units(std::string_view text) {
  std::vector<Unit> units;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (is_space(text[pos])) {
      ++pos;
      continue;
    }
    if (auto sp = special_at(text, pos)) {
      const std::size_t len = kSpecialText[static_cast<std::size_t>(*sp)].size();
      units.push_back({pos, pos + len, sp});
      pos += len;
      continue;
    }
    const std::size_t start = pos;
    while (pos < text.size() && !is_space(text[pos]) && !special_at(text, pos)) ++pos;
    units.push_back({start, pos, std::nullopt});
  }
  return units;
}

bool implied_space(const Vocab& v, TokenId prev, TokenId next) {
  if (v.is_byte(prev) || v.is_byte(next)) return false;
  if (next == Vocab::kEos) return false;
  return !(v.is_special(prev) && v.is_special(next));
}

TokenId byte_id(unsigned char c) { return Vocab::kFirstByte + static_cast<TokenId>(c); }

}  // namespace

Vocab::Vocab() = default;

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    const auto& w = words_[i];
    if (w.empty() || std::any_of(w.begin(), w.end(), is_space))
      throw ConfigError("vocab word " + std::to_string(i) + " is empty or contains whitespace");
    for (std::size_t p = 0; p < w.size(); ++p)
      if (special_at(w, p)) throw ConfigError("vocab word '" + w + "' contains a special token");
    if (!index_.emplace(w, static_cast<TokenId>(kMinSize + i)).second)
      throw ConfigError("duplicate vocab word '" + w + "'");
  }
}

std::optional<TokenId> Vocab::word_id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::string Vocab::token_text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size())
    throw DecodeError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()), 0);
  if (is_special(id)) return std::string(kSpecialText[static_cast<std::size_t>(id)]);
  if (is_byte(id)) return std::string(1, static_cast<char>(id - kFirstByte));
  return words_[static_cast<std::size_t>(id) - kMinSize];
}

std::vector<TokenSpan> Vocab::encode_with_offsets(std::string_view text) const {
  std::vector<TokenSpan> out;
  const auto units = split_units(text);
  auto emit_bytes = [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p)
      out.push_back({byte_id(static_cast<unsigned char>(text[p])), p, p + 1});
  };

  std::size_t cursor = 0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    const Unit& u = units[i];
    const std::string_view gap = text.substr(cursor, u.begin - cursor);

    std::optional<TokenId> head = u.special;
    if (!head) {
      head = word_id(text.substr(u.begin, u.end - u.begin));
      // A word glued to a following <BOS>/<image> would get a space inserted.
      if (head && i + 1 < units.size()) {
        const Unit& next = units[i + 1];
        if (next.begin == u.end && next.special && *next.special != kEos) head.reset();
      }
      // Likewise a word glued to a preceding special.
      if (head && gap.empty() && !out.empty() && is_special(out.back().id)) head.reset();
    }

    const bool implied = head && !out.empty() && implied_space(*this, out.back().id, *head);
    if (!(implied && gap == " ")) emit_bytes(cursor, u.begin);
    if (head)
      out.push_back({*head, u.begin, u.end});
    else
      emit_bytes(u.begin, u.end);
    cursor = u.end;
  }
  emit_bytes(cursor, text.size());
  return out;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  const auto spans = encode_with_offsets(text);
  std::vector<TokenId> ids;
  ids.reserve(spans.size());
  for (const auto& s : spans) ids.push_back(s.id);
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const TokenId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= size())
      throw DecodeError("decode: token id " + std::to_string(id) + " at index " + std::to_string(i) +
                            " outside vocabulary of " + std::to_string(size()),
                        i);
    if (i > 0 && implied_space(*this, ids[i - 1], id)) out.push_back(' ');
    if (is_special(id))
      out += kSpecialText[static_cast<std::size_t>(id)];
    else if (is_byte(id))
      out.push_back(static_cast<char>(id - kFirstByte));
    else
      out += words_[static_cast<std::size_t>(id) - kMinSize];
  }
  return out;
}

std::string Vocab::serialize() const {
  std::ostringstream out;
  out << kHeader << '\n';
  for (std::size_t i = 0; i < kSpecialText.size(); ++i) out << "special " << kSpecialText[i] << ' ' << i << '\n';
  out << "bytes " << kFirstByte << ' ' << kByteCount << '\n';
  out << "words " << words_.size() << '\n';
  for (const auto& w : words_) out << w << '\n';
  return out.str();
}

Vocab Vocab::parse(std::string_view contents) {
  std::istringstream in{std::string(contents)};
  std::string line;
  auto expect = [&](const std::string& wanted) {
    if (!std::getline(in, line) || line != wanted) throw ConfigError("vocab file: expected '" + wanted + "'");
  };
  expect(std::string(kHeader));
  for (std::size_t i = 0; i < kSpecialText.size(); ++i)
    expect("special " + std::string(kSpecialText[i]) + ' ' + std::to_string(i));
  expect("bytes " + std::to_string(kFirstByte) + ' ' + std::to_string(kByteCount));
  if (!std::getline(in, line) || line.rfind("words ", 0) != 0) throw ConfigError("vocab file: missing word count");
  const std::size_t count = std::stoul(line.substr(6));
  std::vector<std::string> words;
  words.reserve(count);
  while (words.size() < count && std::getline(in, line)) words.push_back(line);
  if (words.size() != count) throw ConfigError("vocab file: truncated word list");
  return Vocab(std::move(words));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file " + path.string());
  out << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocab file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void VocabBuilder::add(std::string_view text) {
  for (const auto& u : split_units(text))
    if (!u.special) ++counts_[std::string(text.substr(u.begin, u.end - u.begin))];
}

Vocab VocabBuilder::build(std::size_t size) const {
  if (size < Vocab::kMinSize)
    throw ConfigError("vocab size " + std::to_string(size) + " below minimum " + std::to_string(Vocab::kMinSize));
  std::vector<std::pair<std::string, std::size_t>> ranked(counts_.begin(), counts_.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(ranked.size(), size - Vocab::kMinSize);
  std::vector<std::string> words;
  words.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) words.push_back(ranked[i].first);
  return Vocab(std::move(words));
}

Vocab build_vocab(std::string_view corpus, std::size_t size) {
  VocabBuilder builder;
  builder.add(corpus);
  return builder.build(size);
}

}  // namespace mmgpt::text
