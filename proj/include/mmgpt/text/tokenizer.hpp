#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mmgpt::text {

using TokenId = std::int32_t;

inline constexpr std::string_view kBosText = "<BOS>";
inline constexpr std::string_view kEosText = "<EOS>";
inline constexpr std::string_view kImageText = "<image>";

/// A token and the byte range of the source text it covers. Single spaces
/// that the decoder re-inserts between tokens are not covered by any token.
struct TokenSpan {
  TokenId id;
  std::size_t begin;
  std::size_t end;
};

/// Word-level vocabulary with 256 byte-fallback ids.
///
/// Id layout: 0 <BOS>, 1 <EOS>, 2 <image>, 3..258 raw bytes, then words in
/// frequency order. A word is a maximal run of non-whitespace bytes that does
/// not contain a special surface form.
///
/// Spacing rule: the decoder inserts one space between consecutive tokens a, b
/// when both are non-byte tokens, b is not <EOS>, and they are not both
/// specials. Every other byte of whitespace is spelled out with byte tokens,
/// which makes decode(encode(s)) == s for any input.
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kImage = 2;
  static constexpr TokenId kFirstByte = 3;
  static constexpr std::size_t kSpecialCount = 3;
  static constexpr std::size_t kByteCount = 256;
  static constexpr std::size_t kMinSize = kSpecialCount + kByteCount;

  /// Vocabulary of specials and bytes only.
  Vocab();

  std::size_t size() const { return kMinSize + words_.size(); }
  TokenId bos() const { return kBos; }
  TokenId eos() const { return kEos; }
  TokenId image() const { return kImage; }

  bool is_special(TokenId id) const { return id >= 0 && id < kFirstByte; }
  bool is_byte(TokenId id) const { return id >= kFirstByte && id < kFirstByte + static_cast<TokenId>(kByteCount); }
  bool is_word(TokenId id) const { return id >= static_cast<TokenId>(kMinSize) && static_cast<std::size_t>(id) < size(); }

  std::optional<TokenId> word_id(std::string_view word) const;
  /// Surface text of a token (one raw byte for byte ids).
  std::string token_text(TokenId id) const;
  const std::vector<std::string>& words() const { return words_; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::vector<TokenSpan> encode_with_offsets(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  std::string serialize() const;
  static Vocab parse(std::string_view contents);
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return words_ == other.words_; }

 private:
  friend class VocabBuilder;
  explicit Vocab(std::vector<std::string> words);

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Accumulates word frequencies over a corpus.
class VocabBuilder {
 public:
  void add(std::string_view text);
  /// Keeps the most frequent words (ties broken lexicographically) so that the
  /// vocabulary holds at most `size` ids.
  Vocab build(std::size_t size) const;

 private:
  std::map<std::string, std::size_t> counts_;
};

Vocab build_vocab(std::string_view corpus, std::size_t size);

}  // namespace mmgpt::text
