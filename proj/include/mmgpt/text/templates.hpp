#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmgpt/text/tokenizer.hpp"

namespace mmgpt::text {

struct Round {
  std::string instruction;
  std::string response;

  bool operator==(const Round&) const = default;
};

/// Source-agnostic instruction datum. A record with an image is
/// vision-language; without one it is language-only.
struct DialogueRecord {
  std::optional<std::string> image_ref;
  std::vector<Round> rounds;
  std::optional<std::string> lm_input;
  std::string source;

  bool is_vision_language() const { return image_ref.has_value(); }
  /// Throws TemplateError when rounds are empty, a response is empty (unless
  /// allowed), or any text field contains a special-token surface form.
  void validate(bool allow_empty_responses = false) const;

  bool operator==(const DialogueRecord&) const = default;
};

/// Half-open byte range into a rendered string.
struct ByteSpan {
  std::size_t begin;
  std::size_t end;
};

/// Rendered text plus the byte ranges that carry loss: each response and its
/// terminating <EOS>.
struct RenderedPrompt {
  std::string text;
  std::vector<ByteSpan> loss_spans;
};

struct RenderOptions {
  /// Emit "### Input:" even when the input is empty.
  bool keep_empty_input = false;
  /// Lets chat history carry rounds whose generated response was empty.
  bool allow_empty_responses = false;
};

struct EncodedSample {
  std::vector<TokenId> ids;
  std::vector<bool> loss_mask;
  std::vector<std::size_t> media_positions;

  std::size_t masked_count() const;
};

/// Shared first line of both templates, trailing space included.
std::string_view preamble();

RenderedPrompt render_language(const DialogueRecord& record, const RenderOptions& options = {});
RenderedPrompt render_vision_language(const DialogueRecord& record, const RenderOptions& options = {});
/// Vision-language round structure without the image line; used for
/// multi-round conversations that have no image.
RenderedPrompt render_text_dialogue(const DialogueRecord& record, const RenderOptions& options = {});
/// Picks the template for a record: vision-language when it has an image,
/// language-only for a single text round, text dialogue otherwise.
RenderedPrompt render_record(const DialogueRecord& record, const RenderOptions& options = {});

/// Generation prompt for a record whose final round has no response yet: the
/// record's rendering cut just before the final response, ending in
/// "### Response:". The final round's response field is ignored.
std::string render_generation_prompt(const DialogueRecord& record, const RenderOptions& options = {});

/// Tokenizes a rendering and marks exactly the tokens inside loss spans.
EncodedSample encode_with_mask(const RenderedPrompt& rendered, const Vocab& vocab);

const std::array<std::string_view, 10>& caption_instructions();
std::string_view caption_instruction(std::uint64_t seed);

}  // namespace mmgpt::text
