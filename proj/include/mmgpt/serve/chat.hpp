#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "mmgpt/data/toy_image.hpp"
#include "mmgpt/model/model.hpp"
#include "mmgpt/text/templates.hpp"
#include "mmgpt/text/tokenizer.hpp"

namespace mmgpt::serve {

struct ChatSession {
  std::string session_id;
  /// Path or "<inline>" for uploaded images.
  std::optional<std::string> image_ref;
  std::optional<data::ToyImage> image;
  std::vector<text::Round> history;
  std::chrono::system_clock::time_point created_at = std::chrono::system_clock::now();

  /// Throws ConfigError when an image is already set or rounds exist.
  void set_image(data::ToyImage img, std::string ref);
  /// History plus a pending round for the instruction.
  text::DialogueRecord as_record(const std::string& instruction) const;
};

/// Token ids of a generation prompt and the positions of its image markers.
struct PromptTokens {
  std::vector<text::TokenId> ids;
  std::vector<std::size_t> media_positions;
};

PromptTokens encode_prompt(const std::string& prompt, const text::Vocab& vocab);

/// Decoded generation with the end marker (and the space before it) removed.
std::string decode_response(const std::vector<text::TokenId>& generated, const text::Vocab& vocab);

/// Generates the response of the record's last round, whose response field is
/// ignored. Throws ContextOverflowError when the prompt leaves no room.
template <typename T>
std::string respond(const model::Model<T>& model, const text::Vocab& vocab, const text::DialogueRecord& record,
                    const data::ToyImage* image, const model::GenerateOptions& options);

/// Exact prompt the next chat_turn would feed the model.
std::string render_chat_prompt(const ChatSession& session, const std::string& instruction);

template <typename T>
std::string chat_turn(ChatSession& session, const std::string& instruction, const model::Model<T>& model,
                      const text::Vocab& vocab, const model::GenerateOptions& options = {});

}  // namespace mmgpt::serve
