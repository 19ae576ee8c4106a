#include "mmgpt/serve/chat.hpp"

#include <algorithm>

#include "mmgpt/common/error.hpp"

namespace mmgpt::serve {

namespace {
text::RenderOptions chat_render_options() {
  text::RenderOptions options;
  options.allow_empty_responses = true;
  return options;
}
}  // namespace

void ChatSession::set_image(data::ToyImage img, std::string ref) {
  if (image) throw ConfigError("session already has an image");
  if (!history.empty()) throw ConfigError("an image can only be attached before the first message");
  image = std::move(img);
  image_ref = std::move(ref);
}

text::DialogueRecord ChatSession::as_record(const std::string& instruction) const {
  text::DialogueRecord rec;
  rec.image_ref = image_ref;
  rec.rounds = history;
  rec.rounds.push_back({instruction, ""});
  return rec;
}

PromptTokens encode_prompt(const std::string& prompt, const text::Vocab& vocab) {
  PromptTokens out;
  out.ids = vocab.encode(prompt);
  for (std::size_t i = 0; i < out.ids.size(); ++i)
    if (out.ids[i] == text::Vocab::kImage) out.media_positions.push_back(i);
  return out;
}

std::string decode_response(const std::vector<text::TokenId>& generated, const text::Vocab& vocab) {
  std::vector<text::TokenId> body;
  bool ended = false;
  for (auto id : generated) {
    if (vocab.is_special(id)) {
      ended = true;
      break;
    }
    body.push_back(id);
  }
  std::string text = vocab.decode(body);
  if (ended && !text.empty() && text.back() == ' ') text.pop_back();
  return text;
}

template <typename T>
std::string respond(const model::Model<T>& model, const text::Vocab& vocab, const text::DialogueRecord& record,
                    const data::ToyImage* image, const model::GenerateOptions& options) {
  const auto prompt = encode_prompt(text::render_generation_prompt(record, chat_render_options()), vocab);
  const std::size_t limit = model.config().max_seq_len;
  if (prompt.ids.size() >= limit)
    throw ContextOverflowError("conversation needs " + std::to_string(prompt.ids.size()) +
                               " tokens but the context holds " + std::to_string(limit) +
                               "; start a new session");
  auto limited = options;
  limited.vocab_limit = std::min(options.vocab_limit.value_or(vocab.size()), vocab.size());
  const auto generated = model.generate(prompt.ids, prompt.media_positions, image, limited);
  return decode_response(generated, vocab);
}

std::string render_chat_prompt(const ChatSession& session, const std::string& instruction) {
  return text::render_generation_prompt(session.as_record(instruction), chat_render_options());
}

template <typename T>
std::string chat_turn(ChatSession& session, const std::string& instruction, const model::Model<T>& model,
                      const text::Vocab& vocab, const model::GenerateOptions& options) {
  if (instruction.empty()) throw ConfigError("instruction must not be empty");
  const auto record = session.as_record(instruction);
  auto probe = record;
  probe.rounds.back().response = "x";
  probe.validate(true);
  std::string response = respond(model, vocab, record, session.image ? &*session.image : nullptr, options);
  session.history.push_back({instruction, response});
  return response;
}

template std::string respond(const model::Model<float>&, const text::Vocab&, const text::DialogueRecord&,
                             const data::ToyImage*, const model::GenerateOptions&);
template std::string respond(const model::Model<double>&, const text::Vocab&, const text::DialogueRecord&,
                             const data::ToyImage*, const model::GenerateOptions&);
template std::string chat_turn(ChatSession&, const std::string&, const model::Model<float>&, const text::Vocab&,
                               const model::GenerateOptions&);
template std::string chat_turn(ChatSession&, const std::string&, const model::Model<double>&, const text::Vocab&,
                               const model::GenerateOptions&);

}  // namespace mmgpt::serve
