#include "mmgpt/text/templates.hpp"

#include <algorithm>

#include "mmgpt/common/error.hpp"
#include "mmgpt/common/rng.hpp"

namespace mmgpt::text {

namespace {

constexpr std::string_view kPreamble =
    "<BOS> Below is an instruction that describes a task. Write a response that appropriately completes the "
    "request ";
constexpr std::string_view kBlockBreak = "\n\n";

constexpr std::array<std::string_view, 10> kCaptionInstructions{
    "Can you describe the image?",
    "Could you provide a description of the image?",
    "What do you see in this image?",
    "Share your thoughts on the content of the image.",
    "Please narrate what's happening in the picture.",
    "Can you give a brief explanation of the image?",
    "Describe the main elements and details present in the image.",
    "In your own words, what is depicted in the image?",
    "How would you describe the image's content in a caption?",
    "Can you suggest an insightful caption that highlights the underlying message of the image?",
};

bool has_special(std::string_view s) {
  return s.find(kBosText) != std::string_view::npos || s.find(kEosText) != std::string_view::npos ||
         s.find(kImageText) != std::string_view::npos;
}

// Appends "### Instruction: q\n\n### Response: r" + eos_sep + "<EOS>" and records the loss span.
void append_round(RenderedPrompt& out, const Round& round, std::string_view eos_sep) {
  out.text += "### Instruction: ";
  out.text += round.instruction;
  out.text += kBlockBreak;
  out.text += "### Response: ";
  const std::size_t begin = out.text.size();
  out.text += round.response;
  out.text += eos_sep;
  out.text += kEosText;
  out.loss_spans.push_back({begin, out.text.size()});
}

RenderedPrompt render_rounds(const DialogueRecord& record, bool with_image) {
  RenderedPrompt out;
  out.text = kPreamble;
  out.text += kBlockBreak;
  if (with_image) {
    out.text += "### Image: ";
    out.text += kImageText;
    out.text += kBlockBreak;
  }
  for (std::size_t i = 0; i < record.rounds.size(); ++i) {
    if (i) out.text += kBlockBreak;
    append_round(out, record.rounds[i], "");
  }
  return out;
}

}  // namespace

void DialogueRecord::validate(bool allow_empty_responses) const {
  if (rounds.empty()) throw TemplateError("record has no rounds");
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    if (rounds[i].response.empty() && !allow_empty_responses) throw TemplateError("round " + std::to_string(i) + " has an empty response");
    if (has_special(rounds[i].instruction) || has_special(rounds[i].response))
      throw TemplateError("round " + std::to_string(i) + " contains a special token surface form");
  }
  if (lm_input && has_special(*lm_input)) throw TemplateError("input contains a special token surface form");
}

std::size_t EncodedSample::masked_count() const { return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), true)); }

std::string_view preamble() { return kPreamble; }

RenderedPrompt render_language(const DialogueRecord& record, const RenderOptions& options) {
  if (record.image_ref) throw TemplateError("language template given a record with an image");
  if (record.rounds.size() != 1)
    throw TemplateError("language template supports exactly one round, got " + std::to_string(record.rounds.size()));
  record.validate(options.allow_empty_responses);
  RenderedPrompt out;
  out.text = kPreamble;
  out.text += kBlockBreak;
  const Round& round = record.rounds.front();
  out.text += "### Instruction: ";
  out.text += round.instruction;
  out.text += kBlockBreak;
  const std::string input = record.lm_input.value_or("");
  if (!input.empty() || options.keep_empty_input) {
    out.text += "### Input: ";
    out.text += input;
    out.text += kBlockBreak;
  }
  out.text += "### Response: ";
  const std::size_t begin = out.text.size();
  out.text += round.response;
  out.text += ' ';
  out.text += kEosText;
  out.loss_spans.push_back({begin, out.text.size()});
  return out;
}

RenderedPrompt render_vision_language(const DialogueRecord& record, const RenderOptions& options) {
  if (!record.image_ref) throw TemplateError("vision-language template given a record without an image");
  record.validate(options.allow_empty_responses);
  return render_rounds(record, true);
}

RenderedPrompt render_text_dialogue(const DialogueRecord& record, const RenderOptions& options) {
  record.validate(options.allow_empty_responses);
  return render_rounds(record, false);
}

RenderedPrompt render_record(const DialogueRecord& record, const RenderOptions& options) {
  if (record.image_ref) return render_vision_language(record, options);
  if (record.rounds.size() == 1) return render_language(record, options);
  return render_text_dialogue(record, options);
}

std::string render_generation_prompt(const DialogueRecord& record, const RenderOptions& options) {
  if (record.rounds.empty()) throw TemplateError("generation prompt needs at least one round");
  DialogueRecord filled = record;
  filled.rounds.back().response = "x";
  const auto rendered = render_record(filled, options);
  std::string text = rendered.text.substr(0, rendered.loss_spans.back().begin);
  // The separator before a response is re-inserted by the tokenizer.
  if (!text.empty() && text.back() == ' ') text.pop_back();
  return text;
}

EncodedSample encode_with_mask(const RenderedPrompt& rendered, const Vocab& vocab) {
  for (std::size_t i = 0; i < rendered.loss_spans.size(); ++i) {
    const auto& s = rendered.loss_spans[i];
    if (s.begin >= s.end || s.end > rendered.text.size() || (i && s.begin < rendered.loss_spans[i - 1].end))
      throw TemplateError("loss span " + std::to_string(i) + " is out of order or outside the rendered text");
  }
  const auto tokens = vocab.encode_with_offsets(rendered.text);
  EncodedSample out;
  out.ids.reserve(tokens.size());
  out.loss_mask.reserve(tokens.size());
  std::size_t span = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& tok = tokens[i];
    while (span < rendered.loss_spans.size() && rendered.loss_spans[span].end <= tok.begin) ++span;
    bool masked = false;
    if (span < rendered.loss_spans.size()) {
      const auto& s = rendered.loss_spans[span];
      const bool inside = tok.begin >= s.begin && tok.end <= s.end;
      const bool outside = tok.end <= s.begin || tok.begin >= s.end;
      if (!inside && !outside)
        throw TemplateError("token " + std::to_string(i) + " straddles loss span " + std::to_string(span));
      masked = inside;
    }
    out.ids.push_back(tok.id);
    out.loss_mask.push_back(masked);
    if (tok.id == vocab.image()) out.media_positions.push_back(i);
  }
  return out;
}

const std::array<std::string_view, 10>& caption_instructions() { return kCaptionInstructions; }

std::string_view caption_instruction(std::uint64_t seed) {
  Rng rng(seed);
  return kCaptionInstructions[rng.below(kCaptionInstructions.size())];
}

}  // namespace mmgpt::text
