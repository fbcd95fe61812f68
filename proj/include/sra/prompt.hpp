#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sra/corpus.hpp"
#include "sra/tokenizer.hpp"

namespace sra {

enum class TemplateId { standard, c1_hf, c1_hl, c3_hf, c3_hl, c5_hf, c5_hl };

inline constexpr std::array<TemplateId, 7> kAllTemplates{TemplateId::standard, TemplateId::c1_hf, TemplateId::c1_hl,
                                                         TemplateId::c3_hf,    TemplateId::c3_hl, TemplateId::c5_hf,
                                                         TemplateId::c5_hl};

std::string_view to_string(TemplateId t);
TemplateId parse_template_id(std::string_view s);

/// Chat-window size of a template; nullopt for the standard template, which
/// keeps the whole history in the chat section.
std::optional<std::size_t> chat_window(TemplateId t);
/// True when overflow history is placed before the strategy block.
bool history_first(TemplateId t);

/// Boilerplate strings for prompt rendering, loaded from the versioned
/// template file. Placeholders: {situation}, {name}, {description}, {role},
/// {text}.
struct TemplateText {
  int revision = 1;
  std::string system_prefix;
  std::string instruction;
  std::string situation;
  std::string strategy_lead;
  std::string strategy_block;
  std::string strategy_suffix;
  bool include_situation_in_span = false;
  std::string overflow_header;
  std::string overflow_line;
  std::string overflow_footer;
  std::string role_seeker;
  std::string role_supporter;
  std::string user_prefix;
  std::string assistant_prefix;
  std::string message_suffix;
  std::string response_prefix;

  static TemplateText load(const std::filesystem::path& path);
  static TemplateText load_default();
};

struct CharSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const CharSpan&) const = default;
};

struct AssembledPrompt {
  std::string text;
  CharSpan strategy_span;
  std::size_t response_marker = 0;  // == text.size()
  TemplateId template_id = TemplateId::standard;
  std::size_t chat_utterances = 0;
  std::size_t overflow_utterances = 0;
};

/// Renders a conversation prefix into one prompt string. The prefix must be
/// non-empty and end with a seeker turn.
AssembledPrompt assemble(std::span<const Turn> prefix, std::string_view situation, const Strategy& strategy,
                         TemplateId template_id, const TemplateText& text);

struct TokenizedPrompt {
  std::vector<TokenId> ids;
  TokenSpan strategy_span;

  std::size_t length() const { return ids.size(); }
};

TokenizedPrompt tokenize_prompt(const AssembledPrompt& prompt, const Vocab& vocab);

}  // namespace sra
