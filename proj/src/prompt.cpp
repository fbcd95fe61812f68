#include "sra/prompt.hpp"

#include <nlohmann/json.hpp>

namespace sra {

namespace {

struct TemplateInfo {
  TemplateId id;
  std::string_view name;
  std::size_t window;  // 0 = whole history
  bool history_first;
};

constexpr std::array<TemplateInfo, 7> kTemplateInfo{{
    {TemplateId::standard, "standard", 0, false},
    {TemplateId::c1_hf, "c1_hf", 1, true},
    {TemplateId::c1_hl, "c1_hl", 1, false},
    {TemplateId::c3_hf, "c3_hf", 3, true},
    {TemplateId::c3_hl, "c3_hl", 3, false},
    {TemplateId::c5_hf, "c5_hf", 5, true},
    {TemplateId::c5_hl, "c5_hl", 5, false},
}};

const TemplateInfo& info(TemplateId t) { return kTemplateInfo[static_cast<std::size_t>(t)]; }

std::string replace_all(std::string s, std::string_view key, std::string_view value) {
  std::size_t pos = 0;
  while ((pos = s.find(key, pos)) != std::string::npos) {
    s.replace(pos, key.size(), value);
    pos += value.size();
  }
  return s;
}

}  // namespace

std::string_view to_string(TemplateId t) { return info(t).name; }

TemplateId parse_template_id(std::string_view s) {
  for (const auto& i : kTemplateInfo) {
    if (i.name == s) return i.id;
  }
  throw InvalidArgument("unknown template \"" + std::string(s) +
                        "\" (expected standard|c1_hf|c1_hl|c3_hf|c3_hl|c5_hf|c5_hl)");
}

std::optional<std::size_t> chat_window(TemplateId t) {
  if (info(t).window == 0) return std::nullopt;
  return info(t).window;
}

bool history_first(TemplateId t) { return info(t).history_first; }

TemplateText TemplateText::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  if (j.value("format", "") != "sra-templates/1") {
    throw ParseError(path.string(), 0, "unsupported template format tag");
  }
  TemplateText t;
  t.revision = j.at("revision").get<int>();
  t.system_prefix = j.at("system_prefix").get<std::string>();
  t.instruction = j.at("instruction").get<std::string>();
  t.situation = j.at("situation").get<std::string>();
  t.strategy_lead = j.at("strategy_lead").get<std::string>();
  t.strategy_block = j.at("strategy_block").get<std::string>();
  t.strategy_suffix = j.at("strategy_suffix").get<std::string>();
  t.include_situation_in_span = j.value("include_situation_in_span", false);
  t.overflow_header = j.at("overflow_header").get<std::string>();
  t.overflow_line = j.at("overflow_line").get<std::string>();
  t.overflow_footer = j.at("overflow_footer").get<std::string>();
  t.role_seeker = j.at("role_seeker").get<std::string>();
  t.role_supporter = j.at("role_supporter").get<std::string>();
  t.user_prefix = j.at("user_prefix").get<std::string>();
  t.assistant_prefix = j.at("assistant_prefix").get<std::string>();
  t.message_suffix = j.at("message_suffix").get<std::string>();
  t.response_prefix = j.at("response_prefix").get<std::string>();
  if (t.strategy_block.find("{name}") == std::string::npos) {
    throw ParseError(path.string(), 0, "strategy_block must contain {name}");
  }
  return t;
}

TemplateText TemplateText::load_default() { return load(data_dir() / "templates.json"); }

AssembledPrompt assemble(std::span<const Turn> prefix, std::string_view situation, const Strategy& strategy,
                         TemplateId template_id, const TemplateText& tt) {
  if (prefix.empty()) throw InvalidArgument("cannot assemble a prompt from an empty prefix");
  if (prefix.back().speaker != Speaker::seeker) {
    throw InvalidArgument("conversation prefix must end with a seeker turn");
  }

  const std::size_t window = chat_window(template_id).value_or(prefix.size());
  const std::size_t chat_count = std::min(window, prefix.size());
  const auto overflow = prefix.first(prefix.size() - chat_count);
  const auto chat = prefix.last(chat_count);

  AssembledPrompt out;
  out.template_id = template_id;
  out.chat_utterances = chat.size();
  out.overflow_utterances = overflow.size();
  std::string& text = out.text;

  auto write_overflow = [&] {
    if (overflow.empty()) return;
    text += tt.overflow_header;
    for (const auto& turn : overflow) {
      const auto& role = turn.speaker == Speaker::seeker ? tt.role_seeker : tt.role_supporter;
      text += replace_all(replace_all(tt.overflow_line, "{role}", role), "{text}", turn.text);
    }
    text += tt.overflow_footer;
  };

  text += tt.system_prefix;
  if (history_first(template_id)) write_overflow();
  text += tt.instruction;
  if (tt.include_situation_in_span) {
    out.strategy_span.begin = text.size();
    text += replace_all(tt.situation, "{situation}", situation);
    text += tt.strategy_lead;
  } else {
    text += replace_all(tt.situation, "{situation}", situation);
    text += tt.strategy_lead;
    out.strategy_span.begin = text.size();
  }
  text += replace_all(replace_all(tt.strategy_block, "{name}", strategy.name), "{description}", strategy.description);
  out.strategy_span.end = text.size();
  text += tt.strategy_suffix;
  if (!history_first(template_id)) write_overflow();

  for (const auto& turn : chat) {
    text += turn.speaker == Speaker::seeker ? tt.user_prefix : tt.assistant_prefix;
    text += turn.text;
    text += tt.message_suffix;
  }
  text += tt.response_prefix;
  out.response_marker = text.size();
  return out;
}

TokenizedPrompt tokenize_prompt(const AssembledPrompt& prompt, const Vocab& vocab) {
  const auto tokens = vocab.encode_with_offsets(prompt.text);
  TokenizedPrompt out;
  out.ids.reserve(tokens.size());
  for (const auto& t : tokens) out.ids.push_back(t.id);
  out.strategy_span = char_span_to_token_span(tokens, prompt.strategy_span.begin, prompt.strategy_span.end);
  return out;
}

}  // namespace sra
