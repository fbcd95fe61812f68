#include "sra/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <tuple>

#include "text_util.hpp"

namespace sra {

namespace {

enum class CharClass { space, letter, digit, punct };

CharClass classify(char c) {
  const auto u = static_cast<unsigned char>(c);
  if (u >= 0x80 || std::isalpha(u)) return CharClass::letter;  // keep UTF-8 sequences in words
  if (std::isdigit(u)) return CharClass::digit;
  if (std::isspace(u)) return CharClass::space;
  return CharClass::punct;
}

constexpr std::array<std::string_view, 3> kSentinels{kSystemSentinel, kUserSentinel, kAssistantSentinel};
constexpr std::array<TokenId, 3> kSentinelIds{special::system, special::user, special::assistant};

// Calls on_text for plain segments and on_sentinel for role markers, in order.
template <typename TextFn, typename SentinelFn>
void split_sentinels(std::string_view text, TextFn&& on_text, SentinelFn&& on_sentinel) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best = std::string_view::npos;
    std::size_t which = 0;
    for (std::size_t k = 0; k < kSentinels.size(); ++k) {
      const auto at = text.find(kSentinels[k], pos);
      if (at < best) {
        best = at;
        which = k;
      }
    }
    if (best == std::string_view::npos) {
      on_text(text.substr(pos), pos);
      return;
    }
    if (best > pos) on_text(text.substr(pos, best - pos), pos);
    on_sentinel(kSentinelIds[which], best, best + kSentinels[which].size());
    pos = best + kSentinels[which].size();
  }
}

std::string escape_token(std::string_view t) {
  std::string out;
  for (char c : t) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape_token(std::string_view t) {
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != '\\' || i + 1 == t.size()) {
      out += t[i];
      continue;
    }
    switch (t[++i]) {
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      case 't': out += '\t'; break;
      default: out += t[i];
    }
  }
  return out;
}

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto run_end = [&](std::size_t from, CharClass cls) {
    while (from < n && classify(text[from]) == cls) ++from;
    return from;
  };
  while (i < n) {
    const CharClass cls = classify(text[i]);
    if (cls != CharClass::space) {
      const std::size_t j = run_end(i, cls);
      chunks.push_back(text.substr(i, j - i));
      i = j;
      continue;
    }
    if (text[i] == ' ' && i + 1 < n && classify(text[i + 1]) != CharClass::space) {
      const std::size_t j = run_end(i + 1, classify(text[i + 1]));
      chunks.push_back(text.substr(i, j - i));
      i = j;
      continue;
    }
    std::size_t j = run_end(i, CharClass::space);
    // Leave a trailing ' ' to lead the next word.
    if (j < n && j - i > 1 && text[j - 1] == ' ') --j;
    chunks.push_back(text.substr(i, j - i));
    i = j;
  }
  return chunks;
}

Vocab::Vocab() {
  const std::array<std::string, 7> named{"<pad>", "<bos>", "<eos>", "<unk>", std::string(kSystemSentinel),
                                         std::string(kUserSentinel), std::string(kAssistantSentinel)};
  for (const auto& t : named) add(t);
  for (TokenId id = static_cast<TokenId>(named.size()); id < kFirstLearnedId; ++id) {
    add("<reserved_" + std::to_string(id) + ">");
  }
}

void Vocab::add(std::string token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!index_.emplace(token, id).second) throw InvalidArgument("duplicate vocabulary entry: " + token);
  if (id >= kFirstLearnedId) max_token_bytes_ = std::max(max_token_bytes_, token.size());
  tokens_.push_back(std::move(token));
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw InvalidArgument("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? special::unk : it->second;
}

Vocab Vocab::train(std::string_view corpus, std::size_t target_size) {
  if (corpus.empty()) throw InvalidArgument("cannot train a vocabulary on an empty corpus");

  // Chunk frequencies; sentinel markers are reserved and never learned.
  std::map<std::string, std::size_t> chunk_freq;
  split_sentinels(
      corpus,
      [&](std::string_view seg, std::size_t) {
        for (auto c : pretokenize(seg)) ++chunk_freq[std::string(c)];
      },
      [](TokenId, std::size_t, std::size_t) {});

  std::set<unsigned char> alphabet;
  for (const auto& [chunk, _] : chunk_freq) alphabet.insert(chunk.begin(), chunk.end());
  if (target_size <= static_cast<std::size_t>(kFirstLearnedId) + alphabet.size()) {
    throw InvalidArgument("target vocabulary size " + std::to_string(target_size) +
                          " must exceed reserved ids plus alphabet size (" +
                          std::to_string(kFirstLearnedId + alphabet.size()) + ")");
  }

  Vocab v;
  for (unsigned char c : alphabet) v.add(std::string(1, static_cast<char>(c)));

  // Symbols are interned as ints; pair keys pack (left, right) into 64 bits.
  std::vector<std::string> symbol_text;
  std::unordered_map<std::string, std::uint32_t> symbol_id;
  auto intern = [&](const std::string& s) {
    auto [it, fresh] = symbol_id.emplace(s, static_cast<std::uint32_t>(symbol_text.size()));
    if (fresh) symbol_text.push_back(s);
    return it->second;
  };
  struct Word {
    std::vector<std::uint32_t> symbols;
    std::size_t freq;
  };
  std::vector<Word> words;
  for (const auto& [chunk, freq] : chunk_freq) {
    Word w{{}, freq};
    for (char c : chunk) w.symbols.push_back(intern(std::string(1, c)));
    words.push_back(std::move(w));
  }
  auto key = [](std::uint32_t l, std::uint32_t r) { return (std::uint64_t{l} << 32) | r; };

  while (v.size() < target_size) {
    std::unordered_map<std::uint64_t, std::size_t> pair_freq;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_freq[key(w.symbols[i], w.symbols[i + 1])] += w.freq;
    }
    if (pair_freq.empty()) break;
    std::uint64_t best = 0;
    std::size_t best_freq = 0;
    for (const auto& [k, f] : pair_freq) {
      if (f < best_freq) continue;
      if (f > best_freq) {
        best = k;
        best_freq = f;
        continue;
      }
      const auto& l = symbol_text[k >> 32];
      const auto& r = symbol_text[k & 0xffffffffU];
      const auto& bl = symbol_text[best >> 32];
      const auto& br = symbol_text[best & 0xffffffffU];
      if (std::tie(l, r) < std::tie(bl, br)) best = k;
    }
    const auto left = static_cast<std::uint32_t>(best >> 32);
    const auto right = static_cast<std::uint32_t>(best & 0xffffffffU);
    const std::string merged = symbol_text[left] + symbol_text[right];
    const std::uint32_t merged_id = intern(merged);
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.symbols.size(); ++i, ++out) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          w.symbols[out] = merged_id;
          ++i;
        } else {
          w.symbols[out] = w.symbols[i];
        }
      }
      w.symbols.resize(out);
    }
    if (!v.contains(merged)) v.add(merged);
  }
  return v;
}

void Vocab::encode_chunk(std::string_view text, std::size_t offset, std::vector<OffsetToken>& out) const {
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = std::min(max_token_bytes_, text.size() - i);
    TokenId id = special::unk;
    for (; len > 0; --len) {
      auto it = index_.find(std::string(text.substr(i, len)));
      if (it != index_.end() && it->second >= kFirstLearnedId) {
        id = it->second;
        break;
      }
    }
    if (len == 0) len = 1;
    out.push_back({id, offset + i, offset + i + len});
    i += len;
  }
}

std::vector<OffsetToken> Vocab::encode_with_offsets(std::string_view text) const {
  std::vector<OffsetToken> out;
  split_sentinels(
      text,
      [&](std::string_view seg, std::size_t seg_off) {
        for (auto chunk : pretokenize(seg)) {
          encode_chunk(chunk, seg_off + static_cast<std::size_t>(chunk.data() - seg.data()), out);
        }
      },
      [&](TokenId id, std::size_t b, std::size_t e) { out.push_back({id, b, e}); });
  return out;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& t : encode_with_offsets(text)) ids.push_back(t.id);
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id == special::pad || id == special::bos || id == special::eos) continue;
    if (id == special::unk) {
      out += "\xEF\xBF\xBD";  // U+FFFD
      continue;
    }
    out += token(id);
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::string body;
  for (const auto& t : tokens_) {
    body += escape_token(t);
    body += '\n';
  }
  write_file(path, body);
}

Vocab Vocab::load(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  Vocab reserved;
  if (lines.size() < static_cast<std::size_t>(kFirstLearnedId)) {
    throw ParseError(path.string(), lines.size(), "vocabulary file is shorter than the reserved block");
  }
  for (TokenId id = 0; id < kFirstLearnedId; ++id) {
    if (unescape_token(lines[static_cast<std::size_t>(id)]) != reserved.tokens_[static_cast<std::size_t>(id)]) {
      throw ParseError(path.string(), static_cast<std::size_t>(id) + 1, "reserved token mismatch");
    }
  }
  Vocab v;
  for (std::size_t i = kFirstLearnedId; i < lines.size(); ++i) {
    try {
      v.add(unescape_token(lines[i]));
    } catch (const InvalidArgument& e) {
      throw ParseError(path.string(), i + 1, e.what());
    }
  }
  return v;
}

TokenSpan char_span_to_token_span(std::span<const OffsetToken> tokens, std::size_t char_begin,
                                  std::size_t char_end) {
  if (char_end <= char_begin) throw InvalidArgument("empty character span");
  if (tokens.empty() || char_end > tokens.back().char_end) {
    throw InvalidArgument("character span lies outside the tokenized text");
  }
  TokenSpan span{tokens.size(), 0};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].char_end > char_begin && tokens[i].char_start < char_end) {
      span.begin = std::min(span.begin, i);
      span.end = i + 1;
    }
  }
  if (span.end == 0) throw InvalidArgument("character span covers no token");
  return span;
}

}  // namespace sra
