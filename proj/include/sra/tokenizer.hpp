#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sra/common.hpp"

namespace sra {

using TokenId = std::int32_t;

/// Reserved ids. Everything below kFirstLearnedId is fixed across vocabularies.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId bos = 1;
inline constexpr TokenId eos = 2;
inline constexpr TokenId unk = 3;
inline constexpr TokenId system = 4;
inline constexpr TokenId user = 5;
inline constexpr TokenId assistant = 6;
}  // namespace special

inline constexpr TokenId kFirstLearnedId = 16;

/// Chat-role sentinels as they appear in prompt text.
inline constexpr std::string_view kSystemSentinel = "[SYSTEM]";
inline constexpr std::string_view kUserSentinel = "[USER]";
inline constexpr std::string_view kAssistantSentinel = "[ASSISTANT]";

/// Token with half-open byte offsets into the encoded string.
struct OffsetToken {
  TokenId id = special::pad;
  std::size_t char_start = 0;
  std::size_t char_end = 0;

  bool operator==(const OffsetToken&) const = default;
};

/// Half-open token interval [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const TokenSpan&) const = default;
};

/// Byte-level vocabulary built by greedy pair merges inside pre-token chunks.
///
/// Text is first cut into chunks (an optional single leading space followed by
/// a letter run, a digit run or a punctuation run; or a whitespace run), so a
/// token never spans two words. Within a chunk, encoding takes the longest
/// vocabulary entry at each position. Offsets are byte offsets; no
/// normalization is applied, so the token slices always concatenate back to
/// the input.
class Vocab {
 public:
  Vocab();  // reserved ids only

  /// Deterministic greedy merge training. Ties between equally frequent pairs
  /// are broken lexicographically on (left, right). Stops early when no pair
  /// is left to merge.
  static Vocab train(std::string_view corpus, std::size_t target_size);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  /// Returns special::unk for unknown strings.
  TokenId id_of(std::string_view token) const;
  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  std::vector<OffsetToken> encode_with_offsets(std::string_view text) const;
  std::vector<TokenId> encode(std::string_view text) const;
  /// Sentinels decode to their literal text; pad/bos/eos decode to nothing.
  std::string decode(std::span<const TokenId> ids) const;

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  void add(std::string token);
  void encode_chunk(std::string_view text, std::size_t offset, std::vector<OffsetToken>& out) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_token_bytes_ = 1;
};

/// Splits text into pre-token chunks; exposed for tests and training.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Smallest token interval whose coverage includes the byte span
/// [char_begin, char_end). Throws on an empty span or one outside the tokens.
TokenSpan char_span_to_token_span(std::span<const OffsetToken> tokens, std::size_t char_begin,
                                  std::size_t char_end);

}  // namespace sra
