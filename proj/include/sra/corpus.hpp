#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sra/common.hpp"

namespace sra {

struct Strategy {
  std::string id;
  std::string name;
  std::string description;

  bool operator==(const Strategy&) const = default;
};

/// The fixed set of support strategies, in catalog order. Class indices used
/// by the classifier and reports follow this order.
class StrategyCatalog {
 public:
  static constexpr std::size_t kExpectedSize = 15;

  explicit StrategyCatalog(std::vector<Strategy> strategies);

  static StrategyCatalog load(const std::filesystem::path& path);
  static StrategyCatalog load_default();

  const std::vector<Strategy>& strategies() const { return strategies_; }
  std::size_t size() const { return strategies_.size(); }

  /// Throws InvalidArgument for ids outside the catalog.
  const Strategy& at(std::string_view id) const;
  std::size_t index_of(std::string_view id) const;
  bool contains(std::string_view id) const;

 private:
  std::vector<Strategy> strategies_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Speaker { seeker, supporter };

std::string_view to_string(Speaker s);
Speaker parse_speaker(std::string_view label);

struct Turn {
  Speaker speaker = Speaker::seeker;
  std::string text;
  std::optional<std::string> strategy;

  bool operator==(const Turn&) const = default;
};

struct Conversation {
  std::string id;
  std::string situation;
  std::vector<Turn> turns;
  std::size_t source_line = 0;  // diagnostics only, ignored by ==

  bool operator==(const Conversation& o) const {
    return id == o.id && situation == o.situation && turns == o.turns;
  }
};

/// Reads the conversation JSONL format. Blank lines are skipped. `source` is
/// used in error messages.
std::vector<Conversation> parse_conversations(std::istream& in, std::string_view source = "<stream>");
std::vector<Conversation> load_conversations(const std::filesystem::path& path);
std::string serialize_conversation(const Conversation& c);
void write_conversations(std::ostream& out, const std::vector<Conversation>& corpus);

/// Merges consecutive same-speaker utterances with a newline joiner. The
/// merged turn keeps the first strategy label present.
Conversation normalize_turns(const Conversation& c);

/// Prefix lengths p in [min_turn, max_turn] with p < turn count whose last
/// utterance (1-indexed turn p) is spoken by the seeker.
std::vector<std::size_t> enumerate_split_points(const Conversation& c, std::size_t min_turn,
                                                std::size_t max_turn);

struct ExtensionJob {
  std::string conv_id;
  std::size_t prefix_len = 0;
  std::string strategy;
  std::string template_id;
  std::uint64_t seed = 0;

  bool operator==(const ExtensionJob&) const = default;
};

struct JobConfig {
  double strategy_prob = 0.3;
  std::size_t min_turn = 5;
  std::size_t max_turn = 23;
  // Split points drawn per conversation (without replacement, capped by the
  // number of legal points).
  std::size_t repetitions = 7;
  std::string template_id = "c1_hf";
  std::uint64_t seed = 0;
};

std::vector<ExtensionJob> build_extension_jobs(const std::vector<Conversation>& corpus,
                                               const StrategyCatalog& catalog, const JobConfig& cfg);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
  std::vector<std::string> validation;
};

struct SplitCounts {
  std::size_t train = 1147;
  std::size_t test = 100;
  std::size_t validation = 50;
};

/// Partitions conversation ids. Each returned list is sorted.
DatasetSplit split_dataset(const std::vector<Conversation>& corpus, const SplitCounts& counts,
                           std::uint64_t seed);

struct ExtendedExample {
  ExtensionJob job;
  std::string response;
  std::string model_tag;

  bool operator==(const ExtendedExample&) const = default;
};

std::string serialize_extended(const ExtendedExample& e);
std::vector<ExtendedExample> parse_extended(std::istream& in, std::string_view source = "<stream>");
std::vector<ExtendedExample> load_extended(const std::filesystem::path& path);

struct PostprocessConfig {
  std::vector<std::string> boilerplate_prefixes{"Here is a response:", "Response:", "Supporter:"};
};

/// Strips leading boilerplate and strategy indicators such as "(Affirmation)"
/// or "Affirmation:" from a generated reply. Returns nullopt when nothing is
/// left.
std::optional<std::string> postprocess_response(std::string_view raw, const StrategyCatalog& catalog,
                                                const PostprocessConfig& cfg = {});

/// Utterances of the first `prefix_len` turns of a conversation.
std::vector<Turn> prefix_turns(const Conversation& c, std::size_t prefix_len);

}  // namespace sra
