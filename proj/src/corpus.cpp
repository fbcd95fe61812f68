#include "sra/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <spdlog/spdlog.h>

#include "text_util.hpp"

namespace sra {

using nlohmann::json;

StrategyCatalog::StrategyCatalog(std::vector<Strategy> strategies) : strategies_(std::move(strategies)) {
  if (strategies_.size() != kExpectedSize) {
    throw InvalidArgument("strategy catalog must hold exactly " + std::to_string(kExpectedSize) +
                          " strategies, got " + std::to_string(strategies_.size()));
  }
  for (std::size_t i = 0; i < strategies_.size(); ++i) {
    const auto& s = strategies_[i];
    if (s.id.empty() || s.name.empty() || s.description.empty()) {
      throw InvalidArgument("strategy #" + std::to_string(i) + " has an empty id, name or description");
    }
    if (!index_.emplace(s.id, i).second) throw InvalidArgument("duplicate strategy id: " + s.id);
  }
}

StrategyCatalog StrategyCatalog::load(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  // Accept both a bare array and the tagged object form.
  const json& arr = doc.is_object() ? doc.at("strategies") : doc;
  std::vector<Strategy> out;
  for (const auto& item : arr) {
    out.push_back({item.at("id").get<std::string>(), item.at("name").get<std::string>(),
                   item.at("description").get<std::string>()});
  }
  return StrategyCatalog(std::move(out));
}

StrategyCatalog StrategyCatalog::load_default() { return load(data_dir() / "strategies.json"); }

const Strategy& StrategyCatalog::at(std::string_view id) const { return strategies_[index_of(id)]; }

std::size_t StrategyCatalog::index_of(std::string_view id) const {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) throw InvalidArgument("unknown strategy id: " + std::string(id));
  return it->second;
}

bool StrategyCatalog::contains(std::string_view id) const { return index_.count(std::string(id)) > 0; }

std::string_view to_string(Speaker s) { return s == Speaker::seeker ? "seeker" : "supporter"; }

Speaker parse_speaker(std::string_view label) {
  if (label == "seeker") return Speaker::seeker;
  if (label == "supporter") return Speaker::supporter;
  throw InvalidArgument("unknown speaker label \"" + std::string(label) + "\"");
}

namespace {

Conversation conversation_from_json(const json& j) {
  Conversation c;
  c.id = j.at("id").get<std::string>();
  c.situation = j.at("situation").get<std::string>();
  if (c.situation.empty()) throw InvalidArgument("empty situation");
  for (const auto& t : j.at("turns")) {
    Turn turn;
    turn.speaker = parse_speaker(t.at("speaker").get<std::string>());
    turn.text = t.at("text").get<std::string>();
    if (turn.text.empty()) throw InvalidArgument("empty turn text");
    if (auto it = t.find("strategy"); it != t.end() && !it->is_null()) {
      if (turn.speaker != Speaker::supporter) throw InvalidArgument("strategy on a seeker turn");
      turn.strategy = it->get<std::string>();
    }
    c.turns.push_back(std::move(turn));
  }
  if (c.turns.size() < 2) throw InvalidArgument("conversation needs at least 2 turns");
  return c;
}

template <typename F>
void for_each_record(std::istream& in, std::string_view source, F&& f) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    try {
      f(json::parse(line), lineno);
    } catch (const json::exception& e) {
      throw ParseError(std::string(source), lineno, e.what());
    } catch (const InvalidArgument& e) {
      throw ParseError(std::string(source), lineno, e.what());
    }
  }
}

}  // namespace

std::vector<Conversation> parse_conversations(std::istream& in, std::string_view source) {
  std::vector<Conversation> out;
  for_each_record(in, source, [&](const json& j, std::size_t lineno) {
    out.push_back(conversation_from_json(j));
    out.back().source_line = lineno;
  });
  return out;
}

std::vector<Conversation> load_conversations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path.string());
  return parse_conversations(in, path.string());
}

std::string serialize_conversation(const Conversation& c) {
  json turns = json::array();
  for (const auto& t : c.turns) {
    json jt{{"speaker", to_string(t.speaker)}, {"text", t.text}};
    if (t.strategy) jt["strategy"] = *t.strategy;
    turns.push_back(std::move(jt));
  }
  return json{{"id", c.id}, {"situation", c.situation}, {"turns", std::move(turns)}}.dump();
}

void write_conversations(std::ostream& out, const std::vector<Conversation>& corpus) {
  for (const auto& c : corpus) out << serialize_conversation(c) << '\n';
}

Conversation normalize_turns(const Conversation& c) {
  Conversation out;
  out.id = c.id;
  out.situation = c.situation;
  out.source_line = c.source_line;
  for (const auto& t : c.turns) {
    if (!out.turns.empty() && out.turns.back().speaker == t.speaker) {
      auto& prev = out.turns.back();
      prev.text += '\n';
      prev.text += t.text;
      if (!prev.strategy && t.strategy) prev.strategy = t.strategy;
    } else {
      out.turns.push_back(t);
    }
  }
  return out;
}

std::vector<std::size_t> enumerate_split_points(const Conversation& c, std::size_t min_turn,
                                                std::size_t max_turn) {
  if (min_turn < 1 || min_turn > max_turn) {
    throw InvalidArgument("split bounds require 1 <= min_turn <= max_turn");
  }
  std::vector<std::size_t> out;
  const std::size_t upper = std::min(max_turn, c.turns.empty() ? 0 : c.turns.size() - 1);
  for (std::size_t p = min_turn; p <= upper; ++p) {
    if (c.turns[p - 1].speaker == Speaker::seeker) out.push_back(p);
  }
  return out;
}

std::vector<ExtensionJob> build_extension_jobs(const std::vector<Conversation>& corpus,
                                               const StrategyCatalog& catalog, const JobConfig& cfg) {
  if (!(cfg.strategy_prob > 0.0 && cfg.strategy_prob <= 1.0)) {
    throw InvalidArgument("strategy_prob must lie in (0, 1]");
  }
  Rng rng(derive_seed(cfg.seed, "extension-jobs"));
  std::bernoulli_distribution include(cfg.strategy_prob);
  std::vector<ExtensionJob> jobs;

  for (const auto& conv : corpus) {
    auto points = enumerate_split_points(conv, cfg.min_turn, cfg.max_turn);
    if (points.empty()) {
      spdlog::warn("conversation {} has no legal split point in [{}, {}]; skipped", conv.id, cfg.min_turn,
                   cfg.max_turn);
      continue;
    }
    std::shuffle(points.begin(), points.end(), rng);
    points.resize(std::min(points.size(), cfg.repetitions));
    std::sort(points.begin(), points.end());

    for (std::size_t prefix : points) {
      std::vector<const Strategy*> picked;
      // An empty draw is resampled once; a second empty draw yields no jobs.
      for (int attempt = 0; attempt < 2 && picked.empty(); ++attempt) {
        for (const auto& s : catalog.strategies()) {
          if (include(rng)) picked.push_back(&s);
        }
      }
      for (const Strategy* s : picked) {
        ExtensionJob job;
        job.conv_id = conv.id;
        job.prefix_len = prefix;
        job.strategy = s->id;
        job.template_id = cfg.template_id;
        job.seed = derive_seed(cfg.seed, conv.id + ":" + std::to_string(prefix) + ":" + s->id);
        jobs.push_back(std::move(job));
      }
    }
  }
  return jobs;
}

DatasetSplit split_dataset(const std::vector<Conversation>& corpus, const SplitCounts& counts,
                           std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(corpus.size());
  for (const auto& c : corpus) ids.push_back(c.id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw InvalidArgument("duplicate conversation id in corpus");
  }
  const std::size_t need = counts.train + counts.test + counts.validation;
  if (need > ids.size()) {
    throw InvalidArgument("split counts (" + std::to_string(need) + ") exceed corpus size (" +
                          std::to_string(ids.size()) + ")");
  }
  Rng rng(derive_seed(seed, "dataset-split"));
  std::shuffle(ids.begin(), ids.end(), rng);

  DatasetSplit split;
  auto take = [&, pos = std::size_t{0}](std::size_t n) mutable {
    std::vector<std::string> part(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                                  ids.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    std::sort(part.begin(), part.end());
    return part;
  };
  split.train = take(counts.train);
  split.test = take(counts.test);
  split.validation = take(counts.validation);
  return split;
}

std::string serialize_extended(const ExtendedExample& e) {
  return json{{"conv_id", e.job.conv_id},   {"prefix_len", e.job.prefix_len}, {"strategy", e.job.strategy},
              {"template", e.job.template_id}, {"response", e.response},         {"model_tag", e.model_tag},
              {"seed", e.job.seed}}
      .dump();
}

std::vector<ExtendedExample> parse_extended(std::istream& in, std::string_view source) {
  std::vector<ExtendedExample> out;
  for_each_record(in, source, [&](const json& j, std::size_t) {
    ExtendedExample e;
    e.job.conv_id = j.at("conv_id").get<std::string>();
    e.job.prefix_len = j.at("prefix_len").get<std::size_t>();
    e.job.strategy = j.at("strategy").get<std::string>();
    e.job.template_id = j.at("template").get<std::string>();
    e.job.seed = j.at("seed").get<std::uint64_t>();
    e.response = j.at("response").get<std::string>();
    e.model_tag = j.at("model_tag").get<std::string>();
    if (e.response.empty()) throw InvalidArgument("empty response");
    out.push_back(std::move(e));
  });
  return out;
}

std::vector<ExtendedExample> load_extended(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open extended-example file: " + path.string());
  return parse_extended(in, path.string());
}

std::optional<std::string> postprocess_response(std::string_view raw, const StrategyCatalog& catalog,
                                                const PostprocessConfig& cfg) {
  std::string text(detail::trim(raw));
  bool changed = true;
  while (changed && !text.empty()) {
    changed = false;
    for (const auto& prefix : cfg.boilerplate_prefixes) {
      if (detail::starts_with_icase(text, prefix)) {
        text = std::string(detail::trim(std::string_view(text).substr(prefix.size())));
        changed = true;
      }
    }
    for (const auto& s : catalog.strategies()) {
      for (const std::string& tag : {"(" + s.name + ")", "[" + s.name + "]", s.name + ":"}) {
        if (detail::starts_with_icase(text, tag)) {
          text = std::string(detail::trim(std::string_view(text).substr(tag.size())));
          changed = true;
        }
      }
    }
  }
  if (text.size() >= 2 && text.front() == '"' && text.back() == '"') {
    text = std::string(detail::trim(std::string_view(text).substr(1, text.size() - 2)));
  }
  if (text.empty()) return std::nullopt;
  return text;
}

std::vector<Turn> prefix_turns(const Conversation& c, std::size_t prefix_len) {
  if (prefix_len > c.turns.size()) {
    throw InvalidArgument("prefix length " + std::to_string(prefix_len) + " exceeds conversation " + c.id);
  }
  return {c.turns.begin(), c.turns.begin() + static_cast<std::ptrdiff_t>(prefix_len)};
}

}  // namespace sra
