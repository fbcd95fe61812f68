#include "sra/sra_metric.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "sra/common.hpp"

namespace sra {

SRAResult compute_sra(const AttentionTrace& trace, TokenSpan span) {
  const std::size_t M = trace.layers(), H = trace.heads(), R = trace.rows(), L = trace.cols();
  if (span.end <= span.begin) throw InvalidArgument("strategy span is empty");
  if (span.end > L) throw InvalidArgument("strategy span exceeds the prompt length");
  if (R == 0) throw InvalidArgument("trace has no response rows");
  if (M == 0 || H == 0) throw InvalidArgument("trace has no layers or heads");

  const double width = static_cast<double>(span.end - span.begin);
  SRAResult out;
  out.per_layer_head = Mat::Zero(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(H));
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t h = 0; h < H; ++h) {
      double mass = 0.0;
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t l = span.begin; l < span.end; ++l) mass += trace(m, h, r, l);
      out.per_layer_head(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(h)) =
          mass / (width * static_cast<double>(R));
      total += mass;
    }
  }
  out.sra = total / (static_cast<double>(M * H) * width * static_cast<double>(R));
  out.log_sra = std::log(out.sra);
  return out;
}

std::string serialize_sra_record(const SraRecord& r) {
  return nlohmann::json{{"example_id", r.example_id}, {"template", r.template_id}, {"model_tag", r.model_tag},
                        {"turn", r.turn},             {"sra", r.sra},              {"log_sra", r.log_sra},
                        {"M", r.layers},              {"H", r.heads},              {"R", r.response_len},
                        {"L", r.prompt_len},          {"S_b", r.span_begin},       {"S_e", r.span_end}}
      .dump();
}

std::vector<SraRecord> load_sra_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open SRA report: " + path.string());
  std::vector<SraRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SraRecord r;
      r.example_id = j.at("example_id").get<std::string>();
      r.template_id = j.value("template", "");
      r.model_tag = j.value("model_tag", "");
      r.turn = j.value("turn", std::size_t{0});
      r.sra = j.at("sra").get<double>();
      r.log_sra = j.at("log_sra").get<double>();
      r.layers = j.at("M");
      r.heads = j.at("H");
      r.response_len = j.at("R");
      r.prompt_len = j.at("L");
      r.span_begin = j.at("S_b");
      r.span_end = j.at("S_e");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return out;
}

SraGrouping parse_sra_grouping(std::string_view s) {
  if (s == "template") return SraGrouping::template_id;
  if (s == "turn-bin" || s == "turn") return SraGrouping::turn_bin;
  if (s == "model_tag" || s == "model") return SraGrouping::model_tag;
  if (s == "all") return SraGrouping::constant;
  throw InvalidArgument("unknown grouping: " + std::string(s) + " (expected template|turn-bin|model_tag|all)");
}

long turn_bin(std::size_t turn, std::size_t width, long origin) {
  if (width == 0) throw InvalidArgument("bin width must be positive");
  const long w = static_cast<long>(width);
  const long off = static_cast<long>(turn) - origin;
  const long k = off >= 0 ? off / w : -((-off + w - 1) / w);
  return origin + k * w;
}

std::vector<GroupStat> corpus_sra(std::span<const SraRecord> records, SraGrouping grouping, std::size_t bin_width) {
  if (records.empty()) throw InvalidArgument("corpus_sra: no records");
  // Numeric bins sort numerically; everything else lexicographically.
  std::map<std::pair<long, std::string>, std::vector<double>> groups;
  for (const auto& r : records) {
    std::pair<long, std::string> key{0, ""};
    switch (grouping) {
      case SraGrouping::template_id: key.second = r.template_id; break;
      case SraGrouping::model_tag: key.second = r.model_tag; break;
      case SraGrouping::constant: key.second = "all"; break;
      case SraGrouping::turn_bin: {
        const long b = turn_bin(r.turn, bin_width);
        key = {b, std::to_string(b)};
        break;
      }
    }
    groups[key].push_back(r.log_sra);
  }
  std::vector<GroupStat> out;
  for (const auto& [key, vals] : groups) {
    GroupStat g;
    g.key = key.second;
    g.count = vals.size();
    for (double v : vals) g.mean += v;
    g.mean /= static_cast<double>(vals.size());
    if (vals.size() > 1) {
      double ss = 0.0;
      for (double v : vals) ss += (v - g.mean) * (v - g.mean);
      g.stddev = std::sqrt(ss / static_cast<double>(vals.size() - 1));
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace sra
