#include "sra/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "text_util.hpp"

namespace sra {

AdherenceRecord make_adherence_record(std::string example_id, std::string prompted, std::string predicted,
                                      std::size_t turn, double log_sra, std::string template_id,
                                      std::string model_tag) {
  AdherenceRecord r;
  r.correct = prompted == predicted;
  r.example_id = std::move(example_id);
  r.prompted = std::move(prompted);
  r.predicted = std::move(predicted);
  r.turn = turn;
  r.log_sra = log_sra;
  r.template_id = std::move(template_id);
  r.model_tag = std::move(model_tag);
  return r;
}

std::string serialize_adherence(const AdherenceRecord& r) {
  return nlohmann::json{{"example_id", r.example_id}, {"prompted", r.prompted}, {"predicted", r.predicted},
                        {"correct", r.correct},       {"turn", r.turn},         {"log_sra", r.log_sra},
                        {"template", r.template_id},  {"model_tag", r.model_tag}}
      .dump();
}

std::vector<AdherenceRecord> parse_adherence(std::istream& in, std::string_view source) {
  std::vector<AdherenceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto r = make_adherence_record(j.at("example_id"), j.at("prompted"), j.at("predicted"), j.at("turn"),
                                     j.at("log_sra"), j.value("template", ""), j.value("model_tag", ""));
      if (auto it = j.find("correct"); it != j.end() && it->get<bool>() != r.correct) {
        throw ParseError(std::string(source), lineno, "\"correct\" disagrees with prompted/predicted");
      }
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string(source), lineno, e.what());
    }
  }
  return out;
}

std::vector<AdherenceRecord> load_adherence(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open adherence records: " + path.string());
  return parse_adherence(in, path.string());
}

std::vector<TurnBinAccuracy> accuracy_by_turn(std::span<const AdherenceRecord> records, std::size_t bin_width) {
  if (records.empty()) throw InvalidArgument("accuracy_by_turn: no records");
  std::map<long, std::pair<std::size_t, std::size_t>> bins;  // start -> (correct, n)
  for (const auto& r : records) {
    auto& b = bins[turn_bin(r.turn, bin_width)];
    b.first += r.correct ? 1 : 0;
    ++b.second;
  }
  std::vector<TurnBinAccuracy> out;
  for (const auto& [start, cn] : bins) {
    out.push_back({start, static_cast<double>(cn.first) / static_cast<double>(cn.second), cn.second});
  }
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("pearson: series differ in length");
  if (x.size() < 2) throw InvalidArgument("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InvalidArgument("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

AdherenceGrouping parse_adherence_grouping(std::string_view s) {
  if (s == "template") return AdherenceGrouping::template_id;
  if (s == "model_tag" || s == "model") return AdherenceGrouping::model_tag;
  if (s == "template+model") return AdherenceGrouping::template_and_model;
  throw InvalidArgument("unknown grouping: " + std::string(s) + " (expected template|model_tag|template+model)");
}

SraAccuracyCorrelation correlate_sra_accuracy(std::span<const AdherenceRecord> records, AdherenceGrouping grouping) {
  std::map<std::string, std::vector<const AdherenceRecord*>> groups;
  for (const auto& r : records) {
    std::string key;
    switch (grouping) {
      case AdherenceGrouping::template_id: key = r.template_id; break;
      case AdherenceGrouping::model_tag: key = r.model_tag; break;
      case AdherenceGrouping::template_and_model: key = r.model_tag + "/" + r.template_id; break;
    }
    groups[key].push_back(&r);
  }
  if (groups.size() < 2) throw InvalidArgument("correlate_sra_accuracy: need at least two groups");
  SraAccuracyCorrelation out;
  std::vector<double> xs, ys;
  for (const auto& [key, members] : groups) {
    GroupPoint p;
    p.key = key;
    p.n = members.size();
    for (const auto* r : members) {
      p.mean_log_sra += r->log_sra;
      p.accuracy += r->correct ? 1.0 : 0.0;
    }
    p.mean_log_sra /= static_cast<double>(p.n);
    p.accuracy /= static_cast<double>(p.n);
    xs.push_back(p.mean_log_sra);
    ys.push_back(p.accuracy);
    out.points.push_back(std::move(p));
  }
  out.r = pearson(xs, ys);
  return out;
}

double krippendorff_alpha_interval(const ScoreTable& scores) {
  // Per-item pairable values.
  std::size_t items = 0;
  for (const auto& row : scores) items = std::max(items, row.size());
  std::vector<std::vector<double>> units;
  for (std::size_t u = 0; u < items; ++u) {
    std::vector<double> vals;
    for (const auto& row : scores) {
      if (u < row.size() && row[u]) vals.push_back(*row[u]);
    }
    if (vals.size() >= 2) units.push_back(std::move(vals));
  }
  if (units.empty()) throw InvalidArgument("krippendorff_alpha: no item is rated by two or more annotators");

  double n = 0.0;
  double observed = 0.0;
  std::vector<double> pooled;
  for (const auto& vals : units) {
    const double m = static_cast<double>(vals.size());
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i)
      for (std::size_t j = 0; j < vals.size(); ++j)
        if (i != j) sum_sq += (vals[i] - vals[j]) * (vals[i] - vals[j]);
    observed += sum_sq / (m - 1.0);
    n += m;
    pooled.insert(pooled.end(), vals.begin(), vals.end());
  }
  double expected = 0.0;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = 0; j < pooled.size(); ++j)
      if (i != j) expected += (pooled[i] - pooled[j]) * (pooled[i] - pooled[j]);
  const double d_o = observed / n;
  const double d_e = expected / (n * (n - 1.0));
  if (d_e == 0.0) throw InvalidArgument("krippendorff_alpha: all pairable scores are identical (no variation)");
  return 1.0 - d_o / d_e;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::a: return "A";
    case Verdict::b: return "B";
    case Verdict::tie: return "tie";
  }
  return "?";
}

std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::win: return "win";
    case Outcome::tie: return "tie";
    case Outcome::lose: return "lose";
  }
  return "?";
}

Outcome adjudicate(Verdict original_order, Verdict swapped_order) {
  if (original_order == Verdict::a && swapped_order == Verdict::a) return Outcome::win;
  if (original_order == Verdict::b && swapped_order == Verdict::b) return Outcome::lose;
  return Outcome::tie;
}

WinTieLose win_tie_lose(std::span<const Outcome> outcomes) {
  if (outcomes.empty()) throw InvalidArgument("win_tie_lose: no outcomes");
  std::size_t w = 0, t = 0, l = 0;
  for (auto o : outcomes) {
    switch (o) {
      case Outcome::win: ++w; break;
      case Outcome::tie: ++t; break;
      case Outcome::lose: ++l; break;
    }
  }
  const double n = static_cast<double>(outcomes.size());
  return {100.0 * static_cast<double>(w) / n, 100.0 * static_cast<double>(t) / n, 100.0 * static_cast<double>(l) / n,
          outcomes.size()};
}

std::vector<AnnotationItem> parse_annotations(std::istream& in, std::string_view source, ScoreBounds bounds) {
  std::vector<AnnotationItem> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = true;
  std::size_t columns = 3;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> cols;
    for (std::size_t start = 0;;) {
      const auto comma = line.find(',', start);
      cols.emplace_back(detail::trim(line.substr(start, comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (header) {
      header = false;
      const std::vector<std::string> base{"pair_id", "annotator_id", "score"};
      auto with_sra = base;
      with_sra.insert(with_sra.end(), {"sra_a", "sra_b"});
      if (cols == with_sra) {
        columns = 5;
      } else if (cols != base) {
        throw ParseError(std::string(source), lineno, "expected header pair_id,annotator_id,score[,sra_a,sra_b]");
      }
      continue;
    }
    if (cols.size() != columns) {
      throw ParseError(std::string(source), lineno, "expected " + std::to_string(columns) + " columns");
    }
    AnnotationItem item{cols[0], cols[1], 0, std::nullopt, std::nullopt};
    if (item.pair_id.empty() || item.annotator_id.empty()) {
      throw ParseError(std::string(source), lineno, "empty pair_id or annotator_id");
    }
    try {
      std::size_t used = 0;
      item.score = std::stoi(cols[2], &used);
      if (used != cols[2].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError(std::string(source), lineno, "score is not an integer: " + cols[2]);
    }
    if (item.score < bounds.min || item.score > bounds.max) {
      throw ParseError(std::string(source), lineno,
                       "score " + cols[2] + " outside [" + std::to_string(bounds.min) + ", " +
                           std::to_string(bounds.max) + "]");
    }
    if (columns == 5) {
      try {
        if (!cols[3].empty()) item.sra_a = std::stod(cols[3]);
        if (!cols[4].empty()) item.sra_b = std::stod(cols[4]);
      } catch (const std::exception&) {
        throw ParseError(std::string(source), lineno, "sra_a/sra_b must be numbers");
      }
    }
    out.push_back(std::move(item));
  }
  return out;
}

std::vector<AnnotationItem> load_annotations(const std::filesystem::path& path, ScoreBounds bounds) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open annotation CSV: " + path.string());
  return parse_annotations(in, path.string(), bounds);
}

ScoreTable annotation_table(std::span<const AnnotationItem> items) {
  std::map<std::string, std::size_t> annotators, pairs;
  for (const auto& it : items) {
    annotators.emplace(it.annotator_id, 0);
    pairs.emplace(it.pair_id, 0);
  }
  std::size_t i = 0;
  for (auto& [_, idx] : annotators) idx = i++;
  i = 0;
  for (auto& [_, idx] : pairs) idx = i++;
  ScoreTable table(annotators.size(), std::vector<std::optional<double>>(pairs.size()));
  for (const auto& it : items) table[annotators[it.annotator_id]][pairs[it.pair_id]] = it.score;
  return table;
}

std::map<std::string, double> human_sra_correlation(std::span<const AnnotationItem> items,
                                                    const std::map<std::string, double>& log_sra_difference) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> series;
  for (const auto& it : items) {
    auto d = log_sra_difference.find(it.pair_id);
    if (d == log_sra_difference.end()) throw InvalidArgument("no SRA difference for pair " + it.pair_id);
    auto& s = series[it.annotator_id];
    s.first.push_back(static_cast<double>(it.score));
    s.second.push_back(d->second);
  }
  std::map<std::string, double> out;
  for (const auto& [annotator, s] : series) out[annotator] = pearson(s.first, s.second);
  return out;
}

std::map<std::string, double> human_sra_correlation(std::span<const AnnotationItem> items) {
  std::map<std::string, double> diff;
  for (const auto& it : items) {
    if (!it.sra_a || !it.sra_b) throw InvalidArgument("annotation for pair " + it.pair_id + " lacks sra_a/sra_b");
    diff[it.pair_id] = *it.sra_b - *it.sra_a;
  }
  return human_sra_correlation(items, diff);
}

std::vector<double> min_max_normalize(std::span<const double> v) {
  std::vector<double> out(v.size(), 0.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (range == 0.0) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

}  // namespace sra
