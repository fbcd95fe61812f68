#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "sra/tensor.hpp"
#include "sra/tokenizer.hpp"

namespace sra {

struct SRAResult {
  double sra = 0.0;
  double log_sra = 0.0;  // natural log
  /// Mean attention per (response row, span column) for each layer/head;
  /// `sra` is the mean of this matrix.
  Mat per_layer_head;
};

/// Strategy Relevant Attention of a response trace [M, H, R, L] over the
/// half-open prompt span [begin, end):
///
///   agg(r, l) = (1 / MH) Σ_m Σ_h A[m, h, r, l]
///   SRA       = 1 / (|span| · R) Σ_r Σ_{l in span} agg(r, l)
SRAResult compute_sra(const AttentionTrace& trace, TokenSpan span);

/// One line of the SRA report.
struct SraRecord {
  std::string example_id;
  std::string template_id;
  std::string model_tag;
  std::size_t turn = 0;
  double sra = 0.0;
  double log_sra = 0.0;
  std::size_t layers = 0, heads = 0, response_len = 0, prompt_len = 0;
  std::size_t span_begin = 0, span_end = 0;
};

std::string serialize_sra_record(const SraRecord& r);
std::vector<SraRecord> load_sra_records(const std::filesystem::path& path);

enum class SraGrouping { template_id, turn_bin, model_tag, constant };

SraGrouping parse_sra_grouping(std::string_view s);

/// Start of the turn bin [origin + k·width, origin + (k+1)·width) holding `turn`.
long turn_bin(std::size_t turn, std::size_t width, long origin = 5);

struct GroupStat {
  std::string key;
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single member
};

/// Mean log-SRA per group, ordered by key (turn bins numerically).
std::vector<GroupStat> corpus_sra(std::span<const SraRecord> records, SraGrouping grouping,
                                  std::size_t bin_width = 2);

}  // namespace sra
