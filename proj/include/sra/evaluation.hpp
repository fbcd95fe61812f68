#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sra/common.hpp"
#include "sra/sra_metric.hpp"

namespace sra {

struct AdherenceRecord {
  std::string example_id;
  std::string prompted;
  std::string predicted;
  bool correct = false;  // prompted == predicted
  std::size_t turn = 0;
  double log_sra = 0.0;
  std::string template_id;
  std::string model_tag;
};

AdherenceRecord make_adherence_record(std::string example_id, std::string prompted, std::string predicted,
                                      std::size_t turn, double log_sra, std::string template_id,
                                      std::string model_tag);

std::string serialize_adherence(const AdherenceRecord& r);
std::vector<AdherenceRecord> load_adherence(const std::filesystem::path& path);
std::vector<AdherenceRecord> parse_adherence(std::istream& in, std::string_view source = "<stream>");

struct TurnBinAccuracy {
  long bin_start = 0;
  double accuracy = 0.0;
  std::size_t n = 0;
};

/// Accuracy per turn bin [5 + k·w, 5 + (k+1)·w); empty bins are omitted.
std::vector<TurnBinAccuracy> accuracy_by_turn(std::span<const AdherenceRecord> records, std::size_t bin_width = 2);

/// Sample Pearson correlation. Throws on length mismatch, fewer than 2
/// points, or zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

enum class AdherenceGrouping { template_id, model_tag, template_and_model };

AdherenceGrouping parse_adherence_grouping(std::string_view s);

struct GroupPoint {
  std::string key;
  double mean_log_sra = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
};

struct SraAccuracyCorrelation {
  std::vector<GroupPoint> points;
  double r = 0.0;
};

/// One (mean log-SRA, mean accuracy) point per group and their Pearson r.
SraAccuracyCorrelation correlate_sra_accuracy(std::span<const AdherenceRecord> records,
                                              AdherenceGrouping grouping = AdherenceGrouping::template_id);

/// Annotator × item score table; missing entries are nullopt.
using ScoreTable = std::vector<std::vector<std::optional<double>>>;

/// Krippendorff's alpha with the interval metric, 1 − D_o / D_e. Only items
/// with at least two scores are pairable.
double krippendorff_alpha_interval(const ScoreTable& scores);

/// Verdict naming the model a judge preferred (not its position).
enum class Verdict { a, b, tie };
enum class Outcome { win, tie, lose };

std::string_view to_string(Verdict v);
std::string_view to_string(Outcome o);

/// Outcome for model A given the verdicts of both presentation orders: a win
/// or loss needs agreement, anything else is a tie.
Outcome adjudicate(Verdict original_order, Verdict swapped_order);

struct WinTieLose {
  double win = 0.0, tie = 0.0, lose = 0.0;  // percentages
  std::size_t n = 0;
};

WinTieLose win_tie_lose(std::span<const Outcome> outcomes);

struct AnnotationItem {
  std::string pair_id;
  std::string annotator_id;
  int score = 0;
  // Log-SRA of the left and right responses, when the CSV carries them.
  std::optional<double> sra_a;
  std::optional<double> sra_b;
};

struct ScoreBounds {
  int min = -4;
  int max = 4;
};

/// Reads the `pair_id,annotator_id,score[,sra_a,sra_b]` CSV (header required).
std::vector<AnnotationItem> load_annotations(const std::filesystem::path& path, ScoreBounds bounds = {});
std::vector<AnnotationItem> parse_annotations(std::istream& in, std::string_view source = "<stream>",
                                              ScoreBounds bounds = {});

/// Builds the annotator × item table (annotators and items in sorted order).
ScoreTable annotation_table(std::span<const AnnotationItem> items);

/// Pearson r between each annotator's scores and the log-SRA difference
/// (second minus first response) of the rated pair.
std::map<std::string, double> human_sra_correlation(std::span<const AnnotationItem> items,
                                                    const std::map<std::string, double>& log_sra_difference);

/// Same, taking the difference from each item's sra_a/sra_b columns.
std::map<std::string, double> human_sra_correlation(std::span<const AnnotationItem> items);

/// Rescales to [0, 1]; a constant series maps to zeros.
std::vector<double> min_max_normalize(std::span<const double> v);

}  // namespace sra
