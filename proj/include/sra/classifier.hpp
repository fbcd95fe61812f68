#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sra/common.hpp"
#include "sra/tensor.hpp"

namespace sra {

using SparseVector = std::vector<std::pair<std::uint32_t, double>>;  // sorted by index

std::unordered_set<std::string> load_stop_words(const std::filesystem::path& path);
std::unordered_set<std::string> default_stop_words();

/// Lowercased word tokens of at least two alphanumeric characters; any
/// other character separates words (so "let's" yields "let").
std::vector<std::string> word_tokens(std::string_view text);

/// 2-gram and 3-gram vocabulary over stop-word-filtered words.
class NgramVocab {
 public:
  struct Options {
    std::size_t min_n = 2;
    std::size_t max_n = 3;
    double max_df = 0.9;  // words and features above this document frequency are dropped
  };

  NgramVocab() = default;

  static NgramVocab build(std::span<const std::string> documents, std::unordered_set<std::string> stop_words,
                          const Options& opts);
  static NgramVocab build(std::span<const std::string> documents, std::unordered_set<std::string> stop_words) {
    return build(documents, std::move(stop_words), Options{});
  }

  /// Words surviving stop-word and document-frequency filtering, in order.
  std::vector<std::string> content_words(std::string_view text) const;
  /// All n-grams (joined by a single space) of a text, before vocabulary lookup.
  std::vector<std::string> ngrams(std::string_view text) const;

  std::size_t size() const { return features_.size(); }
  const std::vector<std::string>& features() const { return features_; }
  const std::vector<double>& document_frequency() const { return doc_freq_; }
  const std::unordered_set<std::string>& dropped_words() const { return dropped_words_; }
  const Options& options() const { return opts_; }
  long index_of(std::string_view feature) const;

  SparseVector featurize(std::string_view text) const;

 private:
  friend class LogRegModel;
  Options opts_;
  std::unordered_set<std::string> stop_words_;
  std::unordered_set<std::string> dropped_words_;
  std::vector<std::string> features_;
  std::vector<double> doc_freq_;  // fraction of documents containing the feature
  std::unordered_map<std::string, std::uint32_t> index_;
};

/// Multinomial logistic regression: P(class | x) = softmax(W x + b).
class LogRegModel {
 public:
  enum class FeatureKind { ngram, embedding };

  LogRegModel() = default;
  LogRegModel(std::vector<std::string> classes, std::size_t dim);

  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t num_classes() const { return classes_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(weights_.cols()); }
  Mat& weights() { return weights_; }
  const Mat& weights() const { return weights_; }
  RowVec& bias() { return bias_; }
  const RowVec& bias() const { return bias_; }
  FeatureKind kind() const { return kind_; }
  const NgramVocab& vocab() const { return vocab_; }
  void set_vocab(NgramVocab v);

  /// Posterior over classes. An input with no active feature carries no
  /// evidence and gets the uniform posterior.
  std::vector<double> posterior(const SparseVector& x) const;

  void save(const std::filesystem::path& path) const;
  static LogRegModel load(const std::filesystem::path& path);

 private:
  std::vector<std::string> classes_;
  Mat weights_;  // classes × features
  RowVec bias_;
  FeatureKind kind_ = FeatureKind::embedding;
  NgramVocab vocab_;
};

struct LabeledVector {
  SparseVector x;
  std::size_t label = 0;
};

/// Mean cross-entropy plus (l2 / 2N)·||W||² (bias not penalized), with its
/// gradient written into grad_w / grad_b when non-null.
double logreg_objective(const LogRegModel& model, std::span<const LabeledVector> data, double l2, Mat* grad_w,
                        RowVec* grad_b);

struct FitOptions {
  double l2 = 1.0;
  std::size_t max_iterations = 300;
  double tolerance = 1e-7;  // on the gradient infinity norm
  std::size_t history = 10;
};

/// Minimizes logreg_objective with L-BFGS starting from the model's current
/// parameters.
void fit_logreg(LogRegModel& model, std::span<const LabeledVector> data, const FitOptions& opts);

struct ClassifierTrainConfig {
  std::size_t folds = 4;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
  FitOptions fit;
  NgramVocab::Options vocab;
};

struct ClassifierReport {
  LogRegModel model;
  std::vector<double> fold_accuracy;
  double cv_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

/// Text classifier: random 80/20 split, k-fold cross-validation on the
/// training part (vocabulary rebuilt per fold), then a final fit on the full
/// training part scored on the held-out test part.
ClassifierReport train_text_classifier(std::span<const std::string> texts, std::span<const std::size_t> labels,
                                       const std::vector<std::string>& classes,
                                       const std::unordered_set<std::string>& stop_words,
                                       const ClassifierTrainConfig& cfg);

/// Same protocol over externally computed dense vectors.
ClassifierReport train_vector_classifier(std::span<const std::vector<double>> vectors,
                                         std::span<const std::size_t> labels, const std::vector<std::string>& classes,
                                         const ClassifierTrainConfig& cfg);

struct Prediction {
  std::size_t class_index = 0;
  std::string strategy;
  std::vector<double> posterior;
};

/// Argmax with ties going to the lowest class index.
Prediction predict(const LogRegModel& model, std::string_view response);
Prediction predict_vector(const LogRegModel& model, const SparseVector& x);

/// The k features with the highest weight for a class, ties broken
/// lexicographically; k is clamped to the feature count.
std::vector<std::string> top_coefficients(const LogRegModel& model, std::size_t class_index, std::size_t k);

struct EmbeddingRecord {
  std::string example_id;
  std::vector<double> vector;
  bool unit_norm = false;  // |v| = 1 within 1e-6
};

/// Reads `{"example_id": str, "vector": [float, ...]}` lines; all vectors must
/// share one dimensionality.
std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path);
std::vector<EmbeddingRecord> parse_embeddings(std::istream& in, std::string_view source = "<stream>");

SparseVector dense_to_sparse(std::span<const double> v);

}  // namespace sra
