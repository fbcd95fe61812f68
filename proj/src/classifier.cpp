#include "sra/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <spdlog/spdlog.h>

namespace sra {

namespace {

constexpr std::string_view kModelTag = "sra-logreg/1";

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; }

std::vector<double> softmax_scores(const LogRegModel& m, const SparseVector& x) {
  const std::size_t C = m.num_classes();
  std::vector<double> s(C);
  for (std::size_t c = 0; c < C; ++c) s[c] = m.bias()(static_cast<Eigen::Index>(c));
  for (const auto& [idx, val] : x) {
    for (std::size_t c = 0; c < C; ++c) s[c] += m.weights()(static_cast<Eigen::Index>(c), idx) * val;
  }
  const double mx = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (auto& v : s) z += v = std::exp(v - mx);
  for (auto& v : s) v /= z;
  return s;
}

using Vec = Eigen::VectorXd;

Vec pack(const LogRegModel& m) {
  Vec p(m.weights().size() + m.bias().size());
  std::copy_n(m.weights().data(), m.weights().size(), p.data());
  std::copy_n(m.bias().data(), m.bias().size(), p.data() + m.weights().size());
  return p;
}

void unpack(const Vec& p, LogRegModel& m) {
  std::copy_n(p.data(), m.weights().size(), m.weights().data());
  std::copy_n(p.data() + m.weights().size(), m.bias().size(), m.bias().data());
}

double accuracy(const LogRegModel& m, std::span<const LabeledVector> data) {
  if (data.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& ex : data) ok += predict_vector(m, ex.x).class_index == ex.label ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

struct SplitIndices {
  std::vector<std::size_t> train, test;
};

SplitIndices holdout_split(std::size_t n, double test_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "classifier-holdout"));
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  SplitIndices s;
  s.test.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  return s;
}

void check_labels(std::span<const std::size_t> labels, std::size_t num_classes) {
  std::vector<bool> seen(num_classes, false);
  std::size_t distinct = 0;
  for (auto l : labels) {
    if (l >= num_classes) throw InvalidArgument("label index out of range");
    if (!seen[l]) {
      seen[l] = true;
      ++distinct;
    }
  }
  if (distinct < 2) throw InvalidArgument("classifier training needs at least two classes present");
}

// Shared protocol. `make(train_idx)` returns an untrained model for a
// training subset; `feat(model, i)` yields the features of example i under it.
template <typename Make, typename Feat>
ClassifierReport run_protocol(std::size_t n, std::span<const std::size_t> labels, const ClassifierTrainConfig& cfg,
                              Make&& make, Feat&& feat) {
  if (n != labels.size()) throw InvalidArgument("feature and label counts differ");
  if (cfg.folds < 2) throw InvalidArgument("cross-validation needs at least 2 folds");
  auto split = holdout_split(n, cfg.test_fraction, cfg.seed);
  if (split.train.size() < cfg.folds) throw InvalidArgument("too few training examples for the fold count");

  ClassifierReport report;
  report.train_size = split.train.size();
  report.test_size = split.test.size();

  auto fit_on = [&](const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& eval_idx) {
    LogRegModel model = make(train_idx);
    std::vector<LabeledVector> train, eval;
    for (auto i : train_idx) train.push_back({feat(model, i), labels[i]});
    for (auto i : eval_idx) eval.push_back({feat(model, i), labels[i]});
    fit_logreg(model, train, cfg.fit);
    return std::pair{std::move(model), accuracy(model, eval)};
  };

  for (std::size_t f = 0; f < cfg.folds; ++f) {
    std::vector<std::size_t> tr, ev;
    for (std::size_t i = 0; i < split.train.size(); ++i) (i % cfg.folds == f ? ev : tr).push_back(split.train[i]);
    report.fold_accuracy.push_back(fit_on(tr, ev).second);
  }
  report.cv_accuracy = std::accumulate(report.fold_accuracy.begin(), report.fold_accuracy.end(), 0.0) /
                       static_cast<double>(cfg.folds);
  auto [model, test_acc] = fit_on(split.train, split.test);
  report.model = std::move(model);
  report.test_accuracy = test_acc;
  return report;
}

}  // namespace

std::unordered_set<std::string> load_stop_words(const std::filesystem::path& path) {
  std::unordered_set<std::string> out;
  for (auto& line : read_lines(path)) {
    if (!line.empty() && line.front() != '#') out.insert(line);
  }
  return out;
}

std::unordered_set<std::string> default_stop_words() { return load_stop_words(data_dir() / "stopwords_en.txt"); }

std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.size() >= 2) out.push_back(cur);
    cur.clear();
  };
  for (char c : text) {
    if (is_word_char(c)) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::vector<std::string> NgramVocab::content_words(std::string_view text) const {
  std::vector<std::string> out;
  for (auto& w : word_tokens(text)) {
    if (!stop_words_.count(w) && !dropped_words_.count(w)) out.push_back(std::move(w));
  }
  return out;
}

std::vector<std::string> NgramVocab::ngrams(std::string_view text) const {
  const auto words = content_words(text);
  std::vector<std::string> out;
  for (std::size_t n = opts_.min_n; n <= opts_.max_n; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string g = words[i];
      for (std::size_t k = 1; k < n; ++k) g += ' ' + words[i + k];
      out.push_back(std::move(g));
    }
  }
  return out;
}

NgramVocab NgramVocab::build(std::span<const std::string> documents, std::unordered_set<std::string> stop_words,
                             const Options& opts) {
  if (opts.min_n < 1 || opts.min_n > opts.max_n) throw InvalidArgument("invalid n-gram range");
  NgramVocab v;
  v.opts_ = opts;
  v.stop_words_ = std::move(stop_words);
  const double n_docs = static_cast<double>(std::max<std::size_t>(documents.size(), 1));

  std::unordered_map<std::string, std::size_t> word_df;
  for (const auto& doc : documents) {
    auto words = word_tokens(doc);
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto& w : words) {
      if (!v.stop_words_.count(w)) ++word_df[w];
    }
  }
  for (const auto& [w, df] : word_df) {
    if (static_cast<double>(df) / n_docs > opts.max_df) v.dropped_words_.insert(w);
  }

  std::map<std::string, std::size_t> feature_df;
  for (const auto& doc : documents) {
    auto grams = v.ngrams(doc);
    std::sort(grams.begin(), grams.end());
    grams.erase(std::unique(grams.begin(), grams.end()), grams.end());
    for (auto& g : grams) ++feature_df[g];
  }
  for (const auto& [g, df] : feature_df) {
    const double frac = static_cast<double>(df) / n_docs;
    if (frac > opts.max_df) continue;
    v.index_.emplace(g, static_cast<std::uint32_t>(v.features_.size()));
    v.features_.push_back(g);
    v.doc_freq_.push_back(frac);
  }
  return v;
}

long NgramVocab::index_of(std::string_view feature) const {
  auto it = index_.find(std::string(feature));
  return it == index_.end() ? -1 : static_cast<long>(it->second);
}

SparseVector NgramVocab::featurize(std::string_view text) const {
  std::map<std::uint32_t, double> counts;
  for (const auto& g : ngrams(text)) {
    if (auto it = index_.find(g); it != index_.end()) counts[it->second] += 1.0;
  }
  return {counts.begin(), counts.end()};
}

LogRegModel::LogRegModel(std::vector<std::string> classes, std::size_t dim)
    : classes_(std::move(classes)),
      weights_(Mat::Zero(static_cast<Eigen::Index>(classes_.size()), static_cast<Eigen::Index>(dim))),
      bias_(RowVec::Zero(static_cast<Eigen::Index>(classes_.size()))) {
  if (classes_.size() < 2) throw InvalidArgument("a classifier needs at least two classes");
}

void LogRegModel::set_vocab(NgramVocab v) {
  if (v.size() != dim()) throw InvalidArgument("vocabulary size does not match the weight matrix");
  vocab_ = std::move(v);
  kind_ = FeatureKind::ngram;
}

std::vector<double> LogRegModel::posterior(const SparseVector& x) const {
  if (x.empty()) return std::vector<double>(num_classes(), 1.0 / static_cast<double>(num_classes()));
  return softmax_scores(*this, x);
}

void LogRegModel::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = kModelTag;
  j["kind"] = kind_ == FeatureKind::ngram ? "ngram" : "embedding";
  j["classes"] = classes_;
  j["dim"] = dim();
  std::vector<std::vector<double>> w(num_classes());
  for (std::size_t c = 0; c < num_classes(); ++c) {
    const auto row = weights_.row(static_cast<Eigen::Index>(c));
    w[c].assign(row.data(), row.data() + row.size());
  }
  j["weights"] = w;
  j["bias"] = std::vector<double>(bias_.data(), bias_.data() + bias_.size());
  if (kind_ == FeatureKind::ngram) {
    std::vector<std::string> stop(vocab_.stop_words_.begin(), vocab_.stop_words_.end());
    std::vector<std::string> dropped(vocab_.dropped_words_.begin(), vocab_.dropped_words_.end());
    std::sort(stop.begin(), stop.end());
    std::sort(dropped.begin(), dropped.end());
    j["vocab"] = {{"min_n", vocab_.opts_.min_n},       {"max_n", vocab_.opts_.max_n},
                  {"max_df", vocab_.opts_.max_df},     {"features", vocab_.features_},
                  {"doc_freq", vocab_.doc_freq_},      {"stop_words", stop},
                  {"dropped_words", dropped}};
  }
  write_file(path, j.dump());
}

LogRegModel LogRegModel::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  if (j.value("format", "") != kModelTag) throw ParseError(path.string(), 0, "not a classifier model file");
  LogRegModel m(j.at("classes").get<std::vector<std::string>>(), j.at("dim").get<std::size_t>());
  const auto w = j.at("weights").get<std::vector<std::vector<double>>>();
  for (std::size_t c = 0; c < w.size(); ++c) {
    if (w[c].size() != m.dim()) throw ParseError(path.string(), 0, "weight row length mismatch");
    for (std::size_t f = 0; f < w[c].size(); ++f) m.weights_(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(f)) = w[c][f];
  }
  const auto b = j.at("bias").get<std::vector<double>>();
  for (std::size_t c = 0; c < b.size(); ++c) m.bias_(static_cast<Eigen::Index>(c)) = b[c];
  if (j.at("kind") == "ngram") {
    const auto& jv = j.at("vocab");
    NgramVocab v;
    v.opts_ = {jv.at("min_n"), jv.at("max_n"), jv.at("max_df")};
    v.features_ = jv.at("features").get<std::vector<std::string>>();
    v.doc_freq_ = jv.at("doc_freq").get<std::vector<double>>();
    for (auto& s : jv.at("stop_words")) v.stop_words_.insert(s.get<std::string>());
    for (auto& s : jv.at("dropped_words")) v.dropped_words_.insert(s.get<std::string>());
    for (std::size_t i = 0; i < v.features_.size(); ++i) v.index_.emplace(v.features_[i], static_cast<std::uint32_t>(i));
    m.set_vocab(std::move(v));
  }
  return m;
}

double logreg_objective(const LogRegModel& model, std::span<const LabeledVector> data, double l2, Mat* grad_w,
                        RowVec* grad_b) {
  if (data.empty()) throw InvalidArgument("logreg_objective: empty dataset");
  const double n = static_cast<double>(data.size());
  if (grad_w) *grad_w = Mat::Zero(model.weights().rows(), model.weights().cols());
  if (grad_b) *grad_b = RowVec::Zero(model.bias().size());
  double loss = 0.0;
  for (const auto& ex : data) {
    const auto p = softmax_scores(model, ex.x);
    loss -= std::log(std::max(p[ex.label], 1e-300));
    for (std::size_t c = 0; c < p.size(); ++c) {
      const double coef = (p[c] - (c == ex.label ? 1.0 : 0.0)) / n;
      if (grad_b) (*grad_b)(static_cast<Eigen::Index>(c)) += coef;
      if (grad_w) {
        for (const auto& [idx, val] : ex.x) (*grad_w)(static_cast<Eigen::Index>(c), idx) += coef * val;
      }
    }
  }
  loss /= n;
  loss += 0.5 * l2 / n * model.weights().squaredNorm();
  if (grad_w) *grad_w += (l2 / n) * model.weights();
  return loss;
}

void fit_logreg(LogRegModel& model, std::span<const LabeledVector> data, const FitOptions& opts) {
  auto eval = [&](const Vec& p, Vec& g) {
    unpack(p, model);
    Mat gw;
    RowVec gb;
    const double f = logreg_objective(model, data, opts.l2, &gw, &gb);
    g.resize(p.size());
    std::copy_n(gw.data(), gw.size(), g.data());
    std::copy_n(gb.data(), gb.size(), g.data() + gw.size());
    return f;
  };

  Vec x = pack(model);
  Vec g;
  double f = eval(x, g);
  std::deque<std::pair<Vec, Vec>> hist;  // (s, y)
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < opts.tolerance) break;
    // Two-loop recursion.
    Vec q = g;
    std::vector<double> alpha(hist.size());
    for (std::size_t i = hist.size(); i-- > 0;) {
      const auto& [s, y] = hist[i];
      alpha[i] = s.dot(q) / y.dot(s);
      q -= alpha[i] * y;
    }
    if (!hist.empty()) {
      const auto& [s, y] = hist.back();
      q *= s.dot(y) / y.squaredNorm();
    } else {
      q /= std::max(1.0, g.norm());
    }
    for (std::size_t i = 0; i < hist.size(); ++i) {
      const auto& [s, y] = hist[i];
      const double beta = y.dot(q) / y.dot(s);
      q += s * (alpha[i] - beta);
    }
    Vec dir = -q;
    double slope = g.dot(dir);
    if (slope >= 0.0) {  // not a descent direction; fall back to steepest descent
      hist.clear();
      dir = -g / std::max(1.0, g.norm());
      slope = g.dot(dir);
    }
    // Backtracking Armijo line search.
    double step = 1.0;
    Vec x_new, g_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      x_new = x + step * dir;
      f_new = eval(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    Vec s = x_new - x, y = g_new - g;
    if (s.dot(y) > 1e-12) {
      hist.emplace_back(std::move(s), std::move(y));
      if (hist.size() > opts.history) hist.pop_front();
    }
    const double improvement = f - f_new;
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
    if (improvement < 1e-12 * std::max(1.0, std::abs(f))) break;
  }
  unpack(x, model);
}

ClassifierReport train_text_classifier(std::span<const std::string> texts, std::span<const std::size_t> labels,
                                       const std::vector<std::string>& classes,
                                       const std::unordered_set<std::string>& stop_words,
                                       const ClassifierTrainConfig& cfg) {
  check_labels(labels, classes.size());
  return run_protocol(
      texts.size(), labels, cfg,
      [&](const std::vector<std::size_t>& train_idx) {
        std::vector<std::string> docs;
        docs.reserve(train_idx.size());
        for (auto i : train_idx) docs.push_back(texts[i]);
        auto vocab = NgramVocab::build(docs, stop_words, cfg.vocab);
        LogRegModel model(classes, vocab.size());
        model.set_vocab(std::move(vocab));
        return model;
      },
      [&](const LogRegModel& model, std::size_t i) { return model.vocab().featurize(texts[i]); });
}

ClassifierReport train_vector_classifier(std::span<const std::vector<double>> vectors,
                                         std::span<const std::size_t> labels, const std::vector<std::string>& classes,
                                         const ClassifierTrainConfig& cfg) {
  check_labels(labels, classes.size());
  if (vectors.empty()) throw InvalidArgument("no vectors to train on");
  const std::size_t dim = vectors.front().size();
  for (const auto& v : vectors) {
    if (v.size() != dim) throw InvalidArgument("inconsistent vector dimensionality");
  }
  return run_protocol(
      vectors.size(), labels, cfg, [&](const std::vector<std::size_t>&) { return LogRegModel(classes, dim); },
      [&](const LogRegModel&, std::size_t i) { return dense_to_sparse(vectors[i]); });
}

Prediction predict_vector(const LogRegModel& model, const SparseVector& x) {
  Prediction p;
  p.posterior = model.posterior(x);
  p.class_index = static_cast<std::size_t>(std::max_element(p.posterior.begin(), p.posterior.end()) - p.posterior.begin());
  p.strategy = model.classes()[p.class_index];
  return p;
}

Prediction predict(const LogRegModel& model, std::string_view response) {
  if (model.kind() != LogRegModel::FeatureKind::ngram) {
    throw InvalidArgument("text prediction needs an n-gram model");
  }
  return predict_vector(model, model.vocab().featurize(response));
}

std::vector<std::string> top_coefficients(const LogRegModel& model, std::size_t class_index, std::size_t k) {
  if (class_index >= model.num_classes()) throw InvalidArgument("class index out of range");
  if (model.kind() != LogRegModel::FeatureKind::ngram) throw InvalidArgument("top_coefficients needs an n-gram model");
  const auto& feats = model.vocab().features();
  std::vector<std::size_t> idx(feats.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto row = model.weights().row(static_cast<Eigen::Index>(class_index));
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    const double wa = row(static_cast<Eigen::Index>(a)), wb = row(static_cast<Eigen::Index>(b));
    if (wa != wb) return wa > wb;
    return feats[a] < feats[b];
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(feats[idx[i]]);
  return out;
}

std::vector<EmbeddingRecord> parse_embeddings(std::istream& in, std::string_view source) {
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EmbeddingRecord r;
      r.example_id = j.at("example_id").get<std::string>();
      r.vector = j.at("vector").get<std::vector<double>>();
      if (r.vector.empty()) throw InvalidArgument("empty vector");
      if (!out.empty() && r.vector.size() != out.front().vector.size()) {
        throw InvalidArgument("vector dimensionality " + std::to_string(r.vector.size()) + " differs from " +
                              std::to_string(out.front().vector.size()));
      }
      double sq = 0.0;
      for (double v : r.vector) sq += v * v;
      r.unit_norm = std::abs(std::sqrt(sq) - 1.0) <= 1e-6;
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string(source), lineno, e.what());
    } catch (const InvalidArgument& e) {
      throw ParseError(std::string(source), lineno, e.what());
    }
  }
  return out;
}

std::vector<EmbeddingRecord> load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embeddings file: " + path.string());
  return parse_embeddings(in, path.string());
}

SparseVector dense_to_sparse(std::span<const double> v) {
  SparseVector out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0) out.emplace_back(static_cast<std::uint32_t>(i), v[i]);
  }
  return out;
}

}  // namespace sra
