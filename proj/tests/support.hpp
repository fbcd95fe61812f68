// Fixtures and reference implementations shared by the unit tests and the
// acceptance runner. Oracles are written as plainly as possible and never
// call into the code they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "sra/corpus.hpp"
#include "sra/tensor.hpp"
#include "sra/transformer.hpp"

namespace fixtures {

inline sra::Conversation alternating(const std::string& id, std::size_t n, bool seeker_first = true) {
  sra::Conversation c{id, "I lost my job and feel stuck.", {}};
  for (std::size_t i = 0; i < n; ++i) {
    const bool seeker = (i % 2 == 0) == seeker_first;
    sra::Turn t{seeker ? sra::Speaker::seeker : sra::Speaker::supporter,
                (seeker ? "seeker says " : "supporter says ") + std::to_string(i + 1), std::nullopt};
    if (!seeker) t.strategy = "affirmation";
    c.turns.push_back(t);
  }
  return c;
}

inline std::vector<sra::Conversation> alternating_corpus(std::size_t n, std::size_t turns) {
  std::vector<sra::Conversation> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(alternating("conv-" + std::to_string(i), turns));
  return out;
}

/// Random trace whose rows over the first `cols` columns are stochastic.
inline sra::AttentionTrace random_trace(std::size_t M, std::size_t H, std::size_t R, std::size_t L,
                                        std::mt19937_64& rng) {
  sra::AttentionTrace t(M, H, R, L);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t r = 0; r < R; ++r) {
        double s = 0.0;
        std::vector<double> row(L);
        for (auto& v : row) s += (v = u(rng) + 1e-3);
        for (std::size_t l = 0; l < L; ++l) t(m, h, r, l) = row[l] / s;
      }
  return t;
}

// SRA as a literal quadruple loop.
inline double sra_oracle(const sra::AttentionTrace& A, std::size_t sb, std::size_t se) {
  const double M = static_cast<double>(A.layers()), H = static_cast<double>(A.heads());
  double total = 0.0;
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t l = sb; l < se; ++l) {
      double agg = 0.0;
      for (std::size_t m = 0; m < A.layers(); ++m)
        for (std::size_t h = 0; h < A.heads(); ++h) agg += A(m, h, r, l);
      total += agg / (M * H);
    }
  return total / (static_cast<double>(se - sb) * static_cast<double>(A.rows()));
}

// Textbook Pearson: covariance over the product of standard deviations.
inline double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Interval Krippendorff alpha through an explicit coincidence matrix over the
// distinct values.
inline double krippendorff_coincidence(const std::vector<std::vector<std::optional<double>>>& table) {
  std::set<double> distinct;
  for (const auto& row : table)
    for (const auto& v : row)
      if (v) distinct.insert(*v);
  const std::vector<double> vals(distinct.begin(), distinct.end());
  const std::size_t K = vals.size();
  auto idx = [&](double v) { return static_cast<std::size_t>(std::lower_bound(vals.begin(), vals.end(), v) - vals.begin()); };
  std::vector<std::vector<double>> o(K, std::vector<double>(K, 0.0));
  const std::size_t items = table.empty() ? 0 : table[0].size();
  for (std::size_t u = 0; u < items; ++u) {
    std::vector<double> unit;
    for (const auto& row : table)
      if (row[u]) unit.push_back(*row[u]);
    if (unit.size() < 2) continue;
    const double w = 1.0 / static_cast<double>(unit.size() - 1);
    for (std::size_t i = 0; i < unit.size(); ++i)
      for (std::size_t j = 0; j < unit.size(); ++j)
        if (i != j) o[idx(unit[i])][idx(unit[j])] += w;
  }
  std::vector<double> nc(K, 0.0);
  double n = 0.0;
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t k = 0; k < K; ++k) nc[c] += o[c][k];
  for (double v : nc) n += v;
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < K; ++c)
    for (std::size_t k = 0; k < K; ++k) {
      const double d2 = (vals[c] - vals[k]) * (vals[c] - vals[k]);
      num += o[c][k] * d2;
      den += nc[c] * nc[k] * d2;
    }
  return 1.0 - (n - 1.0) * num / den;
}

// Every contiguous n-gram, n in [lo, hi], of a word list.
inline std::multiset<std::string> ngram_enumeration(const std::vector<std::string>& words, std::size_t lo,
                                                    std::size_t hi) {
  std::multiset<std::string> out;
  for (std::size_t n = lo; n <= hi; ++n)
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string g = words[i];
      for (std::size_t j = 1; j < n; ++j) g += " " + words[i + j];
      out.insert(g);
    }
  return out;
}

/// Fifteen classes; each document holds its class's planted bigram inside
/// random filler drawn from a shared pool.
struct PlantedCorpus {
  std::vector<std::string> texts;
  std::vector<std::size_t> labels;
  std::vector<std::string> classes;
  std::vector<std::string> planted;
};

inline PlantedCorpus planted_corpus(std::size_t per_class, std::uint64_t seed) {
  static const std::vector<std::string> pool{
      "river", "candle", "mountain", "orange", "window", "pencil", "garden", "silver", "thunder", "blanket",
      "forest", "copper", "meadow", "lantern", "harbor", "violet", "granite", "willow", "canyon", "marble",
      "saddle", "pepper", "velvet", "anchor", "falcon", "tunnel", "bubble", "ribbon", "cactus", "glacier"};
  static const std::vector<std::pair<std::string, std::string>> plants{
      {"zephyr", "quill"},  {"amber", "kettle"}, {"cobalt", "drum"},  {"dune", "ferry"},   {"ember", "glove"},
      {"frost", "harp"},    {"grove", "ivory"},  {"hazel", "jigsaw"}, {"iris", "kayak"},   {"jade", "lemur"},
      {"kiln", "mango"},    {"lilac", "nectar"}, {"moss", "oboe"},    {"nickel", "parrot"}, {"onyx", "quartz"}};
  PlantedCorpus pc;
  for (std::size_t k = 0; k < plants.size(); ++k) {
    pc.classes.push_back("class_" + std::to_string(k));
    pc.planted.push_back(plants[k].first + " " + plants[k].second);
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1), len(3, 8);
  for (std::size_t k = 0; k < plants.size(); ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t before = len(rng) / 2, after = len(rng) / 2;
      std::string t;
      for (std::size_t j = 0; j < before; ++j) t += pool[pick(rng)] + " ";
      t += "and " + plants[k].first + " " + plants[k].second + " then";
      for (std::size_t j = 0; j < after; ++j) t += " " + pool[pick(rng)];
      pc.texts.push_back(t);
      pc.labels.push_back(k);
    }
  return pc;
}

using Vec = std::vector<double>;
using Grid = std::vector<Vec>;  // rows of a T×n activation

struct ScalarForward {
  std::vector<std::vector<Grid>> attention;  // [layer][head] T×T
  Grid probabilities;                        // T×V
};

// The decoder evaluated one scalar at a time: pre-norm blocks, erf GELU,
// layer-norm epsilon 1e-5, untied head.
inline ScalarForward scalar_forward(const sra::Weights& w, const std::vector<sra::TokenId>& ids) {
  const auto& cfg = w.config;
  const std::size_t T = ids.size(), d = cfg.d, H = cfg.heads, dh = d / H, V = cfg.vocab;
  auto matvec = [](const sra::Mat& W, const Vec& x) {  // W is out×in
    Vec y(static_cast<std::size_t>(W.rows()), 0.0);
    for (long i = 0; i < W.rows(); ++i)
      for (long j = 0; j < W.cols(); ++j) y[static_cast<std::size_t>(i)] += W(i, j) * x[static_cast<std::size_t>(j)];
    return y;
  };
  auto norm = [&](const Vec& x, const sra::Mat& g, const sra::Mat& b) {
    double mean = 0.0, var = 0.0;
    for (double v : x) mean += v / static_cast<double>(x.size());
    for (double v : x) var += (v - mean) * (v - mean) / static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g(0, static_cast<long>(i)) + b(0, static_cast<long>(i));
    return y;
  };
  Grid x(T, Vec(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i)
      x[t][i] = w.token_embedding(ids[t], static_cast<long>(i)) + w.position_embedding(static_cast<long>(t), static_cast<long>(i));
  ScalarForward out;
  for (const auto& L : w.layers) {
    Grid q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto xn = norm(x[t], L.ln1_gain, L.ln1_bias);
      q[t] = matvec(L.wq, xn);
      k[t] = matvec(L.wk, xn);
      v[t] = matvec(L.wv, xn);
    }
    std::vector<Grid> heads(H, Grid(T, Vec(T, 0.0)));
    Grid concat(T, Vec(d, 0.0));
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        Vec logit(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[i][h * dh + c] * k[j][h * dh + c];
          logit[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logit[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(logit[j] - mx);
        for (std::size_t j = 0; j <= i; ++j) heads[h][i][j] = std::exp(logit[j] - mx) / z;
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < dh; ++c) concat[i][h * dh + c] += heads[h][i][j] * v[j][h * dh + c];
      }
    out.attention.push_back(heads);
    for (std::size_t t = 0; t < T; ++t) {
      const auto o = matvec(L.wo, concat[t]);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += o[i];
      const auto xn = norm(x[t], L.ln2_gain, L.ln2_bias);
      auto hid = matvec(L.w1, xn);
      for (std::size_t i = 0; i < hid.size(); ++i) {
        const double a = hid[i] + L.b1(0, static_cast<long>(i));
        hid[i] = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
      }
      const auto f = matvec(L.w2, hid);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += f[i] + L.b2(0, static_cast<long>(i));
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    const auto logits = matvec(w.head, norm(x[t], w.final_gain, w.final_bias));
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    Vec p(V);
    for (std::size_t i = 0; i < V; ++i) p[i] = std::exp(logits[i] - mx) / z;
    out.probabilities.push_back(p);
  }
  return out;
}

/// Hand-set 1-layer, 1-head, d = 4 model used by the 3-token fixture.
inline sra::Weights tiny_model() {
  sra::ModelConfig cfg;
  cfg.d = 4;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.vocab = 5;
  cfg.max_len = 3;
  auto w = sra::Weights::zeros(cfg);
  w.token_embedding << 1, 0, 0, 0,  //
      0, 1, 0, 0,                   //
      0, 0, 1, 0,                   //
      0, 0, 0, 1,                   //
      1, -1, 1, -1;
  w.position_embedding << 0.1, 0, 0, 0,  //
      0, 0.2, 0, 0,                      //
      0, 0, 0.3, 0;
  auto& L = w.layers[0];
  L.ln1_gain.setOnes();
  L.ln2_gain.setOnes();
  w.final_gain.setOnes();
  L.wq = sra::Mat::Identity(4, 4);
  L.wk << 1, 1, 0, 0,  //
      0, 1, 1, 0,      //
      0, 0, 1, 1,      //
      1, 0, 0, 1;
  L.wv = 0.5 * sra::Mat::Identity(4, 4);
  L.wo = sra::Mat::Identity(4, 4);
  for (long i = 0; i < L.w1.rows(); ++i)
    for (long j = 0; j < L.w1.cols(); ++j) L.w1(i, j) = 0.05 * static_cast<double>((i + 2 * j) % 5 - 2);
  for (long i = 0; i < L.w2.rows(); ++i)
    for (long j = 0; j < L.w2.cols(); ++j) L.w2(i, j) = 0.04 * static_cast<double>((3 * i + j) % 7 - 3);
  for (long i = 0; i < w.head.rows(); ++i)
    for (long j = 0; j < w.head.cols(); ++j) w.head(i, j) = static_cast<double>((i + j) % 3) - 1.0;
  return w;
}

}  // namespace fixtures
