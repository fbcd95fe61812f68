#include <doctest.h>

#include <filesystem>
#include <random>

#include "sra/transformer.hpp"
#include "support.hpp"

using namespace sra;

namespace {

ModelConfig small_config(std::size_t vocab = 40) {
  ModelConfig c;
  c.d = 16;
  c.layers = 2;
  c.heads = 4;
  c.vocab = vocab;
  c.max_len = 64;
  return c;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids(n);
  for (auto& t : ids) t = static_cast<TokenId>(rng() % vocab);
  return ids;
}

}  // namespace

TEST_CASE("equal logits give uniform weights") {
  const std::vector<double> q{0.0, 0.0, 0.0, 0.0};
  Mat keys = Mat::Random(4, 4), values = Mat::Random(4, 4);
  const auto r = attention_row(q, keys, values, 16, 4);
  REQUIRE(r.weights.size() == 4);
  for (double w : r.weights) CHECK(w == doctest::Approx(0.25).epsilon(1e-15));
  for (long c = 0; c < 4; ++c) CHECK(r.output[static_cast<std::size_t>(c)] == doctest::Approx(values.col(c).mean()));
}

TEST_CASE("scaled softmax of two keys") {
  // d/H = 4 so logits are divided by 2: inner products [2, 0] -> [1, 0].
  const std::vector<double> q{1.0, 1.0, 0.0, 0.0};
  Mat keys(2, 4);
  keys << 1, 1, 0, 0,  //
      0, 0, 5, 5;
  Mat values(2, 4);
  values << 1, 0, 0, 0,  //
      0, 1, 0, 0;
  const auto r = attention_row(q, keys, values, 8, 2);
  const double e = std::exp(1.0);
  CHECK(r.weights[0] == doctest::Approx(e / (e + 1)).epsilon(1e-14));
  CHECK(r.weights[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-14));
  CHECK(r.weights[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(r.output[0] == doctest::Approx(e / (e + 1)));
  CHECK(r.output[1] == doctest::Approx(1 / (e + 1)));
}

TEST_CASE("one visible key takes all the weight") {
  const std::vector<double> q{3.0, -1.0};
  Mat keys(1, 2), values(1, 2);
  keys << 0.4, 2.0;
  values << 7.0, -3.0;
  const auto r = attention_row(q, keys, values, 4, 2);
  CHECK(r.weights == std::vector<double>{1.0});
  CHECK(r.output == std::vector<double>{7.0, -3.0});
}

TEST_CASE("attention row rejects mismatched shapes") {
  const std::vector<double> q{1.0, 2.0, 3.0};
  Mat keys = Mat::Zero(2, 4), values = Mat::Zero(2, 4);
  CHECK_THROWS_AS(attention_row(q, keys, values, 8, 2), InvalidArgument);
  const std::vector<double> q4{1, 2, 3, 4};
  Mat v3 = Mat::Zero(3, 4);
  CHECK_THROWS_AS(attention_row(q4, keys, v3, 8, 2), InvalidArgument);
}

TEST_CASE("model config validation") {
  ModelConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = small_config();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("trace rows are causal and stochastic") {
  const auto w = Weights::random(small_config(), 3);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const auto ids = random_ids(rng, 1 + rng() % 40, 40);
    const auto f = forward_with_trace(w, ids);
    const auto& A = f.trace;
    CHECK(A.rows() == ids.size());
    for (std::size_t m = 0; m < A.layers(); ++m)
      for (std::size_t h = 0; h < A.heads(); ++h)
        for (std::size_t i = 0; i < A.rows(); ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < A.cols(); ++j) {
            if (j > i) CHECK(A(m, h, i, j) == 0.0);
            else s += A(m, h, i, j);
          }
          CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    for (long t = 0; t < f.probabilities.rows(); ++t) {
      CHECK(f.probabilities.row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(f.probabilities.row(t).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("three-token fixture matches the scalar computation") {
  const auto w = fixtures::tiny_model();
  const std::vector<TokenId> ids{4, 1, 2};
  const auto f = forward_with_trace(w, ids);
  // Layer-1 attention depends only on embeddings, W^q and W^k; these values
  // were worked out independently in floating point.
  CHECK(f.trace(0, 0, 0, 0) == 1.0);
  CHECK(std::abs(f.trace(0, 0, 1, 0) - 0.19947545148553378) < 1e-10);
  CHECK(std::abs(f.trace(0, 0, 1, 1) - 0.8005245485144663) < 1e-10);
  CHECK(std::abs(f.trace(0, 0, 2, 0) - 0.1889626149385349) < 1e-10);
  CHECK(std::abs(f.trace(0, 0, 2, 1) - 0.05269675126471312) < 1e-10);
  CHECK(std::abs(f.trace(0, 0, 2, 2) - 0.758340633796752) < 1e-10);
  const auto s = fixtures::scalar_forward(w, ids);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(f.trace(0, 0, i, j) - s.attention[0][0][i][j]) < 1e-10);
    for (std::size_t k = 0; k < 5; ++k)
      CHECK(std::abs(f.probabilities(static_cast<long>(i), static_cast<long>(k)) - s.probabilities[i][k]) < 1e-10);
  }
}

TEST_CASE("random multi-layer model matches the scalar computation") {
  const auto w = Weights::random(small_config(), 77);
  std::mt19937_64 rng(78);
  const auto ids = random_ids(rng, 12, 40);
  const auto f = forward_with_trace(w, ids);
  const auto s = fixtures::scalar_forward(w, ids);
  double worst = 0.0;
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t h = 0; h < 4; ++h)
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < ids.size(); ++j)
          worst = std::max(worst, std::abs(f.trace(m, h, i, j) - s.attention[m][h][i][j]));
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t k = 0; k < 40; ++k)
      worst = std::max(worst, std::abs(f.probabilities(static_cast<long>(i), static_cast<long>(k)) - s.probabilities[i][k]));
  CHECK(worst < 1e-10);
}

TEST_CASE("prefix rows do not depend on later tokens") {
  const auto w = Weights::random(small_config(), 5);
  std::mt19937_64 rng(6);
  const auto ids = random_ids(rng, 30, 40);
  const auto full = forward_with_trace(w, ids);
  for (std::size_t t : {1, 7, 18}) {
    const std::vector<TokenId> prefix(ids.begin(), ids.begin() + static_cast<long>(t));
    const auto part = forward_with_trace(w, prefix);
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t h = 0; h < 4; ++h)
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j) CHECK(part.trace(m, h, i, j) == doctest::Approx(full.trace(m, h, i, j)).epsilon(1e-12));
  }
}

TEST_CASE("forward is bitwise repeatable") {
  const auto w = Weights::random(small_config(), 5);
  const std::vector<TokenId> ids{3, 9, 27, 1};
  const auto a = forward_with_trace(w, ids), b = forward_with_trace(w, ids);
  CHECK(a.probabilities == b.probabilities);
  CHECK(a.trace.data() == b.trace.data());
}

TEST_CASE("overlong input names the context limit") {
  const auto w = Weights::random(small_config(), 5);
  const std::vector<TokenId> ids(65, 1);
  try {
    forward_with_trace(w, ids);
    FAIL("expected an error");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("max_len") != std::string::npos);
  }
}

TEST_CASE("nucleus truncation keeps the smallest sufficient prefix") {
  const std::vector<double> logits{std::log(0.5), std::log(0.3), std::log(0.15), std::log(0.05)};
  const auto p = sampling_distribution(logits, 1.0, 0.75);
  CHECK(p[0] == doctest::Approx(0.625));
  CHECK(p[1] == doctest::Approx(0.375));
  CHECK(p[2] == 0.0);
  CHECK(p[3] == 0.0);
  const auto top1 = sampling_distribution(logits, 1.0, 1e-9);
  CHECK(top1 == std::vector<double>{1.0, 0.0, 0.0, 0.0});
  const auto all = sampling_distribution(logits, 1.0, 1.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(all[i] == doctest::Approx(std::exp(logits[i])));
  // Temperature 0.5 squares then renormalizes.
  const auto sharp = sampling_distribution(logits, 0.5, 1.0);
  const double z = 0.25 + 0.09 + 0.0225 + 0.0025;
  CHECK(sharp[0] == doctest::Approx(0.25 / z));
  CHECK(sampling_distribution(logits, 1e-7, 0.9) == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("near-zero temperature decodes greedily") {
  const auto w = Weights::random(small_config(), 8);
  const std::vector<TokenId> prompt{5, 6, 7};
  GenerationConfig cfg;
  cfg.temperature = 1e-9;
  cfg.max_new_tokens = 10;
  cfg.stop_at_eos = false;
  const auto g = generate(w, prompt, cfg);
  REQUIRE(g.tokens.size() == 10);
  std::vector<TokenId> seq = prompt;
  for (auto tok : g.tokens) {
    const auto f = forward_with_trace(w, seq);
    Eigen::Index best;
    f.probabilities.row(f.probabilities.rows() - 1).maxCoeff(&best);
    CHECK(tok == static_cast<TokenId>(best));
    seq.push_back(tok);
  }
}

TEST_CASE("ancestral sampling follows the model distribution") {
  auto cfg_model = small_config(12);
  auto w = Weights::random(cfg_model, 9);
  w.head *= 8.0;  // make the first-token distribution clearly non-uniform
  const std::vector<TokenId> prompt{3, 4, 5};
  const auto f = forward_with_trace(w, prompt);
  const RowVec p = f.probabilities.row(2);
  std::vector<double> counts(12, 0.0);
  const int draws = 10000;
  GenerationConfig g;
  g.top_p = 1.0;
  g.temperature = 1.0;
  g.max_new_tokens = 1;
  g.stop_at_eos = false;
  for (int i = 0; i < draws; ++i) {
    g.seed = static_cast<std::uint64_t>(i);
    counts[static_cast<std::size_t>(generate(w, prompt, g).tokens.at(0))] += 1.0;
  }
  // Pool cells with small expectation, then compare with the chi-square
  // critical value at alpha = 0.01.
  double chi2 = 0.0, pooled_obs = 0.0, pooled_exp = 0.0;
  int cells = 0;
  for (std::size_t k = 0; k < 12; ++k) {
    const double e = p(static_cast<long>(k)) * draws;
    if (e < 5.0) {
      pooled_obs += counts[k];
      pooled_exp += e;
      continue;
    }
    chi2 += (counts[k] - e) * (counts[k] - e) / e;
    ++cells;
  }
  if (pooled_exp > 0.0) {
    chi2 += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / std::max(pooled_exp, 1e-12);
    ++cells;
  }
  // 0.99 quantiles of chi-square with 1..11 degrees of freedom.
  const double crit[] = {0, 6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666, 23.209, 24.725};
  REQUIRE(cells >= 3);
  CHECK(chi2 < crit[cells - 1]);
}

TEST_CASE("generation is deterministic under a seed") {
  const auto w = Weights::random(small_config(), 10);
  const std::vector<TokenId> prompt{1, 8, 9, 10};
  GenerationConfig cfg;
  cfg.seed = 42;
  cfg.max_new_tokens = 20;
  const auto a = generate(w, prompt, cfg), b = generate(w, prompt, cfg);
  CHECK(a.tokens == b.tokens);
  CHECK(a.prompt_trace.data() == b.prompt_trace.data());
}

TEST_CASE("generation config is validated") {
  const auto w = Weights::random(small_config(), 10);
  const std::vector<TokenId> prompt{1, 2};
  GenerationConfig cfg;
  cfg.max_new_tokens = 0;
  CHECK_THROWS_AS(generate(w, prompt, cfg), InvalidArgument);
  cfg.max_new_tokens = 4;
  cfg.top_p = 0.0;
  CHECK_THROWS_AS(generate(w, prompt, cfg), InvalidArgument);
  cfg.top_p = 0.9;
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(generate(w, prompt, cfg), InvalidArgument);
  cfg.temperature = 0.7;
  cfg.max_new_tokens = 63;
  CHECK_THROWS_AS(generate(w, prompt, cfg), InvalidArgument);
}

TEST_CASE("generation trace equals the teacher-forced trace") {
  const auto w = Weights::random(small_config(), 12);
  const std::vector<TokenId> prompt{4, 5, 6, 7, 8, 9};
  GenerationConfig cfg;
  cfg.seed = 3;
  cfg.max_new_tokens = 8;
  cfg.stop_at_eos = false;
  const auto g = generate(w, prompt, cfg);
  const auto& A = g.prompt_trace;
  CHECK(A.layers() == 2);
  CHECK(A.heads() == 4);
  CHECK(A.rows() == g.tokens.size());
  CHECK(A.cols() == prompt.size());
  const auto tf = response_trace(w, prompt, g.tokens);
  REQUIRE(tf.data().size() == A.data().size());
  for (std::size_t i = 0; i < A.data().size(); ++i) CHECK(A.data()[i] == doctest::Approx(tf.data()[i]).epsilon(1e-12));
  // Row r is the query at position L-1+r of the full sequence.
  std::vector<TokenId> seq = prompt;
  seq.insert(seq.end(), g.tokens.begin(), g.tokens.end() - 1);
  const auto full = forward_with_trace(w, seq);
  CHECK(A(1, 2, 3, 4) == doctest::Approx(full.trace(1, 2, prompt.size() - 1 + 3, 4)).epsilon(1e-12));
}

TEST_CASE("checkpoint round-trip") {
  const auto w = Weights::random(small_config(), 13);
  const auto path = std::filesystem::temp_directory_path() / "sra_ckpt_roundtrip.bin";
  w.save(path);
  const auto back = Weights::load(path);
  CHECK(back.config == w.config);
  CHECK(back.checksum() == w.checksum());
  std::filesystem::remove(path);
  write_file(path, "not a checkpoint");
  CHECK_THROWS_AS(Weights::load(path), Error);
  std::filesystem::remove(path);
}
