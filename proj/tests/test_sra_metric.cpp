#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "sra/sra_metric.hpp"
#include "support.hpp"

using namespace sra;

namespace {

SraRecord rec(const std::string& id, double sra, const std::string& tmpl = "c1_hf", const std::string& tag = "base",
              std::size_t turn = 5) {
  SraRecord r;
  r.example_id = id;
  r.template_id = tmpl;
  r.model_tag = tag;
  r.turn = turn;
  r.sra = sra;
  r.log_sra = std::log(sra);
  r.layers = r.heads = r.response_len = 1;
  r.prompt_len = 10;
  r.span_begin = 2;
  r.span_end = 5;
  return r;
}

}  // namespace

TEST_CASE("mass concentrated on one span token") {
  AttentionTrace A(1, 1, 1, 6);
  A(0, 0, 0, 3) = 1.0;
  const auto r = compute_sra(A, {1, 5});
  CHECK(r.sra == 0.25);
  CHECK(r.log_sra == std::log(0.25));
}

TEST_CASE("uniform attention gives one over L") {
  AttentionTrace A(1, 1, 2, 10);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t l = 0; l < 10; ++l) A(0, 0, r, l) = 0.1;
  CHECK(compute_sra(A, {4, 7}).sra == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("random traces match the nested-loop sum") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto A = fixtures::random_trace(2, 2, 3, 8, rng);
    const std::size_t b = rng() % 8, e = b + 1 + rng() % (8 - b);
    const auto r = compute_sra(A, {b, e});
    CHECK(std::abs(r.sra - fixtures::sra_oracle(A, b, e)) <= 1e-12);
    CHECK(r.log_sra == std::log(r.sra));
  }
}

TEST_CASE("per layer and head breakdown averages to the total") {
  std::mt19937_64 rng(2);
  const auto A = fixtures::random_trace(3, 2, 4, 9, rng);
  const auto r = compute_sra(A, {2, 6});
  REQUIRE(r.per_layer_head.rows() == 3);
  REQUIRE(r.per_layer_head.cols() == 2);
  CHECK(r.per_layer_head.mean() == doctest::Approx(r.sra).epsilon(1e-14));
  for (std::size_t m = 0; m < 3; ++m)
    for (std::size_t h = 0; h < 2; ++h) {
      double s = 0.0;
      for (std::size_t row = 0; row < 4; ++row)
        for (std::size_t l = 2; l < 6; ++l) s += A(m, h, row, l);
      CHECK(r.per_layer_head(static_cast<long>(m), static_cast<long>(h)) == doctest::Approx(s / 16.0).epsilon(1e-14));
    }
}

TEST_CASE("full span sums each row to one") {
  std::mt19937_64 rng(3);
  const auto A = fixtures::random_trace(2, 3, 5, 7, rng);
  const auto r = compute_sra(A, {0, 7});
  CHECK(r.sra * 7.0 == doctest::Approx(1.0).epsilon(1e-12));
  AttentionTrace one(1, 1, 3, 1);
  for (std::size_t i = 0; i < 3; ++i) one(0, 0, i, 0) = 1.0;
  CHECK(compute_sra(one, {0, 1}).sra == 1.0);
}

TEST_CASE("SRA is bounded and symmetric across layers and heads") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    const auto A = fixtures::random_trace(3, 3, 2, 6, rng);
    const auto r = compute_sra(A, {1, 4});
    CHECK(r.sra > 0.0);
    CHECK(r.sra <= 1.0);
    // Swap layer 0 with layer 2 and head 0 with head 1.
    AttentionTrace P(3, 3, 2, 6);
    for (std::size_t m = 0; m < 3; ++m)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t l = 0; l < 6; ++l) P(2 - m, h < 2 ? 1 - h : h, i, l) = A(m, h, i, l);
    CHECK(compute_sra(P, {1, 4}).sra == doctest::Approx(r.sra).epsilon(1e-14));
  }
}

TEST_CASE("enlarging the span follows the closed form") {
  std::mt19937_64 rng(5);
  const auto A = fixtures::random_trace(2, 2, 3, 8, rng);
  const double before = compute_sra(A, {2, 5}).sra;
  double col = 0.0;  // mean over layers/heads, summed over rows, of column 5
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t r = 0; r < 3; ++r) col += A(m, h, r, 5) / 4.0;
  const double expected = (before * 3.0 * 3.0 + col) / (4.0 * 3.0);
  CHECK(compute_sra(A, {2, 6}).sra == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("invalid spans and empty traces are rejected") {
  AttentionTrace A(1, 1, 2, 5);
  CHECK_THROWS_AS(compute_sra(A, {3, 3}), InvalidArgument);
  CHECK_THROWS_AS(compute_sra(A, {4, 6}), InvalidArgument);
  CHECK_THROWS_AS(compute_sra(AttentionTrace(1, 1, 0, 5), {0, 2}), InvalidArgument);
}

TEST_CASE("group mean of a single example is its log-SRA") {
  const std::vector<SraRecord> rs{rec("a", 0.02)};
  const auto g = corpus_sra(rs, SraGrouping::template_id);
  REQUIRE(g.size() == 1);
  CHECK(g[0].key == "c1_hf");
  CHECK(g[0].count == 1);
  CHECK(g[0].mean == std::log(0.02));
  CHECK(g[0].stddev == 0.0);
}

TEST_CASE("mean log-SRA of 0.1 and 0.01") {
  const std::vector<SraRecord> rs{rec("a", 0.1), rec("b", 0.01)};
  const auto g = corpus_sra(rs, SraGrouping::template_id);
  REQUIRE(g.size() == 1);
  CHECK(g[0].mean == doctest::Approx((std::log(0.1) + std::log(0.01)) / 2).epsilon(1e-15));
  CHECK(g[0].mean == doctest::Approx(-3.4539).epsilon(1e-4));
  // Sample standard deviation of two values is |a - b| / sqrt(2).
  CHECK(g[0].stddev == doctest::Approx(std::abs(std::log(0.1) - std::log(0.01)) / std::sqrt(2.0)));
}

TEST_CASE("constant grouping reproduces the global mean") {
  std::vector<SraRecord> rs;
  std::mt19937_64 rng(6);
  double total = 0.0;
  for (int i = 0; i < 40; ++i) {
    const double v = 0.001 + 0.5 * static_cast<double>(rng() % 1000) / 1000.0;
    rs.push_back(rec(std::to_string(i), v, i % 3 ? "c1_hf" : "standard", i % 2 ? "base" : "tuned", 5 + rng() % 19));
    total += std::log(v);
  }
  const auto g = corpus_sra(rs, SraGrouping::constant);
  REQUIRE(g.size() == 1);
  CHECK(g[0].count == 40);
  CHECK(g[0].mean == doctest::Approx(total / 40).epsilon(1e-13));
  // Count-weighted means of any partition agree with it.
  for (auto grouping : {SraGrouping::template_id, SraGrouping::model_tag, SraGrouping::turn_bin}) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& x : corpus_sra(rs, grouping)) {
      s += x.mean * static_cast<double>(x.count);
      n += x.count;
    }
    CHECK(n == 40);
    CHECK(s / 40 == doctest::Approx(total / 40).epsilon(1e-13));
  }
  CHECK_THROWS_AS(corpus_sra(std::vector<SraRecord>{}, SraGrouping::constant), InvalidArgument);
}

TEST_CASE("turn bins start at five and sort numerically") {
  CHECK(turn_bin(5, 2) == 5);
  CHECK(turn_bin(6, 2) == 5);
  CHECK(turn_bin(7, 2) == 7);
  CHECK(turn_bin(23, 4) == 21);
  const std::vector<SraRecord> rs{rec("a", 0.1, "x", "t", 11), rec("b", 0.1, "x", "t", 5), rec("c", 0.1, "x", "t", 9)};
  const auto g = corpus_sra(rs, SraGrouping::turn_bin, 2);
  REQUIRE(g.size() == 3);
  CHECK(g[0].key == "5");
  CHECK(g[1].key == "9");
  CHECK(g[2].key == "11");
}

TEST_CASE("SRA report records round-trip") {
  const auto path = std::filesystem::temp_directory_path() / "sra_report_roundtrip.jsonl";
  {
    std::ofstream out(path);
    out << serialize_sra_record(rec("x:5:affirmation", 0.0123)) << "\n";
  }
  const auto back = load_sra_records(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].example_id == "x:5:affirmation");
  CHECK(back[0].sra == 0.0123);
  CHECK(back[0].log_sra == std::log(0.0123));
  CHECK(back[0].span_begin == 2);
  CHECK(back[0].span_end == 5);
  const auto j = nlohmann::json::parse(serialize_sra_record(rec("y", 0.5)));
  for (const char* k : {"example_id", "sra", "log_sra", "M", "H", "R", "L", "S_b", "S_e"}) CHECK(j.contains(k));
  std::filesystem::remove(path);
}

TEST_CASE("grouping names parse") {
  CHECK(parse_sra_grouping("template") == SraGrouping::template_id);
  CHECK(parse_sra_grouping("turn-bin") == SraGrouping::turn_bin);
  CHECK(parse_sra_grouping("all") == SraGrouping::constant);
  CHECK_THROWS_AS(parse_sra_grouping("layer"), InvalidArgument);
}
