#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "sra/evaluation.hpp"
#include "support.hpp"

using namespace sra;

namespace {

AdherenceRecord ar(std::size_t turn, bool correct, double log_sra = -5.0, std::string tmpl = "c1_hf",
                   std::string tag = "base") {
  static int counter = 0;
  return make_adherence_record("e" + std::to_string(counter++), "affirmation", correct ? "affirmation" : "offer_hope",
                               turn, log_sra, std::move(tmpl), std::move(tag));
}

}  // namespace

TEST_CASE("adherence records derive correctness and round-trip") {
  const auto r = ar(6, false, -4.25, "standard", "tuned");
  CHECK_FALSE(r.correct);
  std::istringstream in(serialize_adherence(r) + "\n" + serialize_adherence(ar(7, true)) + "\n");
  const auto back = parse_adherence(in);
  REQUIRE(back.size() == 2);
  CHECK(back[0].example_id == r.example_id);
  CHECK(back[0].predicted == "offer_hope");
  CHECK(back[0].log_sra == -4.25);
  CHECK(back[0].template_id == "standard");
  CHECK(back[0].model_tag == "tuned");
  CHECK(back[1].correct);
  std::istringstream lie(R"({"example_id":"x","prompted":"a","predicted":"b","correct":true,"turn":5,"log_sra":-1})");
  CHECK_THROWS_AS(parse_adherence(lie), ParseError);
}

TEST_CASE("accuracy by turn") {
  SUBCASE("all correct") {
    std::vector<AdherenceRecord> rs;
    for (std::size_t t = 5; t < 20; ++t) rs.push_back(ar(t, true));
    for (const auto& b : accuracy_by_turn(rs)) CHECK(b.accuracy == 1.0);
  }
  SUBCASE("hand case") {
    const std::vector<AdherenceRecord> rs{ar(5, true), ar(5, false)};
    const auto bins = accuracy_by_turn(rs, 1);
    REQUIRE(bins.size() == 1);
    CHECK(bins[0].bin_start == 5);
    CHECK(bins[0].accuracy == 0.5);
    CHECK(bins[0].n == 2);
  }
  SUBCASE("partition identity and empty bins omitted") {
    std::mt19937_64 rng(1);
    std::vector<AdherenceRecord> rs;
    std::size_t correct = 0;
    for (int i = 0; i < 300; ++i) {
      const std::size_t turn = 5 + rng() % 30;
      if (turn >= 15 && turn < 19) continue;
      const bool c = rng() % 3 != 0;
      correct += c;
      rs.push_back(ar(turn, c));
    }
    const auto bins = accuracy_by_turn(rs, 2);
    double weighted = 0.0;
    std::size_t n = 0;
    for (const auto& b : bins) {
      CHECK((b.bin_start - 5) % 2 == 0);
      CHECK_FALSE((b.bin_start == 15 || b.bin_start == 17));
      weighted += b.accuracy * static_cast<double>(b.n);
      n += b.n;
    }
    CHECK(n == rs.size());
    CHECK(weighted / static_cast<double>(n) == doctest::Approx(static_cast<double>(correct) / static_cast<double>(rs.size())).epsilon(1e-12));
    CHECK(std::is_sorted(bins.begin(), bins.end(), [](const auto& a, const auto& b) { return a.bin_start < b.bin_start; }));
  }
  CHECK_THROWS_AS(accuracy_by_turn(std::vector<AdherenceRecord>{}), InvalidArgument);
}

TEST_CASE("pearson fixtures") {
  const std::vector<double> x{1, 2, 3, 4};
  std::vector<double> lin, neg;
  for (double v : x) lin.push_back(2 * v + 1), neg.push_back(-v);
  CHECK(pearson(x, lin) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(x, neg) == doctest::Approx(-1.0).epsilon(1e-15));
  const std::vector<double> y{1, 3, 2, 5};
  // Textbook formula: 5.5 / sqrt(5 * 8.75).
  CHECK(std::abs(pearson(x, y) - 5.5 / std::sqrt(43.75)) <= 1e-12);
  CHECK(std::abs(pearson(x, y) - 0.8315218406202999) <= 1e-9);
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 1, 1, 1}), InvalidArgument);
  CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{2}), InvalidArgument);
  CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), InvalidArgument);
}

TEST_CASE("pearson matches the oracle and is affine invariant") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> x(3 + rng() % 40), y;
    for (auto& v : x) v = n01(rng);
    for (double v : x) y.push_back(0.4 * v + n01(rng));
    const double r = pearson(x, y);
    CHECK(std::abs(r - fixtures::pearson_oracle(x, y)) <= 1e-12);
    const double a = 0.1 + std::abs(n01(rng)) * 5, b = n01(rng) * 10;
    std::vector<double> xt, yt;
    for (double v : x) xt.push_back(a * v + b);
    for (double v : y) yt.push_back(3.0 * v - 2.0);
    CHECK(std::abs(pearson(xt, y) - r) <= 1e-12);
    CHECK(std::abs(pearson(x, yt) - r) <= 1e-12);
  }
}

TEST_CASE("SRA-accuracy correlation over groups") {
  SUBCASE("two groups") {
    const std::vector<AdherenceRecord> rs{ar(5, true, -3.0, "a"), ar(5, false, -3.5, "a"), ar(6, false, -6.0, "b")};
    const auto c = correlate_sra_accuracy(rs);
    REQUIRE(c.points.size() == 2);
    CHECK(std::abs(c.r) == doctest::Approx(1.0));
    CHECK(c.points[0].key == "a");
    CHECK(c.points[0].mean_log_sra == -3.25);
    CHECK(c.points[0].accuracy == 0.5);
    CHECK(c.points[0].n == 2);
  }
  SUBCASE("accuracy affine in log-SRA") {
    // Group g has log-SRA -8 + g and accuracy (g + 1) / 5, exactly.
    std::vector<AdherenceRecord> rs;
    for (int g = 0; g < 4; ++g)
      for (int i = 0; i < 5; ++i) rs.push_back(ar(5, i <= g, -8.0 + g, "t" + std::to_string(g)));
    CHECK(correlate_sra_accuracy(rs).r == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("grouping by model and template") {
    const std::vector<AdherenceRecord> rs{ar(5, true, -3, "a", "m1"), ar(5, false, -5, "a", "m2"),
                                          ar(5, true, -2, "b", "m1")};
    const auto c = correlate_sra_accuracy(rs, AdherenceGrouping::template_and_model);
    CHECK(c.points.size() == 3);
    CHECK(correlate_sra_accuracy(rs, AdherenceGrouping::model_tag).points.size() == 2);
  }
  const std::vector<AdherenceRecord> one{ar(5, true, -3, "a"), ar(5, false, -4, "a")};
  CHECK_THROWS_AS(correlate_sra_accuracy(one), InvalidArgument);
  CHECK(parse_adherence_grouping("template+model") == AdherenceGrouping::template_and_model);
  CHECK_THROWS_AS(parse_adherence_grouping("turn"), InvalidArgument);
}

TEST_CASE("krippendorff alpha fixtures") {
  SUBCASE("perfect agreement") {
    const ScoreTable t{{1, 2, -3, 4}, {1, 2, -3, 4}, {1, std::nullopt, -3, 4}};
    CHECK(krippendorff_alpha_interval(t) == 1.0);
  }
  SUBCASE("hand-worked 2x4") {
    // Units (1,1) (2,3) (3,3) (3,4): D_o = 4/8, D_e = 128/56, alpha = 25/32.
    const ScoreTable t{{1, 2, 3, 3}, {1, 3, 3, 4}};
    CHECK(std::abs(krippendorff_alpha_interval(t) - 0.78125) <= 1e-12);
    CHECK(std::abs(krippendorff_alpha_interval(t) - fixtures::krippendorff_coincidence(t)) <= 1e-9);
  }
  SUBCASE("missing entries against the coincidence matrix") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      ScoreTable t(3, std::vector<std::optional<double>>(8));
      for (auto& row : t)
        for (auto& v : row)
          if (rng() % 4) v = static_cast<double>(static_cast<int>(rng() % 9) - 4);
      double got = 0.0;
      try {
        got = krippendorff_alpha_interval(t);
      } catch (const InvalidArgument&) {
        continue;
      }
      CHECK(got <= 1.0);
      CHECK(std::abs(got - fixtures::krippendorff_coincidence(t)) <= 1e-9);
    }
  }
  SUBCASE("independent scores give alpha near zero") {
    std::mt19937_64 rng(4);
    std::vector<double> a(4000);
    for (auto& v : a) v = static_cast<double>(static_cast<int>(rng() % 9) - 4);
    auto b = a;
    std::shuffle(b.begin(), b.end(), rng);
    ScoreTable t(2);
    for (std::size_t i = 0; i < a.size(); ++i) {
      t[0].push_back(a[i]);
      t[1].push_back(b[i]);
    }
    CHECK(std::abs(krippendorff_alpha_interval(t)) <= 0.05);
  }
  CHECK_THROWS_AS(krippendorff_alpha_interval({{1, std::nullopt}, {std::nullopt, 2}}), InvalidArgument);
  CHECK_THROWS_AS(krippendorff_alpha_interval({{2, 2}, {2, 2}}), InvalidArgument);
}

TEST_CASE("adjudication enumerated") {
  const Verdict all[] = {Verdict::a, Verdict::b, Verdict::tie};
  int win = 0, lose = 0, tie = 0;
  auto flip = [](Verdict v) { return v == Verdict::a ? Verdict::b : v == Verdict::b ? Verdict::a : Verdict::tie; };
  auto mirror = [](Outcome o) { return o == Outcome::win ? Outcome::lose : o == Outcome::lose ? Outcome::win : Outcome::tie; };
  for (auto x : all)
    for (auto y : all) {
      const auto o = adjudicate(x, y);
      win += o == Outcome::win;
      lose += o == Outcome::lose;
      tie += o == Outcome::tie;
      CHECK(adjudicate(flip(x), flip(y)) == mirror(o));
    }
  CHECK(win == 1);
  CHECK(lose == 1);
  CHECK(tie == 7);
  CHECK(adjudicate(Verdict::a, Verdict::a) == Outcome::win);
  CHECK(adjudicate(Verdict::a, Verdict::b) == Outcome::tie);
}

TEST_CASE("win tie lose percentages") {
  const std::vector<Outcome> ties(7, Outcome::tie);
  const auto t = win_tie_lose(ties);
  CHECK(t.win == 0.0);
  CHECK(t.tie == 100.0);
  CHECK(t.lose == 0.0);
  const std::vector<Outcome> f{Outcome::win, Outcome::win, Outcome::tie, Outcome::win, Outcome::win};
  const auto p = win_tie_lose(f);
  CHECK(p.win == 80.0);
  CHECK(p.tie == 20.0);
  CHECK(p.lose == 0.0);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Outcome> os(1 + rng() % 97);
    std::size_t counts[3] = {0, 0, 0};
    for (auto& o : os) {
      const auto k = rng() % 3;
      o = static_cast<Outcome>(k);
      ++counts[k];
    }
    const auto w = win_tie_lose(os);
    const double n = static_cast<double>(os.size());
    CHECK(std::llround(w.win * n / 100) == static_cast<long long>(counts[static_cast<int>(Outcome::win)]));
    CHECK(std::llround(w.tie * n / 100) == static_cast<long long>(counts[static_cast<int>(Outcome::tie)]));
    CHECK(std::llround(w.lose * n / 100) == static_cast<long long>(counts[static_cast<int>(Outcome::lose)]));
    CHECK(std::abs(w.win + w.tie + w.lose - 100.0) <= 0.01);
  }
  CHECK_THROWS_AS(win_tie_lose(std::vector<Outcome>{}), InvalidArgument);
}

TEST_CASE("annotation CSV parsing") {
  std::istringstream in("pair_id,annotator_id,score,sra_a,sra_b\np1,ann1,3,-6.5,-5.0\np1,ann2,4,-6.5,-5.0\np2,ann1,-2,,\n");
  const auto items = parse_annotations(in, "ann.csv");
  REQUIRE(items.size() == 3);
  CHECK(items[0].score == 3);
  CHECK(items[0].sra_a == -6.5);
  CHECK_FALSE(items[2].sra_a.has_value());
  const auto table = annotation_table(items);
  REQUIRE(table.size() == 2);
  CHECK(table[0] == std::vector<std::optional<double>>{3.0, -2.0});
  CHECK(table[1] == std::vector<std::optional<double>>{4.0, std::nullopt});

  auto line_of = [](const std::string& csv) {
    std::istringstream s(csv);
    try {
      parse_annotations(s, "x.csv");
    } catch (const ParseError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  CHECK(line_of("pair_id,annotator_id,score\np,a,5\n") == 2);
  CHECK(line_of("pair_id,annotator_id,score\np,a,-4\np,b,x\n") == 3);
  CHECK(line_of("pair,annotator,score\n") == 1);
  CHECK(line_of("pair_id,annotator_id,score\np,a\n") == 2);
  CHECK(line_of("pair_id,annotator_id,score\np,a,0\n") == 0);
}

TEST_CASE("human scores correlate with the log-SRA difference") {
  std::vector<AnnotationItem> items;
  const double diffs[] = {-2.0, -0.5, 0.5, 1.0, 3.0};
  for (int i = 0; i < 5; ++i) {
    const std::string pid = "p" + std::to_string(i);
    items.push_back({pid, "ann1", static_cast<int>(i) - 2, -6.0, -6.0 + diffs[i]});
    items.push_back({pid, "ann2", 2 - static_cast<int>(i), -6.0, -6.0 + diffs[i]});
  }
  const auto r = human_sra_correlation(items);
  const std::vector<double> scores{-2, -1, 0, 1, 2};
  const std::vector<double> d(std::begin(diffs), std::end(diffs));
  CHECK(r.at("ann1") == doctest::Approx(fixtures::pearson_oracle(scores, d)).epsilon(1e-12));
  CHECK(r.at("ann2") == doctest::Approx(-r.at("ann1")).epsilon(1e-12));
  items.push_back({"p9", "ann1", 1, std::nullopt, std::nullopt});
  CHECK_THROWS_AS(human_sra_correlation(items), InvalidArgument);
}

TEST_CASE("min-max normalization") {
  CHECK(min_max_normalize(std::vector<double>{2, 4, 3}) == std::vector<double>{0.0, 1.0, 0.5});
  CHECK(min_max_normalize(std::vector<double>{7, 7}) == std::vector<double>{0.0, 0.0});
  CHECK(min_max_normalize(std::vector<double>{}).empty());
}
