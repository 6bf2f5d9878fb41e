#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "obsmatch/common.hpp"
#include "obsmatch/multiplicity.hpp"
#include "oracles.hpp"

using namespace obsmatch;

namespace {

ConfidenceRegion hull(double lo, double hi) {
  ConfidenceRegion r;
  r.grid = {lo, hi};
  r.p_values = {0.5, 0.5};
  r.accepted = {true, true};
  r.lower = lo;
  r.upper = hi;
  return r;
}

}  // namespace

TEST_CASE("Benjamini-Hochberg examples") {
  CHECK(benjamini_hochberg({0.01, 0.02, 0.2}) == std::vector<double>{0.03, 0.03, 0.2});
  CHECK(benjamini_hochberg({1.0, 1.0, 1.0}) == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(benjamini_hochberg({0.037}) == std::vector<double>{0.037});
  // input order is preserved
  const auto b = benjamini_hochberg({0.2, 0.01, 0.02});
  CHECK(b[0] == doctest::Approx(0.2));
  CHECK(b[1] == doctest::Approx(0.03));
  CHECK(benjamini_hochberg({}).empty());
}

TEST_CASE("Benjamini-Hochberg properties") {
  Rng rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> p(1 + rep % 12);
    for (auto& v : p) v = rep % 3 ? u(rng) : u(rng) * 0.05;
    const auto adj = benjamini_hochberg(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(adj[i] >= p[i]);
      CHECK(adj[i] <= 1.0);
      for (std::size_t j = 0; j < p.size(); ++j)
        if (p[i] <= p[j]) CHECK(adj[i] <= adj[j]);
    }
    // brute form: min over k >= rank of p_(k) m / k
    std::vector<double> sorted = p;
    std::sort(sorted.begin(), sorted.end());
    const double m = static_cast<double>(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto rank = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), p[i]) - sorted.begin());
      double best = 1.0;
      for (std::size_t k = rank; k < sorted.size(); ++k) best = std::min(best, sorted[k] * m / static_cast<double>(k + 1));
      CHECK(adj[i] == doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("equivalence by interval inclusion") {
  CHECK(equivalence_test(hull(-0.05, 0.08), 0.2).decision == Equivalence::equivalent);
  CHECK(equivalence_test(hull(-0.3, 0.1), 0.2).decision == Equivalence::not_shown);
  CHECK(equivalence_test(hull(-0.05, 0.08), 0.0).decision == Equivalence::not_shown);
  CHECK(equivalence_test(hull(-0.2, 0.1), 0.2).decision == Equivalence::not_shown);
  ConfidenceRegion empty;
  empty.grid = {0.0};
  empty.p_values = {0.001};
  empty.accepted = {false};
  const auto e = equivalence_test(empty, 0.2);
  CHECK(e.decision == Equivalence::not_shown);
  CHECK(e.empty_region);
}

TEST_CASE("ordered procedure stopping rule") {
  SUBCASE("stage 1 failure stops everything") {
    const auto d = ordered_procedure(0.2, std::nullopt, std::nullopt, std::nullopt);
    REQUIRE(d.size() == 4);
    CHECK(d[0].decision == Decision::fail_to_reject);
    for (int c = 1; c < 4; ++c) CHECK(d[static_cast<std::size_t>(c)].decision == Decision::untested);
  }
  SUBCASE("all stages run") {
    const auto d = ordered_procedure(0.01, 0.03, 0.04, equivalence_test(hull(-0.05, 0.08), 0.2));
    CHECK(d[0].decision == Decision::reject);
    CHECK(d[1].decision == Decision::reject);
    CHECK(d[2].decision == Decision::reject);
    CHECK(d[3].stage == 3);
    CHECK(d[3].decision != Decision::untested);
    const auto text = format_decisions(d);
    CHECK(text.find("Comparison 4") != std::string::npos);
  }
  SUBCASE("one stage-2 rejection reports both and stops") {
    const auto d = ordered_procedure(0.01, 0.03, 0.3, std::nullopt);
    CHECK(d[1].decision == Decision::reject);
    CHECK(d[2].decision == Decision::fail_to_reject);
    CHECK(d[3].decision == Decision::untested);
  }
  SUBCASE("p equal to alpha rejects") {
    OrderedProcedure proc;
    proc.stage1(0.05);
    CHECK(proc.decisions()[0].decision == Decision::reject);
    CHECK(proc.next_stage() == 2);
  }
}

TEST_CASE("ordered procedure protocol errors") {
  OrderedProcedure proc;
  CHECK_THROWS_AS(proc.stage2(0.01, 0.01), ProtocolError);
  proc.stage1(0.5);
  CHECK(proc.stopped());
  CHECK_THROWS_AS(proc.stage2(0.01, 0.01), ProtocolError);
  CHECK_THROWS_AS(proc.stage1(0.01), ProtocolError);

  OrderedProcedure p2;
  p2.stage1(0.01);
  CHECK(p2.next_stage() == 2);
  CHECK_THROWS_AS(p2.stage3(equivalence_test(hull(0, 0.1), 0.2)), ProtocolError);
  p2.stage2(0.01, 0.02);
  CHECK(p2.next_stage() == 3);
  p2.stage3(equivalence_test(hull(0, 0.1), 0.2));
  CHECK(p2.stopped());

  CHECK_THROWS_AS(ordered_procedure(0.2, 0.01, 0.01, std::nullopt), ProtocolError);
  CHECK_THROWS_AS(ordered_procedure(0.01, std::nullopt, std::nullopt, std::nullopt), ProtocolError);
  CHECK_THROWS_AS(ordered_procedure(0.01, 0.01, 0.01, std::nullopt), ProtocolError);
}

TEST_CASE("no stage decision without a rejection before it") {
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 0.12);
  for (int rep = 0; rep < 500; ++rep) {
    const double p1 = u(rng), p2 = u(rng), p3 = u(rng);
    std::optional<double> o2, o3;
    std::optional<EquivalenceResult> eq;
    if (p1 <= 0.05) {
      o2 = p2;
      o3 = p3;
      if (p2 <= 0.05 && p3 <= 0.05) eq = equivalence_test(hull(-0.1, 0.1), 0.2);
    }
    const auto d = ordered_procedure(p1, o2, o3, eq);
    for (int c = 1; c < 4; ++c) {
      if (d[static_cast<std::size_t>(c)].decision == Decision::untested) continue;
      CHECK(d[0].decision == Decision::reject);
      if (c == 3) {
        CHECK(d[1].decision == Decision::reject);
        CHECK(d[2].decision == Decision::reject);
      }
    }
  }
}

TEST_CASE("family-wise error under the global null") {
  // Comparisons 1 to 3 per replication, each a normal-mode randomization
  // test on independent null matched sets.
  Rng rng(3);
  const int reps = 10000;
  int any = 0;
  TestOptions opt;
  opt.mode = TestMode::normal;
  for (int rep = 0; rep < reps; ++rep) {
    double p[3];
    for (double& v : p) {
      const auto s = oracle::to_sample(oracle::random_sets(rng, 20, 2, 3));
      v = permutational_t_test(s.y, s, opt).p_two_sided;
    }
    std::optional<double> o2, o3;
    if (p[0] <= 0.05) {
      o2 = p[1];
      o3 = p[2];
    }
    std::optional<EquivalenceResult> eq;
    if (o2 && *o2 <= 0.05 && *o3 <= 0.05) eq = equivalence_test(hull(-0.1, 0.1), 0.2);
    const auto d = ordered_procedure(p[0], o2, o3, eq);
    bool false_rejection = false;
    for (int c = 0; c < 3; ++c) false_rejection = false_rejection || d[static_cast<std::size_t>(c)].decision == Decision::reject;
    any += false_rejection ? 1 : 0;
  }
  const double rate = any / static_cast<double>(reps);
  CHECK(rate <= 0.05 + 2 * std::sqrt(0.05 * 0.95 / reps));
}

TEST_CASE("secondary outcomes adjust only when something is significant") {
  auto outcome = [](const std::string& name, double p) {
    SecondaryOutcome o;
    o.name = name;
    o.p_raw = p;
    return o;
  };
  std::vector<SecondaryOutcome> none{outcome("a", 0.2), outcome("b", 0.5)};
  adjust_secondary(none);
  CHECK_FALSE(none[0].p_bh);
  CHECK_FALSE(none[1].p_bh);

  std::vector<SecondaryOutcome> some{outcome("a", 0.01), outcome("b", 0.02), outcome("c", 0.2)};
  adjust_secondary(some);
  CHECK(some[0].p_raw == 0.01);
  CHECK(*some[0].p_bh == doctest::Approx(0.03));
  CHECK(*some[1].p_bh == doctest::Approx(0.03));
  CHECK(*some[2].p_bh == doctest::Approx(0.2));
}
