#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "obsmatch/common.hpp"
#include "obsmatch/sensitivity.hpp"
#include "oracles.hpp"

using namespace obsmatch;

namespace {

StratifiedSample sample_of(const std::vector<std::size_t>& sizes, const std::vector<double>& y,
                           const std::vector<int>& z) {
  return make_sample(sizes, Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())),
                     Eigen::Map<const Eigen::VectorXi>(z.data(), static_cast<Eigen::Index>(z.size())));
}

// Random sets whose treated unit gets a boost, so the statistic is positive.
oracle::SetInstance shifted_sets(Rng& rng, std::size_t num_sets, std::size_t lo, std::size_t hi, double shift) {
  auto sets = oracle::random_sets(rng, num_sets, lo, hi);
  for (std::size_t i = 0, s = 0; i < sets.sizes.size(); s += sets.sizes[i], ++i) sets.values[s + sets.treated[i]] += shift;
  return sets;
}

}  // namespace

TEST_CASE("single pair worst-case mean") {
  const auto s = sample_of({2}, {1, -1}, {1, 0});
  for (double g : {1.0, 2.0, 3.5}) {
    const auto r = sensitivity_residual(s.y, s, g);
    CHECK(r.expectation == doctest::Approx((g - 1) / (g + 1)).epsilon(1e-12));
  }
  CHECK(sensitivity_residual(s.y, s, 2.0).expectation == doctest::Approx(1.0 / 3.0));
  const auto [mu, nu] = separable_moments({1.0, -1.0}, 2.0);
  CHECK(mu == doctest::Approx(1.0 / 3.0));
  CHECK(nu == doctest::Approx(1.0 - 1.0 / 9.0));
}

TEST_CASE("separable moments pick the best cut") {
  // values 3, 0, 0, -1 at gamma 2: cut a = 1 gives (6 + 0 + 0 - 1) / 5 = 1,
  // a = 2 gives (6 + 0 + 0 - 1) / 6, a = 3 gives (6 - 1) / 7.
  const auto [mu, nu] = separable_moments({0.0, 3.0, -1.0, 0.0}, 2.0);
  CHECK(mu == doctest::Approx(1.0));
  const double second = (2.0 * 9.0 + 1.0) / 5.0;
  CHECK(nu == doctest::Approx(second - 1.0));
  Rng rng(1);
  std::normal_distribution<double> normal;
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> v(2 + rep % 3);
    for (auto& x : v) x = normal(rng);
    for (double g : {1.0, 1.3, 2.0, 4.0}) {
      const auto m = separable_moments(v, g);
      CHECK(m.first >= oracle::max_set_mean(v, g) - 1e-12);
    }
  }
}

TEST_CASE("gamma one reduces to the normal randomization test") {
  Rng rng(2);
  for (int inst = 0; inst < 20; ++inst) {
    const auto sets = shifted_sets(rng, 8, 2, 4, inst % 2 ? 0.7 : -0.7);
    const auto s = oracle::to_sample(sets);
    const auto r = sensitivity_residual(s.y, s, 1.0);
    TestOptions o;
    o.mode = TestMode::normal;
    const auto t = permutational_t_test(s.y, s, o);
    const double expected = r.positive_direction ? t.p_greater : t.p_less;
    // The randomization test's normal mode has no continuity correction.
    CHECK(std::abs(r.p_upper - expected) < 1e-12);
    CHECK(r.p_two_sided == doctest::Approx(std::min(1.0, 2.0 * r.p_upper)));
  }
}

TEST_CASE("separable bound dominates the grid oracle and stays within 0.01 of it") {
  Rng rng(3);
  for (int inst = 0; inst < 40; ++inst) {
    const auto sets = shifted_sets(rng, 2 + inst % 4, 2, 3, 1.0);
    const auto s = oracle::to_sample(sets);
    for (double g : {1.25, 1.5, 2.0}) {
      const auto r = sensitivity_residual(s.y, s, g);
      std::vector<double> eps = sets.values;
      if (!r.positive_direction)
        for (auto& v : eps) v = -v;
      const auto grid = oracle::sensitivity_grid(eps, sets.sizes, sets.treated, g);
      CHECK(r.p_upper >= grid.p_max - 1e-12);
      CHECK(std::abs(r.p_upper - grid.p_max) <= 0.01);
    }
  }
}

TEST_CASE("separable worst-case mean dominates every grid distribution") {
  Rng rng(4);
  for (int inst = 0; inst < 40; ++inst) {
    const auto sets = shifted_sets(rng, 2 + inst % 4, 2, 3, 1.0);
    const auto s = oracle::to_sample(sets);
    for (double g : {1.25, 1.5, 2.0}) {
      const auto r = sensitivity_residual(s.y, s, g);
      std::vector<double> eps = sets.values;
      if (!r.positive_direction)
        for (auto& v : eps) v = -v;
      CHECK(r.expectation >= oracle::sensitivity_grid(eps, sets.sizes, sets.treated, g).max_mean - 1e-9);
    }
  }
}

TEST_CASE("residual bound is monotone in gamma and scale invariant") {
  Rng rng(5);
  for (int inst = 0; inst < 10; ++inst) {
    const auto sets = shifted_sets(rng, 30, 2, 5, 0.8);
    const auto s = oracle::to_sample(sets);
    double previous = 0.0;
    for (double g : default_gamma_grid()) {
      const auto r = sensitivity_residual(s.y, s, g);
      CHECK(r.p_upper >= previous - 1e-15);
      previous = r.p_upper;
      const Eigen::VectorXd scaled = 7.5 * s.y;
      const auto rs = sensitivity_residual(scaled, s, g);
      CHECK(rs.deviate == doctest::Approx(r.deviate).epsilon(1e-10));
      CHECK(rs.p_upper == doctest::Approx(r.p_upper).epsilon(1e-10));
    }
  }
}

TEST_CASE("all-equal residuals give p = 1") {
  const auto s = sample_of({2, 3}, {2, 2, 5, 5, 5}, {1, 0, 0, 1, 0});
  const auto r = sensitivity_residual(s.y, s, 2.0);
  CHECK(r.p_upper == 1.0);
  CHECK(r.p_two_sided == 1.0);
}

TEST_CASE("Mantel-Haenszel sensitivity") {
  SUBCASE("gamma one equals the exact Mantel-Haenszel test") {
    Rng rng(6);
    for (int inst = 0; inst < 10; ++inst) {
      const auto sets = oracle::random_sets(rng, 12, 2, 4, true);
      const auto s = oracle::to_sample(sets);
      MhSensitivityOptions opt;
      opt.mode = TestMode::exact;
      const auto r = sensitivity_mh(s, 1.0, opt);
      const auto mh = mantel_haenszel(s, TestMode::exact);
      const double expected = r.positive_direction ? mh.p_greater : mh.p_less;
      CHECK(std::abs(r.p_upper - expected) < 1e-10);
    }
  }
  SUBCASE("single discordant pair") {
    const auto s = sample_of({2}, {1, 0}, {1, 0});
    MhSensitivityOptions opt;
    opt.mode = TestMode::exact;
    for (double g : {1.0, 2.0, 3.0}) {
      const auto r = sensitivity_mh(s, g, opt);
      CHECK(r.expectation == doctest::Approx(g / (1 + g)));
      CHECK(r.p_upper == doctest::Approx(g / (1 + g)));
    }
  }
  SUBCASE("convolution agrees with simulation of the worst-case model") {
    // Ten sets: (size, events, treated has event).
    struct Set {
      std::size_t n;
      int m;
      int yt;
    };
    const std::vector<Set> design{{2, 1, 1}, {3, 1, 1}, {3, 2, 1}, {4, 1, 0}, {2, 1, 1},
                                  {4, 2, 1}, {3, 1, 0}, {2, 1, 1}, {4, 3, 1}, {3, 2, 1}};
    std::vector<std::size_t> sizes;
    std::vector<double> y;
    std::vector<int> z;
    int observed = 0;
    for (const auto& d : design) {
      sizes.push_back(d.n);
      // treated first, then the control events
      for (std::size_t j = 0; j < d.n; ++j) {
        z.push_back(j == 0 ? 1 : 0);
        y.push_back(j == 0 ? d.yt : (static_cast<int>(j) <= d.m - d.yt ? 1 : 0));
      }
      observed += d.yt;
    }
    const auto s = sample_of(sizes, y, z);
    const double g = 1.5;
    MhSensitivityOptions opt;
    opt.mode = TestMode::exact;
    const auto r = sensitivity_mh(s, g, opt);

    Rng rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int draws = 1000000;
    int hits = 0;
    for (int k = 0; k < draws; ++k) {
      int total = 0;
      for (const auto& d : design) total += u(rng) < d.m * g / (d.m * g + static_cast<double>(d.n) - d.m) ? 1 : 0;
      hits += total >= observed ? 1 : 0;
    }
    const double p_sim = hits / static_cast<double>(draws);
    CHECK(std::abs(r.p_upper - p_sim) < 3 * std::sqrt(p_sim * (1 - p_sim) / draws));
  }
  SUBCASE("bound is monotone in gamma in both modes") {
    Rng rng(8);
    const auto sets = oracle::random_sets(rng, 60, 2, 4, true);
    auto s = oracle::to_sample(sets);
    for (Eigen::Index r = 0; r < s.y.size(); ++r)
      if (s.z[r] == 1) s.y[r] = 1.0;
    for (auto mode : {TestMode::exact, TestMode::normal}) {
      MhSensitivityOptions opt;
      opt.mode = mode;
      double previous = 0.0;
      for (double g : default_gamma_grid()) {
        const auto r = sensitivity_mh(s, g, opt);
        CHECK(r.p_upper >= previous - 1e-15);
        previous = r.p_upper;
      }
    }
  }
}

TEST_CASE("gamma threshold") {
  SUBCASE("monotone curve crossing at 1.37") {
    const auto c = gamma_threshold([](double g) { return 0.05 * std::exp(4.0 * (g - 1.37)); });
    REQUIRE(c.threshold);
    CHECK(*c.threshold == doctest::Approx(1.40));
    CHECK_FALSE(c.insignificant_at_one);
    CHECK(format_gamma_threshold(c).find("1.40") != std::string::npos);
  }
  SUBCASE("curve crossing exactly on a grid point") {
    const auto c = gamma_threshold([](double g) { return g >= 1.4 - 1e-9 ? 0.06 : 0.01; });
    CHECK(*c.threshold == doctest::Approx(1.40));
  }
  SUBCASE("insignificant without hidden bias") {
    const auto c = gamma_threshold([](double) { return 0.2; });
    CHECK(*c.threshold == 1.0);
    CHECK(c.insignificant_at_one);
  }
  SUBCASE("never crossing") {
    const auto c = gamma_threshold([](double) { return 0.001; });
    CHECK(c.beyond_grid());
    CHECK(c.points.size() == 41);
    CHECK(format_gamma_threshold(c).find("beyond") != std::string::npos);
  }
  SUBCASE("thread count does not matter") {
    auto f = [](double g) { return 0.001 * g * g * g; };
    const auto a = gamma_threshold(f, 0.01);
    const auto b = gamma_threshold(f, 0.01, default_gamma_grid(), 4);
    CHECK(*a.threshold == *b.threshold);
    for (std::size_t i = 0; i < a.points.size(); ++i) CHECK(a.points[i].p == b.points[i].p);
  }
  const auto grid = default_gamma_grid();
  CHECK(grid.front() == 1.0);
  CHECK(grid.back() == doctest::Approx(3.0));
  CHECK(std::is_sorted(grid.begin(), grid.end()));
}
