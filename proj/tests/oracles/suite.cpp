#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

#include "obsmatch/matching.hpp"
#include "obsmatch/propensity.hpp"
#include "obsmatch/sensitivity.hpp"
#include "oracles.hpp"

namespace obsmatch::oracle {

SetInstance random_sets(std::mt19937_64& rng, std::size_t num_sets, std::size_t min_size, std::size_t max_size,
                        bool binary) {
  SetInstance inst;
  std::uniform_int_distribution<std::size_t> size(min_size, max_size);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < num_sets; ++i) {
    const std::size_t n = size(rng);
    inst.sizes.push_back(n);
    inst.treated.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
    for (std::size_t j = 0; j < n; ++j) inst.values.push_back(binary ? (coin(rng) ? 1.0 : 0.0) : normal(rng));
  }
  return inst;
}

StratifiedSample to_sample(const SetInstance& inst) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(inst.values.size()));
  Eigen::VectorXi z = Eigen::VectorXi::Zero(y.size());
  std::size_t start = 0;
  for (std::size_t i = 0; i < inst.sizes.size(); ++i) {
    z[static_cast<Eigen::Index>(start + inst.treated[i])] = 1;
    start += inst.sizes[i];
  }
  for (std::size_t k = 0; k < inst.values.size(); ++k) y[static_cast<Eigen::Index>(k)] = inst.values[k];
  return make_sample(inst.sizes, y, z);
}

std::vector<int> as_events(const SetInstance& inst) {
  std::vector<int> y;
  for (double v : inst.values) y.push_back(static_cast<int>(v));
  return y;
}

namespace {

struct Reporter {
  std::ostream& out;
  bool all = true;
  void check(bool ok, const std::string& name, const std::string& detail) {
    all = all && ok;
    out << (ok ? "PASS " : "FAIL ") << name << ": " << detail << "\n";
  }
};

}  // namespace

bool run_suite(std::ostream& out, std::uint64_t seed) {
  Reporter rep{out};
  std::mt19937_64 rng(seed);

  {
    int agree = 0, total = 0;
    std::uniform_int_distribution<int> nt(1, 4), kd(1, 4), cd(0, 999);
    for (int inst = 0; inst < 100; ++inst) {
      const auto n_t = static_cast<std::size_t>(nt(rng));
      const auto n_c = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, static_cast<int>(8 - n_t))(rng));
      const int k = kd(rng);
      Eigen::MatrixXd D(static_cast<Eigen::Index>(n_t), static_cast<Eigen::Index>(n_c));
      std::vector<std::int64_t> cost;
      for (std::size_t i = 0; i < n_t; ++i)
        for (std::size_t j = 0; j < n_c; ++j) {
          D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cd(rng) / 100.0;
          cost.push_back(scaled_cost(D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
        }
      const auto m = match_bucket(n_t, n_c, k, D);
      ++total;
      if (m.scaled_cost == bucket_min_cost(n_t, n_c, k, cost)) ++agree;
    }
    rep.check(agree == total, "bucket assignment", fmt::format("{}/{} instances at the enumerated minimum", agree, total));
  }

  {
    int bad = 0;
    for (int k = 1; k <= 16; ++k) {
      const double edge = 1.0 / (k + 1);
      for (double e : {edge - 1e-12, edge, edge + 1e-12})
        if (e >= 0 && e <= 1 && propensity_interval(e) != interval_by_definition(e)) ++bad;
    }
    rep.check(bad == 0, "interval endpoints", fmt::format("{} disagreements", bad));
  }

  {
    int agree = 0;
    for (int inst = 0; inst < 50; ++inst) {
      const auto sets = random_sets(rng, 1 + inst % 6, 2, 5);
      const auto sample = to_sample(sets);
      TestOptions opt;
      opt.mode = TestMode::exact;
      const auto r = permutational_t_test(sample.y, sample, opt);
      const auto o = permutation_tails(sets.values, sets.sizes, sets.treated);
      if (std::abs(r.p_greater - o.greater) < 1e-12 && std::abs(r.p_less - o.less) < 1e-12) ++agree;
    }
    rep.check(agree == 50, "exact permutation", fmt::format("{}/50 instances match enumeration", agree));
  }

  {
    double worst = 0.0;
    bool dominated_mean = true;
    for (int inst = 0; inst < 20; ++inst) {
      auto sets = random_sets(rng, 2 + inst % 4, 2, 3);
      for (std::size_t i = 0, s = 0; i < sets.sizes.size(); s += sets.sizes[i], ++i) sets.values[s + sets.treated[i]] += 1.0;
      const auto sample = to_sample(sets);
      for (double gamma : {1.0, 1.5, 2.0}) {
        const auto sep = sensitivity_residual(sample.y, sample, gamma);
        std::vector<double> eps = sets.values;
        if (!sep.positive_direction)
          for (auto& v : eps) v = -v;
        const auto grid = sensitivity_grid(eps, sets.sizes, sets.treated, gamma);
        worst = std::max(worst, std::abs(sep.p_upper - grid.p_max));
        if (sep.expectation < grid.max_mean - 1e-9) dominated_mean = false;
      }
    }
    rep.check(worst <= 0.01 && dominated_mean, "sensitivity grid",
              fmt::format("max |separable - grid max| = {:.2e}", worst));
  }

  {
    int agree = 0;
    for (int inst = 0; inst < 20; ++inst) {
      const auto sets = random_sets(rng, 3 + inst % 5, 2, 4, true);
      const auto sample = to_sample(sets);
      const auto mh = mantel_haenszel(sample, TestMode::exact, Alternative::greater);
      const auto o = event_count_tails(as_events(sets), sets.sizes, sets.treated);
      if (std::abs(mh.p_greater - o.greater) < 1e-10 && std::abs(mh.p_less - o.less) < 1e-10) ++agree;
    }
    rep.check(agree == 20, "exact Mantel-Haenszel", fmt::format("{}/20 instances match enumeration", agree));
  }

  {
    int agree = 0;
    for (int inst = 0; inst < 20; ++inst) {
      const auto sets = random_sets(rng, 20, 2, 2, true);
      const auto sample = to_sample(sets);
      std::vector<int> yt, yc;
      for (std::size_t i = 0; i < 20; ++i) {
        yt.push_back(static_cast<int>(sets.values[2 * i + sets.treated[i]]));
        yc.push_back(static_cast<int>(sets.values[2 * i + 1 - sets.treated[i]]));
      }
      if (std::abs(conditional_logistic(sample).p_value - mcnemar_p(yt, yc)) < 1e-10) ++agree;
    }
    rep.check(agree == 20, "conditional logistic on pairs", fmt::format("{}/20 instances match McNemar", agree));
  }

  {
    std::normal_distribution<double> normal;
    const Eigen::Index n = 300;
    Eigen::MatrixXd X(n, 3);
    Eigen::VectorXi z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < 3; ++j) X(i, j) = normal(rng);
      const double eta = -0.3 + 0.8 * X(i, 0) - 0.5 * X(i, 1);
      z[i] = std::bernoulli_distribution(1.0 / (1.0 + std::exp(-eta)))(rng) ? 1 : 0;
    }
    const auto fit = fit_mle(X, z);
    const double diff = (fit.beta - logistic_newton(X, z)).cwiseAbs().maxCoeff();
    rep.check(diff < 1e-6, "logistic maximum likelihood", fmt::format("max coefficient difference {:.2e}", diff));
  }

  return rep.all;
}

}  // namespace obsmatch::oracle
