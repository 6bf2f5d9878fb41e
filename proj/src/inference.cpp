#include "obsmatch/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>

#include <fmt/format.h>

#include "obsmatch/common.hpp"
#include "obsmatch/parallel.hpp"

namespace obsmatch {

double StratifiedSample::assignment_count(double cap) const {
  double prod = 1.0;
  for (std::size_t i = 0; i < num_sets(); ++i) {
    prod *= static_cast<double>(set_size(i));
    if (prod > cap) return cap + 1;
  }
  return prod;
}

void StratifiedSample::validate() const {
  if (offsets.empty() || offsets.front() != 0) throw ValidationError("sample offsets must start at 0");
  const auto n = static_cast<std::size_t>(y.size());
  if (offsets.back() != n || static_cast<std::size_t>(z.size()) != n)
    throw ValidationError("sample offsets do not cover the responses");
  if (X.size() > 0 && static_cast<std::size_t>(X.rows()) != n)
    throw ValidationError("sample covariates have the wrong number of rows");
  for (std::size_t i = 0; i < num_sets(); ++i) {
    if (offsets[i + 1] <= offsets[i] + 1) throw ValidationError(fmt::format("matched set {} has fewer than two members", i));
    int treated = 0;
    for (std::size_t r = offsets[i]; r < offsets[i + 1]; ++r) treated += z[static_cast<Eigen::Index>(r)];
    if (treated != 1) throw ValidationError(fmt::format("matched set {} must contain exactly one treated unit", i));
  }
}

GatherResult gather_sets(const SubjectTable& table, const MatchResult& result, const std::string& outcome,
                         const std::vector<std::string>& covariates) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < table.size(); ++r) row_of.emplace(table.ids[r], r);
  const Column& y = table.outcome(outcome);
  std::vector<const Column*> cols;
  if (covariates.empty()) {
    for (const auto& c : table.covariates) cols.push_back(&c);
  } else {
    for (const auto& name : covariates) cols.push_back(&table.covariate(name));
  }

  GatherResult out;
  std::vector<std::size_t> rows;
  for (const auto& s : result.sets) {
    std::vector<std::size_t> members{row_of.at(s.treated)};
    for (const auto& c : s.controls) members.push_back(row_of.at(c));
    const bool any_missing = std::any_of(members.begin(), members.end(), [&](std::size_t r) { return y.missing[r] != 0; });
    if (any_missing) {
      out.excluded_sets.push_back(s.treated);
      continue;
    }
    rows.insert(rows.end(), members.begin(), members.end());
    out.sample.offsets.push_back(rows.size());
  }

  const auto n = static_cast<Eigen::Index>(rows.size());
  auto& smp = out.sample;
  smp.y.resize(n);
  smp.z.resize(n);
  smp.X.resize(n, static_cast<Eigen::Index>(cols.size()));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = rows[static_cast<std::size_t>(i)];
    smp.y[i] = y.values[r];
    smp.z[i] = table.z[r];
    smp.ids.push_back(table.ids[r]);
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (cols[j]->missing[r]) throw ValidationError(fmt::format("covariate '{}' has missing values; impute first", cols[j]->name));
      smp.X(i, static_cast<Eigen::Index>(j)) = cols[j]->values[r];
    }
  }
  return out;
}

StratifiedSample make_sample(const std::vector<std::size_t>& set_sizes, const Eigen::VectorXd& y,
                             const Eigen::VectorXi& z, const Eigen::MatrixXd& X) {
  StratifiedSample s;
  for (auto size : set_sizes) s.offsets.push_back(s.offsets.back() + size);
  s.y = y;
  s.z = z;
  s.X = X.size() > 0 ? X : Eigen::MatrixXd(y.size(), 0);
  s.validate();
  return s;
}

Aligned align_responses(const StratifiedSample& sample, double tau0) {
  Aligned a;
  const Eigen::Index n = sample.y.size();
  a.r = sample.y - tau0 * sample.z.cast<double>();
  a.X = sample.X.size() > 0 ? sample.X : Eigen::MatrixXd(n, 0);
  for (std::size_t i = 0; i < sample.num_sets(); ++i) {
    const auto b = static_cast<Eigen::Index>(sample.offsets[i]);
    const auto len = static_cast<Eigen::Index>(sample.set_size(i));
    a.r.segment(b, len).array() -= a.r.segment(b, len).mean();
    if (a.X.cols() > 0) {
      const Eigen::RowVectorXd mean = a.X.middleRows(b, len).colwise().mean();
      a.X.middleRows(b, len).rowwise() -= mean;
    }
  }
  return a;
}

std::string to_string(Adjustment a) {
  switch (a) {
    case Adjustment::none: return "none";
    case Adjustment::ols: return "ols";
    case Adjustment::bart: return "bart";
  }
  return "none";
}

Adjustment adjustment_from_string(const std::string& s) {
  if (s == "none") return Adjustment::none;
  if (s == "ols") return Adjustment::ols;
  if (s == "bart") return Adjustment::bart;
  throw ValidationError(fmt::format("unknown adjustment '{}' (expected none, ols or bart)", s));
}

Residuals covariance_adjust(const Aligned& aligned, Adjustment method, const AdjustOptions& options) {
  Residuals out;
  if (aligned.X.size() > 0 && aligned.X.rows() != aligned.r.size())
    throw ValidationError("covariance_adjust: covariate rows do not match responses");
  if (method == Adjustment::none || aligned.X.cols() == 0) {
    out.eps = aligned.r;
    return out;
  }
  if (method == Adjustment::ols) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(aligned.X);
    const Eigen::VectorXd beta = cod.solve(aligned.r);
    out.rank_deficient = cod.rank() < aligned.X.cols();
    out.eps = aligned.r - aligned.X * beta;
    return out;
  }
  const auto post = fit_bart_regression(aligned.X, aligned.r, options.bart, options.seed);
  out.eps = aligned.r;
  for (Eigen::Index i = 0; i < out.eps.size(); ++i) out.eps[i] -= post.train_fit_mean[static_cast<std::size_t>(i)];
  return out;
}

std::string to_string(TestMode m) {
  switch (m) {
    case TestMode::automatic: return "auto";
    case TestMode::exact: return "exact";
    case TestMode::monte_carlo: return "monte-carlo";
    case TestMode::normal: return "normal";
  }
  return "auto";
}

TestMode test_mode_from_string(const std::string& s) {
  if (s == "auto") return TestMode::automatic;
  if (s == "exact") return TestMode::exact;
  if (s == "monte-carlo" || s == "mc") return TestMode::monte_carlo;
  if (s == "normal") return TestMode::normal;
  throw ValidationError(fmt::format("unknown test mode '{}' (expected auto, exact, monte-carlo or normal)", s));
}

std::string to_string(Alternative a) {
  switch (a) {
    case Alternative::two_sided: return "two-sided";
    case Alternative::greater: return "greater";
    case Alternative::less: return "less";
  }
  return "two-sided";
}

Alternative alternative_from_string(const std::string& s) {
  if (s == "two-sided") return Alternative::two_sided;
  if (s == "greater") return Alternative::greater;
  if (s == "less") return Alternative::less;
  throw ValidationError(fmt::format("unknown alternative '{}' (expected two-sided, greater or less)", s));
}

double two_sided_from_tails(double p_greater, double p_less) {
  return std::min(1.0, 2.0 * std::min(p_greater, p_less));
}

namespace {

void finish(TestResult& r, Alternative alt) {
  r.p_two_sided = two_sided_from_tails(r.p_greater, r.p_less);
  switch (alt) {
    case Alternative::two_sided: r.p_value = r.p_two_sided; break;
    case Alternative::greater: r.p_value = r.p_greater; break;
    case Alternative::less: r.p_value = r.p_less; break;
  }
}

}  // namespace

TestResult permutational_t_test(const Eigen::VectorXd& eps, const StratifiedSample& sample,
                                const TestOptions& options) {
  if (sample.num_sets() == 0) throw ValidationError("permutational_t_test: no matched sets");
  if (eps.size() != sample.y.size()) throw ValidationError("permutational_t_test: residual count mismatch");

  TestResult r;
  r.n_sets = sample.num_sets();
  double scale = 0.0;
  for (Eigen::Index i = 0; i < eps.size(); ++i) {
    if (sample.z[i] == 1) r.statistic += eps[i];
    scale += std::abs(eps[i]);
  }
  // Sums that agree to this tolerance are treated as ties.
  const double tol = 1e-9 * (1.0 + scale);

  TestMode mode = options.mode;
  if (mode == TestMode::automatic)
    mode = sample.assignment_count(options.exact_limit) <= options.exact_limit ? TestMode::exact : TestMode::monte_carlo;
  r.method = mode;

  if (mode == TestMode::exact) {
    const double count = sample.assignment_count(1e8);
    if (count > 1e8) throw ValidationError("exact permutation test limited to 1e8 assignments");
    std::vector<double> sums{0.0};
    sums.reserve(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < sample.num_sets(); ++i) {
      std::vector<double> next;
      next.reserve(sums.size() * sample.set_size(i));
      for (double s : sums)
        for (std::size_t j = sample.offsets[i]; j < sample.offsets[i + 1]; ++j)
          next.push_back(s + eps[static_cast<Eigen::Index>(j)]);
      sums.swap(next);
    }
    std::size_t ge = 0, le = 0;
    for (double s : sums) {
      if (s >= r.statistic - tol) ++ge;
      if (s <= r.statistic + tol) ++le;
    }
    r.assignments = static_cast<double>(sums.size());
    r.p_greater = static_cast<double>(ge) / r.assignments;
    r.p_less = static_cast<double>(le) / r.assignments;
  } else if (mode == TestMode::monte_carlo) {
    if (options.mc_draws == 0) throw ValidationError("monte-carlo test needs at least one draw");
    Rng rng(options.seed);
    std::vector<std::uniform_int_distribution<std::size_t>> pick;
    for (std::size_t i = 0; i < sample.num_sets(); ++i)
      pick.emplace_back(sample.offsets[i], sample.offsets[i + 1] - 1);
    std::size_t ge = 0, le = 0;
    for (std::size_t b = 0; b < options.mc_draws; ++b) {
      double s = 0.0;
      for (auto& d : pick) s += eps[static_cast<Eigen::Index>(d(rng))];
      if (s >= r.statistic - tol) ++ge;
      if (s <= r.statistic + tol) ++le;
    }
    const double B = static_cast<double>(options.mc_draws);
    r.mc_draws = options.mc_draws;
    r.seed = options.seed;
    r.p_greater = (1.0 + static_cast<double>(ge)) / (1.0 + B);
    r.p_less = (1.0 + static_cast<double>(le)) / (1.0 + B);
  } else {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < sample.num_sets(); ++i) {
      const auto b = static_cast<Eigen::Index>(sample.offsets[i]);
      const auto len = static_cast<Eigen::Index>(sample.set_size(i));
      const double mu = eps.segment(b, len).mean();
      mean += mu;
      var += (eps.segment(b, len).array() - mu).square().mean();
    }
    if (var <= 1e-300) {
      r.p_greater = r.p_less = 1.0;
    } else {
      const double zdev = (r.statistic - mean) / std::sqrt(var);
      r.p_greater = normal_sf(zdev);
      r.p_less = normal_cdf(zdev);
    }
  }
  finish(r, options.alternative);
  return r;
}

TestResult test_effect(const StratifiedSample& sample, double tau0, Adjustment adjustment,
                       const TestOptions& options, const AdjustOptions& adjust) {
  const auto aligned = align_responses(sample, tau0);
  const auto res = covariance_adjust(aligned, adjustment, adjust);
  auto r = permutational_t_test(res.eps, sample, options);
  r.tau0 = tau0;
  r.adjustment = adjustment;
  r.rank_deficient = res.rank_deficient;
  return r;
}

std::vector<double> default_tau_grid(double outcome_sd, std::size_t fill) {
  if (!(outcome_sd > 0)) throw ValidationError("default_tau_grid: outcome sd must be positive");
  std::vector<double> g;
  for (double m : {-0.8, -0.5, -0.2, 0.0, 0.2, 0.5, 0.8}) g.push_back(m * outcome_sd);
  for (std::size_t i = 0; i < fill; ++i) {
    const double t = fill == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(fill - 1);
    g.push_back((-0.8 + 1.6 * t) * outcome_sd);
  }
  std::sort(g.begin(), g.end());
  std::vector<double> out;
  for (double v : g)
    if (out.empty() || std::abs(v - out.back()) > 1e-12 * outcome_sd) out.push_back(v);
  return out;
}

ConfidenceRegion invert_tests(const StratifiedSample& sample, const std::vector<double>& grid,
                              const InvertOptions& options) {
  if (grid.empty()) throw ValidationError("invert_tests: grid is empty");
  if (!std::is_sorted(grid.begin(), grid.end())) throw ValidationError("invert_tests: grid must be sorted");
  ConfidenceRegion region;
  region.grid = grid;
  region.p_values.assign(grid.size(), 1.0);
  parallel_for(grid.size(), options.threads, [&](std::size_t g) {
    TestOptions t = options.test;
    t.seed = derive_seed(options.test.seed, g);
    AdjustOptions a = options.adjust;
    a.seed = derive_seed(options.adjust.seed, g);
    region.p_values[g] = test_effect(sample, grid[g], options.adjustment, t, a).p_value;
  });
  region.accepted.resize(grid.size());
  std::optional<std::size_t> first, last;
  std::size_t count = 0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    region.accepted[g] = region.p_values[g] > options.alpha;
    if (region.accepted[g]) {
      if (!first) first = g;
      last = g;
      ++count;
    }
  }
  if (first) {
    region.lower = grid[*first];
    region.upper = grid[*last];
    region.non_monotone = count != *last - *first + 1;
  }
  return region;
}

ConfidenceRegion invert_tests(const SubjectTable& table, const MatchResult& result, const std::string& outcome,
                              const std::vector<double>& grid, const InvertOptions& options) {
  return invert_tests(gather_sets(table, result, outcome).sample, grid, options);
}

namespace {

struct SetCounts {
  double n = 0;   // set size
  double m = 0;   // events in the set
  int yt = 0;     // treated outcome
};

std::vector<SetCounts> binary_sets(const StratifiedSample& sample) {
  std::vector<SetCounts> out;
  for (std::size_t i = 0; i < sample.num_sets(); ++i) {
    SetCounts c;
    c.n = static_cast<double>(sample.set_size(i));
    for (std::size_t r = sample.offsets[i]; r < sample.offsets[i + 1]; ++r) {
      const double v = sample.y[static_cast<Eigen::Index>(r)];
      if (v != 0.0 && v != 1.0) throw ValidationError("binary test requires 0/1 outcomes");
      c.m += v;
      if (sample.z[static_cast<Eigen::Index>(r)] == 1) c.yt = static_cast<int>(v);
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

double conditional_log_likelihood(const StratifiedSample& sample, double theta) {
  double ll = 0.0;
  for (const auto& c : binary_sets(sample)) {
    if (c.m == 0 || c.m == c.n) continue;
    ll += theta * c.yt - std::log(c.m * std::exp(theta) + c.n - c.m);
  }
  return ll;
}

ConditionalLogitResult conditional_logistic(const StratifiedSample& sample, double ci_level) {
  sample.validate();
  const auto sets = binary_sets(sample);
  ConditionalLogitResult out;

  auto score_info = [&](double theta) {
    double u = 0.0, info = 0.0;
    for (const auto& c : sets) {
      if (c.m == 0 || c.m == c.n) continue;
      const double w = c.m * std::exp(theta);
      const double p = w / (w + c.n - c.m);
      u += c.yt - p;
      info += p * (1.0 - p);
    }
    return std::pair{u, info};
  };

  double max_t = 0.0;
  for (const auto& c : sets) {
    if (c.m == 0 || c.m == c.n) continue;
    ++out.informative_sets;
    max_t += c.yt;
  }
  std::tie(out.score, out.information) = score_info(0.0);
  if (out.informative_sets == 0 || out.information <= 0) {
    out.identified = false;
    out.p_value = 1.0;
    out.theta = 0.0;
    out.se = std::numeric_limits<double>::infinity();
    out.ci_lower = -std::numeric_limits<double>::infinity();
    out.ci_upper = std::numeric_limits<double>::infinity();
    out.warnings.push_back("no discordant sets: the treatment log odds ratio is not identified");
    return out;
  }
  const double zscore = out.score / std::sqrt(out.information);
  out.p_value = std::min(1.0, 2.0 * normal_sf(std::abs(zscore)));

  // With the treated event total at 0 or at the number of informative sets
  // the likelihood is monotone in theta.
  const double max_possible = static_cast<double>(out.informative_sets);
  const double min_possible = 0.0;
  if (max_t >= max_possible || max_t <= min_possible) {
    out.identified = false;
    out.theta = max_t >= max_possible ? std::numeric_limits<double>::infinity()
                                      : -std::numeric_limits<double>::infinity();
    out.se = std::numeric_limits<double>::infinity();
    out.ci_lower = -std::numeric_limits<double>::infinity();
    out.ci_upper = std::numeric_limits<double>::infinity();
    out.warnings.push_back("all discordant sets point one way: the maximum likelihood estimate is infinite");
    return out;
  }

  double theta = 0.0;
  out.converged = false;
  for (int it = 0; it < 100; ++it) {
    const auto [u, info] = score_info(theta);
    double step = u / info;
    // Damped Newton keeps the ascent stable on very unbalanced sets.
    double ll = conditional_log_likelihood(sample, theta);
    double cand = theta + step;
    for (int h = 0; h < 30 && conditional_log_likelihood(sample, cand) < ll - 1e-12; ++h) {
      step *= 0.5;
      cand = theta + step;
    }
    theta = cand;
    if (std::abs(step) < 1e-12 || std::abs(u) < 1e-12) {
      out.converged = true;
      break;
    }
  }
  out.theta = theta;
  const double info = score_info(theta).second;
  out.se = 1.0 / std::sqrt(info);
  const double zq = normal_quantile(0.5 + ci_level / 2.0);
  out.ci_lower = theta - zq * out.se;
  out.ci_upper = theta + zq * out.se;
  if (!out.converged) out.warnings.push_back("Newton iteration did not converge");
  return out;
}

std::vector<double> poisson_binomial(const std::vector<double>& p) {
  std::vector<double> dist{1.0};
  for (double pi : p) {
    std::vector<double> next(dist.size() + 1, 0.0);
    for (std::size_t k = 0; k < dist.size(); ++k) {
      next[k] += dist[k] * (1.0 - pi);
      next[k + 1] += dist[k] * pi;
    }
    dist.swap(next);
  }
  return dist;
}

TestResult mantel_haenszel(const StratifiedSample& sample, TestMode mode, Alternative alternative) {
  sample.validate();
  if (sample.num_sets() == 0) throw ValidationError("mantel_haenszel: no matched sets");
  const auto sets = binary_sets(sample);
  TestResult r;
  r.n_sets = sets.size();
  double mean = 0.0, var = 0.0;
  std::vector<double> probs;
  int fixed = 0;  // events contributed by concordant sets with certainty
  for (const auto& c : sets) {
    r.statistic += c.yt;
    const double p = c.m / c.n;
    mean += p;
    var += c.m * (c.n - c.m) / (c.n * c.n);
    if (c.m == 0) continue;
    if (c.m == c.n) {
      ++fixed;
      continue;
    }
    probs.push_back(p);
  }
  if (mode == TestMode::automatic || mode == TestMode::monte_carlo) mode = TestMode::normal;
  r.method = mode;
  if (var <= 0) {
    r.p_greater = r.p_less = 1.0;
  } else if (mode == TestMode::exact) {
    const auto dist = poisson_binomial(probs);
    const int t = static_cast<int>(std::lround(r.statistic)) - fixed;
    double ge = 0.0, le = 0.0;
    for (std::size_t k = 0; k < dist.size(); ++k) {
      if (static_cast<int>(k) >= t) ge += dist[k];
      if (static_cast<int>(k) <= t) le += dist[k];
    }
    r.p_greater = std::min(1.0, ge);
    r.p_less = std::min(1.0, le);
  } else {
    const double sd = std::sqrt(var);
    r.p_greater = std::min(1.0, normal_sf((r.statistic - mean - 0.5) / sd));
    r.p_less = std::min(1.0, normal_cdf((r.statistic - mean + 0.5) / sd));
  }
  finish(r, alternative);
  return r;
}

}  // namespace obsmatch
