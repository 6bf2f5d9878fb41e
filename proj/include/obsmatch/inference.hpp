#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsmatch/bart.hpp"
#include "obsmatch/dataset.hpp"
#include "obsmatch/matching.hpp"

namespace obsmatch {

// Matched sets laid out contiguously: set i occupies rows
// [offsets[i], offsets[i + 1]) of y, z and X. Exactly one z = 1 per set.
struct StratifiedSample {
  std::vector<std::size_t> offsets{0};
  Eigen::VectorXd y;
  Eigen::VectorXi z;
  Eigen::MatrixXd X;
  std::vector<std::string> ids;

  std::size_t num_sets() const { return offsets.size() - 1; }
  std::size_t set_size(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
  // Product of set sizes, saturating at `cap` + 1.
  double assignment_count(double cap = 1e18) const;
  void validate() const;
};

struct GatherResult {
  StratifiedSample sample;
  std::vector<std::string> excluded_sets;  // treated ids of sets dropped for missing outcomes
};

// Collects the matched sets of `result` for one outcome. Sets with any
// member missing the outcome are excluded whole. Covariates default to every
// covariate of the table.
GatherResult gather_sets(const SubjectTable& table, const MatchResult& result, const std::string& outcome,
                         const std::vector<std::string>& covariates = {});

// Builds a sample from explicit set sizes; the treated unit of each set is
// the one with z = 1.
StratifiedSample make_sample(const std::vector<std::size_t>& set_sizes, const Eigen::VectorXd& y,
                             const Eigen::VectorXi& z, const Eigen::MatrixXd& X = {});

struct Aligned {
  Eigen::VectorXd r;  // (R - tau0 Z) centred within each set
  Eigen::MatrixXd X;  // covariates centred within each set
};

Aligned align_responses(const StratifiedSample& sample, double tau0);

enum class Adjustment { none, ols, bart };
std::string to_string(Adjustment a);
Adjustment adjustment_from_string(const std::string& s);

struct AdjustOptions {
  BartParams bart;
  std::uint64_t seed = 1;
};

struct Residuals {
  Eigen::VectorXd eps;
  bool rank_deficient = false;
};

// eps = r - fit(X). ols has no intercept (inputs are centred) and returns the
// minimum-norm solution when X is rank deficient.
Residuals covariance_adjust(const Aligned& aligned, Adjustment method, const AdjustOptions& options = {});

enum class TestMode { automatic, exact, monte_carlo, normal };
std::string to_string(TestMode m);
TestMode test_mode_from_string(const std::string& s);

enum class Alternative { two_sided, greater, less };
std::string to_string(Alternative a);
Alternative alternative_from_string(const std::string& s);

struct TestOptions {
  TestMode mode = TestMode::automatic;
  double exact_limit = 1e6;       // automatic: exact when the assignment count is at most this
  std::size_t mc_draws = 100000;
  std::uint64_t seed = 1;
  Alternative alternative = Alternative::two_sided;
};

struct TestResult {
  double tau0 = 0.0;
  double statistic = 0.0;
  double p_value = 1.0;  // for the requested alternative
  double p_two_sided = 1.0;
  double p_greater = 1.0;
  double p_less = 1.0;
  TestMode method = TestMode::exact;
  double assignments = 0.0;  // exact: number of equiprobable assignments
  std::size_t mc_draws = 0;
  std::uint64_t seed = 0;
  Adjustment adjustment = Adjustment::none;
  bool rank_deficient = false;
  std::size_t n_sets = 0;
};

// Two-sided p from the two one-sided tails.
double two_sided_from_tails(double p_greater, double p_less);

// T = sum of residuals at the treated positions, referred to the
// distribution induced by placing the treated unit uniformly and
// independently within each set.
TestResult permutational_t_test(const Eigen::VectorXd& eps, const StratifiedSample& sample,
                                const TestOptions& options = {});

// Full pipeline at one tau0: align, adjust, test.
TestResult test_effect(const StratifiedSample& sample, double tau0, Adjustment adjustment,
                       const TestOptions& options = {}, const AdjustOptions& adjust = {});

struct ConfidenceRegion {
  std::vector<double> grid;
  std::vector<double> p_values;
  std::vector<bool> accepted;
  std::optional<double> lower;  // hull of accepted grid points
  std::optional<double> upper;
  bool non_monotone = false;    // accepted points do not form a contiguous run of the grid
  bool empty() const { return !lower.has_value(); }
};

// Cohen-style multiples {-0.8, -0.5, -0.2, 0, 0.2, 0.5, 0.8} x sd plus
// `fill` uniform points across the same range, sorted and de-duplicated.
std::vector<double> default_tau_grid(double outcome_sd, std::size_t fill = 50);

struct InvertOptions {
  double alpha = 0.05;
  Adjustment adjustment = Adjustment::ols;
  TestOptions test;
  AdjustOptions adjust;
  int threads = 1;
};

// Accepts tau0 when p(tau0) > alpha. Each grid point uses seeds derived from
// (seed, grid index), so results do not depend on the thread count.
ConfidenceRegion invert_tests(const StratifiedSample& sample, const std::vector<double>& grid,
                              const InvertOptions& options = {});

ConfidenceRegion invert_tests(const SubjectTable& table, const MatchResult& result, const std::string& outcome,
                              const std::vector<double>& grid, const InvertOptions& options = {});

struct ConditionalLogitResult {
  double theta = 0.0;  // log odds ratio; infinite when unidentified in one direction
  double se = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  double score = 0.0;        // U(0)
  double information = 0.0;  // I(0)
  double p_value = 1.0;      // score test at theta = 0, two-sided
  bool identified = true;
  bool converged = true;
  std::size_t informative_sets = 0;
  std::vector<std::string> warnings;
};

// Conditional logistic regression of a binary outcome on treatment within
// matched sets, fitted by Newton's method.
ConditionalLogitResult conditional_logistic(const StratifiedSample& sample, double ci_level = 0.95);

// Conditional log-likelihood at theta (used by oracles and tests).
double conditional_log_likelihood(const StratifiedSample& sample, double theta);

// Number of treated events referred to its per-set hypergeometric null.
// normal mode uses a continuity-corrected deviate; exact mode convolves the
// per-set distributions.
TestResult mantel_haenszel(const StratifiedSample& sample, TestMode mode = TestMode::normal,
                           Alternative alternative = Alternative::two_sided);

// Distribution of a sum of independent Bernoulli(p_i) variables.
std::vector<double> poisson_binomial(const std::vector<double>& p);

}  // namespace obsmatch
