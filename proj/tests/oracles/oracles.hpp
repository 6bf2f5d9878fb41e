#pragma once

// Brute-force reference implementations. Each one recomputes a quantity
// from its definition, sharing no code with the library routine it checks.

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "obsmatch/inference.hpp"

namespace obsmatch::oracle {

// Minimum total integer cost of a 1:k bucket match by enumerating every
// assignment of controls to treated units (or to "unused"). `cost` is row
// major, n_treated x n_control.
std::int64_t bucket_min_cost(std::size_t n_treated, std::size_t n_control, int k,
                             const std::vector<std::int64_t>& cost);

// Interval index straight from the interval definitions.
int interval_by_definition(double e);

struct Tails {
  double greater = 1.0;
  double less = 1.0;
};

// Exact tails of the treated-residual sum, visiting every assignment with an
// odometer. `sizes` lists the set sizes in order and `treated` the position of
// the treated unit within each set.
Tails permutation_tails(const std::vector<double>& eps, const std::vector<std::size_t>& sizes,
                        const std::vector<std::size_t>& treated);

// Exact tails of the treated-event count under random placement of the
// treated unit within each set.
Tails event_count_tails(const std::vector<int>& y, const std::vector<std::size_t>& sizes,
                        const std::vector<std::size_t>& treated);

// Upper tail P(S >= s) of a sum of independent Bernoulli(p_i), by direct
// dynamic programming.
double bernoulli_sum_upper(const std::vector<double>& p, int s);

// Largest normal-approximation upper tail of the treated-residual sum over
// within-set biased distributions pi_j proportional to gamma^{u_j}, with
// u on the grid {0, 1/steps, ..., 1}^{n_i}. Residuals are taken as given (no
// direction flip). Also reports the largest achievable total mean.
struct SensitivityGridResult {
  double p_max = 0.0;
  double max_mean = 0.0;
};
SensitivityGridResult sensitivity_grid(const std::vector<double>& eps, const std::vector<std::size_t>& sizes,
                                       const std::vector<std::size_t>& treated, double gamma, int steps = 10);

// Per-set worst-case mean over the same grid, used to check the separable
// choice of cut.
double max_set_mean(const std::vector<double>& values, double gamma, int steps = 10);

// Logistic regression with an intercept by plain Newton-Raphson on the
// log-likelihood, written with explicit loops.
Eigen::VectorXd logistic_newton(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, int iterations = 200);

// Largest violation of the lasso optimality conditions for
//   -loglik(beta) + lambda * sum_{j >= 1} |beta_j|.
// Zero coefficients need |g_j| <= lambda; nonzero ones g_j = lambda sign(b_j);
// the intercept g_0 = 0.
struct KktReport {
  double max_abs_gradient = 0.0;          // max_j>=1 |g_j|
  double max_stationarity_error = 0.0;    // over the intercept and nonzero coefficients
};
KktReport l1_kkt(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, const Eigen::VectorXd& beta, double lambda);

// Posterior mean and sd of (intercept, slope) for one-covariate logistic
// regression with independent normal priors, by a tensor-grid quadrature.
struct QuadratureResult {
  Eigen::Vector2d mean;
  Eigen::Vector2d sd;
};
QuadratureResult logistic_posterior_quadrature(const Eigen::VectorXd& x, const Eigen::VectorXi& z, double intercept_sd,
                                               double slope_sd, int points = 301);

// Maximiser of a unimodal function on [lo, hi].
template <class F>
double golden_section_max(F f, double lo, double hi, double tol = 1e-12) {
  const double r = 0.6180339887498949;
  double a = lo, b = hi;
  double c = b - r * (b - a), d = a + r * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol * (1.0 + std::abs(a) + std::abs(b))) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - r * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + r * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

// Conditional log-likelihood of a one-treated-per-set design written out
// from the per-set multinomial form.
double conditional_loglik(const std::vector<int>& y, const std::vector<std::size_t>& sizes,
                          const std::vector<std::size_t>& treated, double theta);

// McNemar score test on 1:1 pairs: (b - c)^2 / (b + c) referred to chi-square(1).
double mcnemar_p(const std::vector<int>& y_treated, const std::vector<int>& y_control);

// Random matched-set layout with one treated unit per set. Values are
// standard normal, or 0/1 events when `binary`.
struct SetInstance {
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> treated;
  std::vector<double> values;
};
SetInstance random_sets(std::mt19937_64& rng, std::size_t num_sets, std::size_t min_size, std::size_t max_size,
                        bool binary = false);
StratifiedSample to_sample(const SetInstance& instance);
std::vector<int> as_events(const SetInstance& instance);

// Runs the small-instance verification suite, printing one line per check.
// Returns true when every check passes.
bool run_suite(std::ostream& out, std::uint64_t seed);

}  // namespace obsmatch::oracle
