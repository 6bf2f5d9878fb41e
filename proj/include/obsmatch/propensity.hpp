#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsmatch/bart.hpp"

namespace obsmatch {

enum class PropensityMethod { mle, l1, bayes, bart };

std::string to_string(PropensityMethod method);
PropensityMethod propensity_method_from_string(const std::string& s);
// Declared order used for tie-breaking: mle, l1, bayes, bart.
int method_rank(PropensityMethod method);

struct LogisticFitOptions {
  double gradient_tolerance = 1e-8;
  int max_iterations = 100;
};

// Unpenalized logistic regression with an intercept, fit by Newton/IRLS.
struct LogisticFit {
  Eigen::VectorXd beta;            // intercept first
  Eigen::VectorXd standard_errors; // Wald, from the inverse observed information
  double log_likelihood = 0.0;
  int iterations = 0;
  bool converged = false;
  bool separated = false;
};

LogisticFit fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                         const LogisticFitOptions& options = {});

struct L1PathPoint {
  double lambda = 0.0;
  std::size_t nonzero = 0;
  double cv_deviance = 0.0;  // mean held-out binomial deviance per subject
};

struct PropensityFit {
  PropensityMethod method = PropensityMethod::mle;
  Eigen::VectorXd beta;  // intercept first; posterior mean for bayes; empty for bart
  std::vector<double> scores;
  bool converged = true;
  std::optional<double> lambda;
  std::size_t nonzero = 0;
  std::size_t draws = 0;
  double acceptance_rate = 0.0;
  std::vector<std::string> warnings;
  Eigen::VectorXd standard_errors;   // mle only
  Eigen::MatrixXd beta_draws;        // bayes only, draws x (p + 1)
  std::vector<L1PathPoint> path;     // l1 only
  std::shared_ptr<const BartPosterior> forest;  // bart only

  std::size_t num_features() const;
};

PropensityFit fit_mle(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                      const LogisticFitOptions& options = {});

struct L1Options {
  std::vector<double> lambda_grid;  // empty: automatic grid
  int folds = 10;
  std::uint64_t seed = 1;
  int grid_size = 50;
  double min_ratio = 1e-3;          // smallest automatic lambda / lambda_max
  double tolerance = 1e-7;          // max coefficient change
  int max_sweeps = 10000;
};

// Solution of  -loglik(beta) + lambda * sum_{j >= 1} |beta_j|  by cyclic
// coordinate descent on the IRLS quadratic approximation.
Eigen::VectorXd solve_l1_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                                  double lambda, const Eigen::VectorXd& warm_start,
                                  double tolerance = 1e-7, int max_sweeps = 10000);

// Smallest lambda at which every non-intercept coefficient is zero.
double l1_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXi& z);

PropensityFit fit_l1(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, const L1Options& options);

struct BayesOptions {
  int draws = 4000;
  int burn_in = 1000;
  std::uint64_t seed = 1;
  double prior_sd = 1.0;
  double intercept_prior_sd = 10.0;
  double target_acceptance = 0.3;
};

PropensityFit fit_bayes(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                        const BayesOptions& options);

PropensityFit fit_bart_propensity(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                                  const BartParams& params, std::uint64_t seed);

// Score for a new covariate vector. Linear fits return logistic(b0 + x'b);
// bayes averages over the stored posterior draws; bart averages Phi over
// forest draws.
double predict(const PropensityFit& fit, const Eigen::VectorXd& x);

// Keeps scores strictly inside (0, 1).
double clamp_score(double p);

}  // namespace obsmatch
