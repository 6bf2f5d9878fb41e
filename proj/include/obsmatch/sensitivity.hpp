#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsmatch/inference.hpp"

namespace obsmatch {

struct SensitivityResult {
  double gamma = 1.0;
  double p_upper = 1.0;      // one-sided bound in the observed direction
  double p_two_sided = 1.0;  // min(1, 2 p_upper)
  double deviate = 0.0;      // normal modes only
  double expectation = 0.0;  // worst-case mean of the statistic
  double variance = 0.0;
  bool positive_direction = true;  // false: the observed statistic fell below its null mean
  TestMode method = TestMode::normal;
};

// Worst-case per-set mean and variance of the treated residual for one set
// (values in any order) under odds bound gamma. Cuts a = 1..n-1 of the
// descending order put weight gamma on the top a units; the cut with the
// largest mean wins, larger variance breaking ties.
std::pair<double, double> separable_moments(std::vector<double> values, double gamma);

// Bound on the randomization p-value of the residual sum when the odds of
// treatment within a set may differ by at most gamma.
SensitivityResult sensitivity_residual(const Eigen::VectorXd& eps, const StratifiedSample& sample, double gamma);

struct MhSensitivityOptions {
  TestMode mode = TestMode::automatic;  // automatic: exact when at most `exact_sets` informative sets
  std::size_t exact_sets = 200;
};

// Worst-case bound for the Mantel-Haenszel count: in each discordant set the
// treated unit has the event with probability m gamma / (m gamma + n - m).
SensitivityResult sensitivity_mh(const StratifiedSample& sample, double gamma, const MhSensitivityOptions& options = {});

struct GammaPoint {
  double gamma = 1.0;
  double p = 1.0;
};

struct GammaCurve {
  std::vector<GammaPoint> points;
  std::optional<double> threshold;  // smallest grid gamma with p >= alpha
  bool insignificant_at_one = false;
  bool beyond_grid() const { return !threshold.has_value(); }
};

// 1.0, 1.05, ..., 3.0
std::vector<double> default_gamma_grid();

GammaCurve gamma_threshold(const std::function<double(double)>& compute, double alpha = 0.05,
                           const std::vector<double>& grid = default_gamma_grid(), int threads = 1);

std::string format_gamma_threshold(const GammaCurve& curve);

}  // namespace obsmatch
