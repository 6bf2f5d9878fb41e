#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "obsmatch/dataset.hpp"
#include "obsmatch/matching.hpp"
#include "obsmatch/propensity.hpp"

namespace obsmatch {

inline constexpr double kImbalanceThreshold = 0.2;

struct BalanceRow {
  std::string covariate;
  std::optional<double> level;  // set on per-level percentage rows of an ordinal covariate
  double treated_pre = 0.0;
  double control_pre = 0.0;
  double treated_post = 0.0;
  double control_post = 0.0;  // weighted by matched-set composition
  double std_diff_pre = 0.0;
  double std_diff_post = 0.0;
  double denominator = 0.0;   // pre-match pooled sd, shared by both columns
  bool zero_variance = false;
};

// Control j in set i gets 1 / (n_i - 1); treated subjects get 1.
std::map<std::string, double> matched_control_weights(const MatchResult& result);

// (treated mean - weighted control mean) / denom. Returns 0 when denom is
// not positive; callers flag that row.
double standardized_difference(std::span<const double> values_t, std::span<const double> values_c,
                               std::span<const double> weights_c, double denom);

// sqrt((s_T^2 + s_C^2) / 2) with n - 1 sample variances.
double pooled_sd(std::span<const double> values_t, std::span<const double> values_c);

struct BalanceOptions {
  // Ordinal covariates listed here are reported as one percentage row per
  // level instead of a single mean row.
  std::vector<std::string> expand_levels;
  const CovariateSchema* schema = nullptr;  // supplies declared ordinal levels
};

// Pre-match columns use every row of `table`; post-match columns use matched
// subjects only. Rows with missing values are skipped per covariate.
std::vector<BalanceRow> balance_table(const SubjectTable& table, const MatchResult& result,
                                      const std::vector<std::string>& covariates,
                                      const BalanceOptions& options = {});

// Rows with |post-match standardized difference| > threshold.
std::size_t count_imbalanced(const std::vector<BalanceRow>& rows, double threshold = kImbalanceThreshold);

struct MatchCandidate {
  PropensityMethod method = PropensityMethod::mle;
  std::size_t imbalanced = 0;
  std::size_t dropped = 0;
};

// Subjects removed before matching because of the fitted scores or the
// missingness pattern (n_miss + n_cs).
std::size_t dropped_count(const MatchResult& result);

struct Selection {
  std::size_t index = 0;
  bool meets_balance = true;  // false: best-effort choice above the allowed count
  std::string warning;
};

// Lexicographic rule: lowest imbalance count first, then fewest dropped,
// then declared method order.
Selection select_match(const std::vector<MatchCandidate>& candidates, std::size_t max_imbalanced = 1);

struct BalanceLabels {
  std::string treated = "Treated";
  std::string control = "Controls";
};

std::string format_balance_csv(const std::vector<BalanceRow>& rows);
std::string format_balance_markdown(const std::vector<BalanceRow>& rows, const BalanceLabels& labels = {},
                                    double threshold = kImbalanceThreshold);

}  // namespace obsmatch
