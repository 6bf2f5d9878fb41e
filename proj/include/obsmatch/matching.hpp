#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "obsmatch/dataset.hpp"

namespace obsmatch {

inline constexpr int kMaxControls = 15;

// Treated rows x control rows.
struct DistanceMatrix {
  Eigen::MatrixXd d;
  std::vector<std::string> warnings;
};

// Squared Mahalanobis distance between pooled average-rank vectors.
// Constant covariates are dropped with a warning.
DistanceMatrix rank_mahalanobis(const Eigen::MatrixXd& X_treated, const Eigen::MatrixXd& X_control);

// Soft caliper on the logit propensity: pairs whose logit difference exceeds
// width_sd * logit_sd get penalty * excess added. logit_sd defaults to the sd
// of the pooled logit scores passed in.
void apply_caliper(DistanceMatrix& D, std::span<const double> scores_treated,
                   std::span<const double> scores_control, double width_sd, double penalty,
                   std::optional<double> logit_sd = std::nullopt);

struct TrimResult {
  std::vector<std::size_t> dropped;  // row indices, ascending
  double min_control = 0.0;
  double max_treated = 0.0;
};

// Drops treated below every control score and controls above every treated
// score. Throws ValidationError if an arm would be emptied.
TrimResult trim_common_support(std::span<const double> scores, std::span<const int> z);

// Index k in 1..15 of the propensity interval containing e:
// S_1 = (1/3, 1], S_k = (1/(k+2), 1/(k+1)] for k = 2..14, S_15 = [0, 1/16].
int propensity_interval(double e);

inline constexpr std::int64_t kCostScale = 1'000'000;

struct BucketMatch {
  // (treated local index, control local indices)
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> sets;
  std::vector<std::size_t> dropped_treated;
  std::vector<std::size_t> dropped_controls;
  std::int64_t scaled_cost = 0;  // sum of llround(d * kCostScale) over matched pairs
};

inline std::int64_t scaled_cost(double d) {
  return static_cast<std::int64_t>(std::llround(d * static_cast<double>(kCostScale)));
}

// Optimal 1:k matching within one stratum x interval cell. D is
// n_treated x n_control.
//  - n_c >= k n_t: each treated gets exactly k controls; extra controls dropped.
//  - n_t <= n_c < k n_t: every control used, each treated gets 1..k.
//  - n_c < n_t: optimal pairs; the n_t - n_c treated left over are dropped.
BucketMatch match_bucket(std::size_t n_treated, std::size_t n_control, int k, const Eigen::MatrixXd& D);

enum class DropReason { missingness_determined, common_support, optimal_discard, unmatched_leftover };

std::string to_string(DropReason reason);
DropReason drop_reason_from_string(const std::string& s);

struct DroppedSubject {
  std::string id;
  DropReason reason;
};

struct MatchedSet {
  std::string treated;
  std::vector<std::string> controls;
  std::string stratum;
  int interval = 0;
};

struct ArmCount {
  std::size_t treated = 0;
  std::size_t control = 0;
  std::size_t total() const { return treated + control; }
};

struct MatchResult {
  std::vector<MatchedSet> sets;
  std::vector<DroppedSubject> dropped;
  ArmCount n_miss;
  ArmCount n_cs;
  ArmCount n_total;
  std::vector<std::string> warnings;
};

struct MatchConfig {
  int max_controls = kMaxControls;
  double caliper_width_sd = 0.2;
  // Penalty per unit of caliper excess = multiplier x mean cell distance,
  // unless an absolute penalty is given.
  double caliper_penalty_multiplier = 1000.0;
  std::optional<double> caliper_penalty;
};

// drop_missingness_determined -> trim_common_support -> per stratum x
// interval cell: rank_mahalanobis + apply_caliper + match_bucket.
// `scores` are aligned with the rows of `table`; rows removed as
// missingness-determined may carry NaN (their propensity is never fit).
MatchResult build_match(const SubjectTable& table, std::span<const double> scores,
                        const MatchConfig& config);

// Counts of sets by number of controls, keyed 1..max_controls.
std::map<int, std::size_t> composition(const MatchResult& result, int max_controls = kMaxControls);

// One set per line: `treated_id: control_id,control_id`.
std::string format_match_sets(const MatchResult& result);
// Two columns: id,reason.
std::string format_match_ledger(const MatchResult& result);

// Rebuilds a MatchResult from the two text forms. Arms and strata come from
// `table`, whose rows must cover every id mentioned; intervals are recomputed
// when scores (aligned with table rows) are supplied.
MatchResult parse_match(const std::string& sets_text, const std::string& ledger_text,
                        const SubjectTable& table, std::span<const double> scores = {});

}  // namespace obsmatch
