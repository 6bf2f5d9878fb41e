#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace obsmatch {

enum class CovariateKind { continuous, binary, ordinal };

std::string to_string(CovariateKind kind);
CovariateKind covariate_kind_from_string(const std::string& s);

struct CovariateSpec {
  std::string name;
  CovariateKind kind = CovariateKind::continuous;
  std::vector<double> levels;  // ordinal only, in order
};

struct CovariateSchema {
  std::vector<CovariateSpec> covariates;

  const CovariateSpec* find(const std::string& name) const;
};

enum class OutcomeKind { continuous, binary };

std::string to_string(OutcomeKind kind);
OutcomeKind outcome_kind_from_string(const std::string& s);

struct OutcomeSpec {
  std::string name;
  OutcomeKind kind = OutcomeKind::continuous;
};

// A named numeric column with a per-entry missing flag.
struct Column {
  std::string name;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;

  bool any_missing() const;
  std::size_t observed_count() const;
};

// Categorical columns carried along for filtering and comparison membership.
struct LabelColumn {
  std::string name;
  std::vector<std::string> values;
};

// Column-oriented subject table. Row r of every column refers to ids[r].
struct SubjectTable {
  std::vector<std::string> ids;
  std::vector<int> z;
  std::vector<std::string> stratum;
  std::vector<Column> covariates;
  std::vector<CovariateKind> covariate_kinds;
  std::vector<Column> outcomes;
  std::vector<LabelColumn> labels;

  std::size_t size() const { return ids.size(); }
  std::size_t treated_count() const;

  const Column& covariate(const std::string& name) const;
  const Column& outcome(const std::string& name) const;
  const LabelColumn& label(const std::string& name) const;
  std::optional<std::size_t> covariate_index(const std::string& name) const;

  std::vector<std::string> covariate_names() const;

  // Subset of rows, in the given order.
  SubjectTable select(const std::vector<std::size_t>& rows) const;

  // n x p matrix of covariate values. Throws if any entry is missing.
  Eigen::MatrixXd covariate_matrix() const;
  Eigen::VectorXi treatment_vector() const;

  // Checks the SubjectTable invariants; throws ValidationError.
  void validate() const;
};

struct FormatOptions {
  char delimiter = ',';
  std::string missing_token = "NA";
  std::string id_column = "id";
  std::string treatment_column = "z";
  std::string stratum_column = "stratum";
  std::vector<OutcomeSpec> outcomes;
  std::vector<std::string> label_columns;
};

SubjectTable load_subjects(const std::string& path, const CovariateSchema& schema,
                           const FormatOptions& options);
SubjectTable parse_subjects(const std::string& text, const CovariateSchema& schema,
                            const FormatOptions& options);

// Writes the table in the layout load_subjects reads. Values are printed
// with 17 significant digits so finite values round-trip bit-identically.
void save_subjects(const std::string& path, const SubjectTable& table,
                   const FormatOptions& options);
std::string format_subjects(const SubjectTable& table, const FormatOptions& options);

struct ScalingEntry {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  // scaled = (raw - shift) * multiplier
  double shift = 0.0;
  double multiplier = 1.0;
  bool zero_variance = false;
};

struct ScalingReport {
  std::vector<ScalingEntry> entries;
};

// Continuous and ordinal covariates are mapped to mean 0, sd 0.5 (sample sd,
// n - 1 denominator). Binary columns are left untouched. Missing entries are
// skipped when computing moments and stay missing.
std::pair<SubjectTable, ScalingReport> scale_covariates(const SubjectTable& table);

inline constexpr const char* kMissingSuffix = "__missing";

// Appends a binary `<name>__missing` indicator for every covariate with a
// missing entry and imputes the pooled observed mean (mode for binary
// columns, ties to 0).
SubjectTable augment_missingness(const SubjectTable& table);

struct MissingnessDrop {
  std::string id;
  std::string covariate;  // the indicator column that triggered the drop
};

// Removes subjects flagged by a missingness indicator whose flagged subjects
// all share one treatment arm. All indicators are evaluated against the
// input table in a single pass.
std::pair<SubjectTable, std::vector<MissingnessDrop>> drop_missingness_determined(
    const SubjectTable& table);

struct AttritionResult {
  double coef = 0.0;
  std::optional<double> p_value;  // empty when the fit separated
  bool separated = false;
  std::size_t n_available = 0;
  std::size_t n_missing = 0;
};

// Logistic regression of outcome availability on covariates and z; reports
// the treatment coefficient and its Wald p-value.
AttritionResult attrition_check(const SubjectTable& table, const std::string& outcome_name);

// Row predicate over a label, covariate, outcome, the treatment column
// ("z"), or the stratum column ("stratum").
struct RowFilter {
  std::string column;
  std::string op;  // "==", "!=", "<", "<=", ">", ">=", "in", "not_in"
  std::vector<std::string> values;

  bool matches(const SubjectTable& table, std::size_t row) const;
};

std::vector<std::size_t> rows_matching(const SubjectTable& table,
                                       const std::vector<RowFilter>& filters);
SubjectTable apply_filters(const SubjectTable& table, const std::vector<RowFilter>& filters);

struct SyntheticSpec {
  std::size_t n = 1000;
  std::size_t continuous_covariates = 4;
  std::size_t binary_covariates = 2;
  std::size_t strata = 3;
  // True propensity: logit e(x) = intercept + beta' x. beta has one entry per
  // covariate (continuous first, then binary); missing entries default to 0.
  double propensity_intercept = 0.0;
  std::vector<double> propensity_beta;
  // Control potential outcome: r_C = outcome_beta' x + N(0, noise_sd^2).
  std::vector<double> outcome_beta;
  double noise_sd = 1.0;
  double tau = 0.0;
  // Binary secondary outcome: P(y = 1) = logistic(binary_intercept +
  // outcome_beta' x / 2 + binary_log_odds_effect * z).
  bool binary_outcome = true;
  double binary_intercept = -1.0;
  double binary_log_odds_effect = 0.0;
  double covariate_missing_rate = 0.0;
  double outcome_missing_rate = 0.0;
  // Controls are labelled "sport" with this probability, else "nonsport";
  // treated are labelled "treated".
  double sport_fraction = 0.4;
  std::uint64_t seed = 1;
};

struct SyntheticCohort {
  SubjectTable table;
  double true_tau = 0.0;
  std::vector<double> true_propensity;
  std::vector<double> control_potential_outcome;
};

inline constexpr const char* kSyntheticOutcome = "y";
inline constexpr const char* kSyntheticBinaryOutcome = "y_bin";
inline constexpr const char* kSyntheticGroupLabel = "group";

SyntheticCohort generate_synthetic(const SyntheticSpec& spec);

CovariateSchema synthetic_schema(const SyntheticSpec& spec);
FormatOptions synthetic_format(const SyntheticSpec& spec);

}  // namespace obsmatch
