#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "obsmatch/bart.hpp"
#include "obsmatch/dataset.hpp"
#include "obsmatch/inference.hpp"
#include "obsmatch/propensity.hpp"

namespace obsmatch {

struct ComparisonSpec {
  std::string name;
  std::vector<RowFilter> treated;  // rows recoded to z = 1
  std::vector<RowFilter> control;  // rows recoded to z = 0
  std::string treated_label = "Treated";
  std::string control_label = "Controls";
};

struct StudyConfig {
  // Data source. An empty path means a synthetic cohort from `synthetic`.
  std::string data_path;
  FormatOptions format;
  std::vector<std::string> label_columns;
  CovariateSchema schema;  // required with a data file; derived for synthetic data
  SyntheticSpec synthetic;

  std::vector<std::string> covariates;  // empty: every schema covariate
  OutcomeSpec primary_outcome{"y", OutcomeKind::continuous};
  std::vector<OutcomeSpec> secondary_outcomes{{"y_bin", OutcomeKind::binary}};
  std::vector<RowFilter> eligibility;
  std::vector<ComparisonSpec> comparisons;

  std::vector<PropensityMethod> methods{PropensityMethod::mle, PropensityMethod::l1, PropensityMethod::bayes,
                                        PropensityMethod::bart};
  int l1_folds = 10;
  int l1_grid_size = 50;
  int bayes_draws = 4000;
  int bayes_burn_in = 1000;
  BartParams bart;

  int max_controls = 15;
  double caliper_width_sd = 0.2;
  double caliper_penalty_multiplier = 1000.0;
  std::size_t max_imbalanced = 1;
  double imbalance_threshold = 0.2;
  std::vector<std::string> balance_levels;  // ordinal covariates shown per level

  double alpha = 0.05;
  Adjustment adjustment = Adjustment::ols;
  TestMode test_mode = TestMode::automatic;
  std::size_t mc_draws = 100000;
  Alternative alternative = Alternative::two_sided;
  std::vector<double> tau_grid;  // empty: default grid scaled by the outcome sd
  std::size_t tau_grid_fill = 50;
  double equivalence_margin_sd = 0.2;
  BartParams adjustment_bart;

  std::vector<double> gamma_grid;  // empty: 1.0 to 3.0 step 0.05

  std::uint64_t seed = 20240601;
  int threads = 1;
  std::string output_dir = "out";
};

// Four comparisons over the synthetic `group` label: treated vs all
// controls, vs sport controls, vs non-sport controls, and sport vs
// non-sport controls.
std::vector<ComparisonSpec> default_comparisons();

StudyConfig default_config();

// JSON round trip. Unknown keys are rejected so typos surface early.
StudyConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const StudyConfig& config);
StudyConfig load_config(const std::string& path);

// Checks parameter ranges and, given the loaded table, that every
// referenced column exists. Throws ValidationError naming the problem.
void validate_config(const StudyConfig& config);
void validate_config_against(const StudyConfig& config, const SubjectTable& table);

// File-safe identifier for a comparison name ("Comparison 1" -> "comparison_1").
std::string slug(const std::string& name);

}  // namespace obsmatch
