#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "obsmatch/config.hpp"
#include "obsmatch/dataset.hpp"
#include "obsmatch/propensity.hpp"

namespace obsmatch {

// Loads the study table (data file or synthetic cohort), checks the config
// against it, keeps the study covariates and applies eligibility filters.
SubjectTable load_study_table(const StudyConfig& config);

struct PreparedComparison {
  ComparisonSpec spec;
  std::string slug;
  SubjectTable imputed;   // missingness-augmented, natural units (balance tables)
  SubjectTable prepared;  // imputed and scaled (propensity, matching, adjustment)
  ScalingReport scaling;
  std::vector<std::string> study_covariates;  // without missingness indicators
};

// Selects the comparison's rows, recodes z (treated filters -> 1, control
// filters -> 0), then augments and scales.
PreparedComparison prepare_comparison(const SubjectTable& table, const ComparisonSpec& spec);

struct PropensityOutcome {
  PropensityFit fit;
  std::vector<double> scores;         // aligned with prepared rows; NaN where not fit
  std::vector<std::string> features;  // design columns actually used
};

// Fits on the subjects that survive drop_missingness_determined, leaving out
// covariates that are constant among them.
PropensityOutcome fit_propensity(const SubjectTable& prepared, PropensityMethod method, const StudyConfig& config,
                                 std::uint64_t seed);

struct StudySeeds {
  std::uint64_t propensity = 0;  // per method: derive_seed(propensity, method rank)
  std::uint64_t test = 0;
  std::uint64_t adjust = 0;
  std::uint64_t secondary = 0;   // per outcome k: derive_seed(secondary, 2k) and (2k + 1)
};

StudySeeds comparison_seeds(std::uint64_t root, std::size_t comparison_index);

enum class Stage { propensity, match, balance, infer, sensitivity, report };
std::string to_string(Stage stage);
Stage stage_from_string(const std::string& s);

// Runs one stage from the intermediates of the previous ones under
// config.output_dir. A missing intermediate raises a ValidationError that
// names the subcommand producing it.
void run_stage(Stage stage, const StudyConfig& config);

// All stages in order. On failure, writes a manifest naming the failed stage
// and rethrows.
void run_pipeline(const StudyConfig& config);

// Writes a failure manifest for `stage` listing the files present so far.
void write_failure_manifest(const StudyConfig& config, const std::string& stage, const std::string& message);

// Writes the synthetic cohort and a config that reads it back.
void write_simulation(const StudyConfig& config, const std::string& out_dir);

std::string sha256_hex(const std::string& data);

}  // namespace obsmatch
