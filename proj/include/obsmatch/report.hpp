#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "obsmatch/matching.hpp"
#include "obsmatch/propensity.hpp"

namespace obsmatch {

// "MLE", "L1", "Bayes", "BART"
std::string display_name(PropensityMethod method);

struct MatchSummaryRow {
  std::string comparison;
  PropensityMethod method = PropensityMethod::mle;
  ArmCount n_miss;
  ArmCount n_cs;
  ArmCount n_total;
  std::size_t imbalanced = 0;
  bool selected = false;
};

MatchSummaryRow summarize_match(const std::string& comparison, PropensityMethod method, const MatchResult& result,
                                std::size_t imbalanced, bool selected);

// CSV with one row per (comparison, method).
std::string format_match_summary_csv(const std::vector<MatchSummaryRow>& rows);

// "Comparison 1, MLE: n_miss 32 (0/32), n_cs 203 (26/177), n_total 1481 (447/1034), imbalanced 0"
std::string format_table1_line(const MatchSummaryRow& row);
std::string format_table1(const std::vector<MatchSummaryRow>& rows);

// Rows 1:1 .. 1:K, one column per comparison.
std::string format_composition_csv(const std::vector<std::pair<std::string, std::map<int, std::size_t>>>& columns,
                                   int max_controls = kMaxControls);

struct Quantiles {
  double min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
};

// Linear interpolation between order statistics.
Quantiles quantiles(std::vector<double> values);

}  // namespace obsmatch
