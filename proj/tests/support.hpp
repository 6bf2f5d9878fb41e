#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "obsmatch/dataset.hpp"

namespace test_support {

inline constexpr double NA = std::numeric_limits<double>::quiet_NaN();

inline obsmatch::Column column(const std::string& name, const std::vector<double>& values) {
  obsmatch::Column c{name, {}, {}};
  for (double v : values) {
    c.missing.push_back(std::isnan(v) ? 1 : 0);
    c.values.push_back(std::isnan(v) ? 0.0 : v);
  }
  return c;
}

// Table with ids s0, s1, ..., a single stratum unless given, and the listed
// covariate columns.
inline obsmatch::SubjectTable table(const std::vector<int>& z, const std::vector<obsmatch::Column>& covariates,
                                    const std::vector<obsmatch::CovariateKind>& kinds = {},
                                    const std::vector<std::string>& strata = {}) {
  obsmatch::SubjectTable t;
  for (std::size_t r = 0; r < z.size(); ++r) {
    t.ids.push_back("s" + std::to_string(r));
    t.z.push_back(z[r]);
    t.stratum.push_back(strata.empty() ? "a" : strata[r]);
  }
  t.covariates = covariates;
  for (std::size_t j = 0; j < covariates.size(); ++j)
    t.covariate_kinds.push_back(kinds.empty() ? obsmatch::CovariateKind::continuous : kinds[j]);
  return t;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_sd(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace test_support
