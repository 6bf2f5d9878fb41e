#include "obsmatch/report.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "obsmatch/common.hpp"

namespace obsmatch {

std::string display_name(PropensityMethod method) {
  switch (method) {
    case PropensityMethod::mle: return "MLE";
    case PropensityMethod::l1: return "L1";
    case PropensityMethod::bayes: return "Bayes";
    case PropensityMethod::bart: return "BART";
  }
  return "?";
}

MatchSummaryRow summarize_match(const std::string& comparison, PropensityMethod method, const MatchResult& result,
                                std::size_t imbalanced, bool selected) {
  return {comparison, method, result.n_miss, result.n_cs, result.n_total, imbalanced, selected};
}

std::string format_match_summary_csv(const std::vector<MatchSummaryRow>& rows) {
  std::string out =
      "comparison,method,n_miss,n_miss_treated,n_miss_control,n_cs,n_cs_treated,n_cs_control,n_total,"
      "n_total_treated,n_total_control,imbalanced,selected\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.comparison, display_name(r.method), r.n_miss.total(),
                       r.n_miss.treated, r.n_miss.control, r.n_cs.total(), r.n_cs.treated, r.n_cs.control,
                       r.n_total.total(), r.n_total.treated, r.n_total.control, r.imbalanced, r.selected ? 1 : 0);
  }
  return out;
}

std::string format_table1_line(const MatchSummaryRow& r) {
  auto arm = [](const ArmCount& c) { return fmt::format("{} ({}/{})", c.total(), c.treated, c.control); };
  return fmt::format("{}, {}: n_miss {}, n_cs {}, n_total {}, imbalanced {}", r.comparison, display_name(r.method),
                     arm(r.n_miss), arm(r.n_cs), arm(r.n_total), r.imbalanced);
}

std::string format_table1(const std::vector<MatchSummaryRow>& rows) {
  std::string out;
  for (const auto& r : rows) out += format_table1_line(r) + (r.selected ? " [selected]\n" : "\n");
  return out;
}

std::string format_composition_csv(const std::vector<std::pair<std::string, std::map<int, std::size_t>>>& columns,
                                   int max_controls) {
  std::string out = "composition";
  for (const auto& [name, counts] : columns) out += "," + name;
  out += "\n";
  for (int j = 1; j <= max_controls; ++j) {
    out += fmt::format("1:{}", j);
    for (const auto& [name, counts] : columns) {
      const auto it = counts.find(j);
      out += fmt::format(",{}", it == counts.end() ? 0 : it->second);
    }
    out += "\n";
  }
  return out;
}

Quantiles quantiles(std::vector<double> v) {
  if (v.empty()) throw ValidationError("quantiles of an empty sample");
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double h = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {v.front(), q(0.25), q(0.5), q(0.75), v.back()};
}

}  // namespace obsmatch
