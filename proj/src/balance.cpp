#include "obsmatch/balance.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <unordered_map>

#include <fmt/format.h>

#include "obsmatch/common.hpp"

namespace obsmatch {

std::map<std::string, double> matched_control_weights(const MatchResult& result) {
  std::map<std::string, double> w;
  for (const auto& s : result.sets) {
    w[s.treated] = 1.0;
    const double cw = 1.0 / static_cast<double>(s.controls.size());
    for (const auto& c : s.controls) w[c] = cw;
  }
  return w;
}

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_var(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

double weighted_mean(std::span<const double> v, std::span<const double> w) {
  if (w.empty()) return mean_of(v);
  if (w.size() != v.size()) throw ValidationError("weights and values differ in length");
  double s = 0.0, sw = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += w[i] * v[i];
    sw += w[i];
  }
  return sw > 0 ? s / sw : 0.0;
}

std::string format_number(double v, int digits) {
  std::string s = fmt::format("{:.{}f}", v, digits);
  // Avoid printing negative zero.
  if (s.front() == '-' && std::all_of(s.begin() + 1, s.end(), [](char c) { return c == '0' || c == '.'; }))
    s = s.substr(1);
  return s;
}

}  // namespace

double standardized_difference(std::span<const double> values_t, std::span<const double> values_c,
                               std::span<const double> weights_c, double denom) {
  if (!(denom > 0)) return 0.0;
  return (mean_of(values_t) - weighted_mean(values_c, weights_c)) / denom;
}

double pooled_sd(std::span<const double> values_t, std::span<const double> values_c) {
  return std::sqrt((sample_var(values_t) + sample_var(values_c)) / 2.0);
}

std::size_t dropped_count(const MatchResult& result) { return result.n_miss.total() + result.n_cs.total(); }

std::vector<BalanceRow> balance_table(const SubjectTable& table, const MatchResult& result,
                                      const std::vector<std::string>& covariates,
                                      const BalanceOptions& options) {
  const auto weights = matched_control_weights(result);
  std::vector<BalanceRow> rows;

  auto emit = [&](const std::string& name, std::optional<double> level, auto value_of) {
    std::vector<double> t_pre, c_pre, t_post, c_post, w_post;
    for (std::size_t r = 0; r < table.size(); ++r) {
      const auto v = value_of(r);
      if (!v) continue;
      (table.z[r] == 1 ? t_pre : c_pre).push_back(*v);
      const auto it = weights.find(table.ids[r]);
      if (it == weights.end()) continue;
      if (table.z[r] == 1) {
        t_post.push_back(*v);
      } else {
        c_post.push_back(*v);
        w_post.push_back(it->second);
      }
    }
    BalanceRow row;
    row.covariate = name;
    row.level = level;
    row.treated_pre = mean_of(t_pre);
    row.control_pre = mean_of(c_pre);
    row.treated_post = mean_of(t_post);
    row.control_post = weighted_mean(c_post, w_post);
    row.denominator = pooled_sd(t_pre, c_pre);
    row.zero_variance = !(row.denominator > 0);
    row.std_diff_pre = standardized_difference(t_pre, c_pre, {}, row.denominator);
    row.std_diff_post = standardized_difference(t_post, c_post, w_post, row.denominator);
    rows.push_back(row);
  };

  for (const auto& name : covariates) {
    const Column& col = table.covariate(name);
    const bool expand =
        std::find(options.expand_levels.begin(), options.expand_levels.end(), name) != options.expand_levels.end();
    if (!expand) {
      emit(name, std::nullopt, [&](std::size_t r) -> std::optional<double> {
        if (col.missing[r]) return std::nullopt;
        return col.values[r];
      });
      continue;
    }
    std::vector<double> levels;
    if (options.schema) {
      if (const auto* spec = options.schema->find(name)) levels = spec->levels;
    }
    if (levels.empty()) {
      std::set<double> seen;
      for (std::size_t r = 0; r < table.size(); ++r)
        if (!col.missing[r]) seen.insert(col.values[r]);
      levels.assign(seen.begin(), seen.end());
    }
    for (double level : levels) {
      emit(name, level, [&](std::size_t r) -> std::optional<double> {
        if (col.missing[r]) return std::nullopt;
        return col.values[r] == level ? 100.0 : 0.0;
      });
    }
  }
  return rows;
}

std::size_t count_imbalanced(const std::vector<BalanceRow>& rows, double threshold) {
  return static_cast<std::size_t>(
      std::count_if(rows.begin(), rows.end(), [&](const BalanceRow& r) { return std::abs(r.std_diff_post) > threshold; }));
}

Selection select_match(const std::vector<MatchCandidate>& candidates, std::size_t max_imbalanced) {
  if (candidates.empty()) throw ValidationError("select_match needs at least one candidate");
  std::size_t best = 0;
  auto key = [&](std::size_t i) {
    const auto& c = candidates[i];
    return std::make_tuple(c.imbalanced, c.dropped, method_rank(c.method), i);
  };
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (key(i) < key(best)) best = i;
  Selection s;
  s.index = best;
  if (candidates[best].imbalanced > max_imbalanced) {
    s.meets_balance = false;
    s.warning = fmt::format(
        "no candidate match has at most {} imbalanced covariates; using {} with {} as a best effort",
        max_imbalanced, to_string(candidates[best].method), candidates[best].imbalanced);
  }
  return s;
}

std::string format_balance_csv(const std::vector<BalanceRow>& rows) {
  std::string out =
      "covariate,level,treated_before,control_before,treated_after,control_after,std_diff_before,std_diff_after,"
      "zero_variance\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", r.covariate,
                       r.level ? fmt::format("{:g}", *r.level) : std::string(), r.treated_pre, r.control_pre,
                       r.treated_post, r.control_post, r.std_diff_pre, r.std_diff_post, r.zero_variance ? 1 : 0);
  }
  return out;
}

std::string format_balance_markdown(const std::vector<BalanceRow>& rows, const BalanceLabels& labels,
                                    double threshold) {
  std::vector<std::array<std::string, 7>> cells;
  cells.push_back({"Covariate", "Before: " + labels.treated, "Before: " + labels.control,
                   "After: " + labels.treated, "After: " + labels.control, "Std. diff. before",
                   "Std. diff. after"});
  auto sd_cell = [&](double v) {
    const std::string s = format_number(v, 3);
    return std::abs(v) > threshold ? "**" + s + "**" : s;
  };
  std::string last_group;
  for (const auto& r : rows) {
    std::string label = r.covariate;
    if (r.level) {
      if (r.covariate != last_group) cells.push_back({r.covariate, "", "", "", "", "", ""});
      label = fmt::format("  {:g} (%)", *r.level);
    }
    last_group = r.level ? r.covariate : std::string();
    cells.push_back({label, format_number(r.treated_pre, 2), format_number(r.control_pre, 2),
                     format_number(r.treated_post, 2), format_number(r.control_post, 2), sd_cell(r.std_diff_pre),
                     sd_cell(r.std_diff_post)});
  }
  std::array<std::size_t, 7> width{};
  for (const auto& row : cells)
    for (std::size_t j = 0; j < 7; ++j) width[j] = std::max(width[j], row[j].size());

  auto line = [&](const std::array<std::string, 7>& row) {
    std::string s = "|";
    for (std::size_t j = 0; j < 7; ++j) {
      const std::size_t pad = width[j] - row[j].size();
      s += " " + (j == 0 ? row[j] + std::string(pad, ' ') : std::string(pad, ' ') + row[j]) + " |";
    }
    return s + "\n";
  };
  std::string out = line(cells[0]);
  out += "|";
  for (std::size_t j = 0; j < 7; ++j) out += (j == 0 ? ":" : "-") + std::string(width[j], '-') + (j == 0 ? "-" : ":") + "|";
  out += "\n";
  for (std::size_t i = 1; i < cells.size(); ++i) out += line(cells[i]);
  return out;
}

}  // namespace obsmatch
