#include "obsmatch/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <fmt/format.h>

#include "obsmatch/common.hpp"
#include "obsmatch/min_cost_flow.hpp"
#include "obsmatch/propensity.hpp"

namespace obsmatch {

namespace {

// Average ranks (1-based) of a column; ties share the mean of their positions.
Eigen::VectorXd midranks(const Eigen::VectorXd& v) {
  const auto n = static_cast<std::size_t>(v.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  Eigen::VectorXd r(v.size());
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

DistanceMatrix rank_mahalanobis(const Eigen::MatrixXd& X_treated, const Eigen::MatrixXd& X_control) {
  if (X_treated.cols() != X_control.cols())
    throw ValidationError("rank_mahalanobis: treated and control covariate dimensions differ");
  const Eigen::Index nt = X_treated.rows(), nc = X_control.rows(), n = nt + nc;
  if (n < 2) throw ValidationError("rank_mahalanobis needs at least two subjects");

  DistanceMatrix out;
  out.d = Eigen::MatrixXd::Zero(nt, nc);
  if (nt == 0 || nc == 0) return out;

  Eigen::MatrixXd pooled(n, X_treated.cols());
  pooled << X_treated, X_control;

  std::vector<Eigen::VectorXd> rank_cols;
  for (Eigen::Index j = 0; j < pooled.cols(); ++j) {
    const Eigen::VectorXd col = pooled.col(j);
    if (col.maxCoeff() == col.minCoeff()) {
      out.warnings.push_back(fmt::format("covariate column {} is constant; dropped from distance", j));
      continue;
    }
    rank_cols.push_back(midranks(col));
  }
  if (rank_cols.empty()) return out;

  const auto p = static_cast<Eigen::Index>(rank_cols.size());
  Eigen::MatrixXd R(n, p);
  for (Eigen::Index j = 0; j < p; ++j) R.col(j) = rank_cols[static_cast<std::size_t>(j)];
  const Eigen::MatrixXd centered = R.rowwise() - R.colwise().mean();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  const double ridge = 1e-8 * cov.trace() / static_cast<double>(p);
  cov.diagonal().array() += ridge;
  const Eigen::MatrixXd inv = cov.ldlt().solve(Eigen::MatrixXd::Identity(p, p));

  for (Eigen::Index i = 0; i < nt; ++i) {
    for (Eigen::Index j = 0; j < nc; ++j) {
      const Eigen::VectorXd diff = (R.row(i) - R.row(nt + j)).transpose();
      out.d(i, j) = std::max(0.0, diff.dot(inv * diff));
    }
  }
  return out;
}

void apply_caliper(DistanceMatrix& D, std::span<const double> scores_treated,
                   std::span<const double> scores_control, double width_sd, double penalty,
                   std::optional<double> logit_sd) {
  if (width_sd <= 0) throw ValidationError("caliper width must be positive");
  if (static_cast<Eigen::Index>(scores_treated.size()) != D.d.rows() ||
      static_cast<Eigen::Index>(scores_control.size()) != D.d.cols())
    throw ValidationError("apply_caliper: score counts do not match the distance matrix");

  std::vector<double> lt, lc;
  for (double s : scores_treated) lt.push_back(logit(clamp_score(s)));
  for (double s : scores_control) lc.push_back(logit(clamp_score(s)));
  double sd = 0.0;
  if (logit_sd) {
    sd = *logit_sd;
  } else {
    std::vector<double> pooled = lt;
    pooled.insert(pooled.end(), lc.begin(), lc.end());
    sd = sample_sd(pooled);
  }
  const double width = width_sd * sd;
  for (std::size_t i = 0; i < lt.size(); ++i) {
    for (std::size_t j = 0; j < lc.size(); ++j) {
      const double excess = std::abs(lt[i] - lc[j]) - width;
      if (excess > 0)
        D.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += penalty * excess;
    }
  }
}

TrimResult trim_common_support(std::span<const double> scores, std::span<const int> z) {
  if (scores.size() != z.size()) throw ValidationError("trim_common_support: size mismatch");
  TrimResult out;
  out.min_control = std::numeric_limits<double>::infinity();
  out.max_treated = -std::numeric_limits<double>::infinity();
  std::size_t nt = 0, nc = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (z[i] == 1) {
      out.max_treated = std::max(out.max_treated, scores[i]);
      ++nt;
    } else {
      out.min_control = std::min(out.min_control, scores[i]);
      ++nc;
    }
  }
  if (nt == 0 || nc == 0) throw ValidationError("common-support trimming needs both arms");

  std::size_t dt = 0, dc = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool drop = z[i] == 1 ? scores[i] < out.min_control : scores[i] > out.max_treated;
    if (drop) {
      out.dropped.push_back(i);
      (z[i] == 1 ? dt : dc)++;
    }
  }
  if (dt == nt) throw ValidationError("common-support trimming removed every treated subject");
  if (dc == nc) throw ValidationError("common-support trimming removed every control subject");
  return out;
}

int propensity_interval(double e) {
  if (std::isnan(e)) throw ValidationError("propensity_interval: score is NaN");
  if (e > 1.0 / 3.0) return 1;
  if (e <= 1.0 / 16.0) return 15;
  for (int k = 2; k <= 14; ++k) {
    if (e > 1.0 / (k + 2) && e <= 1.0 / (k + 1)) return k;
  }
  return 15;  // unreachable: the intervals partition [0, 1]
}

BucketMatch match_bucket(std::size_t n_treated, std::size_t n_control, int k, const Eigen::MatrixXd& D) {
  if (k < 1) throw ValidationError("match_bucket: k must be at least 1");
  if (static_cast<std::size_t>(D.rows()) != n_treated || static_cast<std::size_t>(D.cols()) != n_control)
    throw ValidationError("match_bucket: distance matrix shape does not match the cell");

  BucketMatch out;
  if (n_treated == 0 || n_control == 0) {
    for (std::size_t i = 0; i < n_treated; ++i) out.dropped_treated.push_back(i);
    for (std::size_t j = 0; j < n_control; ++j) out.dropped_controls.push_back(j);
    return out;
  }

  std::vector<std::int64_t> cost(n_treated * n_control);
  std::int64_t maxcost = 0;
  for (std::size_t i = 0; i < n_treated; ++i) {
    for (std::size_t j = 0; j < n_control; ++j) {
      const double d = D(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (!std::isfinite(d) || d < 0) throw ValidationError("match_bucket: distances must be finite and nonnegative");
      if (d * static_cast<double>(kCostScale) > 1e15)
        throw ValidationError("match_bucket: distance too large for integer scaling");
      cost[i * n_control + j] = scaled_cost(d);
      maxcost = std::max(maxcost, cost[i * n_control + j]);
    }
  }

  const auto kk = static_cast<std::size_t>(k);
  const int source = 0;
  const int sink = static_cast<int>(n_treated + n_control + 1);
  MinCostFlow flow(sink + 1);
  auto tnode = [](std::size_t i) { return static_cast<int>(i + 1); };
  auto cnode = [&](std::size_t j) { return static_cast<int>(n_treated + 1 + j); };

  std::int64_t target = 0;
  std::int64_t big = 0;
  if (n_control >= kk * n_treated) {
    target = static_cast<std::int64_t>(kk * n_treated);
    for (std::size_t i = 0; i < n_treated; ++i) flow.add_edge(source, tnode(i), k, 0);
  } else if (n_control >= n_treated) {
    // Every control is used and each treated gets 1..k. The first control of
    // each treated arrives over a free edge; further controls pay `big`,
    // which exceeds any achievable difference in real cost, so every optimum
    // covers all treated and then minimises the distance.
    target = static_cast<std::int64_t>(n_control);
    const std::int64_t limit = std::numeric_limits<std::int64_t>::max() / 8;
    if (maxcost > 0 && target > limit / maxcost) throw ValidationError("match_bucket: cost overflow");
    big = target * maxcost + 1;
    if (big > limit / std::max<std::int64_t>(target, 1)) throw ValidationError("match_bucket: cost overflow");
    for (std::size_t i = 0; i < n_treated; ++i) {
      flow.add_edge(source, tnode(i), 1, 0);
      if (k > 1) flow.add_edge(source, tnode(i), k - 1, big);
    }
  } else {
    target = static_cast<std::int64_t>(n_control);
    for (std::size_t i = 0; i < n_treated; ++i) flow.add_edge(source, tnode(i), 1, 0);
  }

  std::vector<int> pair_edge(n_treated * n_control);
  for (std::size_t i = 0; i < n_treated; ++i)
    for (std::size_t j = 0; j < n_control; ++j)
      pair_edge[i * n_control + j] = flow.add_edge(tnode(i), cnode(j), 1, cost[i * n_control + j]);
  for (std::size_t j = 0; j < n_control; ++j) flow.add_edge(cnode(j), sink, 1, 0);

  const auto result = flow.solve(source, sink, target);
  if (result.flow != target) throw std::runtime_error("match_bucket: flow network infeasible");

  std::vector<std::vector<std::size_t>> assigned(n_treated);
  std::vector<bool> used(n_control, false);
  for (std::size_t i = 0; i < n_treated; ++i) {
    for (std::size_t j = 0; j < n_control; ++j) {
      if (flow.flow_on(pair_edge[i * n_control + j]) > 0) {
        assigned[i].push_back(j);
        used[j] = true;
        out.scaled_cost += cost[i * n_control + j];
      }
    }
  }
  for (std::size_t i = 0; i < n_treated; ++i) {
    if (assigned[i].empty())
      out.dropped_treated.push_back(i);
    else
      out.sets.emplace_back(i, std::move(assigned[i]));
  }
  for (std::size_t j = 0; j < n_control; ++j)
    if (!used[j]) out.dropped_controls.push_back(j);
  return out;
}

std::string to_string(DropReason reason) {
  switch (reason) {
    case DropReason::missingness_determined: return "missingness-determined";
    case DropReason::common_support: return "common-support";
    case DropReason::optimal_discard: return "optimal-discard";
    case DropReason::unmatched_leftover: return "unmatched-leftover";
  }
  return "unknown";
}

DropReason drop_reason_from_string(const std::string& s) {
  for (auto r : {DropReason::missingness_determined, DropReason::common_support,
                 DropReason::optimal_discard, DropReason::unmatched_leftover})
    if (to_string(r) == s) return r;
  throw ValidationError(fmt::format("unknown drop reason '{}'", s));
}

namespace {

void count_arm(ArmCount& c, int z) { (z == 1 ? c.treated : c.control)++; }

void fill_counts(MatchResult& result, const std::unordered_map<std::string, std::size_t>& row_of,
                 const SubjectTable& table) {
  result.n_miss = {};
  result.n_cs = {};
  result.n_total = {};
  for (const auto& d : result.dropped) {
    const int z = table.z[row_of.at(d.id)];
    if (d.reason == DropReason::missingness_determined) count_arm(result.n_miss, z);
    if (d.reason == DropReason::common_support) count_arm(result.n_cs, z);
  }
  for (const auto& s : result.sets) {
    result.n_total.treated += 1;
    result.n_total.control += s.controls.size();
  }
}

std::unordered_map<std::string, std::size_t> index_ids(const SubjectTable& table) {
  std::unordered_map<std::string, std::size_t> m;
  for (std::size_t r = 0; r < table.size(); ++r) m.emplace(table.ids[r], r);
  return m;
}

}  // namespace

MatchResult build_match(const SubjectTable& table, std::span<const double> scores,
                        const MatchConfig& config) {
  if (scores.size() != table.size()) throw ValidationError("build_match: one score per subject is required");
  if (config.max_controls < 1 || config.max_controls > kMaxControls)
    throw ValidationError(fmt::format("max_controls must be in 1..{}", kMaxControls));

  MatchResult result;
  const auto row_of = index_ids(table);

  // Stage 1: missingness-determined subjects.
  const auto [kept, miss_drops] = drop_missingness_determined(table);
  std::set<std::string> miss_ids;
  for (const auto& d : miss_drops) miss_ids.insert(d.id);
  for (std::size_t r = 0; r < table.size(); ++r)
    if (miss_ids.count(table.ids[r])) result.dropped.push_back({table.ids[r], DropReason::missingness_determined});

  std::vector<std::size_t> rows;  // indices into `table`
  for (std::size_t r = 0; r < table.size(); ++r) {
    if (miss_ids.count(table.ids[r])) continue;
    const double s = scores[r];
    if (!(s >= 0.0 && s <= 1.0))
      throw ValidationError(fmt::format("subject '{}' has no valid propensity score", table.ids[r]));
    rows.push_back(r);
  }

  // Stage 2: common support.
  std::vector<double> sc;
  std::vector<int> zz;
  for (auto r : rows) {
    sc.push_back(scores[r]);
    zz.push_back(table.z[r]);
  }
  const auto trim = trim_common_support(sc, zz);
  std::vector<bool> trimmed(rows.size(), false);
  for (auto i : trim.dropped) {
    trimmed[i] = true;
    result.dropped.push_back({table.ids[rows[i]], DropReason::common_support});
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (!trimmed[i]) eligible.push_back(rows[i]);

  std::vector<double> logits;
  for (auto r : eligible) logits.push_back(logit(clamp_score(scores[r])));
  const double logit_sd = sample_sd(logits);

  // Stage 3: stratum x interval cells.
  const Eigen::MatrixXd X = table.covariate_matrix();
  std::map<std::pair<std::string, int>, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> cells;
  for (auto r : eligible) {
    auto& cell = cells[{table.stratum[r], propensity_interval(scores[r])}];
    (table.z[r] == 1 ? cell.first : cell.second).push_back(r);
  }

  std::vector<DroppedSubject> cell_drops;
  for (auto& [key, cell] : cells) {
    auto& [treated, controls] = cell;
    auto by_id = [&](std::size_t a, std::size_t b) { return table.ids[a] < table.ids[b]; };
    std::sort(treated.begin(), treated.end(), by_id);
    std::sort(controls.begin(), controls.end(), by_id);
    if (treated.empty() || controls.empty()) {
      for (auto r : treated) cell_drops.push_back({table.ids[r], DropReason::unmatched_leftover});
      for (auto r : controls) cell_drops.push_back({table.ids[r], DropReason::unmatched_leftover});
      continue;
    }

    Eigen::MatrixXd Xt(static_cast<Eigen::Index>(treated.size()), X.cols());
    Eigen::MatrixXd Xc(static_cast<Eigen::Index>(controls.size()), X.cols());
    std::vector<double> st, scn;
    for (std::size_t i = 0; i < treated.size(); ++i) {
      Xt.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(treated[i]));
      st.push_back(scores[treated[i]]);
    }
    for (std::size_t j = 0; j < controls.size(); ++j) {
      Xc.row(static_cast<Eigen::Index>(j)) = X.row(static_cast<Eigen::Index>(controls[j]));
      scn.push_back(scores[controls[j]]);
    }
    // Constant columns within a small cell are routine (binary covariates),
    // so the per-column warnings are not forwarded.
    DistanceMatrix D = rank_mahalanobis(Xt, Xc);
    double penalty = 0.0;
    if (config.caliper_penalty) {
      penalty = *config.caliper_penalty;
    } else {
      const double mean = D.d.size() > 0 ? D.d.mean() : 0.0;
      penalty = config.caliper_penalty_multiplier * (mean > 0 ? mean : 1.0);
    }
    apply_caliper(D, st, scn, config.caliper_width_sd, penalty, logit_sd);

    const int k = std::min(key.second, config.max_controls);
    const auto bucket = match_bucket(treated.size(), controls.size(), k, D.d);
    for (const auto& [ti, cis] : bucket.sets) {
      MatchedSet set;
      set.treated = table.ids[treated[ti]];
      for (auto cj : cis) set.controls.push_back(table.ids[controls[cj]]);
      std::sort(set.controls.begin(), set.controls.end());
      set.stratum = key.first;
      set.interval = key.second;
      result.sets.push_back(std::move(set));
    }
    for (auto ti : bucket.dropped_treated) cell_drops.push_back({table.ids[treated[ti]], DropReason::optimal_discard});
    for (auto cj : bucket.dropped_controls) cell_drops.push_back({table.ids[controls[cj]], DropReason::optimal_discard});
  }
  std::sort(cell_drops.begin(), cell_drops.end(),
            [](const DroppedSubject& a, const DroppedSubject& b) { return a.id < b.id; });
  result.dropped.insert(result.dropped.end(), cell_drops.begin(), cell_drops.end());

  std::sort(result.sets.begin(), result.sets.end(), [](const MatchedSet& a, const MatchedSet& b) {
    return std::tie(a.stratum, a.interval, a.treated) < std::tie(b.stratum, b.interval, b.treated);
  });
  fill_counts(result, row_of, table);
  return result;
}

std::map<int, std::size_t> composition(const MatchResult& result, int max_controls) {
  std::map<int, std::size_t> out;
  for (int j = 1; j <= max_controls; ++j) out[j] = 0;
  for (const auto& s : result.sets) {
    const int c = static_cast<int>(s.controls.size());
    if (c < 1 || c > max_controls) throw ValidationError("matched set size outside 1..max_controls");
    ++out[c];
  }
  return out;
}

std::string format_match_sets(const MatchResult& result) {
  std::string out;
  for (const auto& s : result.sets) out += fmt::format("{}: {}\n", s.treated, fmt::join(s.controls, ","));
  return out;
}

std::string format_match_ledger(const MatchResult& result) {
  std::string out = "id,reason\n";
  for (const auto& d : result.dropped) out += fmt::format("{},{}\n", d.id, to_string(d.reason));
  return out;
}

namespace {

std::string trim_ws(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

MatchResult parse_match(const std::string& sets_text, const std::string& ledger_text,
                        const SubjectTable& table, std::span<const double> scores) {
  if (!scores.empty() && scores.size() != table.size())
    throw ValidationError("parse_match: scores must align with the table");
  const auto row_of = index_ids(table);
  auto lookup = [&](const std::string& id) {
    const auto it = row_of.find(id);
    if (it == row_of.end()) throw ValidationError(fmt::format("match file names unknown subject '{}'", id));
    return it->second;
  };

  MatchResult result;
  std::set<std::string> seen;
  auto claim = [&](const std::string& id) {
    if (!seen.insert(id).second) throw ValidationError(fmt::format("subject '{}' appears twice in the match", id));
  };

  std::istringstream sets_in(sets_text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(sets_in, line)) {
    ++lineno;
    line = trim_ws(line);
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ValidationError(fmt::format("match sets line {}: missing ':'", lineno));
    MatchedSet set;
    set.treated = trim_ws(line.substr(0, colon));
    const auto tr = lookup(set.treated);
    if (table.z[tr] != 1) throw ValidationError(fmt::format("match sets line {}: '{}' is not treated", lineno, set.treated));
    claim(set.treated);
    std::istringstream cs(line.substr(colon + 1));
    std::string c;
    while (std::getline(cs, c, ',')) {
      c = trim_ws(c);
      if (c.empty()) continue;
      const auto cr = lookup(c);
      if (table.z[cr] != 0) throw ValidationError(fmt::format("match sets line {}: '{}' is not a control", lineno, c));
      if (table.stratum[cr] != table.stratum[tr])
        throw ValidationError(fmt::format("match sets line {}: set spans strata", lineno));
      claim(c);
      set.controls.push_back(c);
    }
    if (set.controls.empty() || set.controls.size() > static_cast<std::size_t>(kMaxControls))
      throw ValidationError(fmt::format("match sets line {}: set needs 1..{} controls", lineno, kMaxControls));
    set.stratum = table.stratum[tr];
    set.interval = scores.empty() ? 0 : propensity_interval(scores[tr]);
    result.sets.push_back(std::move(set));
  }

  std::istringstream ledger_in(ledger_text);
  lineno = 0;
  while (std::getline(ledger_in, line)) {
    ++lineno;
    line = trim_ws(line);
    if (line.empty() || (lineno == 1 && line == "id,reason")) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw ValidationError(fmt::format("match ledger line {}: expected id,reason", lineno));
    DroppedSubject d{trim_ws(line.substr(0, comma)), drop_reason_from_string(trim_ws(line.substr(comma + 1)))};
    lookup(d.id);
    claim(d.id);
    result.dropped.push_back(std::move(d));
  }
  fill_counts(result, row_of, table);
  return result;
}

}  // namespace obsmatch
