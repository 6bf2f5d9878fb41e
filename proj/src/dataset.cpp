#include "obsmatch/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "obsmatch/common.hpp"
#include "obsmatch/propensity.hpp"

namespace obsmatch {

std::string to_string(CovariateKind kind) {
  switch (kind) {
    case CovariateKind::continuous: return "continuous";
    case CovariateKind::binary: return "binary";
    case CovariateKind::ordinal: return "ordinal";
  }
  return "continuous";
}

CovariateKind covariate_kind_from_string(const std::string& s) {
  if (s == "continuous") return CovariateKind::continuous;
  if (s == "binary") return CovariateKind::binary;
  if (s == "ordinal") return CovariateKind::ordinal;
  throw SchemaError(fmt::format("unknown covariate kind '{}'", s));
}

std::string to_string(OutcomeKind kind) {
  return kind == OutcomeKind::binary ? "binary" : "continuous";
}

OutcomeKind outcome_kind_from_string(const std::string& s) {
  if (s == "continuous") return OutcomeKind::continuous;
  if (s == "binary") return OutcomeKind::binary;
  throw SchemaError(fmt::format("unknown outcome kind '{}'", s));
}

const CovariateSpec* CovariateSchema::find(const std::string& name) const {
  for (const auto& c : covariates)
    if (c.name == name) return &c;
  return nullptr;
}

bool Column::any_missing() const {
  return std::any_of(missing.begin(), missing.end(), [](auto m) { return m != 0; });
}

std::size_t Column::observed_count() const {
  return static_cast<std::size_t>(std::count(missing.begin(), missing.end(), 0));
}

std::size_t SubjectTable::treated_count() const {
  return static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
}

namespace {

template <typename C>
auto find_named(C& columns, const std::string& name) {
  return std::find_if(columns.begin(), columns.end(),
                      [&](const auto& c) { return c.name == name; });
}

}  // namespace

const Column& SubjectTable::covariate(const std::string& name) const {
  auto it = find_named(covariates, name);
  if (it == covariates.end()) throw SchemaError(fmt::format("unknown covariate '{}'", name));
  return *it;
}

const Column& SubjectTable::outcome(const std::string& name) const {
  auto it = find_named(outcomes, name);
  if (it == outcomes.end()) throw SchemaError(fmt::format("unknown outcome '{}'", name));
  return *it;
}

const LabelColumn& SubjectTable::label(const std::string& name) const {
  auto it = find_named(labels, name);
  if (it == labels.end()) throw SchemaError(fmt::format("unknown label column '{}'", name));
  return *it;
}

std::optional<std::size_t> SubjectTable::covariate_index(const std::string& name) const {
  auto it = find_named(covariates, name);
  if (it == covariates.end()) return std::nullopt;
  return static_cast<std::size_t>(it - covariates.begin());
}

std::vector<std::string> SubjectTable::covariate_names() const {
  std::vector<std::string> names;
  names.reserve(covariates.size());
  for (const auto& c : covariates) names.push_back(c.name);
  return names;
}

namespace {

Column select_column(const Column& c, const std::vector<std::size_t>& rows) {
  Column out;
  out.name = c.name;
  out.values.reserve(rows.size());
  out.missing.reserve(rows.size());
  for (auto r : rows) {
    out.values.push_back(c.values[r]);
    out.missing.push_back(c.missing[r]);
  }
  return out;
}

}  // namespace

SubjectTable SubjectTable::select(const std::vector<std::size_t>& rows) const {
  SubjectTable out;
  out.covariate_kinds = covariate_kinds;
  for (auto r : rows) {
    out.ids.push_back(ids[r]);
    out.z.push_back(z[r]);
    out.stratum.push_back(stratum[r]);
  }
  for (const auto& c : covariates) out.covariates.push_back(select_column(c, rows));
  for (const auto& c : outcomes) out.outcomes.push_back(select_column(c, rows));
  for (const auto& l : labels) {
    LabelColumn lc{l.name, {}};
    for (auto r : rows) lc.values.push_back(l.values[r]);
    out.labels.push_back(std::move(lc));
  }
  return out;
}

Eigen::MatrixXd SubjectTable::covariate_matrix() const {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(covariates.size()));
  for (std::size_t j = 0; j < covariates.size(); ++j) {
    const auto& c = covariates[j];
    for (std::size_t i = 0; i < size(); ++i) {
      if (c.missing[i])
        throw ValidationError(fmt::format("covariate '{}' is missing for subject '{}'; impute first",
                                          c.name, ids[i]));
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c.values[i];
    }
  }
  return X;
}

Eigen::VectorXi SubjectTable::treatment_vector() const {
  Eigen::VectorXi v(static_cast<Eigen::Index>(size()));
  for (std::size_t i = 0; i < size(); ++i) v(static_cast<Eigen::Index>(i)) = z[i];
  return v;
}

void SubjectTable::validate() const {
  const auto n = ids.size();
  if (z.size() != n || stratum.size() != n)
    throw ValidationError("treatment/stratum column length differs from id column");
  if (covariate_kinds.size() != covariates.size())
    throw ValidationError("covariate kind list does not match covariate columns");
  std::unordered_set<std::string> seen;
  for (const auto& id : ids)
    if (!seen.insert(id).second) throw ValidationError(fmt::format("duplicate subject id '{}'", id));
  for (std::size_t i = 0; i < n; ++i)
    if (z[i] != 0 && z[i] != 1)
      throw ValidationError(fmt::format("row {}: treatment must be 0 or 1", i + 1));
  std::unordered_set<std::string> names;
  auto check = [&](const Column& c) {
    if (c.values.size() != n || c.missing.size() != n)
      throw ValidationError(fmt::format("column '{}' has the wrong length", c.name));
    if (!names.insert(c.name).second)
      throw ValidationError(fmt::format("duplicate column name '{}'", c.name));
  };
  for (const auto& c : covariates) check(c);
  for (const auto& c : outcomes) check(c);
  for (const auto& l : labels)
    if (l.values.size() != n)
      throw ValidationError(fmt::format("label column '{}' has the wrong length", l.name));
}

// ---------------------------------------------------------------------------
// Delimited text I/O
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == delim) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

std::string quote_if_needed(const std::string& s, char delim) {
  if (s.find(delim) == std::string::npos && s.find('"') == std::string::npos &&
      s.find('\n') == std::string::npos)
    return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

std::string format_value(double v, bool missing, const std::string& missing_token) {
  if (missing) return missing_token;
  return fmt::format("{:.17g}", v);
}

}  // namespace

SubjectTable parse_subjects(const std::string& text, const CovariateSchema& schema,
                            const FormatOptions& options) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    header = split_fields(line, options.delimiter);
    break;
  }
  if (header.empty()) throw SchemaError("input has no header row");
  for (auto& h : header) h = trim(h);

  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col.emplace(header[i], i);
  auto require = [&](const std::string& name) {
    auto it = col.find(name);
    if (it == col.end()) throw SchemaError(fmt::format("missing required column '{}'", name));
    return it->second;
  };

  const auto id_col = require(options.id_column);
  const auto z_col = require(options.treatment_column);
  const auto s_col = require(options.stratum_column);
  std::vector<std::size_t> cov_cols, out_cols, label_cols;
  for (const auto& c : schema.covariates) cov_cols.push_back(require(c.name));
  for (const auto& o : options.outcomes) out_cols.push_back(require(o.name));
  for (const auto& l : options.label_columns) label_cols.push_back(require(l));

  SubjectTable t;
  for (const auto& c : schema.covariates) {
    t.covariates.push_back(Column{c.name, {}, {}});
    t.covariate_kinds.push_back(c.kind);
  }
  for (const auto& o : options.outcomes) t.outcomes.push_back(Column{o.name, {}, {}});
  for (const auto& l : options.label_columns) t.labels.push_back(LabelColumn{l, {}});

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++row;
    auto fields = split_fields(line, options.delimiter);
    if (fields.size() != header.size())
      throw ValidationError(fmt::format("row {}: expected {} fields, found {}", row, header.size(),
                                        fields.size()));
    for (auto& f : fields) f = trim(f);

    t.ids.push_back(fields[id_col]);
    const auto& zs = fields[z_col];
    if (zs == "1") t.z.push_back(1);
    else if (zs == "0") t.z.push_back(0);
    else
      throw ValidationError(fmt::format("row {}: treatment value '{}' in column '{}' is not 0 or 1",
                                        row, zs, options.treatment_column));
    t.stratum.push_back(fields[s_col]);

    for (std::size_t j = 0; j < cov_cols.size(); ++j) {
      const auto& cell = fields[cov_cols[j]];
      const auto& spec = schema.covariates[j];
      auto& column = t.covariates[j];
      if (cell == options.missing_token) {
        column.values.push_back(0.0);
        column.missing.push_back(1);
        continue;
      }
      auto v = parse_double(cell);
      if (!v)
        throw ValidationError(fmt::format("row {}: covariate '{}' value '{}' is not numeric", row,
                                          spec.name, cell));
      if (spec.kind == CovariateKind::binary && *v != 0.0 && *v != 1.0)
        throw ValidationError(
            fmt::format("row {}: binary covariate '{}' has value '{}'", row, spec.name, cell));
      if (spec.kind == CovariateKind::ordinal && !spec.levels.empty() &&
          std::find(spec.levels.begin(), spec.levels.end(), *v) == spec.levels.end())
        throw ValidationError(fmt::format("row {}: ordinal covariate '{}' has undeclared level '{}'",
                                          row, spec.name, cell));
      column.values.push_back(*v);
      column.missing.push_back(0);
    }
    for (std::size_t j = 0; j < out_cols.size(); ++j) {
      const auto& cell = fields[out_cols[j]];
      auto& column = t.outcomes[j];
      if (cell == options.missing_token) {
        column.values.push_back(0.0);
        column.missing.push_back(1);
        continue;
      }
      auto v = parse_double(cell);
      if (!v)
        throw ValidationError(fmt::format("row {}: outcome '{}' value '{}' is not numeric", row,
                                          column.name, cell));
      if (options.outcomes[j].kind == OutcomeKind::binary && *v != 0.0 && *v != 1.0)
        throw ValidationError(
            fmt::format("row {}: binary outcome '{}' has value '{}'", row, column.name, cell));
      column.values.push_back(*v);
      column.missing.push_back(0);
    }
    for (std::size_t j = 0; j < label_cols.size(); ++j)
      t.labels[j].values.push_back(fields[label_cols[j]]);
  }
  t.validate();
  return t;
}

SubjectTable load_subjects(const std::string& path, const CovariateSchema& schema,
                           const FormatOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot open '{}'", path));
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_subjects(buf.str(), schema, options);
}

std::string format_subjects(const SubjectTable& table, const FormatOptions& options) {
  const char d = options.delimiter;
  std::string out;
  std::vector<std::string> header{options.id_column, options.treatment_column,
                                  options.stratum_column};
  for (const auto& c : table.covariates) header.push_back(c.name);
  for (const auto& c : table.outcomes) header.push_back(c.name);
  for (const auto& l : table.labels) header.push_back(l.name);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += d;
    out += quote_if_needed(header[i], d);
  }
  out += '\n';
  for (std::size_t r = 0; r < table.size(); ++r) {
    out += quote_if_needed(table.ids[r], d);
    out += d;
    out += table.z[r] ? '1' : '0';
    out += d;
    out += quote_if_needed(table.stratum[r], d);
    for (const auto& c : table.covariates) {
      out += d;
      out += format_value(c.values[r], c.missing[r], options.missing_token);
    }
    for (const auto& c : table.outcomes) {
      out += d;
      out += format_value(c.values[r], c.missing[r], options.missing_token);
    }
    for (const auto& l : table.labels) {
      out += d;
      out += quote_if_needed(l.values[r], d);
    }
    out += '\n';
  }
  return out;
}

void save_subjects(const std::string& path, const SubjectTable& table,
                   const FormatOptions& options) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError(fmt::format("cannot write '{}'", path));
  out << format_subjects(table, options);
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

std::pair<SubjectTable, ScalingReport> scale_covariates(const SubjectTable& table) {
  SubjectTable out = table;
  ScalingReport report;
  for (std::size_t j = 0; j < out.covariates.size(); ++j) {
    if (out.covariate_kinds[j] == CovariateKind::binary) continue;
    auto& c = out.covariates[j];
    ScalingEntry e;
    e.name = c.name;
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < c.values.size(); ++i)
      if (!c.missing[i]) {
        sum += c.values[i];
        ++n;
      }
    if (n == 0) {
      e.zero_variance = true;
      report.entries.push_back(e);
      continue;
    }
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < c.values.size(); ++i)
      if (!c.missing[i]) ss += (c.values[i] - mean) * (c.values[i] - mean);
    const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    e.mean = mean;
    e.sd = sd;
    if (!(sd > 0.0)) {
      e.zero_variance = true;
      report.entries.push_back(e);
      continue;
    }
    e.shift = mean;
    e.multiplier = 0.5 / sd;
    for (std::size_t i = 0; i < c.values.size(); ++i)
      if (!c.missing[i]) c.values[i] = (c.values[i] - mean) * e.multiplier;
    report.entries.push_back(e);
  }
  return {std::move(out), std::move(report)};
}

SubjectTable augment_missingness(const SubjectTable& table) {
  SubjectTable out = table;
  std::vector<Column> indicators;
  for (std::size_t j = 0; j < out.covariates.size(); ++j) {
    auto& c = out.covariates[j];
    if (!c.any_missing()) continue;
    const auto observed = c.observed_count();
    if (observed == 0)
      throw ValidationError(
          fmt::format("covariate '{}' is missing for every subject; cannot impute", c.name));
    double fill = 0.0;
    if (out.covariate_kinds[j] == CovariateKind::binary) {
      std::size_t ones = 0;
      for (std::size_t i = 0; i < c.values.size(); ++i)
        if (!c.missing[i] && c.values[i] == 1.0) ++ones;
      fill = 2 * ones > observed ? 1.0 : 0.0;
    } else {
      double sum = 0.0;
      for (std::size_t i = 0; i < c.values.size(); ++i)
        if (!c.missing[i]) sum += c.values[i];
      fill = sum / static_cast<double>(observed);
    }
    Column ind{c.name + kMissingSuffix, {}, {}};
    ind.values.reserve(c.values.size());
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      ind.values.push_back(c.missing[i] ? 1.0 : 0.0);
      ind.missing.push_back(0);
      if (c.missing[i]) {
        c.values[i] = fill;
        c.missing[i] = 0;
      }
    }
    indicators.push_back(std::move(ind));
  }
  for (auto& ind : indicators) {
    out.covariates.push_back(std::move(ind));
    out.covariate_kinds.push_back(CovariateKind::binary);
  }
  return out;
}

namespace {

bool is_indicator(const std::string& name) {
  const std::string suffix = kMissingSuffix;
  return name.size() > suffix.size() &&
         name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::pair<SubjectTable, std::vector<MissingnessDrop>> drop_missingness_determined(
    const SubjectTable& table) {
  std::vector<MissingnessDrop> ledger;
  std::vector<std::uint8_t> drop(table.size(), 0);
  for (const auto& c : table.covariates) {
    if (!is_indicator(c.name)) continue;
    std::size_t flagged = 0, flagged_treated = 0;
    for (std::size_t i = 0; i < table.size(); ++i)
      if (c.values[i] == 1.0) {
        ++flagged;
        flagged_treated += static_cast<std::size_t>(table.z[i]);
      }
    if (flagged == 0) continue;
    if (flagged_treated != 0 && flagged_treated != flagged) continue;
    for (std::size_t i = 0; i < table.size(); ++i)
      if (c.values[i] == 1.0) {
        drop[i] = 1;
        ledger.push_back(MissingnessDrop{table.ids[i], c.name});
      }
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < table.size(); ++i)
    if (!drop[i]) keep.push_back(i);
  return {table.select(keep), std::move(ledger)};
}

AttritionResult attrition_check(const SubjectTable& table, const std::string& outcome_name) {
  const auto& outcome = table.outcome(outcome_name);
  AttritionResult result;
  result.n_missing = table.size() - outcome.observed_count();
  result.n_available = outcome.observed_count();
  if (result.n_missing == 0 || result.n_available == 0)
    throw ValidationError(fmt::format(
        "attrition check for '{}' needs both missing and observed values", outcome_name));

  const Eigen::MatrixXd Xc = table.covariate_matrix();
  Eigen::MatrixXd X(Xc.rows(), Xc.cols() + 1);
  X.leftCols(Xc.cols()) = Xc;
  Eigen::VectorXi available(Xc.rows());
  for (Eigen::Index i = 0; i < Xc.rows(); ++i) {
    X(i, Xc.cols()) = table.z[static_cast<std::size_t>(i)];
    available(i) = outcome.missing[static_cast<std::size_t>(i)] ? 0 : 1;
  }
  const auto fit = fit_logistic(X, available);
  const Eigen::Index zi = X.cols();  // +1 for the intercept, -1 for zero-based
  result.coef = fit.beta(zi);
  result.separated = fit.separated || !fit.converged;
  if (!result.separated) {
    const double se = fit.standard_errors(zi);
    if (std::isfinite(se) && se > 0) {
      result.p_value = 2.0 * normal_sf(std::abs(result.coef / se));
    } else {
      result.separated = true;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

bool RowFilter::matches(const SubjectTable& table, std::size_t row) const {
  std::string text;
  std::optional<double> number;
  if (column == "z") {
    number = table.z[row];
    text = std::to_string(table.z[row]);
  } else if (column == "stratum") {
    text = table.stratum[row];
  } else if (auto it = find_named(table.labels, column); it != table.labels.end()) {
    text = it->values[row];
  } else if (auto ci = find_named(table.covariates, column); ci != table.covariates.end()) {
    if (ci->missing[row]) return false;
    number = ci->values[row];
  } else if (auto oi = find_named(table.outcomes, column); oi != table.outcomes.end()) {
    if (oi->missing[row]) return false;
    number = oi->values[row];
  } else {
    throw SchemaError(fmt::format("filter references unknown column '{}'", column));
  }

  auto equal_to = [&](const std::string& v) {
    if (number) {
      auto pv = parse_double(v);
      return pv && *pv == *number;
    }
    return text == v;
  };
  if (op == "==" || op == "in")
    return std::any_of(values.begin(), values.end(), equal_to);
  if (op == "!=" || op == "not_in")
    return std::none_of(values.begin(), values.end(), equal_to);
  if (values.size() != 1) throw SchemaError(fmt::format("filter '{}' needs one value", op));
  double lhs = 0.0;
  if (number) lhs = *number;
  else if (auto pv = parse_double(text)) lhs = *pv;
  else throw SchemaError(fmt::format("filter '{}' on non-numeric column '{}'", op, column));
  auto rhs = parse_double(values[0]);
  if (!rhs) throw SchemaError(fmt::format("filter value '{}' is not numeric", values[0]));
  if (op == "<") return lhs < *rhs;
  if (op == "<=") return lhs <= *rhs;
  if (op == ">") return lhs > *rhs;
  if (op == ">=") return lhs >= *rhs;
  throw SchemaError(fmt::format("unknown filter operator '{}'", op));
}

std::vector<std::size_t> rows_matching(const SubjectTable& table,
                                       const std::vector<RowFilter>& filters) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < table.size(); ++i) {
    bool ok = true;
    for (const auto& f : filters)
      if (!f.matches(table, i)) {
        ok = false;
        break;
      }
    if (ok) rows.push_back(i);
  }
  return rows;
}

SubjectTable apply_filters(const SubjectTable& table, const std::vector<RowFilter>& filters) {
  return table.select(rows_matching(table, filters));
}

// ---------------------------------------------------------------------------
// Synthetic cohorts
// ---------------------------------------------------------------------------

CovariateSchema synthetic_schema(const SyntheticSpec& spec) {
  CovariateSchema schema;
  for (std::size_t j = 0; j < spec.continuous_covariates; ++j)
    schema.covariates.push_back({fmt::format("x{}", j + 1), CovariateKind::continuous, {}});
  for (std::size_t j = 0; j < spec.binary_covariates; ++j)
    schema.covariates.push_back(
        {fmt::format("b{}", j + 1), CovariateKind::binary, {}});
  return schema;
}

FormatOptions synthetic_format(const SyntheticSpec& spec) {
  FormatOptions f;
  f.outcomes.push_back({kSyntheticOutcome, OutcomeKind::continuous});
  if (spec.binary_outcome) f.outcomes.push_back({kSyntheticBinaryOutcome, OutcomeKind::binary});
  f.label_columns.push_back(kSyntheticGroupLabel);
  return f;
}

SyntheticCohort generate_synthetic(const SyntheticSpec& spec) {
  const std::size_t p = spec.continuous_covariates + spec.binary_covariates;
  if (spec.n < 2) throw ValidationError("synthetic cohort needs n >= 2");
  if (p == 0) throw ValidationError("synthetic cohort needs at least one covariate");
  if (spec.strata == 0) throw ValidationError("synthetic cohort needs at least one stratum");
  if (spec.propensity_beta.size() > p || spec.outcome_beta.size() > p)
    throw ValidationError("coefficient vector longer than the covariate count");
  auto in_unit = [](double r) { return r >= 0.0 && r < 1.0; };
  if (!in_unit(spec.covariate_missing_rate) || !in_unit(spec.outcome_missing_rate) ||
      !(spec.sport_fraction >= 0.0 && spec.sport_fraction <= 1.0))
    throw ValidationError("synthetic rates must lie in [0, 1)");
  if (!(spec.noise_sd >= 0.0)) throw ValidationError("noise_sd must be nonnegative");

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> stratum_draw(0, spec.strata - 1);

  auto coef = [](const std::vector<double>& v, std::size_t j) { return j < v.size() ? v[j] : 0.0; };

  const auto schema = synthetic_schema(spec);
  SyntheticCohort cohort;
  cohort.true_tau = spec.tau;
  auto& t = cohort.table;
  for (const auto& c : schema.covariates) {
    t.covariates.push_back(Column{c.name, {}, {}});
    t.covariate_kinds.push_back(c.kind);
  }
  t.outcomes.push_back(Column{kSyntheticOutcome, {}, {}});
  if (spec.binary_outcome) t.outcomes.push_back(Column{kSyntheticBinaryOutcome, {}, {}});
  t.labels.push_back(LabelColumn{kSyntheticGroupLabel, {}});

  const int width = static_cast<int>(std::to_string(spec.n).size());
  std::vector<double> x(p);
  for (std::size_t i = 0; i < spec.n; ++i) {
    // A shared latent factor induces mild correlation among the continuous covariates.
    const double factor = normal(rng);
    for (std::size_t j = 0; j < spec.continuous_covariates; ++j)
      x[j] = 0.4 * factor + std::sqrt(1.0 - 0.16) * normal(rng);
    for (std::size_t j = 0; j < spec.binary_covariates; ++j)
      x[spec.continuous_covariates + j] = unif(rng) < logistic(0.5 * factor) ? 1.0 : 0.0;
    const std::size_t s = stratum_draw(rng);

    double eta = spec.propensity_intercept, mu = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      eta += coef(spec.propensity_beta, j) * x[j];
      mu += coef(spec.outcome_beta, j) * x[j];
    }
    const double e = logistic(eta);
    const int z = unif(rng) < e ? 1 : 0;
    const double rc = mu + spec.noise_sd * normal(rng);
    const double y = rc + spec.tau * z;
    const double pb =
        logistic(spec.binary_intercept + 0.5 * mu + spec.binary_log_odds_effect * z);
    const double yb = unif(rng) < pb ? 1.0 : 0.0;
    const bool sport = unif(rng) < spec.sport_fraction;

    t.ids.push_back(fmt::format("s{:0{}}", i + 1, width));
    t.z.push_back(z);
    t.stratum.push_back(fmt::format("g{}", s + 1));
    for (std::size_t j = 0; j < p; ++j) {
      const bool miss = spec.covariate_missing_rate > 0 && unif(rng) < spec.covariate_missing_rate;
      t.covariates[j].values.push_back(miss ? 0.0 : x[j]);
      t.covariates[j].missing.push_back(miss ? 1 : 0);
    }
    const bool out_miss = spec.outcome_missing_rate > 0 && unif(rng) < spec.outcome_missing_rate;
    t.outcomes[0].values.push_back(out_miss ? 0.0 : y);
    t.outcomes[0].missing.push_back(out_miss ? 1 : 0);
    if (spec.binary_outcome) {
      t.outcomes[1].values.push_back(out_miss ? 0.0 : yb);
      t.outcomes[1].missing.push_back(out_miss ? 1 : 0);
    }
    t.labels[0].values.push_back(z ? "treated" : (sport ? "sport" : "nonsport"));
    cohort.true_propensity.push_back(e);
    cohort.control_potential_outcome.push_back(rc);
  }
  t.validate();
  return cohort;
}

}  // namespace obsmatch
