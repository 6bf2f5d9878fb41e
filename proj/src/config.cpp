#include "obsmatch/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "obsmatch/common.hpp"
#include "obsmatch/matching.hpp"

namespace obsmatch {

using nlohmann::json;

namespace {

// Reads keys out of one JSON object and rejects any it did not consume.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ValidationError(fmt::format("config: '{}' must be an object", where_));
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError(fmt::format("config: '{}.{}' has the wrong type ({})", where_, key, e.what()));
    }
  }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError(fmt::format("config: unknown key '{}.{}'", where_, k));
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json filter_to_json(const RowFilter& f) { return {{"column", f.column}, {"op", f.op}, {"values", f.values}}; }

RowFilter filter_from_json(const json& j, const std::string& where) {
  Reader r(j, where);
  RowFilter f;
  r.get("column", f.column);
  r.get("op", f.op);
  r.get("values", f.values);
  r.finish();
  static const std::set<std::string> ops{"==", "!=", "<", "<=", ">", ">=", "in", "not_in"};
  if (f.column.empty()) throw ValidationError(fmt::format("config: '{}' needs a column", where));
  if (!ops.count(f.op)) throw ValidationError(fmt::format("config: '{}' has unknown operator '{}'", where, f.op));
  return f;
}

std::vector<RowFilter> filters_from_json(const json* j, const std::string& where) {
  std::vector<RowFilter> out;
  if (!j) return out;
  if (!j->is_array()) throw ValidationError(fmt::format("config: '{}' must be a list", where));
  for (std::size_t i = 0; i < j->size(); ++i) out.push_back(filter_from_json((*j)[i], fmt::format("{}[{}]", where, i)));
  return out;
}

json filters_to_json(const std::vector<RowFilter>& fs) {
  json a = json::array();
  for (const auto& f : fs) a.push_back(filter_to_json(f));
  return a;
}

json bart_to_json(const BartParams& b) {
  return {{"num_trees", b.num_trees}, {"alpha", b.alpha},     {"beta", b.beta_depth},
          {"k", b.k},                 {"nu", b.nu},           {"q", b.q},
          {"burn_in", b.burn_in},     {"draws", b.draws},     {"prob_grow", b.prob_grow},
          {"prob_prune", b.prob_prune}, {"prob_change", b.prob_change}};
}

BartParams bart_from_json(const json& j, const std::string& where, BartParams b) {
  Reader r(j, where);
  r.get("num_trees", b.num_trees);
  r.get("alpha", b.alpha);
  r.get("beta", b.beta_depth);
  r.get("k", b.k);
  r.get("nu", b.nu);
  r.get("q", b.q);
  r.get("burn_in", b.burn_in);
  r.get("draws", b.draws);
  r.get("prob_grow", b.prob_grow);
  r.get("prob_prune", b.prob_prune);
  r.get("prob_change", b.prob_change);
  r.finish();
  return b;
}

json outcome_to_json(const OutcomeSpec& o) { return {{"name", o.name}, {"kind", to_string(o.kind)}}; }

OutcomeSpec outcome_from_json(const json& j, const std::string& where) {
  Reader r(j, where);
  OutcomeSpec o;
  std::string kind = "continuous";
  r.get("name", o.name);
  r.get("kind", kind);
  r.finish();
  o.kind = outcome_kind_from_string(kind);
  return o;
}

}  // namespace

std::string slug(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (!s.empty() && s.back() != '_')
      s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s.empty() ? "comparison" : s;
}

std::vector<ComparisonSpec> default_comparisons() {
  auto f = [](std::string col, std::string value) { return RowFilter{std::move(col), "==", {std::move(value)}}; };
  return {
      {"Comparison 1", {f("z", "1")}, {f("z", "0")}, "Treated", "All controls"},
      {"Comparison 2", {f("z", "1")}, {f("group", "sport")}, "Treated", "Sport controls"},
      {"Comparison 3", {f("z", "1")}, {f("group", "nonsport")}, "Treated", "Non-sport controls"},
      {"Comparison 4", {f("group", "sport")}, {f("group", "nonsport")}, "Sport controls", "Non-sport controls"},
  };
}

StudyConfig default_config() {
  StudyConfig c;
  c.synthetic.n = 1000;
  c.synthetic.continuous_covariates = 4;
  c.synthetic.binary_covariates = 2;
  c.synthetic.strata = 3;
  c.synthetic.propensity_intercept = -0.7;
  c.synthetic.propensity_beta = {0.6, -0.4, 0.3, 0.0, 0.5, -0.3};
  c.synthetic.outcome_beta = {1.0, 0.5, -0.5, 0.3, 0.4, 0.2};
  c.synthetic.tau = 0.5;
  c.synthetic.binary_log_odds_effect = 0.4;
  c.synthetic.covariate_missing_rate = 0.02;
  c.synthetic.outcome_missing_rate = 0.02;
  c.synthetic.seed = 7;
  c.comparisons = default_comparisons();
  return c;
}

std::string config_to_json_text(const StudyConfig& c) {
  json j;
  json data = {{"path", c.data_path},
               {"delimiter", std::string(1, c.format.delimiter)},
               {"missing_token", c.format.missing_token},
               {"id_column", c.format.id_column},
               {"treatment_column", c.format.treatment_column},
               {"stratum_column", c.format.stratum_column},
               {"label_columns", c.label_columns}};
  j["data"] = data;
  json schema = json::array();
  for (const auto& s : c.schema.covariates)
    schema.push_back({{"name", s.name}, {"kind", to_string(s.kind)}, {"levels", s.levels}});
  j["schema"] = schema;
  const auto& s = c.synthetic;
  j["synthetic"] = {{"n", s.n},
                    {"continuous_covariates", s.continuous_covariates},
                    {"binary_covariates", s.binary_covariates},
                    {"strata", s.strata},
                    {"propensity_intercept", s.propensity_intercept},
                    {"propensity_beta", s.propensity_beta},
                    {"outcome_beta", s.outcome_beta},
                    {"noise_sd", s.noise_sd},
                    {"tau", s.tau},
                    {"binary_outcome", s.binary_outcome},
                    {"binary_intercept", s.binary_intercept},
                    {"binary_log_odds_effect", s.binary_log_odds_effect},
                    {"covariate_missing_rate", s.covariate_missing_rate},
                    {"outcome_missing_rate", s.outcome_missing_rate},
                    {"sport_fraction", s.sport_fraction},
                    {"seed", s.seed}};
  j["covariates"] = c.covariates;
  j["primary_outcome"] = outcome_to_json(c.primary_outcome);
  json sec = json::array();
  for (const auto& o : c.secondary_outcomes) sec.push_back(outcome_to_json(o));
  j["secondary_outcomes"] = sec;
  j["eligibility"] = filters_to_json(c.eligibility);
  json comps = json::array();
  for (const auto& cmp : c.comparisons)
    comps.push_back({{"name", cmp.name},
                     {"treated", filters_to_json(cmp.treated)},
                     {"control", filters_to_json(cmp.control)},
                     {"treated_label", cmp.treated_label},
                     {"control_label", cmp.control_label}});
  j["comparisons"] = comps;
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(to_string(m));
  j["propensity"] = {{"methods", methods},
                     {"l1_folds", c.l1_folds},
                     {"l1_grid_size", c.l1_grid_size},
                     {"bayes_draws", c.bayes_draws},
                     {"bayes_burn_in", c.bayes_burn_in},
                     {"bart", bart_to_json(c.bart)}};
  j["matching"] = {{"max_controls", c.max_controls},
                   {"caliper_width_sd", c.caliper_width_sd},
                   {"caliper_penalty_multiplier", c.caliper_penalty_multiplier},
                   {"max_imbalanced", c.max_imbalanced},
                   {"imbalance_threshold", c.imbalance_threshold},
                   {"balance_levels", c.balance_levels}};
  j["inference"] = {{"alpha", c.alpha},
                    {"adjustment", to_string(c.adjustment)},
                    {"mode", to_string(c.test_mode)},
                    {"mc_draws", c.mc_draws},
                    {"alternative", to_string(c.alternative)},
                    {"tau_grid", c.tau_grid},
                    {"tau_grid_fill", c.tau_grid_fill},
                    {"equivalence_margin_sd", c.equivalence_margin_sd},
                    {"bart", bart_to_json(c.adjustment_bart)}};
  j["sensitivity"] = {{"gamma_grid", c.gamma_grid}};
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["output"] = c.output_dir;
  return j.dump(2) + "\n";
}

StudyConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("config is not valid JSON: {}", e.what()));
  }
  StudyConfig c = default_config();
  Reader top(j, "config");

  if (const json* d = top.sub("data")) {
    Reader r(*d, "data");
    std::string delim(1, c.format.delimiter);
    r.get("path", c.data_path);
    r.get("delimiter", delim);
    r.get("missing_token", c.format.missing_token);
    r.get("id_column", c.format.id_column);
    r.get("treatment_column", c.format.treatment_column);
    r.get("stratum_column", c.format.stratum_column);
    r.get("label_columns", c.label_columns);
    r.finish();
    if (delim.size() != 1) throw ValidationError("config: data.delimiter must be one character");
    c.format.delimiter = delim[0];
  }
  if (const json* s = top.sub("schema")) {
    if (!s->is_array()) throw ValidationError("config: 'schema' must be a list");
    c.schema.covariates.clear();
    for (std::size_t i = 0; i < s->size(); ++i) {
      Reader r((*s)[i], fmt::format("schema[{}]", i));
      CovariateSpec spec;
      std::string kind = "continuous";
      r.get("name", spec.name);
      r.get("kind", kind);
      r.get("levels", spec.levels);
      r.finish();
      spec.kind = covariate_kind_from_string(kind);
      c.schema.covariates.push_back(spec);
    }
  }
  if (const json* s = top.sub("synthetic")) {
    Reader r(*s, "synthetic");
    auto& sp = c.synthetic;
    r.get("n", sp.n);
    r.get("continuous_covariates", sp.continuous_covariates);
    r.get("binary_covariates", sp.binary_covariates);
    r.get("strata", sp.strata);
    r.get("propensity_intercept", sp.propensity_intercept);
    r.get("propensity_beta", sp.propensity_beta);
    r.get("outcome_beta", sp.outcome_beta);
    r.get("noise_sd", sp.noise_sd);
    r.get("tau", sp.tau);
    r.get("binary_outcome", sp.binary_outcome);
    r.get("binary_intercept", sp.binary_intercept);
    r.get("binary_log_odds_effect", sp.binary_log_odds_effect);
    r.get("covariate_missing_rate", sp.covariate_missing_rate);
    r.get("outcome_missing_rate", sp.outcome_missing_rate);
    r.get("sport_fraction", sp.sport_fraction);
    r.get("seed", sp.seed);
    r.finish();
  }
  top.get("covariates", c.covariates);
  if (const json* o = top.sub("primary_outcome")) c.primary_outcome = outcome_from_json(*o, "primary_outcome");
  if (const json* o = top.sub("secondary_outcomes")) {
    if (!o->is_array()) throw ValidationError("config: 'secondary_outcomes' must be a list");
    c.secondary_outcomes.clear();
    for (std::size_t i = 0; i < o->size(); ++i)
      c.secondary_outcomes.push_back(outcome_from_json((*o)[i], fmt::format("secondary_outcomes[{}]", i)));
  }
  c.eligibility = filters_from_json(top.sub("eligibility"), "eligibility");
  if (const json* cs = top.sub("comparisons")) {
    if (!cs->is_array()) throw ValidationError("config: 'comparisons' must be a list");
    c.comparisons.clear();
    for (std::size_t i = 0; i < cs->size(); ++i) {
      const std::string where = fmt::format("comparisons[{}]", i);
      Reader r((*cs)[i], where);
      ComparisonSpec cmp;
      r.get("name", cmp.name);
      cmp.treated = filters_from_json(r.sub("treated"), where + ".treated");
      cmp.control = filters_from_json(r.sub("control"), where + ".control");
      r.get("treated_label", cmp.treated_label);
      r.get("control_label", cmp.control_label);
      r.finish();
      c.comparisons.push_back(cmp);
    }
  }
  if (const json* p = top.sub("propensity")) {
    Reader r(*p, "propensity");
    std::vector<std::string> methods;
    for (auto m : c.methods) methods.push_back(to_string(m));
    r.get("methods", methods);
    c.methods.clear();
    for (const auto& m : methods) c.methods.push_back(propensity_method_from_string(m));
    r.get("l1_folds", c.l1_folds);
    r.get("l1_grid_size", c.l1_grid_size);
    r.get("bayes_draws", c.bayes_draws);
    r.get("bayes_burn_in", c.bayes_burn_in);
    if (const json* b = r.sub("bart")) c.bart = bart_from_json(*b, "propensity.bart", c.bart);
    r.finish();
  }
  if (const json* m = top.sub("matching")) {
    Reader r(*m, "matching");
    r.get("max_controls", c.max_controls);
    r.get("caliper_width_sd", c.caliper_width_sd);
    r.get("caliper_penalty_multiplier", c.caliper_penalty_multiplier);
    r.get("max_imbalanced", c.max_imbalanced);
    r.get("imbalance_threshold", c.imbalance_threshold);
    r.get("balance_levels", c.balance_levels);
    r.finish();
  }
  if (const json* in = top.sub("inference")) {
    Reader r(*in, "inference");
    std::string adjustment = to_string(c.adjustment), mode = to_string(c.test_mode),
                alternative = to_string(c.alternative);
    r.get("alpha", c.alpha);
    r.get("adjustment", adjustment);
    r.get("mode", mode);
    r.get("mc_draws", c.mc_draws);
    r.get("alternative", alternative);
    r.get("tau_grid", c.tau_grid);
    r.get("tau_grid_fill", c.tau_grid_fill);
    r.get("equivalence_margin_sd", c.equivalence_margin_sd);
    if (const json* b = r.sub("bart")) c.adjustment_bart = bart_from_json(*b, "inference.bart", c.adjustment_bart);
    r.finish();
    c.adjustment = adjustment_from_string(adjustment);
    c.test_mode = test_mode_from_string(mode);
    c.alternative = alternative_from_string(alternative);
  }
  if (const json* s = top.sub("sensitivity")) {
    Reader r(*s, "sensitivity");
    r.get("gamma_grid", c.gamma_grid);
    r.finish();
  }
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  top.get("output", c.output_dir);
  top.finish();
  validate_config(c);
  return c;
}

StudyConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot open config file '{}'", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

void validate_config(const StudyConfig& c) {
  if (c.max_controls < 1 || c.max_controls > kMaxControls)
    throw ValidationError(fmt::format("matching.max_controls must be in 1..{}", kMaxControls));
  if (!(c.caliper_width_sd > 0)) throw ValidationError("matching.caliper_width_sd must be positive");
  if (!(c.caliper_penalty_multiplier >= 0)) throw ValidationError("matching.caliper_penalty_multiplier must be nonnegative");
  if (!(c.alpha > 0 && c.alpha < 1)) throw ValidationError("inference.alpha must lie in (0, 1)");
  if (!(c.equivalence_margin_sd >= 0)) throw ValidationError("inference.equivalence_margin_sd must be nonnegative");
  if (c.methods.empty()) throw ValidationError("propensity.methods must name at least one method");
  if (c.l1_folds < 2) throw ValidationError("propensity.l1_folds must be at least 2");
  if (c.bayes_draws < 100) throw ValidationError("propensity.bayes_draws must be at least 100");
  if (c.bayes_burn_in < 0) throw ValidationError("propensity.bayes_burn_in must be nonnegative");
  c.bart.validate();
  c.adjustment_bart.validate();
  if (c.comparisons.empty()) throw ValidationError("at least one comparison is required");
  if (c.comparisons.size() != 1 && c.comparisons.size() != 4)
    throw ValidationError("the ordered procedure needs either one comparison or exactly four");
  std::set<std::string> names;
  for (const auto& cmp : c.comparisons) {
    if (cmp.name.empty()) throw ValidationError("every comparison needs a name");
    if (!names.insert(slug(cmp.name)).second) throw ValidationError(fmt::format("duplicate comparison name '{}'", cmp.name));
    if (cmp.treated.empty() || cmp.control.empty())
      throw ValidationError(fmt::format("comparison '{}' needs treated and control filters", cmp.name));
  }
  if (c.primary_outcome.name.empty()) throw ValidationError("exactly one primary outcome is required");
  for (const auto& o : c.secondary_outcomes)
    if (o.name == c.primary_outcome.name)
      throw ValidationError(fmt::format("outcome '{}' is both primary and secondary", o.name));
  if (!std::is_sorted(c.tau_grid.begin(), c.tau_grid.end())) throw ValidationError("inference.tau_grid must be sorted");
  if (!c.gamma_grid.empty() && c.gamma_grid.front() != 1.0)
    throw ValidationError("sensitivity.gamma_grid must start at 1");
  if (c.threads < 1) throw ValidationError("threads must be at least 1");
  if (!c.data_path.empty() && c.schema.covariates.empty())
    throw ValidationError("a data file needs a covariate schema");
}

void validate_config_against(const StudyConfig& c, const SubjectTable& table) {
  for (const auto& name : c.covariates)
    if (!table.covariate_index(name)) throw ValidationError(fmt::format("unknown covariate '{}'", name));
  for (const auto& name : c.balance_levels)
    if (!table.covariate_index(name)) throw ValidationError(fmt::format("unknown covariate '{}' in balance_levels", name));
  auto has_outcome = [&](const std::string& n) {
    return std::any_of(table.outcomes.begin(), table.outcomes.end(), [&](const Column& col) { return col.name == n; });
  };
  if (!has_outcome(c.primary_outcome.name))
    throw ValidationError(fmt::format("unknown primary outcome '{}'", c.primary_outcome.name));
  for (const auto& o : c.secondary_outcomes)
    if (!has_outcome(o.name)) throw ValidationError(fmt::format("unknown secondary outcome '{}'", o.name));
  auto check_filters = [&](const std::vector<RowFilter>& fs) {
    for (const auto& f : fs) {
      if (table.size() > 0) (void)f.matches(table, 0);
    }
  };
  check_filters(c.eligibility);
  for (const auto& cmp : c.comparisons) {
    check_filters(cmp.treated);
    check_filters(cmp.control);
  }
}

}  // namespace obsmatch
