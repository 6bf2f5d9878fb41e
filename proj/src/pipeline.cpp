#include "obsmatch/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include <fmt/format.h>
#include <json.hpp>
#include <openssl/evp.h>

#include "obsmatch/balance.hpp"
#include "obsmatch/common.hpp"
#include "obsmatch/inference.hpp"
#include "obsmatch/matching.hpp"
#include "obsmatch/multiplicity.hpp"
#include "obsmatch/report.hpp"
#include "obsmatch/sensitivity.hpp"

namespace obsmatch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << content;
}

std::string read_file(const fs::path& path, const std::string& producer) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ValidationError(fmt::format("missing intermediate file '{}'; run `obsmatch {}` first", path.string(), producer));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path, const std::string& producer) {
  try {
    return json::parse(read_file(path, producer));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("corrupt intermediate file '{}': {}", path.string(), e.what()));
  }
}

fs::path inter_dir(const StudyConfig& c, const std::string& slug) { return fs::path(c.output_dir) / "intermediate" / slug; }

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double number_from(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::string fmt_num(double v) { return std::isfinite(v) ? fmt::format("{:.6g}", v) : std::string("NA"); }

FormatOptions internal_format(const json& columns) {
  FormatOptions f;
  for (const auto& o : columns.at("outcomes"))
    f.outcomes.push_back({o.at("name").get<std::string>(), outcome_kind_from_string(o.at("kind").get<std::string>())});
  for (const auto& l : columns.at("labels")) f.label_columns.push_back(l.get<std::string>());
  return f;
}

CovariateSchema internal_schema(const json& columns) {
  CovariateSchema s;
  for (const auto& c : columns.at("covariates"))
    s.covariates.push_back({c.at("name").get<std::string>(), covariate_kind_from_string(c.at("kind").get<std::string>()),
                            c.at("levels").get<std::vector<double>>()});
  return s;
}

json columns_json(const SubjectTable& t, const CovariateSchema* schema, const std::vector<OutcomeSpec>& outcomes,
                  const std::vector<std::string>& study_covariates) {
  json cov = json::array();
  for (std::size_t j = 0; j < t.covariates.size(); ++j) {
    std::vector<double> levels;
    if (schema)
      if (const auto* spec = schema->find(t.covariates[j].name)) levels = spec->levels;
    cov.push_back({{"name", t.covariates[j].name}, {"kind", to_string(t.covariate_kinds[j])}, {"levels", levels}});
  }
  json outs = json::array();
  for (const auto& col : t.outcomes) {
    OutcomeKind kind = OutcomeKind::continuous;
    for (const auto& o : outcomes)
      if (o.name == col.name) kind = o.kind;
    outs.push_back({{"name", col.name}, {"kind", to_string(kind)}});
  }
  json labels = json::array();
  for (const auto& l : t.labels) labels.push_back(l.name);
  return {{"covariates", cov}, {"outcomes", outs}, {"labels", labels}, {"study_covariates", study_covariates}};
}

struct LoadedComparison {
  std::string name, slug, treated_label, control_label;
  SubjectTable imputed, prepared;
  CovariateSchema schema;
  std::vector<std::string> study_covariates;
};

LoadedComparison load_prepared(const StudyConfig& c, const ComparisonSpec& spec) {
  LoadedComparison lc;
  lc.name = spec.name;
  lc.slug = slug(spec.name);
  lc.treated_label = spec.treated_label;
  lc.control_label = spec.control_label;
  const auto dir = inter_dir(c, lc.slug);
  const json columns = read_json(dir / "columns.json", "propensity");
  lc.schema = internal_schema(columns);
  lc.study_covariates = columns.at("study_covariates").get<std::vector<std::string>>();
  const auto format = internal_format(columns);
  lc.prepared = parse_subjects(read_file(dir / "prepared.csv", "propensity"), lc.schema, format);
  lc.imputed = parse_subjects(read_file(dir / "imputed.csv", "propensity"), lc.schema, format);
  return lc;
}

std::vector<double> read_scores(const fs::path& path, const SubjectTable& table) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t r = 0; r < table.size(); ++r) row_of.emplace(table.ids[r], r);
  std::vector<double> scores(table.size(), kNaN);
  std::istringstream in(read_file(path, "propensity"));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const std::string id = line.substr(0, comma), value = line.substr(comma + 1);
    const auto it = row_of.find(id);
    if (it == row_of.end()) throw ValidationError(fmt::format("scores file '{}' names unknown subject '{}'", path.string(), id));
    scores[it->second] = value == "NA" ? kNaN : std::stod(value);
  }
  return scores;
}

std::string format_scores(const SubjectTable& t, const std::vector<double>& scores) {
  std::string out = "id,score\n";
  for (std::size_t r = 0; r < t.size(); ++r)
    out += t.ids[r] + "," + (std::isfinite(scores[r]) ? fmt::format("{:.17g}", scores[r]) : std::string("NA")) + "\n";
  return out;
}

bool method_has_match(const fs::path& dir, PropensityMethod m) {
  return fs::exists(dir / fmt::format("match_{}_sets.txt", to_string(m)));
}

MatchResult load_match(const fs::path& dir, PropensityMethod m, const SubjectTable& prepared) {
  const auto scores = read_scores(dir / fmt::format("scores_{}.csv", to_string(m)), prepared);
  return parse_match(read_file(dir / fmt::format("match_{}_sets.txt", to_string(m)), "match"),
                     read_file(dir / fmt::format("match_{}_ledger.csv", to_string(m)), "match"), prepared, scores);
}

MatchConfig match_config(const StudyConfig& c) {
  MatchConfig m;
  m.max_controls = c.max_controls;
  m.caliper_width_sd = c.caliper_width_sd;
  m.caliper_penalty_multiplier = c.caliper_penalty_multiplier;
  return m;
}

double sample_sd(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 0.0;
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / static_cast<double>(v.size() - 1));
}

std::vector<OutcomeSpec> all_outcomes(const StudyConfig& c) {
  std::vector<OutcomeSpec> out{c.primary_outcome};
  out.insert(out.end(), c.secondary_outcomes.begin(), c.secondary_outcomes.end());
  return out;
}

// ---------------------------------------------------------------- stages

void stage_propensity(const StudyConfig& c) {
  const SubjectTable table = load_study_table(c);
  for (std::size_t ci = 0; ci < c.comparisons.size(); ++ci) {
    const auto pc = prepare_comparison(table, c.comparisons[ci]);
    const auto dir = inter_dir(c, pc.slug);
    const CovariateSchema* schema = c.data_path.empty() ? nullptr : &c.schema;
    write_file(dir / "columns.json", columns_json(pc.prepared, schema, all_outcomes(c), pc.study_covariates).dump(2) + "\n");
    write_file(dir / "prepared.csv", format_subjects(pc.prepared, internal_format(columns_json(pc.prepared, schema, all_outcomes(c), {}))));
    write_file(dir / "imputed.csv", format_subjects(pc.imputed, internal_format(columns_json(pc.imputed, schema, all_outcomes(c), {}))));
    std::string scaling = "covariate,mean,sd,shift,multiplier,zero_variance\n";
    for (const auto& e : pc.scaling.entries)
      scaling += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{}\n", e.name, e.mean, e.sd, e.shift, e.multiplier,
                             e.zero_variance ? 1 : 0);
    write_file(dir / "scaling.csv", scaling);

    const auto seeds = comparison_seeds(c.seed, ci);
    for (auto m : c.methods) {
      const auto seed = derive_seed(seeds.propensity, static_cast<std::uint64_t>(method_rank(m)));
      json info = {{"method", to_string(m)}, {"seed", seed}};
      try {
        const auto po = fit_propensity(pc.prepared, m, c, seed);
        json beta = json::array();
        for (Eigen::Index i = 0; i < po.fit.beta.size(); ++i) beta.push_back(po.fit.beta[i]);
        info["beta"] = beta;
        info["features"] = po.features;
        info["converged"] = po.fit.converged;
        info["lambda"] = po.fit.lambda ? json(*po.fit.lambda) : json(nullptr);
        info["nonzero"] = po.fit.nonzero;
        info["draws"] = po.fit.draws;
        info["acceptance_rate"] = po.fit.acceptance_rate;
        info["warnings"] = po.fit.warnings;
        json q = json::object();
        for (int arm : {1, 0}) {
          std::vector<double> v;
          for (std::size_t r = 0; r < pc.prepared.size(); ++r)
            if (pc.prepared.z[r] == arm && std::isfinite(po.scores[r])) v.push_back(po.scores[r]);
          if (v.empty()) continue;
          const auto qs = quantiles(v);
          q[arm == 1 ? "treated" : "control"] = {qs.min, qs.q25, qs.median, qs.q75, qs.max};
        }
        info["quantiles"] = q;
        write_file(dir / fmt::format("scores_{}.csv", to_string(m)), format_scores(pc.prepared, po.scores));
        if (po.fit.forest) {
          std::ostringstream forest;
          write_forest(forest, *po.fit.forest);
          write_file(dir / "forest_bart.txt", forest.str());
        }
      } catch (const ValidationError& e) {
        info["error"] = e.what();
        fs::remove(dir / fmt::format("scores_{}.csv", to_string(m)));
      }
      write_file(dir / fmt::format("fit_{}.json", to_string(m)), info.dump(2) + "\n");
    }
  }
}

void stage_match(const StudyConfig& c) {
  for (const auto& spec : c.comparisons) {
    const auto lc = load_prepared(c, spec);
    const auto dir = inter_dir(c, lc.slug);
    for (auto m : c.methods) {
      const auto base = fmt::format("match_{}", to_string(m));
      fs::remove(dir / (base + "_sets.txt"));
      fs::remove(dir / (base + "_ledger.csv"));
      fs::remove(dir / (base + "_error.txt"));
      const json fit = read_json(dir / fmt::format("fit_{}.json", to_string(m)), "propensity");
      if (fit.contains("error")) {
        write_file(dir / (base + "_error.txt"), "propensity fit failed: " + fit.at("error").get<std::string>() + "\n");
        continue;
      }
      const auto scores = read_scores(dir / fmt::format("scores_{}.csv", to_string(m)), lc.prepared);
      try {
        const auto result = build_match(lc.prepared, scores, match_config(c));
        write_file(dir / (base + "_sets.txt"), format_match_sets(result));
        write_file(dir / (base + "_ledger.csv"), format_match_ledger(result));
      } catch (const ValidationError& e) {
        write_file(dir / (base + "_error.txt"), std::string(e.what()) + "\n");
      }
    }
  }
}

BalanceOptions balance_options(const StudyConfig& c, const LoadedComparison& lc) {
  BalanceOptions o;
  o.expand_levels = c.balance_levels;
  o.schema = &lc.schema;
  return o;
}

void stage_balance(const StudyConfig& c) {
  for (const auto& spec : c.comparisons) {
    const auto lc = load_prepared(c, spec);
    const auto dir = inter_dir(c, lc.slug);
    std::vector<MatchCandidate> candidates;
    json cand_json = json::array();
    for (auto m : c.methods) {
      if (!method_has_match(dir, m)) {
        cand_json.push_back({{"method", to_string(m)}, {"available", false}});
        continue;
      }
      const auto result = load_match(dir, m, lc.prepared);
      const auto rows = balance_table(lc.imputed, result, lc.study_covariates, balance_options(c, lc));
      write_file(dir / fmt::format("balance_{}.csv", to_string(m)), format_balance_csv(rows));
      const MatchCandidate cand{m, count_imbalanced(rows, c.imbalance_threshold), dropped_count(result)};
      candidates.push_back(cand);
      cand_json.push_back({{"method", to_string(m)},
                           {"available", true},
                           {"imbalanced", cand.imbalanced},
                           {"dropped", cand.dropped}});
    }
    if (candidates.empty())
      throw ValidationError(fmt::format("no propensity method produced a usable match for '{}'", spec.name));
    const auto sel = select_match(candidates, c.max_imbalanced);
    const json out = {{"selected", to_string(candidates[sel.index].method)},
                      {"meets_balance", sel.meets_balance},
                      {"warning", sel.warning},
                      {"candidates", cand_json}};
    write_file(dir / "selection.json", out.dump(2) + "\n");
  }
}

PropensityMethod selected_method(const StudyConfig& c, const std::string& slug_name) {
  const json sel = read_json(inter_dir(c, slug_name) / "selection.json", "balance");
  return propensity_method_from_string(sel.at("selected").get<std::string>());
}

json test_json(const TestResult& r) {
  return {{"tau0", r.tau0},
          {"statistic", r.statistic},
          {"p_value", r.p_value},
          {"p_two_sided", r.p_two_sided},
          {"p_greater", r.p_greater},
          {"p_less", r.p_less},
          {"mode", to_string(r.method)},
          {"mc_draws", r.mc_draws},
          {"seed", r.seed},
          {"adjustment", to_string(r.adjustment)},
          {"rank_deficient", r.rank_deficient},
          {"n_sets", r.n_sets}};
}

TestOptions test_options(const StudyConfig& c, std::uint64_t seed) {
  TestOptions t;
  t.mode = c.test_mode;
  t.mc_draws = c.mc_draws;
  t.seed = seed;
  t.alternative = c.alternative;
  return t;
}

json infer_outcome(const StudyConfig& c, const StratifiedSample& sample, const OutcomeSpec& outcome,
                   std::uint64_t test_seed, std::uint64_t adjust_seed) {
  json o = {{"name", outcome.name}, {"kind", to_string(outcome.kind)}};
  o["n_sets"] = sample.num_sets();
  if (sample.num_sets() == 0) {
    o["error"] = "no complete matched sets for this outcome";
    return o;
  }
  const double sd = sample_sd(sample.y);
  o["outcome_sd"] = sd;
  if (outcome.kind == OutcomeKind::binary) {
    const auto clr = conditional_logistic(sample);
    const auto mh = mantel_haenszel(sample, TestMode::normal, c.alternative);
    o["test"] = "conditional-logistic";
    o["statistic"] = clr.score;
    o["p_value"] = clr.p_value;
    o["theta"] = number_or_null(clr.theta);
    o["ci_lower"] = number_or_null(clr.ci_lower);
    o["ci_upper"] = number_or_null(clr.ci_upper);
    o["identified"] = clr.identified;
    o["warnings"] = clr.warnings;
    o["mantel_haenszel"] = test_json(mh);
    return o;
  }
  AdjustOptions adj{c.adjustment_bart, adjust_seed};
  const auto at_zero = test_effect(sample, 0.0, c.adjustment, test_options(c, test_seed), adj);
  o["test"] = "permutation";
  o["result"] = test_json(at_zero);
  o["statistic"] = at_zero.statistic;
  o["p_value"] = at_zero.p_value;
  std::vector<double> grid = c.tau_grid;
  if (grid.empty()) grid = sd > 0 ? default_tau_grid(sd, c.tau_grid_fill) : std::vector<double>{0.0};
  InvertOptions inv;
  inv.alpha = c.alpha;
  inv.adjustment = c.adjustment;
  inv.test = test_options(c, test_seed);
  inv.adjust = adj;
  inv.threads = c.threads;
  const auto region = invert_tests(sample, grid, inv);
  o["grid"] = region.grid;
  o["grid_p"] = region.p_values;
  o["ci_lower"] = region.lower ? json(*region.lower) : json(nullptr);
  o["ci_upper"] = region.upper ? json(*region.upper) : json(nullptr);
  o["non_monotone"] = region.non_monotone;
  return o;
}

void stage_infer(const StudyConfig& c) {
  for (std::size_t ci = 0; ci < c.comparisons.size(); ++ci) {
    const auto& spec = c.comparisons[ci];
    const auto lc = load_prepared(c, spec);
    const auto dir = inter_dir(c, lc.slug);
    const auto method = selected_method(c, lc.slug);
    const auto result = load_match(dir, method, lc.prepared);
    const auto seeds = comparison_seeds(c.seed, ci);
    json outs = json::array();
    const auto outcomes = all_outcomes(c);
    for (std::size_t k = 0; k < outcomes.size(); ++k) {
      const auto g = gather_sets(lc.prepared, result, outcomes[k].name);
      const std::uint64_t ts = k == 0 ? seeds.test : derive_seed(seeds.secondary, 2 * k);
      const std::uint64_t as = k == 0 ? seeds.adjust : derive_seed(seeds.secondary, 2 * k + 1);
      json o = infer_outcome(c, g.sample, outcomes[k], ts, as);
      o["role"] = k == 0 ? "primary" : "secondary";
      o["excluded_sets"] = g.excluded_sets.size();
      outs.push_back(o);
    }
    const json out = {{"comparison", spec.name}, {"method", to_string(method)}, {"outcomes", outs}};
    write_file(dir / "inference.json", out.dump(2) + "\n");
  }
}

void stage_sensitivity(const StudyConfig& c) {
  const auto grid = c.gamma_grid.empty() ? default_gamma_grid() : c.gamma_grid;
  for (std::size_t ci = 0; ci < c.comparisons.size(); ++ci) {
    const auto& spec = c.comparisons[ci];
    const auto lc = load_prepared(c, spec);
    const auto dir = inter_dir(c, lc.slug);
    const auto method = selected_method(c, lc.slug);
    const auto result = load_match(dir, method, lc.prepared);
    const auto seeds = comparison_seeds(c.seed, ci);
    const bool two_sided = c.alternative == Alternative::two_sided;
    json outs = json::array();
    const auto outcomes = all_outcomes(c);
    for (std::size_t k = 0; k < outcomes.size(); ++k) {
      const auto g = gather_sets(lc.prepared, result, outcomes[k].name);
      json o = {{"name", outcomes[k].name}};
      if (g.sample.num_sets() == 0) {
        o["error"] = "no complete matched sets for this outcome";
        outs.push_back(o);
        continue;
      }
      std::function<double(double)> compute;
      Eigen::VectorXd eps;
      if (outcomes[k].kind == OutcomeKind::binary) {
        o["test"] = "mantel-haenszel";
        compute = [&](double gamma) {
          const auto s = sensitivity_mh(g.sample, gamma);
          return two_sided ? s.p_two_sided : s.p_upper;
        };
      } else {
        o["test"] = "residual";
        const std::uint64_t as = k == 0 ? seeds.adjust : derive_seed(seeds.secondary, 2 * k + 1);
        eps = covariance_adjust(align_responses(g.sample, 0.0), c.adjustment, AdjustOptions{c.adjustment_bart, as}).eps;
        compute = [&](double gamma) {
          const auto s = sensitivity_residual(eps, g.sample, gamma);
          return two_sided ? s.p_two_sided : s.p_upper;
        };
      }
      const auto curve = gamma_threshold(compute, c.alpha, grid, c.threads);
      json gs = json::array(), ps = json::array();
      for (const auto& pt : curve.points) {
        gs.push_back(pt.gamma);
        ps.push_back(pt.p);
      }
      o["gamma"] = gs;
      o["p_upper"] = ps;
      o["threshold"] = curve.threshold ? json(*curve.threshold) : json(nullptr);
      o["insignificant_at_one"] = curve.insignificant_at_one;
      o["summary"] = format_gamma_threshold(curve);
      outs.push_back(o);
    }
    const json out = {{"comparison", spec.name}, {"outcomes", outs}};
    write_file(dir / "sensitivity.json", out.dump(2) + "\n");
  }
}

// Every regular file under `root` except the manifest itself, sorted.
std::vector<fs::path> output_files(const fs::path& root) {
  std::vector<fs::path> files;
  if (!fs::exists(root)) return files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != "manifest.txt") files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  return files;
}

std::string manifest_files(const fs::path& root) {
  std::string out;
  for (const auto& rel : output_files(root)) {
    std::ifstream in(root / rel, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out += fmt::format("file {} {}\n", sha256_hex(ss.str()), rel.generic_string());
  }
  return out;
}

void stage_report(const StudyConfig& c) {
  const fs::path root(c.output_dir);
  std::vector<MatchSummaryRow> summary;
  std::vector<std::pair<std::string, std::map<int, std::size_t>>> comp_cols;
  std::string quant = "comparison,method,arm,min,q25,median,q75,max\n";
  std::string inference_csv =
      "comparison,outcome,role,kind,test,adjustment,mode,seed,statistic,p_value,p_bh,ci_lower,ci_upper,ci_label,"
      "non_monotone,n_sets,excluded_sets,status\n";
  std::string grid_csv = "comparison,outcome,tau0,p_value,accepted\n";
  std::string sens_csv = "comparison,outcome,gamma,p_upper\n";
  std::string sens_summary;
  std::string selection_notes;
  std::string manifest_seeds;

  struct Primary {
    double p = 1.0;
    ConfidenceRegion region;
    double sd = 0.0;
  };
  std::vector<Primary> primaries;
  std::vector<std::vector<SecondaryOutcome>> secondaries;

  for (std::size_t ci = 0; ci < c.comparisons.size(); ++ci) {
    const auto& spec = c.comparisons[ci];
    const auto lc = load_prepared(c, spec);
    const auto dir = inter_dir(c, lc.slug);
    const json sel = read_json(dir / "selection.json", "balance");
    const auto method = propensity_method_from_string(sel.at("selected").get<std::string>());
    if (!sel.at("warning").get<std::string>().empty())
      selection_notes += fmt::format("{}: {}\n", spec.name, sel.at("warning").get<std::string>());

    std::map<std::string, std::size_t> imbalanced;
    for (const auto& cj : sel.at("candidates"))
      if (cj.at("available").get<bool>()) imbalanced[cj.at("method").get<std::string>()] = cj.at("imbalanced").get<std::size_t>();

    const auto seeds = comparison_seeds(c.seed, ci);
    manifest_seeds += fmt::format("comparison {}: selected {}; seeds test {} adjust {} secondary {}\n", spec.name,
                                  to_string(method), seeds.test, seeds.adjust, seeds.secondary);
    for (auto m : c.methods) {
      const json fit = read_json(dir / fmt::format("fit_{}.json", to_string(m)), "propensity");
      manifest_seeds += fmt::format("comparison {}: propensity {} seed {}\n", spec.name, to_string(m),
                                    fit.at("seed").get<std::uint64_t>());
      if (fit.contains("quantiles")) {
        for (const auto& arm : {"treated", "control"}) {
          if (!fit.at("quantiles").contains(arm)) continue;
          const auto q = fit.at("quantiles").at(arm).get<std::vector<double>>();
          quant += fmt::format("{},{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}\n", spec.name, display_name(m), arm, q[0], q[1],
                               q[2], q[3], q[4]);
        }
      }
      if (!method_has_match(dir, m)) continue;
      const auto result = load_match(dir, m, lc.prepared);
      summary.push_back(summarize_match(spec.name, m, result, imbalanced.at(to_string(m)), m == method));
      if (m == method) {
        comp_cols.emplace_back(spec.name, composition(result, kMaxControls));
        const auto rows = balance_table(lc.imputed, result, lc.study_covariates, balance_options(c, lc));
        write_file(root / fmt::format("balance_{}.csv", lc.slug), format_balance_csv(rows));
        write_file(root / fmt::format("balance_{}.md", lc.slug),
                   format_balance_markdown(rows, {lc.treated_label, lc.control_label}, c.imbalance_threshold));
      }
    }

    const json inf = read_json(dir / "inference.json", "infer");
    const json sens = read_json(dir / "sensitivity.json", "sensitivity");
    std::map<std::string, std::string> gamma_note;
    std::map<std::string, double> gamma_star;
    for (const auto& s : sens.at("outcomes")) {
      const auto name = s.at("name").get<std::string>();
      if (s.contains("error")) continue;
      const auto gs = s.at("gamma").get<std::vector<double>>();
      const auto ps = s.at("p_upper").get<std::vector<double>>();
      for (std::size_t i = 0; i < gs.size(); ++i) sens_csv += fmt::format("{},{},{:.2f},{:.6g}\n", spec.name, name, gs[i], ps[i]);
      gamma_note[name] = s.at("summary").get<std::string>();
      if (!s.at("threshold").is_null()) gamma_star[name] = s.at("threshold").get<double>();
      sens_summary += fmt::format("{}, {}: gamma* {}\n", spec.name, name, gamma_note[name]);
    }

    Primary primary;
    std::vector<SecondaryOutcome> sec;
    for (const auto& o : inf.at("outcomes")) {
      const auto name = o.at("name").get<std::string>();
      const bool is_primary = o.at("role").get<std::string>() == "primary";
      if (o.contains("error")) {
        inference_csv += fmt::format("{},{},{},{},,,,,,,,,,,,0,{},{}\n", spec.name, name, o.at("role").get<std::string>(),
                                     o.at("kind").get<std::string>(), o.at("excluded_sets").get<std::size_t>(),
                                     o.at("error").get<std::string>());
        if (is_primary) throw ValidationError(fmt::format("{}: primary outcome has no complete matched sets", spec.name));
        continue;
      }
      const double p = o.at("p_value").get<double>();
      const double lo = number_from(o.at("ci_lower")), hi = number_from(o.at("ci_upper"));
      if (is_primary) {
        primary.p = p;
        primary.sd = o.at("outcome_sd").get<double>();
        if (std::isfinite(lo)) {
          primary.region.lower = lo;
          primary.region.upper = hi;
        }
        if (o.contains("grid")) {
          primary.region.grid = o.at("grid").get<std::vector<double>>();
          primary.region.p_values = o.at("grid_p").get<std::vector<double>>();
          primary.region.non_monotone = o.at("non_monotone").get<bool>();
        }
      } else {
        SecondaryOutcome so;
        so.name = name;
        so.p_raw = p;
        if (std::isfinite(lo)) so.ci_lower = lo;
        if (std::isfinite(hi)) so.ci_upper = hi;
        if (gamma_star.count(name)) so.gamma_star = gamma_star[name];
        so.gamma_note = gamma_note[name];
        sec.push_back(so);
      }
      if (o.contains("grid")) {
        const auto grid = o.at("grid").get<std::vector<double>>();
        const auto gp = o.at("grid_p").get<std::vector<double>>();
        for (std::size_t i = 0; i < grid.size(); ++i)
          grid_csv += fmt::format("{},{},{:.6g},{:.6g},{}\n", spec.name, name, grid[i], gp[i], gp[i] > c.alpha ? 1 : 0);
      }
    }
    adjust_secondary(sec, c.alpha);
    primaries.push_back(primary);
    secondaries.push_back(sec);

    for (const auto& o : inf.at("outcomes")) {
      if (o.contains("error")) continue;
      const auto name = o.at("name").get<std::string>();
      const bool is_primary = o.at("role").get<std::string>() == "primary";
      std::string p_bh;
      for (const auto& so : sec)
        if (so.name == name && so.p_bh) p_bh = fmt::format("{:.6g}", *so.p_bh);
      const bool binary = o.at("kind").get<std::string>() == "binary";
      const json* res = o.contains("result") ? &o.at("result") : nullptr;
      inference_csv += fmt::format(
          "{},{},{},{},{},{},{},{},{:.6g},{:.6g},{},{},{},{},{},{},{},{}\n", spec.name, name,
          o.at("role").get<std::string>(), o.at("kind").get<std::string>(), o.at("test").get<std::string>(),
          binary ? "none" : (*res).at("adjustment").get<std::string>(), binary ? "asymptotic" : (*res).at("mode").get<std::string>(),
          binary ? 0 : (*res).at("seed").get<std::uint64_t>(), o.at("statistic").get<double>(), o.at("p_value").get<double>(), p_bh,
          fmt_num(number_from(o.at("ci_lower"))), fmt_num(number_from(o.at("ci_upper"))),
          binary ? "log-odds-ratio-95" : (is_primary ? "tau-95" : "tau-95-marginal"),
          o.contains("non_monotone") && o.at("non_monotone").get<bool>() ? 1 : 0, o.at("n_sets").get<std::size_t>(),
          o.at("excluded_sets").get<std::size_t>(), "ok");
    }
  }

  // Gatekeeping across comparisons.
  std::string decisions = "Primary outcome: " + c.primary_outcome.name + "\n";
  std::vector<StageDecision> stage_decisions;
  if (c.comparisons.size() == 4) {
    OrderedProcedure proc(c.alpha);
    proc.stage1(primaries[0].p);
    if (proc.next_stage() == 2) proc.stage2(primaries[1].p, primaries[2].p);
    if (proc.next_stage() == 3) {
      const double margin = c.equivalence_margin_sd * primaries[3].sd;
      proc.stage3(equivalence_test(primaries[3].region, margin));
    }
    stage_decisions = proc.decisions();
  } else {
    OrderedProcedure proc(c.alpha);
    proc.stage1(primaries[0].p);
    stage_decisions = {proc.decisions().front()};
  }
  for (auto& d : stage_decisions) {
    if (static_cast<std::size_t>(d.comparison) > c.comparisons.size()) continue;
    const auto& name = c.comparisons[static_cast<std::size_t>(d.comparison) - 1].name;
    if (name != fmt::format("Comparison {}", d.comparison)) d.note = name + (d.note.empty() ? "" : "; " + d.note);
  }
  decisions += format_decisions(stage_decisions);
  decisions += fmt::format("Equivalence margin: {} x outcome sd (configured choice)\n", c.equivalence_margin_sd);
  if (!selection_notes.empty()) decisions += "\nMatch selection warnings:\n" + selection_notes;
  decisions += "\nSecondary outcomes (confidence intervals are marginal, not simultaneous):\n";
  decisions += "comparison,outcome,p_raw,p_bh,ci_lower,ci_upper,gamma_star\n";
  for (std::size_t ci = 0; ci < c.comparisons.size(); ++ci) {
    for (const auto& so : secondaries[ci]) {
      decisions += fmt::format("{},{},{:.6g},{},{},{},{}\n", c.comparisons[ci].name, so.name, so.p_raw,
                               so.p_bh ? fmt::format("{:.6g}", *so.p_bh) : std::string("not applied"),
                               so.ci_lower ? fmt_num(*so.ci_lower) : "NA", so.ci_upper ? fmt_num(*so.ci_upper) : "NA",
                               so.gamma_note);
    }
  }
  decisions += "\nSensitivity thresholds:\n" + sens_summary;

  write_file(root / "match_summary.csv", format_match_summary_csv(summary));
  write_file(root / "match_summary.txt", format_table1(summary));
  write_file(root / "composition.csv", format_composition_csv(comp_cols));
  write_file(root / "propensity_quantiles.csv", quant);
  write_file(root / "inference.csv", inference_csv);
  write_file(root / "inference_grid.csv", grid_csv);
  write_file(root / "sensitivity.csv", sens_csv);
  write_file(root / "sensitivity_summary.txt", sens_summary);
  write_file(root / "decisions.txt", decisions);
  // Output location and thread count do not affect any result, so they are
  // left out to keep reruns byte-identical.
  json used = json::parse(config_to_json_text(c));
  used.erase("output");
  used.erase("threads");
  write_file(root / "config_used.json", used.dump(2) + "\n");

  std::string manifest = "obsmatch manifest\nstatus: ok\n";
  manifest += fmt::format("seed: {}\n", c.seed);
  if (c.data_path.empty()) manifest += fmt::format("synthetic seed: {}\n", c.synthetic.seed);
  manifest += manifest_seeds;
  manifest += manifest_files(root);
  write_file(root / "manifest.txt", manifest);
}

}  // namespace

SubjectTable load_study_table(const StudyConfig& c) {
  SubjectTable table;
  CovariateSchema schema;
  if (c.data_path.empty()) {
    table = generate_synthetic(c.synthetic).table;
  } else {
    FormatOptions f = c.format;
    f.outcomes = all_outcomes(c);
    f.label_columns = c.label_columns;
    table = load_subjects(c.data_path, c.schema, f);
  }
  validate_config_against(c, table);
  if (!c.covariates.empty()) {
    SubjectTable t = table;
    t.covariates.clear();
    t.covariate_kinds.clear();
    for (const auto& name : c.covariates) {
      const auto idx = *table.covariate_index(name);
      t.covariates.push_back(table.covariates[idx]);
      t.covariate_kinds.push_back(table.covariate_kinds[idx]);
    }
    table = std::move(t);
  }
  if (!c.eligibility.empty()) table = apply_filters(table, c.eligibility);
  return table;
}

PreparedComparison prepare_comparison(const SubjectTable& table, const ComparisonSpec& spec) {
  const auto treated = rows_matching(table, spec.treated);
  const auto control = rows_matching(table, spec.control);
  std::set<std::size_t> t(treated.begin(), treated.end());
  for (auto r : control)
    if (t.count(r))
      throw ValidationError(fmt::format("comparison '{}': subject '{}' matches both treated and control filters", spec.name,
                                        table.ids[r]));
  if (treated.empty() || control.empty())
    throw ValidationError(fmt::format("comparison '{}' has an empty arm", spec.name));
  std::vector<std::size_t> rows(treated);
  rows.insert(rows.end(), control.begin(), control.end());
  std::sort(rows.begin(), rows.end());

  PreparedComparison pc;
  pc.spec = spec;
  pc.slug = slug(spec.name);
  SubjectTable sub = table.select(rows);
  for (std::size_t i = 0; i < rows.size(); ++i) sub.z[i] = t.count(rows[i]) ? 1 : 0;
  pc.study_covariates = sub.covariate_names();
  pc.imputed = augment_missingness(sub);
  auto [scaled, report] = scale_covariates(pc.imputed);
  pc.prepared = std::move(scaled);
  pc.scaling = std::move(report);
  return pc;
}

PropensityOutcome fit_propensity(const SubjectTable& prepared, PropensityMethod method, const StudyConfig& c,
                                 std::uint64_t seed) {
  const auto [kept, drops] = drop_missingness_determined(prepared);
  const Eigen::MatrixXd full = kept.covariate_matrix();
  std::vector<Eigen::Index> cols;
  PropensityOutcome out;
  for (Eigen::Index j = 0; j < full.cols(); ++j) {
    if (full.rows() > 0 && full.col(j).maxCoeff() > full.col(j).minCoeff()) {
      cols.push_back(j);
      out.features.push_back(kept.covariates[static_cast<std::size_t>(j)].name);
    }
  }
  Eigen::MatrixXd X(full.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) X.col(static_cast<Eigen::Index>(k)) = full.col(cols[k]);
  const Eigen::VectorXi z = kept.treatment_vector();

  switch (method) {
    case PropensityMethod::mle: out.fit = fit_mle(X, z); break;
    case PropensityMethod::l1: {
      L1Options o;
      o.folds = c.l1_folds;
      o.grid_size = c.l1_grid_size;
      o.seed = seed;
      out.fit = fit_l1(X, z, o);
      break;
    }
    case PropensityMethod::bayes: {
      BayesOptions o;
      o.draws = c.bayes_draws;
      o.burn_in = c.bayes_burn_in;
      o.seed = seed;
      out.fit = fit_bayes(X, z, o);
      break;
    }
    case PropensityMethod::bart: out.fit = fit_bart_propensity(X, z, c.bart, seed); break;
  }
  if (method == PropensityMethod::mle && !out.fit.converged)
    out.fit.warnings.push_back("maximum likelihood fit did not converge (possible separation)");

  std::unordered_map<std::string, std::size_t> kept_row;
  for (std::size_t r = 0; r < kept.size(); ++r) kept_row.emplace(kept.ids[r], r);
  out.scores.assign(prepared.size(), kNaN);
  for (std::size_t r = 0; r < prepared.size(); ++r) {
    const auto it = kept_row.find(prepared.ids[r]);
    if (it != kept_row.end()) out.scores[r] = clamp_score(out.fit.scores[it->second]);
  }
  return out;
}

StudySeeds comparison_seeds(std::uint64_t root, std::size_t comparison_index) {
  const std::uint64_t base = derive_seed(root, 100 + comparison_index);
  return {derive_seed(base, 1), derive_seed(base, 10), derive_seed(base, 11), derive_seed(base, 20)};
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::propensity: return "propensity";
    case Stage::match: return "match";
    case Stage::balance: return "balance";
    case Stage::infer: return "infer";
    case Stage::sensitivity: return "sensitivity";
    case Stage::report: return "report";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (auto st : {Stage::propensity, Stage::match, Stage::balance, Stage::infer, Stage::sensitivity, Stage::report})
    if (to_string(st) == s) return st;
  throw ValidationError(fmt::format("unknown stage '{}'", s));
}

void run_stage(Stage stage, const StudyConfig& config) {
  switch (stage) {
    case Stage::propensity: stage_propensity(config); break;
    case Stage::match: stage_match(config); break;
    case Stage::balance: stage_balance(config); break;
    case Stage::infer: stage_infer(config); break;
    case Stage::sensitivity: stage_sensitivity(config); break;
    case Stage::report: stage_report(config); break;
  }
}

void write_failure_manifest(const StudyConfig& config, const std::string& stage, const std::string& message) {
  const fs::path root(config.output_dir);
  std::string m = "obsmatch manifest\nstatus: failed\n";
  m += fmt::format("stage: {}\nerror: {}\nseed: {}\n", stage, message, config.seed);
  m += manifest_files(root);
  write_file(root / "manifest.txt", m);
}

void run_pipeline(const StudyConfig& config) {
  fs::remove(fs::path(config.output_dir) / "manifest.txt");
  try {
    validate_config(config);
    load_study_table(config);
  } catch (const std::exception& e) {
    write_failure_manifest(config, "validate", e.what());
    throw;
  }
  for (auto st : {Stage::propensity, Stage::match, Stage::balance, Stage::infer, Stage::sensitivity, Stage::report}) {
    try {
      run_stage(st, config);
    } catch (const std::exception& e) {
      write_failure_manifest(config, to_string(st), e.what());
      throw;
    }
  }
}

void write_simulation(const StudyConfig& config, const std::string& out_dir) {
  const auto cohort = generate_synthetic(config.synthetic);
  const fs::path dir(out_dir);
  auto format = synthetic_format(config.synthetic);
  write_file(dir / "cohort.csv", format_subjects(cohort.table, format));
  std::string truth = "id,true_propensity,control_potential_outcome\n";
  for (std::size_t r = 0; r < cohort.table.size(); ++r)
    truth += fmt::format("{},{:.17g},{:.17g}\n", cohort.table.ids[r], cohort.true_propensity[r],
                         cohort.control_potential_outcome[r]);
  write_file(dir / "truth.csv", truth);

  StudyConfig file_config = config;
  file_config.data_path = (dir / "cohort.csv").string();
  file_config.schema = synthetic_schema(config.synthetic);
  file_config.label_columns = format.label_columns;
  write_file(dir / "cohort_config.json", config_to_json_text(file_config));
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
  return out;
}

}  // namespace obsmatch
