#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "obsmatch/common.hpp"
#include "obsmatch/config.hpp"
#include "obsmatch/pipeline.hpp"
#include "oracles.hpp"

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  bool print_defaults = false;
};

obsmatch::StudyConfig resolve_config(const GlobalOptions& g) {
  obsmatch::StudyConfig c = g.config_path.empty() ? obsmatch::default_config() : obsmatch::load_config(g.config_path);
  if (g.seed) c.seed = *g.seed;
  if (g.out) c.output_dir = *g.out;
  if (g.threads) c.threads = *g.threads;
  obsmatch::validate_config(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Matched observational study pipeline"};
  GlobalOptions g;
  app.add_option("--config", g.config_path, "Study config (JSON); defaults are used when omitted");
  app.add_option("--seed", g.seed, "Root seed, overrides the config");
  app.add_option("--out", g.out, "Output directory, overrides the config");
  app.add_option("--threads", g.threads, "Worker threads; results do not depend on this");
  app.add_flag("--print-defaults", g.print_defaults, "Print the default config and exit");

  std::string stage_name;
  auto* simulate = app.add_subcommand("simulate", "Write a synthetic cohort and a config that reads it");
  auto* run = app.add_subcommand("run", "Run every stage in order");
  auto* oracle = app.add_subcommand("oracle", "Run the brute-force verification suite");
  std::uint64_t oracle_seed = 12345;
  oracle->add_option("--oracle-seed", oracle_seed, "Seed for the generated instances");
  std::vector<std::pair<CLI::App*, obsmatch::Stage>> stages;
  for (auto st : {obsmatch::Stage::propensity, obsmatch::Stage::match, obsmatch::Stage::balance,
                  obsmatch::Stage::infer, obsmatch::Stage::sensitivity, obsmatch::Stage::report})
    stages.emplace_back(app.add_subcommand(obsmatch::to_string(st), "Run the " + obsmatch::to_string(st) + " stage"), st);
  app.require_subcommand(0, 1);
  simulate->fallthrough();
  run->fallthrough();
  oracle->fallthrough();
  for (auto& [sub, st] : stages) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (g.print_defaults) {
      std::cout << obsmatch::config_to_json_text(obsmatch::default_config());
      return 0;
    }
    if (oracle->parsed()) return obsmatch::oracle::run_suite(std::cout, oracle_seed) ? 0 : 2;

    const auto config = resolve_config(g);
    if (simulate->parsed()) {
      obsmatch::write_simulation(config, config.output_dir);
      std::cerr << "wrote synthetic cohort to " << config.output_dir << "\n";
      return 0;
    }
    if (run->parsed()) {
      obsmatch::run_pipeline(config);
      std::cerr << "pipeline finished; outputs in " << config.output_dir << "\n";
      return 0;
    }
    for (const auto& [sub, st] : stages) {
      if (sub->parsed()) {
        obsmatch::run_stage(st, config);
        std::cerr << obsmatch::to_string(st) << " stage finished\n";
        return 0;
      }
    }
    std::cerr << app.help();
    return 1;
  } catch (const obsmatch::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 1;
  } catch (const obsmatch::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const obsmatch::ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
