#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "chguide/runner.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Characteristic-guidance diffusion experiments"};
  app.require_subcommand(0, 1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool paired = false;
  app.add_option("--config", config_path, "Experiment config file (key = value with [section] headers)");
  app.add_option("--out", out_dir, "Output directory (overrides run.out)");
  app.add_option("--seed", seed, "Top-level seed (overrides run.seed)");
  app.add_flag("--paired", paired, "Run cf and ch with the same schedule, sampler and seed");
  app.fallthrough();

  const char* names[] = {"gaussian", "mixture", "magnet", "diagnose", "iterstudy", "mh"};
  for (const char* name : names) app.add_subcommand(name, std::string("Run the ") + name + " experiment");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  chg::ExperimentConfig config;
  try {
    std::optional<chg::Experiment> sub;
    if (!app.get_subcommands().empty()) sub = chg::parse_experiment(app.get_subcommands().front()->get_name());
    if (!config_path.empty()) {
      config = chg::load_config(config_path);
      if (sub && *sub != config.experiment) {
        throw chg::ConfigError("config file selects '" + std::string(chg::to_string(config.experiment)) +
                                   "' but the command line asks for '" + std::string(chg::to_string(*sub)) + "'",
                               0, "experiment");
      }
    } else if (sub) {
      config = chg::default_config(*sub);
    } else {
      throw chg::ConfigError("name an experiment subcommand or pass --config");
    }
    if (!out_dir.empty()) config.out = out_dir;
    if (seed) config.seed = *seed;
    if (paired) config.paired = true;
    config.validate();
  } catch (const chg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    chg::run_and_emit(config, config.out);
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kExitRuntime;
  }
  std::cout << "wrote " << config.out << '\n';
  return EXIT_SUCCESS;
}
