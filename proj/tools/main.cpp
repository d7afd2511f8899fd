// bilevel: run, validate and list hypergradient experiments.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "bilevel/cli.hpp"

namespace {

int report_error(const bilevel::Error& e) {
  std::cerr << "error: " << e.what() << '\n';
  return e.code() == bilevel::ErrorCode::ConfigError ? bilevel::cli::kExitConfigError
                                                     : bilevel::cli::kExitRuntimeError;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace bilevel::cli;
  CLI::App app{"Gradient-based hyperparameter optimization and meta-learning experiments"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "run the experiment described by a config file");
  run->add_option("config", config_path, "config file")->required();
  auto* validate = app.add_subcommand("validate", "parse and validate a config file only");
  validate->add_option("config", config_path, "config file")->required();
  auto* list = app.add_subcommand("list-experiments", "list the available experiment kinds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfigError;
  }

  if (list->parsed()) {
    for (const auto& e : experiments()) {
      std::printf("%-14s %s\n", std::string(to_string(e.kind)).c_str(), e.description.c_str());
    }
    return kExitPass;
  }

  try {
    const RunConfig config = parse_config(config_path);
    if (validate->parsed()) {
      std::cout << resolved_config_json(config);
      return kExitPass;
    }
    const RunReport report = run_experiment(config);
    for (const auto& v : report.verdicts) {
      std::printf("%-32s %s  measured=%.6g threshold=%.6g\n", v.name.c_str(),
                  v.pass ? "PASS" : "FAIL", v.measured, v.threshold);
    }
    std::printf("artifacts written to %s\n", report.output_dir.string().c_str());
    return report.all_pass() ? kExitPass : kExitVerdictFailure;
  } catch (const bilevel::Error& e) {
    return report_error(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntimeError;
  }
}
