#pragma once

// Config-driven experiment runner behind the `bilevel` command.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bilevel/outer.hpp"
#include "bilevel/problems.hpp"

namespace bilevel::cli {

enum class ExperimentKind { HyperClean, HyperRepr, RidgeVerify, GradCheck, Convergence };

std::string_view to_string(ExperimentKind kind);
/// Throws ConfigError for unknown names.
ExperimentKind parse_experiment_kind(std::string_view name);

/// Which problem a gradcheck run builds.
enum class ProblemKind { HyperClean, Ridge, HyperRepr };
std::string_view to_string(ProblemKind kind);

struct ExperimentInfo {
  ExperimentKind kind;
  std::string description;
};
const std::vector<ExperimentInfo>& experiments();

struct ChecksConfig {
  int lambda_samples = 10;
  std::vector<int> unroll_lengths{0, 1, 5, 25};
  Scalar mode_tolerance = 1e-8;
  Scalar fd_tolerance = 1e-4;
  int transpose_probes = 20;
  int oracle_T = 2000;
  Scalar oracle_tolerance = 1e-7;
  int convergence_T_max = 60;
  Scalar ratio_tolerance = 0.2;
  Scalar weight_gap = 0.2;
  Scalar stationarity_tolerance = 1e-5;
};

struct RunConfig {
  ExperimentKind kind = ExperimentKind::GradCheck;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  bool write_data = false;

  ProblemKind problem = ProblemKind::HyperClean;  // gradcheck only
  HyperCleanParams hyperclean;
  Scalar hyperclean_l2 = 1e-4;
  RegressionParams regression;
  Scalar ridge_l2 = 1.0;
  SharedSubspaceParams subspace;
  Index heldout_tasks = 20;
  HyperReprSpec repr;

  DynamicsSpec dynamics;
  bool eta_auto = false;  // ridge kinds: eta = 1 / lambda_max of the inner Hessian
  int T = 10;
  InitKind init = InitKind::Zero;
  Scalar init_scale = 0.1;
  Index inner_batch = 0;

  OuterConfig outer;
  ChecksConfig checks;
};

/// Parses the INI-style config text. Every error is a ConfigError naming the
/// line or the `section.key` at fault.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::filesystem::path& path);

/// The fully resolved config (every default materialized) as JSON text.
std::string resolved_config_json(const RunConfig& config);

/// Config output directory unless the BILEVEL_OUTPUT_DIR environment variable is set.
std::filesystem::path resolve_output_dir(const RunConfig& config);

struct Verdict {
  std::string name;
  bool pass = false;
  Scalar measured = 0.0;
  Scalar threshold = 0.0;
};

struct RunReport {
  std::filesystem::path output_dir;
  std::vector<Verdict> verdicts;
  std::vector<std::string> artifacts;

  bool all_pass() const;
};

/// Runs the experiment and writes trace.csv, timing.csv, summary.json,
/// meta.json, config.json and, for checks, verdict.json into the output directory.
RunReport run_experiment(const RunConfig& config);

inline constexpr int kExitPass = 0;
inline constexpr int kExitVerdictFailure = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitRuntimeError = 3;

}  // namespace bilevel::cli
