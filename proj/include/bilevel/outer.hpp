#pragma once

// Projected gradient descent over lambda driven by hypergradients.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "bilevel/core.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/problems.hpp"

namespace bilevel {

/// Coordinate-wise clamp onto the box. Idempotent.
HyperVector project_box(const HyperVector& h);

struct OuterConfig {
  Scalar beta = 0.1;
  int max_steps = 100;
  HypergradMode mode = HypergradMode::Reverse;
  bool warm_restart = false;
  Index meta_batch = 0;  // 0 means full batch
  Scalar tolerance = 0.0;
  std::uint64_t seed = 0;
  int divergence_window = 20;
  Scalar divergence_factor = 10.0;
};

/// Throws BadParams unless beta > 0, max_steps > 0, tolerance >= 0.
void validate(const OuterConfig& config);

struct OuterRecord {
  int step = 0;
  Scalar f_value = 0.0;
  Scalar hypergrad_inf_norm = 0.0;
  std::uint64_t lambda_hash = 0;
  Scalar inner_final_loss = 0.0;
  double wall_ms = 0.0;
};

struct OuterTrace {
  std::vector<OuterRecord> records;
};

enum class StopReason { Converged, MaxSteps };
std::string_view to_string(StopReason reason);

struct OuterResult {
  HyperVector hyper;
  OuterTrace trace;
  StopReason stop = StopReason::MaxSteps;
  std::vector<HyperVector> iterates;  // lambda_0 .. lambda_final
};

/// Source of f_T and its hypergradient for outer step `step`.
class HypergradSource {
 public:
  virtual ~HypergradSource() = default;
  virtual HypergradResult evaluate(const HyperVector& h, int step, HypergradMode mode,
                                   const WarmStartState* warm) const = 0;
  virtual bool supports_warm_start() const { return true; }
};

/// Deterministic single problem (hyperparameter optimization).
class ProblemSource final : public HypergradSource {
 public:
  explicit ProblemSource(BilevelProblem problem) : problem_(std::move(problem)) {}
  HypergradResult evaluate(const HyperVector& h, int step, HypergradMode mode,
                           const WarmStartState* warm) const override;

 private:
  BilevelProblem problem_;
};

HypergradResult compute_hypergrad(const BilevelProblem& problem, const HyperVector& h,
                                  HypergradMode mode, const WarmStartState* warm = nullptr);

/// Meta-learning over episodes: each step averages per-episode hypergradients
/// over a meta-batch. Batches are disjoint within an epoch and the episode
/// order is reshuffled every epoch. Heads start cold every step.
class MetaSource final : public HypergradSource {
 public:
  MetaSource(std::shared_ptr<const MetaDataset> meta, ProblemOptions options, Index batch,
             std::uint64_t seed);

  HypergradResult evaluate(const HyperVector& h, int step, HypergradMode mode,
                           const WarmStartState* warm) const override;
  bool supports_warm_start() const override { return false; }

  /// Average of per-episode hypergradients over `episodes`, in the given order.
  HypergradResult average(const HyperVector& h, std::span<const Index> episodes,
                          HypergradMode mode) const;
  HypergradResult full(const HyperVector& h, HypergradMode mode) const;
  /// Mean f_T over every episode, no derivatives.
  Scalar mean_objective(const HyperVector& h) const;
  /// Sorted episode indices used at outer step `step`.
  std::vector<Index> batch_for_step(int step) const;

 private:
  std::shared_ptr<const MetaDataset> meta_;
  ProblemOptions options_;
  Index batch_;
  std::uint64_t seed_;
};

/// lambda_{s+1} = project_box(lambda_s - beta grad f_T(lambda_s)) until the
/// projected-gradient residual drops to the tolerance or max_steps is hit.
/// Throws DivergenceDetected when f_T rises above divergence_factor * |f_0|
/// for divergence_window consecutive increasing steps.
OuterResult run_outer(const HypergradSource& source, const OuterConfig& config,
                      const HyperVector& initial);
OuterResult run_outer(const BilevelProblem& problem, const OuterConfig& config,
                      const HyperVector& initial);

/// Columns: step, f_value, hypergrad_inf_norm, inner_final_loss, lambda_hash.
std::string trace_csv(const OuterTrace& trace);
/// Columns: step, wall_ms.
std::string timing_csv(const OuterTrace& trace);

}  // namespace bilevel
