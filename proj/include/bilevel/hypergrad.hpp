#pragma once

// Unrolled inner optimization and the three hypergradient routes: reverse
// (adjoint sweep over the stored trajectory), forward (tangent propagation)
// and central finite differences.

#include <optional>
#include <vector>

#include "bilevel/core.hpp"

namespace bilevel {

/// Inner state carried between outer iterations. When enabled and populated,
/// unrolls start from `carried` and treat it as independent of lambda.
struct WarmStartState {
  bool enabled = false;
  std::optional<Vector> carried;

  bool active() const { return enabled && carried.has_value(); }
};

/// Stored unroll w_0..w_T (stacked states), the lambda it was produced at and
/// the row subsets used per step (empty entries for full-batch steps).
struct Trajectory {
  std::vector<Vector> states;
  HyperVector hyper;
  std::vector<std::vector<Index>> step_rows;  // step_rows[t-1] for step t
  std::vector<Scalar> inner_losses;           // L at w_t on the step-t data, t = 0..T
  bool warm_started = false;

  int T() const { return static_cast<int>(states.size()) - 1; }
  const Vector& final_state() const { return states.back(); }
};

enum class HypergradMode { Reverse, Forward, FiniteDifference };

std::string_view to_string(HypergradMode mode);

struct HypergradResult {
  Scalar f_value = 0.0;
  Vector grad;
  HypergradMode mode = HypergradMode::Reverse;
  Vector final_state;
  std::vector<Scalar> inner_losses;
  double wall_ms = 0.0;
};

Trajectory unroll(const BilevelProblem& problem, const HyperVector& h,
                  const WarmStartState* warm = nullptr);

struct ReverseOptions {
  /// Recompute every step and require bitwise equality with the stored states.
  bool verify_replay = true;
};

HypergradResult reverse_hypergrad(const BilevelProblem& problem, const Trajectory& trajectory,
                                  const ReverseOptions& options = {});

/// Forward mode. With `directions` (hyper_dim x k) the result holds the k
/// directional derivatives D^T grad f_T; without it, the full gradient.
HypergradResult forward_hypergrad(const BilevelProblem& problem, const HyperVector& h,
                                  const WarmStartState* warm = nullptr,
                                  const Matrix* directions = nullptr);

/// f_T(lambda) = E(w_T, lambda) with nothing else computed.
Scalar truncated_objective(const BilevelProblem& problem, const HyperVector& h,
                           const WarmStartState* warm = nullptr);

/// Default central-difference step for coordinate k: cbrt(machine eps) * (1 + |lambda_k|).
Scalar default_fd_step(Scalar lambda_k);

/// Central differences per coordinate. When `epsilon` is given it is used
/// as-is for every coordinate. Throws BoundaryTooClose when lambda_k +- eps
/// leaves the box.
HypergradResult fd_hypergrad(const BilevelProblem& problem, const HyperVector& h,
                             std::optional<Scalar> epsilon = std::nullopt,
                             const WarmStartState* warm = nullptr);

/// ||a - b||_inf / (||b||_inf + 1e-12)
Scalar relative_inf_error(const Vector& a, const Vector& b);

}  // namespace bilevel
