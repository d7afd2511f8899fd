#include "bilevel/hypergrad.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace bilevel {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void check_hyper(const BilevelProblem& problem, const HyperVector& h) {
  if (h.size() != problem.hyper_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "hyperparameters (" + std::to_string(h.size()) +
                                                  ") vs problem (" +
                                                  std::to_string(problem.hyper_dim()) + ")");
  }
  if (!h.is_feasible()) throw Error(ErrorCode::BadParams, "hyperparameters outside their box");
}

Vector start_state(const BilevelProblem& problem, const HyperVector& h,
                   const WarmStartState* warm) {
  if (warm != nullptr && warm->active()) {
    if (warm->carried->size() != problem.state_dim()) {
      throw Error(ErrorCode::DimensionMismatch, "carried warm-start state vs dynamics state");
    }
    return *warm->carried;
  }
  return problem.init->initial_state(h);
}

Scalar full_inner_loss(const BilevelProblem& problem, const Vector& state, const HyperVector& h) {
  return problem.inner->value(state.head(problem.param_dim()), h, problem.train_view());
}

std::string coordinate_name(const HyperVector& h, Index k) {
  for (const Segment& s : h.segments()) {
    if (k >= s.offset && k < s.offset + s.length) {
      return s.name + "[" + std::to_string(k - s.offset) + "]";
    }
  }
  return "#" + std::to_string(k);
}

}  // namespace

std::string_view to_string(HypergradMode mode) {
  switch (mode) {
    case HypergradMode::Reverse: return "reverse";
    case HypergradMode::Forward: return "forward";
    case HypergradMode::FiniteDifference: return "finite-diff";
  }
  return "unknown";
}

Trajectory unroll(const BilevelProblem& problem, const HyperVector& h,
                  const WarmStartState* warm) {
  check_hyper(problem, h);
  Trajectory traj;
  traj.hyper = h;
  traj.warm_started = warm != nullptr && warm->active();
  traj.states.reserve(static_cast<std::size_t>(problem.T) + 1);
  traj.states.push_back(start_state(problem, h, warm));
  traj.inner_losses.push_back(full_inner_loss(problem, traj.states.back(), h));
  for (int t = 1; t <= problem.T; ++t) {
    traj.step_rows.push_back(problem.step_rows(t));
    const DataView data = problem.train_view(traj.step_rows.back());
    Vector next = problem.dynamics->step(*problem.inner, traj.states.back(), h, data);
    if (!next.allFinite()) {
      throw Error(ErrorCode::NonFiniteState, "state became non-finite at step t = " +
                                                 std::to_string(t));
    }
    traj.inner_losses.push_back(full_inner_loss(problem, next, h));
    traj.states.push_back(std::move(next));
  }
  return traj;
}

HypergradResult reverse_hypergrad(const BilevelProblem& problem, const Trajectory& traj,
                                  const ReverseOptions& options) {
  const auto start = Clock::now();
  const HyperVector& h = traj.hyper;
  check_hyper(problem, h);
  if (traj.T() != problem.T || traj.step_rows.size() != static_cast<std::size_t>(problem.T)) {
    throw Error(ErrorCode::TrajectoryMismatch, "trajectory has " +
                                                   std::to_string(traj.states.size()) +
                                                   " states, problem expects T + 1 = " +
                                                   std::to_string(problem.T + 1));
  }
  const Index d = problem.param_dim();
  const Index n = problem.state_dim();
  for (const Vector& s : traj.states) {
    if (s.size() != n) throw Error(ErrorCode::TrajectoryMismatch, "state dimension");
  }
  if (options.verify_replay) {
    if (!traj.warm_started && traj.states.front() != problem.init->initial_state(h)) {
      throw Error(ErrorCode::TrajectoryMismatch, "w_0 differs from Phi_0(lambda)");
    }
    for (int t = 1; t <= problem.T; ++t) {
      const auto& rows = traj.step_rows[static_cast<std::size_t>(t - 1)];
      if (rows != problem.step_rows(t)) {
        throw Error(ErrorCode::TrajectoryMismatch, "row slice differs at t = " + std::to_string(t));
      }
      const Vector replay = problem.dynamics->step(
          *problem.inner, traj.states[static_cast<std::size_t>(t - 1)], h,
          problem.train_view(rows));
      if (replay != traj.states[static_cast<std::size_t>(t)]) {
        throw Error(ErrorCode::TrajectoryMismatch, "replay differs at t = " + std::to_string(t));
      }
    }
  }

  const DataView val = problem.validation_view();
  const Vector w_final = traj.final_state().head(d);
  HypergradResult result;
  result.mode = HypergradMode::Reverse;
  result.f_value = problem.outer->value(w_final, h, val);
  result.grad = problem.outer->grad_hyper(w_final, h, val);

  Vector alpha = Vector::Zero(n);
  alpha.head(d) = problem.outer->grad_w(w_final, h, val);
  for (int t = problem.T; t >= 1; --t) {
    const auto idx = static_cast<std::size_t>(t - 1);
    const DataView data = problem.train_view(traj.step_rows[idx]);
    const Vector& prev = traj.states[idx];
    result.grad += problem.dynamics->vjp_hyper(*problem.inner, prev, h, data, alpha);
    alpha = problem.dynamics->vjp_state(*problem.inner, prev, h, data, alpha);
  }
  if (!traj.warm_started && problem.init->depends_on_hyper()) {
    result.grad += problem.init->vjp(h, alpha);
  }
  if (!result.grad.allFinite()) {
    throw Error(ErrorCode::NonFiniteState, "hypergradient is not finite");
  }
  result.final_state = traj.final_state();
  result.inner_losses = traj.inner_losses;
  result.wall_ms = elapsed_ms(start);
  return result;
}

HypergradResult forward_hypergrad(const BilevelProblem& problem, const HyperVector& h,
                                  const WarmStartState* warm, const Matrix* directions) {
  const auto start = Clock::now();
  check_hyper(problem, h);
  const Index d = problem.param_dim();
  const Index m = h.size();
  const Matrix identity = directions == nullptr ? Matrix::Identity(m, m) : Matrix();
  const Matrix& D = directions == nullptr ? identity : *directions;
  if (D.rows() != m) {
    throw Error(ErrorCode::DimensionMismatch, "tangent directions rows vs hyper dimension");
  }
  const Index k = D.cols();
  const bool warm_started = warm != nullptr && warm->active();

  Vector state = start_state(problem, h, warm);
  Matrix Z = (warm_started || !problem.init->depends_on_hyper())
                 ? Matrix::Zero(problem.state_dim(), k)
                 : problem.init->jvp(h, D);

  HypergradResult result;
  result.mode = HypergradMode::Forward;
  result.inner_losses.push_back(full_inner_loss(problem, state, h));
  for (int t = 1; t <= problem.T; ++t) {
    const auto rows = problem.step_rows(t);
    const DataView data = problem.train_view(rows);
    for (Index c = 0; c < k; ++c) {
      Z.col(c) = problem.dynamics->jvp(*problem.inner, state, h, data, Z.col(c), D.col(c));
    }
    state = problem.dynamics->step(*problem.inner, state, h, data);
    if (!state.allFinite()) {
      throw Error(ErrorCode::NonFiniteState, "state became non-finite at step t = " +
                                                 std::to_string(t));
    }
    result.inner_losses.push_back(full_inner_loss(problem, state, h));
  }

  const DataView val = problem.validation_view();
  const Vector w_final = state.head(d);
  result.f_value = problem.outer->value(w_final, h, val);
  result.grad = Z.topRows(d).transpose() * problem.outer->grad_w(w_final, h, val) +
                D.transpose() * problem.outer->grad_hyper(w_final, h, val);
  if (!result.grad.allFinite()) {
    throw Error(ErrorCode::NonFiniteState, "hypergradient is not finite");
  }
  result.final_state = std::move(state);
  result.wall_ms = elapsed_ms(start);
  return result;
}

Scalar truncated_objective(const BilevelProblem& problem, const HyperVector& h,
                           const WarmStartState* warm) {
  check_hyper(problem, h);
  Vector state = start_state(problem, h, warm);
  for (int t = 1; t <= problem.T; ++t) {
    const auto rows = problem.step_rows(t);
    state = problem.dynamics->step(*problem.inner, state, h, problem.train_view(rows));
    if (!state.allFinite()) {
      throw Error(ErrorCode::NonFiniteState, "state became non-finite at step t = " +
                                                 std::to_string(t));
    }
  }
  return problem.outer->value(state.head(problem.param_dim()), h, problem.validation_view());
}

Scalar default_fd_step(Scalar lambda_k) {
  return std::cbrt(std::numeric_limits<Scalar>::epsilon()) * (1.0 + std::abs(lambda_k));
}

HypergradResult fd_hypergrad(const BilevelProblem& problem, const HyperVector& h,
                             std::optional<Scalar> epsilon, const WarmStartState* warm) {
  const auto start = Clock::now();
  check_hyper(problem, h);
  const Index m = h.size();
  if (epsilon && !(*epsilon > 0.0)) throw Error(ErrorCode::BadParams, "epsilon must be positive");
  for (Index k = 0; k < m; ++k) {
    const Scalar eps = epsilon ? *epsilon : default_fd_step(h.values()[k]);
    if (h.values()[k] - eps < h.lower()[k] || h.values()[k] + eps > h.upper()[k]) {
      throw Error(ErrorCode::BoundaryTooClose,
                  "coordinate " + coordinate_name(h, k) + " is within epsilon of its bound");
    }
  }

  const Trajectory center = unroll(problem, h, warm);
  HypergradResult result;
  result.mode = HypergradMode::FiniteDifference;
  result.f_value = problem.outer->value(center.final_state().head(problem.param_dim()), h,
                                        problem.validation_view());
  result.final_state = center.final_state();
  result.inner_losses = center.inner_losses;
  result.grad.resize(m);
  HyperVector probe = h;
  for (Index k = 0; k < m; ++k) {
    const Scalar base = h.values()[k];
    const Scalar eps = epsilon ? *epsilon : default_fd_step(base);
    const Scalar up = base + eps;
    const Scalar down = base - eps;
    probe.values()[k] = up;
    const Scalar f_plus = truncated_objective(problem, probe, warm);
    probe.values()[k] = down;
    const Scalar f_minus = truncated_objective(problem, probe, warm);
    probe.values()[k] = base;
    // divide by the representable step, not 2 * eps
    result.grad[k] = (f_plus - f_minus) / (up - down);
  }
  result.wall_ms = elapsed_ms(start);
  return result;
}

Scalar relative_inf_error(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "relative_inf_error");
  if (a.size() == 0) return 0.0;
  return (a - b).lpNorm<Eigen::Infinity>() / (b.lpNorm<Eigen::Infinity>() + 1e-12);
}

}  // namespace bilevel
