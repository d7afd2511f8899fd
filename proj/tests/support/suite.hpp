#pragma once

// Small instances of every shipped problem family for cross-checking the
// differentiation engines.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bilevel/problems.hpp"

namespace bilevel::testing {

struct SuiteCase {
  std::string name;
  ProblemInstance instance;
  /// Random feasible lambda with the instance's layout, safely inside the box.
  std::function<HyperVector(std::uint64_t seed)> sample;
};

/// One case per problem family for the given dynamics, unrolled for T steps.
std::vector<SuiteCase> problem_suite(DynamicsKind kind, int T);

/// Dynamics specs used by the suite, with step sizes small enough for every family.
DynamicsSpec suite_dynamics(DynamicsKind kind, Scalar eta);

/// 30 x 5 training / 20 x 5 validation regression data from a fixed seed.
std::pair<Dataset, Dataset> ridge_data(std::uint64_t seed, Index n_train = 30,
                                       Index n_val = 20, Index features = 5);

/// Quadratic inner with PSD coefficient matrices, coefficients boxed in [0, 1].
QuadraticInner random_quadratic(Index dim, Index coeffs, std::uint64_t seed);

/// The scalar example L = (w - lambda)^2, E = (w - 1)^2, zero start.
ProblemInstance scalar_pull(Scalar lambda, Scalar eta, int T,
                            DynamicsKind kind = DynamicsKind::GradientDescent);

const std::vector<DynamicsKind>& all_dynamics();

}  // namespace bilevel::testing
