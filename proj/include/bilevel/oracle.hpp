#pragma once

// Closed-form ground truth for strongly convex quadratic inner problems:
// exact minimizers, implicit-differentiation hypergradients and the harness
// that measures how fast unrolled hypergradients approach them.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bilevel/core.hpp"

namespace bilevel {

/// Inner loss w^T A(c) w - 2 b(c)^T w with A(c) = A0 + sum_k c_k A_k and
/// b(c) = b0 + B c, where c are m coefficients taken from a hyper segment.
/// The Hessian in w is 2 A(c).
struct QuadraticInner {
  Matrix A0;
  std::vector<Matrix> A_terms;
  Vector b0;
  Matrix B;  // dim x m
  Vector lower;
  Vector upper;

  Index dim() const { return A0.rows(); }
  Index coeff_dim() const { return B.cols(); }
  Matrix A(const Vector& coeffs) const;
  Vector b(const Vector& coeffs) const;

  /// Ridge: A = X^T X + c I, b = X^T y, c in [reg_lower, inf).
  static QuadraticInner ridge(const Matrix& X, const Vector& y, Scalar reg_lower = 1e-8);
};

/// Checks shapes and lambda_min(A(c)) > 0 over the coefficient box.
/// Throws NotPositiveDefinite or DimensionMismatch.
QuadraticInner make_quadratic_inner(Matrix A0, std::vector<Matrix> A_terms, Vector b0, Matrix B,
                                    Vector lower, Vector upper);
void validate_quadratic_inner(const QuadraticInner& q);

/// Solves A(c) w = b(c) with a dense Cholesky factorization.
Vector exact_minimizer(const QuadraticInner& q, const Vector& coeffs);

/// grad f(lambda) by implicit differentiation at w*(lambda). `coeffs` names the
/// hyper segment holding c; other coordinates only see outer.grad_hyper.
Vector exact_hypergrad(const QuadraticInner& q, const OuterObjective& outer, const HyperVector& h,
                       std::string_view coeffs, const DataView& validation);

/// f(lambda) = E(w*(lambda), lambda).
Scalar exact_objective(const QuadraticInner& q, const OuterObjective& outer, const HyperVector& h,
                       std::string_view coeffs, const DataView& validation);

struct ConvergenceRow {
  int T = 0;
  Scalar error = 0.0;
  bool below_floor = false;
};

struct ConvergenceTable {
  std::vector<ConvergenceRow> rows;
  Scalar fitted_ratio = 0.0;
  Scalar theory_ratio = 0.0;
  Scalar step_size = 0.0;
  Scalar mu = 0.0;  // lambda_min of the inner Hessian 2A
  int T0 = 0;
  bool monotone_after_T0 = false;
  int fit_points = 0;

  static constexpr Scalar kErrorFloor = 1e-12;
  /// |fitted - theory| / theory
  Scalar ratio_relative_error() const;
};

/// Errors ||grad f_T - grad f||_2 for each T, rate fit on the log errors at or
/// after T0 (the first T from which errors never increase), excluding points
/// under the 1e-12 floor. Requires gradient-descent dynamics with
/// eta < 2 / lambda_max(2A); throws NonContractive otherwise.
ConvergenceTable convergence_harness(const BilevelProblem& problem, const QuadraticInner& q,
                                     const HyperVector& h, std::string_view coeffs,
                                     std::span<const int> T_list);

void write_convergence_csv(const std::filesystem::path& path, const ConvergenceTable& table);

/// Principal angles (radians, ascending) between the row spaces of two
/// matrices with the same number of columns.
Vector principal_angles(const Matrix& a_rows, const Matrix& b_rows);

}  // namespace bilevel
