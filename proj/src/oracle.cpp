#include "bilevel/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "bilevel/hypergrad.hpp"
#include "bilevel/io.hpp"

namespace bilevel {

Matrix QuadraticInner::A(const Vector& coeffs) const {
  Matrix out = A0;
  for (std::size_t k = 0; k < A_terms.size(); ++k) out += coeffs[static_cast<Index>(k)] * A_terms[k];
  return out;
}

Vector QuadraticInner::b(const Vector& coeffs) const { return b0 + B * coeffs; }

QuadraticInner QuadraticInner::ridge(const Matrix& X, const Vector& y, Scalar reg_lower) {
  const Index d = X.cols();
  return make_quadratic_inner(X.transpose() * X, {Matrix::Identity(d, d)}, X.transpose() * y,
                              Matrix::Zero(d, 1), Vector::Constant(1, reg_lower),
                              Vector::Constant(1, HyperVector::kInf));
}

namespace {

Scalar min_eigenvalue(const Matrix& A) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(A, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

bool is_psd(const Matrix& A) { return min_eigenvalue(A) >= -1e-12 * (1.0 + A.norm()); }

}  // namespace

void validate_quadratic_inner(const QuadraticInner& q) {
  const Index d = q.A0.rows();
  const Index m = q.B.cols();
  if (q.A0.cols() != d || q.b0.size() != d || q.B.rows() != d) {
    throw Error(ErrorCode::DimensionMismatch, "quadratic inner: A0 / b0 / B shapes");
  }
  if (static_cast<Index>(q.A_terms.size()) != m || q.lower.size() != m || q.upper.size() != m) {
    throw Error(ErrorCode::DimensionMismatch,
                "quadratic inner: coefficient count vs A terms / bounds");
  }
  for (const Matrix& Ak : q.A_terms) {
    if (Ak.rows() != d || Ak.cols() != d) {
      throw Error(ErrorCode::DimensionMismatch, "quadratic inner: A term shape");
    }
  }
  // lambda_min(A(c)) is concave in c, so its minimum over a box sits at a vertex.
  std::vector<Vector> corners;
  const bool monotone = std::all_of(q.A_terms.begin(), q.A_terms.end(), is_psd);
  const bool constant = std::all_of(q.A_terms.begin(), q.A_terms.end(),
                                    [](const Matrix& Ak) { return Ak.isZero(0.0); });
  if (m == 0 || constant) {
    corners.push_back(Vector::Zero(m));
  } else if (monotone && q.lower.allFinite()) {
    corners.push_back(q.lower);
  } else if (q.lower.allFinite() && q.upper.allFinite() && m <= 16) {
    for (unsigned mask = 0; mask < (1u << m); ++mask) {
      Vector c(m);
      for (Index k = 0; k < m; ++k) c[k] = (mask >> k) & 1u ? q.upper[k] : q.lower[k];
      corners.push_back(std::move(c));
    }
  } else {
    throw Error(ErrorCode::NotPositiveDefinite,
                "cannot certify positive definiteness over an unbounded coefficient box");
  }
  for (const Vector& c : corners) {
    if (!(min_eigenvalue(q.A(c)) > 0.0)) {
      throw Error(ErrorCode::NotPositiveDefinite, "A(c) is not positive definite on the box");
    }
  }
}

QuadraticInner make_quadratic_inner(Matrix A0, std::vector<Matrix> A_terms, Vector b0, Matrix B,
                                    Vector lower, Vector upper) {
  QuadraticInner q{std::move(A0), std::move(A_terms), std::move(b0), std::move(B),
                   std::move(lower), std::move(upper)};
  validate_quadratic_inner(q);
  return q;
}

Vector exact_minimizer(const QuadraticInner& q, const Vector& coeffs) {
  if (coeffs.size() != q.coeff_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "coefficients vs quadratic inner");
  }
  const Matrix A = q.A(coeffs);
  const Vector b = q.b(coeffs);
  Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::NotPositiveDefinite, "Cholesky factorization failed");
  }
  Vector w = llt.solve(b);
  const Scalar residual = (A * w - b).lpNorm<Eigen::Infinity>();
  if (!(residual <= 1e-10 * (b.lpNorm<Eigen::Infinity>() + 1.0))) {
    throw Error(ErrorCode::NotPositiveDefinite,
                "solve residual " + format_scalar(residual) + " too large; A is near-singular");
  }
  return w;
}

Vector exact_hypergrad(const QuadraticInner& q, const OuterObjective& outer, const HyperVector& h,
                       std::string_view coeffs, const DataView& validation) {
  const Segment& seg = h.segment(coeffs);
  const Vector c = h.values().segment(seg.offset, seg.length);
  const Vector w = exact_minimizer(q, c);
  const Matrix A = q.A(c);
  Eigen::LLT<Matrix> llt(A);
  // u = A^{-1} grad_w E, so d f / d c_k = u^T (B_k - A_k w*).
  const Vector u = llt.solve(outer.grad_w(w, h, validation));
  Vector grad = outer.grad_hyper(w, h, validation);
  for (Index k = 0; k < seg.length; ++k) {
    grad[seg.offset + k] += u.dot(q.B.col(k) - q.A_terms[static_cast<std::size_t>(k)] * w);
  }
  return grad;
}

Scalar exact_objective(const QuadraticInner& q, const OuterObjective& outer, const HyperVector& h,
                       std::string_view coeffs, const DataView& validation) {
  const Vector w = exact_minimizer(q, h.segment_values(coeffs));
  return outer.value(w, h, validation);
}

Scalar ConvergenceTable::ratio_relative_error() const {
  return std::abs(fitted_ratio - theory_ratio) / std::abs(theory_ratio);
}

ConvergenceTable convergence_harness(const BilevelProblem& problem, const QuadraticInner& q,
                                     const HyperVector& h, std::string_view coeffs,
                                     std::span<const int> T_list) {
  const DynamicsKind kind = problem.dynamics->kind();
  if (kind != DynamicsKind::GradientDescent && kind != DynamicsKind::HyperLRGradientDescent) {
    throw Error(ErrorCode::BadParams, "convergence harness needs gradient-descent dynamics");
  }
  const Vector c = h.segment_values(coeffs);
  Eigen::SelfAdjointEigenSolver<Matrix> es(2.0 * q.A(c), Eigen::EigenvaluesOnly);
  ConvergenceTable table;
  table.step_size = problem.dynamics->step_size(h);
  table.mu = es.eigenvalues().minCoeff();
  const Scalar lmax = es.eigenvalues().maxCoeff();
  if (!(table.step_size < 2.0 / lmax)) {
    throw Error(ErrorCode::NonContractive, "step size " + format_scalar(table.step_size) +
                                               " >= 2 / lambda_max = " +
                                               format_scalar(2.0 / lmax));
  }
  table.theory_ratio = 1.0 - table.step_size * table.mu;

  const Vector exact = exact_hypergrad(q, *problem.outer, h, coeffs, problem.validation_view());
  for (int T : T_list) {
    const BilevelProblem pT = problem.with_unroll(T);
    const HypergradResult r = reverse_hypergrad(pT, unroll(pT, h), {.verify_replay = false});
    const Scalar err = (r.grad - exact).norm();
    table.rows.push_back({T, err, err < ConvergenceTable::kErrorFloor});
  }

  // T0: earliest row from which the non-floor errors never increase.
  std::vector<const ConvergenceRow*> usable;
  for (const auto& row : table.rows) {
    if (!row.below_floor) usable.push_back(&row);
  }
  std::size_t start = usable.size();
  while (start > 0 && (start == usable.size() || usable[start - 1]->error >= usable[start]->error)) {
    --start;
  }
  table.monotone_after_T0 = !usable.empty();
  table.T0 = usable.empty() ? 0 : usable[start]->T;

  // Least-squares slope of log(error) against T.
  Scalar sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t i = start; i < usable.size(); ++i) {
    const Scalar x = usable[i]->T;
    const Scalar y = std::log(usable[i]->error);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  table.fit_points = n;
  if (n >= 2) {
    const Scalar slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    table.fitted_ratio = std::exp(slope);
  } else {
    table.fitted_ratio = std::numeric_limits<Scalar>::quiet_NaN();
  }
  return table;
}

void write_convergence_csv(const std::filesystem::path& path, const ConvergenceTable& table) {
  std::ostringstream out;
  out << "T,error,below_floor,fitted_ratio,theory_ratio\n";
  for (const auto& row : table.rows) {
    out << row.T << ',' << format_scalar(row.error) << ',' << (row.below_floor ? 1 : 0) << ','
        << format_scalar(table.fitted_ratio) << ',' << format_scalar(table.theory_ratio) << '\n';
  }
  write_file_atomic(path, out.str());
}

Vector principal_angles(const Matrix& a_rows, const Matrix& b_rows) {
  if (a_rows.cols() != b_rows.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "principal_angles: ambient dimensions differ");
  }
  auto basis = [](const Matrix& rows) {
    Eigen::JacobiSVD<Matrix> svd(rows.transpose(), Eigen::ComputeThinU);
    svd.setThreshold(1e-12);
    return Matrix(svd.matrixU().leftCols(svd.rank()));
  };
  const Matrix qa = basis(a_rows);
  const Matrix qb = basis(b_rows);
  Eigen::JacobiSVD<Matrix> svd(qa.transpose() * qb);
  Vector angles = svd.singularValues().unaryExpr([](Scalar s) {
    return std::acos(std::clamp(s, Scalar{-1}, Scalar{1}));
  });
  std::sort(angles.begin(), angles.end());
  return angles;
}

}  // namespace bilevel
