#include "suite.hpp"

#include <cmath>
#include <random>

namespace bilevel::testing {

namespace {

Scalar uniform(std::mt19937_64& rng, Scalar lo, Scalar hi) {
  return std::uniform_real_distribution<Scalar>(lo, hi)(rng);
}

/// Redraws the "log_lr" segment in [ln(eta/2), ln(eta)] if present.
void sample_lr(HyperVector& h, std::mt19937_64& rng, Scalar eta) {
  if (auto seg = h.find_segment("log_lr")) {
    h.values()[seg->offset] = uniform(rng, std::log(0.5 * eta), std::log(eta));
  }
}

SuiteCase ridge_case(DynamicsKind kind, int T) {
  auto [train, val] = ridge_data(11);
  ProblemOptions opt;
  opt.dynamics = suite_dynamics(kind, 0.004);
  opt.T = T;
  ProblemInstance inst = ridge_problem(train, val, opt, 1.0);
  const HyperVector base = inst.hyper;
  return {"ridge", std::move(inst), [base](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            HyperVector h = base;
            h.values()[h.segment("l2").offset] = uniform(rng, 0.05, 3.0);
            sample_lr(h, rng, 0.004);
            return h;
          }};
}

SuiteCase quadratic_case(DynamicsKind kind, int T) {
  const QuadraticInner q = random_quadratic(4, 3, 5);
  Dataset val;
  val.inputs = gaussian_vector(24, 6).reshaped(6, 4);
  val.targets = gaussian_vector(6, 7);
  ProblemOptions opt;
  opt.dynamics = suite_dynamics(kind, 0.05);
  opt.T = T;
  ProblemInstance inst = quadratic_problem(q, val, opt);
  const HyperVector base = inst.hyper;
  return {"quadratic", std::move(inst), [base](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            HyperVector h = base;
            const Segment& s = h.segment("coeffs");
            for (Index k = 0; k < s.length; ++k) h.values()[s.offset + k] = uniform(rng, 0.1, 0.9);
            sample_lr(h, rng, 0.05);
            return h;
          }};
}

SuiteCase quadratic_init_case(DynamicsKind kind, int T) {
  // Phi_0 reads the starting point from lambda.
  const QuadraticInner q = random_quadratic(3, 2, 8);
  Dataset val;
  val.inputs = gaussian_vector(15, 9).reshaped(5, 3);
  val.targets = gaussian_vector(5, 10);
  const DynamicsSpec spec = suite_dynamics(kind, 0.05);
  HyperVector h;
  h.add_segment("coeffs", Vector::Constant(2, 0.5), q.lower, q.upper);
  h.add_segment("start", Vector::Zero(3));
  append_learning_rate(h, spec);
  auto inner = std::make_shared<QuadraticInnerObjective>(q, h.size(), h.find_segment("coeffs"));
  auto outer = std::make_shared<SquaredErrorOuter>(3, h.size());
  auto dyn = make_dynamics(spec, 3);
  auto init = std::make_shared<SegmentInit>(h.segment("start"), dyn->aux_dim());
  BilevelProblem p = assemble_problem(inner, outer, dyn, init, T,
                                      std::make_shared<DatasetList>(DatasetList{Dataset{}}),
                                      std::make_shared<DatasetList>(DatasetList{val}));
  const HyperVector base = h;
  return {"quadratic-init", {std::move(p), h}, [base](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            HyperVector out = base;
            const Segment& c = out.segment("coeffs");
            for (Index k = 0; k < c.length; ++k) out.values()[c.offset + k] = uniform(rng, 0.1, 0.9);
            const Segment& s = out.segment("start");
            for (Index k = 0; k < s.length; ++k) out.values()[s.offset + k] = uniform(rng, -1, 1);
            sample_lr(out, rng, 0.05);
            return out;
          }};
}

SuiteCase hyperclean_case(DynamicsKind kind, int T) {
  HyperCleanParams params;
  params.n_train = 20;
  params.n_validation = 15;
  params.n_test = 10;
  params.features = 5;
  HyperCleanData data = generate_hyperclean(params, 21);
  HyperCleanOptions opt;
  opt.base.dynamics = suite_dynamics(kind, 0.5);
  opt.base.T = T;
  opt.base.init = InitKind::Gaussian;
  opt.base.init_seed = 3;
  opt.l2 = 1e-2;
  ProblemInstance inst = hyperclean_problem(data, opt);
  const HyperVector base = inst.hyper;
  return {"hyperclean", std::move(inst), [base](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            HyperVector h = base;
            const Segment& s = h.segment("weights");
            for (Index k = 0; k < s.length; ++k) h.values()[s.offset + k] = uniform(rng, 0.05, 0.95);
            sample_lr(h, rng, 0.5);
            return h;
          }};
}

SuiteCase hyperrepr_case(DynamicsKind kind, int T) {
  SharedSubspaceParams params;
  params.tasks = 3;
  params.features = 6;
  params.true_rank = 2;
  params.shots = 3;
  params.validation_shots = 4;
  auto meta = std::make_shared<MetaDataset>(generate_shared_subspace(params, 31));
  HyperReprSpec spec;
  spec.k = 3;
  ProblemOptions opt;
  opt.dynamics = suite_dynamics(kind, 0.5);
  opt.T = T;
  opt.init = InitKind::Gaussian;
  opt.init_seed = 4;
  ProblemInstance inst = hyperrepr_problem(meta->episodes, spec, opt);
  const HyperVector base = inst.hyper;
  return {"hyperrepr", std::move(inst), [base](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            HyperVector h = base;
            const Segment& s = h.segment("repr");
            const Vector r = gaussian_vector(s.length, seed ^ 0xABCDEFULL, 0.4);
            h.values().segment(s.offset, s.length) = r;
            sample_lr(h, rng, 0.5);
            return h;
          }};
}

}  // namespace

const std::vector<DynamicsKind>& all_dynamics() {
  static const std::vector<DynamicsKind> kinds{DynamicsKind::GradientDescent,
                                               DynamicsKind::HyperLRGradientDescent,
                                               DynamicsKind::Momentum};
  return kinds;
}

DynamicsSpec suite_dynamics(DynamicsKind kind, Scalar eta) {
  DynamicsSpec spec;
  spec.kind = kind;
  spec.eta = eta;
  spec.mu = 0.5;
  return spec;
}

std::pair<Dataset, Dataset> ridge_data(std::uint64_t seed, Index n_train, Index n_val,
                                       Index features) {
  const Vector w_true = gaussian_vector(features, seed);
  auto make = [&](Index n, std::uint64_t s) {
    Dataset d;
    d.inputs = gaussian_vector(n * features, s).reshaped(n, features);
    d.targets = d.inputs * w_true + gaussian_vector(n, s + 1, 0.5);
    return d;
  };
  return {make(n_train, seed + 100), make(n_val, seed + 200)};
}

QuadraticInner random_quadratic(Index dim, Index coeffs, std::uint64_t seed) {
  const Matrix G = gaussian_vector(dim * dim, seed).reshaped(dim, dim);
  Matrix A0 = G * G.transpose() / static_cast<Scalar>(dim) + Matrix::Identity(dim, dim);
  std::vector<Matrix> terms;
  for (Index k = 0; k < coeffs; ++k) {
    const Vector u = gaussian_vector(dim, seed + 10 + static_cast<std::uint64_t>(k));
    terms.push_back(u * u.transpose() / static_cast<Scalar>(dim));
  }
  const Matrix B = gaussian_vector(dim * coeffs, seed + 99).reshaped(dim, coeffs);
  return make_quadratic_inner(A0, terms, gaussian_vector(dim, seed + 98), B,
                              Vector::Zero(coeffs), Vector::Ones(coeffs));
}

ProblemInstance scalar_pull(Scalar lambda, Scalar eta, int T, DynamicsKind kind) {
  // w^T A w - 2 b^T w with A = 1, b = lambda is (w - lambda)^2 up to a constant.
  const QuadraticInner q =
      make_quadratic_inner(Matrix::Identity(1, 1), {Matrix::Zero(1, 1)}, Vector::Zero(1),
                           Matrix::Identity(1, 1), Vector::Constant(1, -HyperVector::kInf),
                           Vector::Constant(1, HyperVector::kInf));
  Dataset val;
  val.inputs = Matrix::Identity(1, 1);
  val.targets = Vector::Ones(1);
  ProblemOptions opt;
  opt.dynamics = suite_dynamics(kind, eta);
  opt.T = T;
  return quadratic_problem(q, val, opt, Vector::Constant(1, lambda));
}

std::vector<SuiteCase> problem_suite(DynamicsKind kind, int T) {
  std::vector<SuiteCase> out;
  out.push_back(ridge_case(kind, T));
  out.push_back(quadratic_case(kind, T));
  out.push_back(quadratic_init_case(kind, T));
  out.push_back(hyperclean_case(kind, T));
  out.push_back(hyperrepr_case(kind, T));
  return out;
}

}  // namespace bilevel::testing
