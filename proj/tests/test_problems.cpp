#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include <Eigen/Eigenvalues>

#include "bilevel/hypergrad.hpp"
#include "bilevel/io.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/outer.hpp"
#include "bilevel/problems.hpp"
#include "support/suite.hpp"

using namespace bilevel;
using namespace bilevel::testing;

namespace {

/// P(X <= k) for X ~ Binomial(n, 1/2), summed in log space.
Scalar binomial_half_cdf(int n, int k) {
  Scalar total = 0.0;
  for (int i = 0; i <= k; ++i) {
    total += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) -
                      n * std::log(2.0));
  }
  return total;
}

MetaDataset small_meta(Index tasks, std::uint64_t seed) {
  SharedSubspaceParams params;
  params.tasks = tasks;
  params.features = 6;
  params.true_rank = 2;
  params.shots = 3;
  params.validation_shots = 4;
  return generate_shared_subspace(params, seed);
}

}  // namespace

// --- ridge ------------------------------------------------------------------

TEST(Ridge, IdentityDesignHalvesTargets) {
  Dataset train{Matrix::Identity(3, 3), Vector::Ones(3)};
  ProblemOptions opt;
  opt.dynamics.eta = 0.25;  // 2A = 4I, so one step lands on the minimizer
  opt.T = 1;
  auto inst = ridge_problem(train, train, opt, 1.0);
  const Vector w = unroll(inst.problem, inst.hyper).final_state();
  EXPECT_LE((w - Vector::Constant(3, 0.5)).lpNorm<Eigen::Infinity>(), 1e-15);
}

TEST(Ridge, LargeRegularizationSendsValidationErrorToTargetEnergy) {
  auto [train, val] = ridge_data(13);
  const QuadraticInner q = QuadraticInner::ridge(train.inputs, train.targets);
  auto inst = ridge_problem(train, val, ProblemOptions{}, 1e9);
  const Scalar E = exact_objective(q, *inst.problem.outer, inst.hyper, "l2",
                                   inst.problem.validation_view());
  const Scalar limit = val.targets.squaredNorm() / static_cast<Scalar>(val.rows());
  EXPECT_NEAR(E, limit, 1e-6 * limit);
}

TEST(Ridge, LongUnrollMatchesClosedForm) {
  auto [train, val] = ridge_data(14);
  const QuadraticInner q = QuadraticInner::ridge(train.inputs, train.targets);
  const Vector c = Vector::Constant(1, 0.5);
  Eigen::SelfAdjointEigenSolver<Matrix> es(2.0 * q.A(c));
  ProblemOptions opt;
  opt.dynamics.eta = 1.0 / es.eigenvalues().maxCoeff();
  opt.T = 500;
  auto inst = ridge_problem(train, val, opt, 0.5);
  const Vector w = unroll(inst.problem, inst.hyper).final_state();
  EXPECT_LE((w - exact_minimizer(q, c)).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Ridge, ZeroColumnIsWarnedNotFatal) {
  auto [train, val] = ridge_data(15);
  train.inputs.col(2).setZero();
  auto inst = ridge_problem(train, val, ProblemOptions{});
  ASSERT_EQ(inst.problem.warnings.size(), 1u);
  EXPECT_NE(inst.problem.warnings[0].find("SingularData"), std::string::npos);
  EXPECT_EQ(inst.hyper.lower()[0], 1e-8);
}

// --- hyper-cleaning ---------------------------------------------------------

TEST(HyperClean, AllOnesWeightsEqualUnweightedLoss) {
  const HyperCleanData data = generate_hyperclean(HyperCleanParams{}, 3);
  const Matrix W = gaussian_vector(20, 1).reshaped(2, 10);
  const Scalar plain = cross_entropy_sum(data.train.inputs, data.train.targets, W);
  const Scalar weighted = weighted_cross_entropy_sum(data.train.inputs, data.train.targets, W,
                                                     Vector::Ones(data.train.rows()));
  EXPECT_EQ(plain, weighted);

  HyperCleanOptions opt;
  auto inst = hyperclean_problem(data, opt);
  const Vector w = gaussian_vector(20, 2);
  const SoftmaxOuter unweighted(2, 10, inst.hyper.size());
  const DataView train_view = inst.problem.train_view();
  EXPECT_DOUBLE_EQ(inst.problem.inner->value(w, inst.hyper, train_view),
                   unweighted.value(w, inst.hyper, train_view) + opt.l2 * w.squaredNorm());
}

TEST(HyperClean, ZeroWeightsLeaveOnlyRidgeTerm) {
  const HyperCleanData data = generate_hyperclean(HyperCleanParams{}, 4);
  HyperCleanOptions opt;
  opt.initial_weights = Vector::Zero(data.train.rows());
  opt.base.T = 30;
  opt.base.dynamics.eta = 0.5;
  auto inst = hyperclean_problem(data, opt);
  const Vector w = gaussian_vector(20, 5);
  const Vector g = inst.problem.inner->grad(w, inst.hyper, inst.problem.train_view());
  EXPECT_LE((g - 2.0 * opt.l2 * w).lpNorm<Eigen::Infinity>(), 1e-15);
  EXPECT_EQ(unroll(inst.problem, inst.hyper).final_state().lpNorm<Eigen::Infinity>(), 0.0);
}

TEST(HyperClean, ReverseMatchesFiniteDifferences) {
  HyperCleanParams params;
  params.n_train = 50;
  params.features = 10;
  const HyperCleanData data = generate_hyperclean(params, 6);
  HyperCleanOptions opt;
  opt.base.T = 10;
  opt.base.dynamics.eta = 0.5;
  opt.initial_weights = Vector::Constant(50, 0.5) + gaussian_vector(50, 7, 0.1);
  auto inst = hyperclean_problem(data, opt);
  ASSERT_EQ(inst.problem.param_dim(), 20);
  ASSERT_EQ(inst.hyper.size(), 50);
  const auto rev = reverse_hypergrad(inst.problem, unroll(inst.problem, inst.hyper));
  const auto fd = fd_hypergrad(inst.problem, inst.hyper);
  EXPECT_LE(relative_inf_error(rev.grad, fd.grad), 1e-5);
}

TEST(HyperClean, ValidatesInputs) {
  HyperCleanData data = generate_hyperclean(HyperCleanParams{}, 8);
  HyperCleanOptions opt;
  opt.initial_weights = Vector::Ones(7);
  try {
    (void)hyperclean_problem(data, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::WeightSegmentMismatch);
  }
  data.train = Dataset{Matrix(0, 10), Vector(0)};
  try {
    (void)hyperclean_problem(data, HyperCleanOptions{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTrainingSet);
  }
}

TEST(HyperClean, ProjectionKeepsWeightsInBox) {
  const HyperCleanData data = generate_hyperclean(HyperCleanParams{}, 9);
  HyperCleanOptions opt;
  opt.base.T = 10;
  opt.base.dynamics.eta = 0.5;
  auto inst = hyperclean_problem(data, opt);
  OuterConfig cfg;
  cfg.beta = 50.0;  // large enough that raw steps leave [0, 1]
  cfg.max_steps = 5;
  const OuterResult r = run_outer(inst.problem, cfg, inst.hyper);
  for (const HyperVector& h : r.iterates) EXPECT_TRUE(h.is_feasible());
}

// --- hyper-representation ---------------------------------------------------

TEST(HyperRepr, IdentityRepresentationIsPlainLogisticRegression) {
  const MetaDataset meta = small_meta(3, 2);
  HyperReprSpec spec;
  spec.k = 6;
  ProblemOptions opt;
  auto inst = hyperrepr_problem(meta.episodes, spec, opt);
  HyperVector h = inst.hyper;
  h.set_segment_values("repr", Matrix::Identity(6, 6).reshaped());
  const Vector w = gaussian_vector(inst.problem.param_dim(), 3);
  const Vector g = inst.problem.inner->grad(w, h, inst.problem.train_view());
  const SoftmaxOuter logistic(2, 6, h.size());
  for (int j = 0; j < 3; ++j) {
    const Dataset& d = meta.episodes[j].train;
    const Vector head = w.segment(12 * j, 12);
    const Vector expected = logistic.grad_w(head, h, DataView{{&d, 1}, {}});
    EXPECT_LE((g.segment(12 * j, 12) - expected).lpNorm<Eigen::Infinity>(), 1e-14);
  }
}

TEST(HyperRepr, OuterExplicitGradientMatchesFiniteDifferences) {
  const MetaDataset meta = small_meta(3, 4);
  auto inst = hyperrepr_problem(meta.episodes, HyperReprSpec{}, ProblemOptions{});
  const auto& outer = *inst.problem.outer;
  const DataView val = inst.problem.validation_view();
  const Vector w = gaussian_vector(inst.problem.param_dim(), 5);
  const HyperVector h = inst.hyper;
  const Vector g = outer.grad_hyper(w, h, val);
  Vector fd(h.size());
  for (Index k = 0; k < h.size(); ++k) {
    const Scalar eps = default_fd_step(h.values()[k]);
    Vector up = h.values(), down = h.values();
    up[k] += eps;
    down[k] -= eps;
    fd[k] = (outer.value(w, h.with_values(up), val) - outer.value(w, h.with_values(down), val)) /
            (up[k] - down[k]);
  }
  EXPECT_LE(relative_inf_error(g, fd), 1e-4);
  EXPECT_GT(g.lpNorm<Eigen::Infinity>(), 0.0);
}

TEST(HyperRepr, RejectsMixedFeatureDimensions) {
  MetaDataset meta = small_meta(2, 5);
  meta.episodes[1].train.inputs = Matrix::Zero(6, 5);
  try {
    (void)hyperrepr_problem(meta.episodes, HyperReprSpec{}, ProblemOptions{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InconsistentFeatureDim);
  }
}

TEST(MetaBatch, FullBatchIsEveryEpisode) {
  const MetaDataset meta = small_meta(5, 6);
  const auto all = sample_meta_batch(meta, 5, 1);
  std::vector<Index> expected(5);
  std::iota(expected.begin(), expected.end(), Index{0});
  EXPECT_EQ(all, expected);
}

TEST(MetaBatch, SeededAndDistinct) {
  const MetaDataset meta = small_meta(10, 7);
  const auto a = sample_meta_batch(meta, 4, 99);
  EXPECT_EQ(a, sample_meta_batch(meta, 4, 99));
  EXPECT_EQ(std::set<Index>(a.begin(), a.end()).size(), 4u);
  try {
    (void)sample_meta_batch(meta, 11, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BatchTooLarge);
  }
}

TEST(MetaBatch, StochasticGradientIsUnbiased) {
  auto meta = std::make_shared<const MetaDataset>(small_meta(8, 8));
  ProblemOptions opt;
  opt.T = 5;
  opt.dynamics.eta = 0.5;
  const HyperVector h = hyperrepr_hyper(6, HyperReprSpec{}, opt.dynamics);
  const MetaSource full_source(meta, opt, 0, 1);
  const Vector full = full_source.full(h, HypergradMode::Reverse).grad;

  const MetaSource source(meta, opt, 3, 123);
  const int draws = 200;
  Vector sum = Vector::Zero(h.size()), sumsq = Vector::Zero(h.size());
  for (int s = 0; s < draws; ++s) {
    const Vector g = source.evaluate(h, s, HypergradMode::Reverse, nullptr).grad;
    sum += g;
    sumsq += g.cwiseAbs2();
  }
  const Vector mean = sum / draws;
  const Vector var = (sumsq / draws - mean.cwiseAbs2()) * draws / (draws - 1.0);
  const Vector se = (var / draws).cwiseSqrt();
  for (Index k = 0; k < h.size(); ++k) {
    EXPECT_LE(std::abs(mean[k] - full[k]), 3.0 * se[k] + 1e-12) << "coordinate " << k;
  }
}

// --- generators -------------------------------------------------------------

TEST(Generators, SeedsAreReproducible) {
  const HyperCleanData a = generate_hyperclean(HyperCleanParams{}, 42);
  const HyperCleanData b = generate_hyperclean(HyperCleanParams{}, 42);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.targets, b.train.targets);
  EXPECT_EQ(a.corrupted, b.corrupted);
  const HyperCleanData c = generate_hyperclean(HyperCleanParams{}, 43);
  EXPECT_NE(a.train.inputs, c.train.inputs);

  const MetaDataset m1 = small_meta(4, 9), m2 = small_meta(4, 9);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(m1.episodes[t].train.inputs, m2.episodes[t].train.inputs);
  EXPECT_EQ(m1.true_subspace, m2.true_subspace);
}

TEST(Generators, CorruptionFlipsExactlyRoundedCount) {
  for (Scalar rho : {0.0, 0.1, 0.3, 0.55}) {
    HyperCleanParams p;
    p.n_train = 37;
    p.corruption = rho;
    const HyperCleanData d = generate_hyperclean(p, 10);
    const HyperCleanData clean = [&] {
      HyperCleanParams q = p;
      q.corruption = 0.0;
      return generate_hyperclean(q, 10);
    }();
    const auto expected = std::llround(rho * 37);
    EXPECT_EQ(std::count(d.corrupted.begin(), d.corrupted.end(), true), expected);
    Index changed = 0;
    for (Index i = 0; i < 37; ++i) {
      const bool differs = d.train.targets[i] != clean.train.targets[i];
      changed += differs;
      EXPECT_EQ(differs, static_cast<bool>(d.corrupted[static_cast<std::size_t>(i)]));
    }
    EXPECT_EQ(changed, expected);
  }
}

TEST(Generators, ClassBalanceWithinBinomialBounds) {
  GaussianParams p;
  p.n = 2000;
  const Dataset d = generate_gaussians(p, 1, 2);
  const int ones = static_cast<int>(d.targets.sum());
  // Two-sided 1e-6 band of Binomial(2000, 1/2).
  int lo = 0;
  while (binomial_half_cdf(2000, lo) < 5e-7) ++lo;
  const int hi = 2000 - lo;
  EXPECT_GE(ones, lo);
  EXPECT_LE(ones, hi);
  EXPECT_EQ(d.rows(), 2000);
  EXPECT_EQ(d.features(), 10);
}

TEST(Generators, SharedSubspaceShapes) {
  const MetaDataset m = small_meta(5, 11);
  EXPECT_EQ(m.size(), 5);
  EXPECT_EQ(m.features(), 6);
  EXPECT_LE((m.true_subspace.transpose() * m.true_subspace - Matrix::Identity(2, 2)).norm(),
            1e-12);
  for (const Episode& e : m.episodes) {
    EXPECT_EQ(e.train.rows(), 6);
    EXPECT_EQ(e.validation.rows(), 8);
    for (Index i = 0; i < e.train.rows(); ++i) {
      EXPECT_TRUE(e.train.targets[i] == 0.0 || e.train.targets[i] == 1.0);
    }
  }
}

TEST(Generators, RejectBadParameters) {
  HyperCleanParams p;
  p.corruption = 1.0;
  EXPECT_THROW((void)generate_hyperclean(p, 1), Error);
  SharedSubspaceParams s;
  s.true_rank = 11;
  EXPECT_THROW((void)generate_shared_subspace(s, 1), Error);
  GaussianParams g;
  g.classes = 1;
  EXPECT_THROW((void)generate_gaussians(g, 1, 1), Error);
}

TEST(Generators, CsvExport) {
  const auto dir = std::filesystem::temp_directory_path() / "bilevel_csv_test";
  std::filesystem::remove_all(dir);
  const HyperCleanData d = generate_hyperclean(HyperCleanParams{}, 12);
  write_dataset_csv(dir / "train.csv", d.train);
  write_mask_csv(dir / "mask.csv", d.corrupted);
  const std::string csv = read_file(dir / "train.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,label");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 101);
  const std::string mask = read_file(dir / "mask.csv");
  EXPECT_EQ(mask.substr(0, mask.find('\n')), "index,corrupted");
  std::filesystem::remove_all(dir);
}
