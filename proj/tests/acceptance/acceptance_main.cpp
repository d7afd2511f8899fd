// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Tolerances are pinned below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "bilevel/cli.hpp"
#include "bilevel/dynamics.hpp"
#include "bilevel/hypergrad.hpp"
#include "bilevel/io.hpp"
#include "bilevel/oracle.hpp"
#include "bilevel/outer.hpp"
#include "bilevel/problems.hpp"
#include "support/suite.hpp"

namespace fs = std::filesystem;
using namespace bilevel;
using namespace bilevel::testing;

namespace {

constexpr Scalar kModeTolerance = 1e-8;
constexpr Scalar kFdTolerance = 1e-4;
constexpr Scalar kRatioTolerance = 0.2;
constexpr Scalar kOracleTolerance = 1e-7;
constexpr Scalar kWallRatioLimit = 1.5;
constexpr Scalar kWeightGap = 0.2;
constexpr Scalar kLearningRateTolerance = 0.05;

constexpr double kModeSeconds = 30.0;
constexpr double kFdSeconds = 120.0;
constexpr double kConvergenceSeconds = 30.0;
constexpr double kOracleSeconds = 10.0;
constexpr double kHyperCleanSeconds = 120.0;
constexpr double kHyperReprSeconds = 300.0;

constexpr int kLambdaSamples = 10;
const std::vector<int> kUnrollLengths{0, 1, 5, 25};

const fs::path kConfigDir = fs::path(BILEVEL_SOURCE_DIR) / "configs";

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "bilevel_acceptance" / name;
  fs::remove_all(dir);
  return dir;
}

cli::RunReport run_config(const std::string& file, const fs::path& out,
                          const std::function<void(cli::RunConfig&)>& pin = {}) {
  cli::RunConfig c = cli::parse_config(kConfigDir / file);
  c.output_dir = out;
  if (pin) pin(c);
  return cli::run_experiment(c);
}

const cli::Verdict* find_verdict(const cli::RunReport& r, const std::string& name) {
  for (const auto& v : r.verdicts) {
    if (v.name == name) return &v;
  }
  return nullptr;
}

// Sweep every suite problem, dynamics, unroll length and sample; `check`
// returns the relative error against reverse mode for one lambda.
Scalar sweep(const std::function<Scalar(const BilevelProblem&, const HyperVector&)>& check,
             int& evaluations) {
  Scalar worst = 0.0;
  for (DynamicsKind kind : all_dynamics()) {
    for (int T : kUnrollLengths) {
      for (const SuiteCase& c : problem_suite(kind, T)) {
        for (int s = 0; s < kLambdaSamples; ++s) {
          const HyperVector h = c.sample(static_cast<std::uint64_t>(1000 * T + s));
          worst = std::max(worst, check(c.instance.problem, h));
          ++evaluations;
        }
      }
    }
  }
  return worst;
}

Outcome mode_agreement() {
  const auto start = std::chrono::steady_clock::now();
  int n = 0;
  const Scalar worst = sweep(
      [](const BilevelProblem& p, const HyperVector& h) {
        const Vector rev = reverse_hypergrad(p, unroll(p, h)).grad;
        const Vector fwd = forward_hypergrad(p, h).grad;
        return relative_inf_error(fwd, rev);
      },
      n);
  const double secs = seconds_since(start);
  return {worst <= kModeTolerance && secs < kModeSeconds,
          fmt("max rel err %.3g <= %.0e over %.0f cases, %.2f s", worst, kModeTolerance, n, secs)};
}

Outcome fd_agreement() {
  const auto start = std::chrono::steady_clock::now();
  int n = 0;
  const Scalar worst = sweep(
      [](const BilevelProblem& p, const HyperVector& h) {
        const Vector rev = reverse_hypergrad(p, unroll(p, h)).grad;
        const Vector fd = fd_hypergrad(p, h).grad;
        return relative_inf_error(fd, rev);
      },
      n);
  const double secs = seconds_since(start);
  return {worst <= kFdTolerance && secs < kFdSeconds,
          fmt("max rel err %.3g <= %.0e over %.0f cases, %.2f s", worst, kFdTolerance, n, secs)};
}

Scalar stable_eta(const QuadraticInner& q, Scalar l2) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(2.0 * q.A(Vector::Constant(1, l2)));
  return 1.0 / es.eigenvalues().maxCoeff();
}

Outcome convergence() {
  const auto start = std::chrono::steady_clock::now();
  std::vector<int> Ts(60);
  std::iota(Ts.begin(), Ts.end(), 1);
  Scalar worst = 0.0;
  bool monotone = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto [train, val] = ridge_data(seed);
    const QuadraticInner q = QuadraticInner::ridge(train.inputs, train.targets);
    ProblemOptions opt;
    opt.dynamics.eta = stable_eta(q, 1.0);
    const ProblemInstance inst = ridge_problem(train, val, opt, 1.0);
    const ConvergenceTable t = convergence_harness(inst.problem, q, inst.hyper, "l2", Ts);
    const Scalar rel = t.fit_points >= 2 ? t.ratio_relative_error() : HyperVector::kInf;
    worst = std::max(worst, std::isfinite(rel) ? rel : HyperVector::kInf);
    monotone = monotone && t.monotone_after_T0;
  }
  const double secs = seconds_since(start);
  return {worst <= kRatioTolerance && monotone && secs < kConvergenceSeconds,
          fmt("ridge 30x5, 5 seeds: max |fit/theory - 1| %.3g <= %.2f, monotone %.0f, %.2f s",
              worst, kRatioTolerance, monotone ? 1.0 : 0.0, secs)};
}

Outcome oracle_equivalence() {
  const auto start = std::chrono::steady_clock::now();
  Scalar worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto [train, val] = ridge_data(seed);
    const QuadraticInner q = QuadraticInner::ridge(train.inputs, train.targets);
    const Scalar l2 = 0.5 + 0.25 * static_cast<Scalar>(seed);
    ProblemOptions opt;
    opt.dynamics.eta = stable_eta(q, l2);
    opt.T = 2000;
    const ProblemInstance inst = ridge_problem(train, val, opt, l2);
    const Vector exact =
        exact_hypergrad(q, *inst.problem.outer, inst.hyper, "l2", inst.problem.validation_view());
    const Vector rev = reverse_hypergrad(inst.problem, unroll(inst.problem, inst.hyper)).grad;
    worst = std::max(worst, relative_inf_error(rev, exact));
  }
  const double secs = seconds_since(start);
  return {worst <= kOracleTolerance && secs < kOracleSeconds,
          fmt("ridge T=2000, 5 seeds: max rel err %.3g <= %.0e, %.2f s", worst, kOracleTolerance,
              secs)};
}

// L(w) = ||X w - y||^2 + rho ||w||^2 - 2 w^T B lambda. The data term dominates
// the cost of every derivative product; lambda only enters through B.
class TiltedRidgeInner final : public InnerObjective {
 public:
  TiltedRidgeInner(Matrix B, Scalar rho) : B_(std::move(B)), rho_(rho) {}
  Index param_dim() const override { return B_.rows(); }
  Index hyper_dim() const override { return B_.cols(); }

  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override {
    const Dataset& d = data.single();
    return (d.inputs * w - d.targets).squaredNorm() + rho_ * w.squaredNorm() -
           2.0 * w.dot(B_ * h.values());
  }
  Vector grad(const Vector& w, const HyperVector& h, const DataView& data) const override {
    const Dataset& d = data.single();
    return 2.0 * (d.inputs.transpose() * (d.inputs * w - d.targets)) + 2.0 * rho_ * w -
           2.0 * (B_ * h.values());
  }
  Vector hvp(const Vector&, const HyperVector&, const DataView& data,
             const Vector& v) const override {
    const Dataset& d = data.single();
    return 2.0 * (d.inputs.transpose() * (d.inputs * v)) + 2.0 * rho_ * v;
  }
  Vector cross_vjp(const Vector&, const HyperVector&, const DataView&,
                   const Vector& v) const override {
    return -2.0 * (B_.transpose() * v);
  }
  Vector cross_jvp(const Vector&, const HyperVector&, const DataView&,
                   const Vector& dh) const override {
    return -2.0 * (B_ * dh);
  }

 private:
  Matrix B_;
  Scalar rho_;
};

struct CostFixture {
  BilevelProblem problem;
  HyperVector hyper;
  std::shared_ptr<CountingInnerObjective> counter;
};

CostFixture cost_fixture(Index rows, Index features, Index hyper_dim, int T) {
  Dataset train{gaussian_vector(rows * features, 71).reshaped(rows, features),
                gaussian_vector(rows, 72)};
  Dataset val{gaussian_vector(50 * features, 73).reshaped(50, features), gaussian_vector(50, 74)};
  const Matrix B = gaussian_vector(features * hyper_dim, 75, 0.1).reshaped(features, hyper_dim);
  auto counter = std::make_shared<CountingInnerObjective>(
      std::make_shared<TiltedRidgeInner>(B, 1.0));
  Eigen::SelfAdjointEigenSolver<Matrix> es(2.0 * train.inputs.transpose() * train.inputs);
  DynamicsSpec spec;
  spec.eta = 1.0 / (es.eigenvalues().maxCoeff() + 2.0);
  BilevelProblem p = assemble_problem(
      counter, std::make_shared<SquaredErrorOuter>(features, hyper_dim),
      make_dynamics(spec, features), std::make_shared<ZeroInit>(features), T,
      std::make_shared<const DatasetList>(DatasetList{train}),
      std::make_shared<const DatasetList>(DatasetList{val}));
  HyperVector h;
  h.add_segment("tilt", gaussian_vector(hyper_dim, 76));
  return {std::move(p), std::move(h), counter};
}

Outcome cost_flatness() {
  const std::vector<Index> dims{10, 100, 1000};
  constexpr int kT = 20;
  constexpr int kRepeats = 15;

  std::vector<CostFixture> fixtures;
  std::vector<long> reverse_counts;
  for (Index m : dims) {
    fixtures.push_back(cost_fixture(4000, 40, m, kT));
    CostFixture& f = fixtures.back();
    f.counter->counts().reset();
    (void)reverse_hypergrad(f.problem, unroll(f.problem, f.hyper));
    reverse_counts.push_back(f.counter->counts().derivative_products());
  }
  // Interleaved repeats so that machine load drifts affect every dim alike.
  std::vector<double> reverse_ms(dims.size(), HyperVector::kInf);
  for (int r = 0; r < kRepeats; ++r) {
    for (std::size_t i = 0; i < fixtures.size(); ++i) {
      const auto start = std::chrono::steady_clock::now();
      (void)reverse_hypergrad(fixtures[i].problem, unroll(fixtures[i].problem, fixtures[i].hyper));
      reverse_ms[i] = std::min(reverse_ms[i], 1000.0 * seconds_since(start));
    }
  }

  // Forward contrast on a smaller data set: only the counts matter here.
  std::vector<long> forward_counts;
  for (Index m : dims) {
    CostFixture f = cost_fixture(200, 40, m, kT);
    f.counter->counts().reset();
    (void)forward_hypergrad(f.problem, f.hyper);
    forward_counts.push_back(f.counter->counts().derivative_products());
  }

  const bool counts_equal =
      reverse_counts[0] == reverse_counts[1] && reverse_counts[1] == reverse_counts[2];
  const double ratio = reverse_ms[2] / reverse_ms[0];
  // Linear in dim: equal increments per added direction, strictly growing.
  const long step_small = forward_counts[1] - forward_counts[0];
  const long step_large = forward_counts[2] - forward_counts[1];
  const bool forward_linear = step_small > 0 && step_large * 90 == step_small * 900;
  return {counts_equal && ratio <= kWallRatioLimit && forward_linear,
          fmt("reverse products %.0f for every dim, wall ratio 1000/10 %.3f <= %.1f",
              static_cast<double>(reverse_counts[0]), ratio, kWallRatioLimit) +
              fmt(", forward products %.0f -> %.0f -> %.0f", static_cast<double>(forward_counts[0]),
                  static_cast<double>(forward_counts[1]), static_cast<double>(forward_counts[2])) +
              (counts_equal ? "" : " [reverse counts differ]") +
              (forward_linear ? "" : " [forward not linear]")};
}

Outcome hyperclean() {
  const auto start = std::chrono::steady_clock::now();
  const cli::RunReport r = run_config("hyperclean.ini", scratch("hyperclean"), [](cli::RunConfig& c) {
    c.hyperclean.n_train = 100;
    c.hyperclean.classes = 2;
    c.hyperclean.corruption = 0.3;
    c.T = 50;
    c.outer.max_steps = 200;
    c.outer.tolerance = 0.0;
    c.checks.weight_gap = kWeightGap;
  });
  const double secs = seconds_since(start);
  const cli::Verdict* gap = find_verdict(r, "weight_gap");
  const cli::Verdict* loss = find_verdict(r, "validation_loss_below_baseline");
  if (!gap || !loss) return {false, "missing verdicts"};
  return {gap->pass && loss->pass && secs < kHyperCleanSeconds,
          fmt("weight gap %.3f >= %.2f, validation loss %.4g vs baseline %.4g", gap->measured,
              kWeightGap, loss->measured, loss->threshold) +
              fmt(", %.2f s", secs)};
}

Outcome learnable_learning_rate() {
  // L = (a/2) w^2 - 2 b w from w = 0, one step; E = (w - w*)^2 with w* = 2b/a.
  constexpr Scalar a = 4.0;
  constexpr Scalar b = 1.5;
  const Scalar target = 2.0 * b / a;
  const QuadraticInner q =
      make_quadratic_inner(Matrix::Constant(1, 1, a / 2.0), {}, Vector::Constant(1, b),
                           Matrix::Zero(1, 0), Vector(0), Vector(0));
  const Dataset val{Matrix::Ones(1, 1), Vector::Constant(1, target)};
  ProblemOptions opt;
  opt.dynamics.kind = DynamicsKind::HyperLRGradientDescent;
  opt.dynamics.eta = 0.05;
  opt.T = 1;
  const ProblemInstance inst = quadratic_problem(q, val, opt);
  OuterConfig cfg;
  cfg.beta = 0.5;
  cfg.max_steps = 2000;
  cfg.tolerance = 1e-10;
  const OuterResult res = run_outer(inst.problem, cfg, inst.hyper);
  const Scalar eta = std::exp(res.hyper.segment_values("log_lr")[0]);
  const Scalar rel = std::abs(eta * a - 1.0);
  return {rel <= kLearningRateTolerance,
          fmt("eta %.6f vs 1/a %.6f, rel err %.2e <= %.2f", eta, 1.0 / a, rel,
              kLearningRateTolerance) +
              fmt(" after %.0f outer steps", static_cast<double>(res.trace.records.size()))};
}

Outcome hyperrepr() {
  const auto start = std::chrono::steady_clock::now();
  const cli::RunReport r = run_config("hyperrepr.ini", scratch("hyperrepr"), [](cli::RunConfig& c) {
    c.subspace.true_rank = 3;
    c.subspace.features = 10;
    c.outer.meta_batch = 4;
    c.outer.max_steps = 500;
    c.outer.tolerance = 0.0;
  });
  const double secs = seconds_since(start);
  const cli::Verdict* loss = find_verdict(r, "heldout_loss_below_frozen");
  const cli::Verdict* angle = find_verdict(r, "principal_angle_decreased");
  if (!loss || !angle) return {false, "missing verdicts"};
  return {loss->pass && angle->pass && secs < kHyperReprSeconds,
          fmt("held-out loss %.4g < frozen %.4g, largest angle %.3f < initial %.3f rad",
              loss->measured, loss->threshold, angle->measured, angle->threshold) +
              fmt(", %.2f s", secs)};
}

Outcome determinism() {
  const std::vector<std::string> files{"hyperclean.ini",   "hyperclean_lr.ini", "hyperrepr.ini",
                                       "ridge_verify.ini", "gradcheck.ini",     "convergence.ini"};
  std::string differing;
  for (const auto& file : files) {
    const fs::path a = scratch("rerun_a_" + file);
    const fs::path b = scratch("rerun_b_" + file);
    run_config(file, a);
    run_config(file, b);
    if (read_file(a / "trace.csv") != read_file(b / "trace.csv")) differing += " " + file;
  }
  return {differing.empty(),
          fmt("%.0f shipped configs rerun", static_cast<double>(files.size())) +
              (differing.empty() ? ", trace.csv byte-identical" : ", differing:" + differing)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 mode agreement", mode_agreement},
      {"2 finite-difference agreement", fd_agreement},
      {"3 convergence rate", convergence},
      {"4 oracle equivalence", oracle_equivalence},
      {"5 reverse cost flatness", cost_flatness},
      {"6 hyper-cleaning", hyperclean},
      {"7 learnable learning rate", learnable_learning_rate},
      {"8 hyper-representation", hyperrepr},
      {"9 determinism", determinism},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
