#pragma once

// Concrete bilevel instances and the synthetic data they run on.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bilevel/core.hpp"
#include "bilevel/dynamics.hpp"
#include "bilevel/oracle.hpp"

namespace bilevel {

// ---------------------------------------------------------------------------
// Softmax helpers (labels are integral doubles in [0, classes))

Matrix softmax_rows(const Matrix& logits);
Matrix one_hot(const Vector& labels, Index classes);
/// -log softmax(logits_i)[y_i] per row.
Vector example_losses(const Matrix& logits, const Vector& labels);
/// Applies the per-row softmax Jacobian at probabilities `probs` to `dlogits`.
Matrix softmax_jacobian_apply(const Matrix& probs, const Matrix& dlogits);

Scalar cross_entropy_sum(const Matrix& X, const Vector& labels, const Matrix& W);
Scalar weighted_cross_entropy_sum(const Matrix& X, const Vector& labels, const Matrix& W,
                                  const Vector& weights);

// ---------------------------------------------------------------------------
// Objectives

/// E(w) = ||X w - y||^2 / n on the single validation dataset. No lambda dependence.
class SquaredErrorOuter final : public OuterObjective {
 public:
  SquaredErrorOuter(Index param_dim, Index hyper_dim) : d_(param_dim), m_(hyper_dim) {}
  Index param_dim() const override { return d_; }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad_w(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad_hyper(const Vector& w, const HyperVector& h, const DataView& data) const override;

 private:
  Index d_;
  Index m_;
};

/// L(w) = ||X w - y||^2 + c ||w||^2 with c read from a length-1 segment.
class RidgeInner final : public InnerObjective {
 public:
  RidgeInner(Index param_dim, Index hyper_dim, Segment reg);
  Index param_dim() const override { return d_; }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector hvp(const Vector& w, const HyperVector& h, const DataView& data,
             const Vector& v) const override;
  Vector cross_vjp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& v) const override;
  Vector cross_jvp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& dh) const override;

 private:
  Index d_;
  Index m_;
  Segment reg_;
};

/// L(w) = w^T A(c) w - 2 b(c)^T w, data-free. Coefficients c come from
/// `coeffs` (absent when the quadratic has no lambda dependence).
class QuadraticInnerObjective final : public InnerObjective {
 public:
  QuadraticInnerObjective(QuadraticInner q, Index hyper_dim, std::optional<Segment> coeffs);
  Index param_dim() const override { return q_.dim(); }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector hvp(const Vector& w, const HyperVector& h, const DataView& data,
             const Vector& v) const override;
  Vector cross_vjp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& v) const override;
  Vector cross_jvp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& dh) const override;

 private:
  Vector coefficients(const HyperVector& h) const;

  QuadraticInner q_;
  Index m_;
  std::optional<Segment> coeffs_;
};

/// Per-example weighted softmax cross-entropy of a linear classifier W
/// (classes x features, stored column-major), averaged over the rows in use,
/// plus l2 ||W||^2. Weights come from a segment with one entry per training row.
class WeightedSoftmaxInner final : public InnerObjective {
 public:
  WeightedSoftmaxInner(Index classes, Index features, Index hyper_dim, Segment weights, Scalar l2);
  Index param_dim() const override { return classes_ * features_; }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector hvp(const Vector& w, const HyperVector& h, const DataView& data,
             const Vector& v) const override;
  Vector cross_vjp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& v) const override;
  Vector cross_jvp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& dh) const override;

 private:
  Index classes_;
  Index features_;
  Index m_;
  Segment weights_;
  Scalar l2_;
};

/// Mean unweighted softmax cross-entropy on the validation set.
class SoftmaxOuter final : public OuterObjective {
 public:
  SoftmaxOuter(Index classes, Index features, Index hyper_dim)
      : classes_(classes), features_(features), m_(hyper_dim) {}
  Index param_dim() const override { return classes_ * features_; }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad_w(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad_hyper(const Vector& w, const HyperVector& h, const DataView& data) const override;

 private:
  Index classes_;
  Index features_;
  Index m_;
};

/// Layout of the stacked task heads: head j is classes[j] x k at offsets[j].
struct HeadLayout {
  Index k = 0;
  std::vector<Index> classes;
  std::vector<Index> offsets;
  Index total = 0;

  HeadLayout(Index k, std::vector<Index> classes);
};

/// Sum over tasks of the mean softmax cross-entropy of W_j (R x) on the task's
/// training split, with R (k x features) read from the representation segment.
class HyperReprInner final : public InnerObjective {
 public:
  HyperReprInner(HeadLayout heads, Index features, Index hyper_dim, Segment repr);
  Index param_dim() const override { return heads_.total; }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector hvp(const Vector& w, const HyperVector& h, const DataView& data,
             const Vector& v) const override;
  Vector cross_vjp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& v) const override;
  Vector cross_jvp(const Vector& w, const HyperVector& h, const DataView& data,
                   const Vector& dh) const override;

 private:
  HeadLayout heads_;
  Index features_;
  Index m_;
  Segment repr_;
};

/// Average over tasks of the mean validation cross-entropy; depends on R
/// explicitly, so grad_hyper is non-zero.
class HyperReprOuter final : public OuterObjective {
 public:
  HyperReprOuter(HeadLayout heads, Index features, Index hyper_dim, Segment repr);
  Index param_dim() const override { return heads_.total; }
  Index hyper_dim() const override { return m_; }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad_w(const Vector& w, const HyperVector& h, const DataView& data) const override;
  Vector grad_hyper(const Vector& w, const HyperVector& h, const DataView& data) const override;

 private:
  HeadLayout heads_;
  Index features_;
  Index m_;
  Segment repr_;
};

// ---------------------------------------------------------------------------
// Problem factories

/// A problem together with an initial, feasible lambda carrying its layout.
struct ProblemInstance {
  BilevelProblem problem;
  HyperVector hyper;
};

enum class InitKind { Zero, Gaussian };

struct ProblemOptions {
  DynamicsSpec dynamics;
  int T = 10;
  InitKind init = InitKind::Zero;
  std::uint64_t init_seed = 0;
  Scalar init_scale = 0.1;
  std::optional<InnerMiniBatch> inner_batch;
};

/// Appends a "log_lr" style segment holding ln(eta) when the dynamics learn it.
void append_learning_rate(HyperVector& h, const DynamicsSpec& spec);

/// Ridge regression with a single regularization hyperparameter "l2" in [1e-8, inf).
ProblemInstance ridge_problem(const Dataset& train, const Dataset& validation,
                              const ProblemOptions& options, Scalar l2 = 1.0);

/// Data-free quadratic inner with a squared-error outer on `validation`.
/// The coefficient segment is named "coeffs" and is omitted when q has none.
ProblemInstance quadratic_problem(const QuadraticInner& q, const Dataset& validation,
                                  const ProblemOptions& options,
                                  std::optional<Vector> coeffs = std::nullopt);

struct HyperCleanData {
  Dataset train;  // labels partly corrupted
  Dataset validation;
  Dataset test;
  std::vector<bool> corrupted;  // per training row
  Index classes = 2;
};

struct HyperCleanOptions {
  ProblemOptions base;
  Scalar l2 = 1e-4;
  /// Initial per-example weights; defaults to all ones.
  std::optional<Vector> initial_weights;
};

/// Hyperparameters: "weights" (one per training row, box [0, 1]) and, with
/// hyper-LR dynamics, the learning-rate segment.
ProblemInstance hyperclean_problem(const HyperCleanData& data, const HyperCleanOptions& options);

struct Episode {
  Dataset train;
  Dataset validation;
  int task_id = 0;
  Index classes = 2;
};

struct MetaDataset {
  std::vector<Episode> episodes;
  Matrix true_subspace;  // features x k*, orthonormal columns
  std::uint64_t seed = 0;
  Index shots = 0;
  Index classes = 0;

  Index size() const { return static_cast<Index>(episodes.size()); }
  Index features() const;
};

struct HyperReprSpec {
  Index k = 3;
  Scalar repr_init_scale = 0.3;
  std::uint64_t repr_seed = 1;
};

/// Initial representation lambda: segment "repr" holding k x features, column-major.
HyperVector hyperrepr_hyper(Index features, const HyperReprSpec& spec,
                            const DynamicsSpec& dynamics);

/// Stacks the heads of `episodes` into one inner variable; the outer objective
/// averages the per-task validation losses.
ProblemInstance hyperrepr_problem(std::span<const Episode> episodes, const HyperReprSpec& spec,
                                  const ProblemOptions& options);

/// Same layout but reusing an existing lambda (e.g. the current outer iterate).
BilevelProblem hyperrepr_problem_for(std::span<const Episode> episodes, const HyperVector& h,
                                     const ProblemOptions& options);

/// Uniform sample of `batch` distinct episode indices, returned sorted.
std::vector<Index> sample_meta_batch(const MetaDataset& meta, Index batch, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic data

struct GaussianParams {
  Index n = 100;
  Index features = 10;
  Index classes = 2;
  Scalar separation = 3.0;
  Scalar noise = 1.0;
};

/// Class means are `separation`-scaled random unit directions drawn from the
/// seed; labels are uniform over classes.
Dataset generate_gaussians(const GaussianParams& params, std::uint64_t seed,
                           std::uint64_t sample_seed);

struct RegressionParams {
  Index n_train = 30;
  Index n_validation = 20;
  Index features = 5;
  Scalar noise = 0.5;
};

/// y = X w_true + noise with standard normal X and w_true, both splits from one seed.
std::pair<Dataset, Dataset> generate_regression(const RegressionParams& params,
                                                std::uint64_t seed);

struct HyperCleanParams {
  Index n_train = 100;
  Index n_validation = 100;
  Index n_test = 200;
  Index features = 10;
  Index classes = 2;
  Scalar separation = 3.0;
  Scalar corruption = 0.3;
};

HyperCleanData generate_hyperclean(const HyperCleanParams& params, std::uint64_t seed);

struct SharedSubspaceParams {
  Index tasks = 100;
  Index features = 10;
  Index true_rank = 3;
  Index classes = 2;
  Index shots = 5;            // training examples per class
  Index validation_shots = 15;  // validation examples per class
};

MetaDataset generate_shared_subspace(const SharedSubspaceParams& params, std::uint64_t seed);

/// Header "x0,...,x{p-1},label", one row per example.
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);
/// Header "index,corrupted".
void write_mask_csv(const std::filesystem::path& path, const std::vector<bool>& mask);

}  // namespace bilevel
