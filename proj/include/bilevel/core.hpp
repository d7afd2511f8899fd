#pragma once

// Data model and contracts shared by every module: the hyperparameter vector,
// inner state, datasets, objective/dynamics interfaces and the assembled
// bilevel problem.

#include <atomic>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bilevel/types.hpp"

namespace bilevel {

struct Segment {
  std::string name;
  Index offset = 0;
  Index length = 0;
};

/// Flat outer variable with named segments and an optional box per coordinate.
///
/// Segments always partition [0, size()) in insertion order. Coordinates
/// without a bound carry -inf / +inf. Values are allowed to leave the box
/// (so that projection has something to act on); engines check feasibility.
class HyperVector {
 public:
  static constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();

  HyperVector() = default;

  HyperVector& add_segment(std::string name, const Vector& values, Scalar lower = -kInf,
                           Scalar upper = kInf);
  HyperVector& add_segment(std::string name, const Vector& values, const Vector& lower,
                           const Vector& upper);

  Index size() const { return values_.size(); }
  const Vector& values() const { return values_; }
  Vector& values() { return values_; }
  const Vector& lower() const { return lower_; }
  const Vector& upper() const { return upper_; }

  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(std::string_view name) const;
  std::optional<Segment> find_segment(std::string_view name) const;
  bool has_segment(std::string_view name) const { return find_segment(name).has_value(); }

  Vector segment_values(std::string_view name) const;
  void set_segment_values(std::string_view name, const Vector& v);

  bool is_feasible(Scalar slack = 0.0) const;

  /// Same layout and box, new values. Dimension must match.
  HyperVector with_values(const Vector& values) const;

  /// FNV-1a over the raw bytes of the values; stable across runs.
  std::uint64_t hash() const;

 private:
  Vector values_;
  Vector lower_;
  Vector upper_;
  std::vector<Segment> segments_;
};

/// Inner variable w plus auxiliary dynamics variables (e.g. momentum velocity).
///
/// The engines work on the stacked vector [params; aux]; this struct is the
/// split view of it.
struct InnerState {
  Vector params;
  Vector aux;

  Index size() const { return params.size() + aux.size(); }
  Vector stacked() const;
  static InnerState split(const Eigen::Ref<const Vector>& stacked, Index param_dim);
};

/// One supervised split. Class labels are stored as integral doubles.
struct Dataset {
  Matrix inputs;
  Vector targets;

  Index rows() const { return inputs.rows(); }
  Index features() const { return inputs.cols(); }
};

/// What an evaluator sees: one dataset per task (exactly one for HO problems)
/// and an optional row subset. An empty `rows` means every row.
struct DataView {
  std::span<const Dataset> tasks;
  std::span<const Index> rows;

  const Dataset& single() const;
  bool full_batch() const { return rows.empty(); }
};

/// Training objective L_lambda(w) and the derivative products the
/// differentiation engines need.
class InnerObjective {
 public:
  virtual ~InnerObjective() = default;

  virtual Index param_dim() const = 0;
  virtual Index hyper_dim() const = 0;

  virtual Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const = 0;
  virtual Vector grad(const Vector& w, const HyperVector& h, const DataView& data) const = 0;
  /// Hessian in w times v.
  virtual Vector hvp(const Vector& w, const HyperVector& h, const DataView& data,
                     const Vector& v) const = 0;
  /// (d/d lambda grad_w L)^T v, length hyper_dim().
  virtual Vector cross_vjp(const Vector& w, const HyperVector& h, const DataView& data,
                           const Vector& v) const = 0;
  /// (d/d lambda grad_w L) dh, length param_dim().
  virtual Vector cross_jvp(const Vector& w, const HyperVector& h, const DataView& data,
                           const Vector& dh) const = 0;
};

/// Validation / meta-training error E(w, lambda).
class OuterObjective {
 public:
  virtual ~OuterObjective() = default;

  virtual Index param_dim() const = 0;
  virtual Index hyper_dim() const = 0;

  virtual Scalar value(const Vector& w, const HyperVector& h, const DataView& data) const = 0;
  virtual Vector grad_w(const Vector& w, const HyperVector& h, const DataView& data) const = 0;
  /// Explicit dependence on lambda; zero for the plain HO objectives.
  virtual Vector grad_hyper(const Vector& w, const HyperVector& h, const DataView& data) const = 0;
};

enum class DynamicsKind { GradientDescent, HyperLRGradientDescent, Momentum };

/// One step map Phi_t acting on the stacked state, with its Jacobian products.
class Dynamics {
 public:
  virtual ~Dynamics() = default;

  virtual DynamicsKind kind() const = 0;
  virtual std::string_view name() const = 0;
  virtual Index param_dim() const = 0;
  virtual Index aux_dim() const = 0;
  Index state_dim() const { return param_dim() + aux_dim(); }

  /// Effective step size at this lambda.
  virtual Scalar step_size(const HyperVector& h) const = 0;

  virtual Vector step(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                      const DataView& data) const = 0;
  /// (dPhi/dstate)^T v
  virtual Vector vjp_state(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                           const DataView& data, const Vector& v) const = 0;
  /// (dPhi/dlambda)^T v
  virtual Vector vjp_hyper(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                           const DataView& data, const Vector& v) const = 0;
  /// (dPhi/dstate) z + (dPhi/dlambda) dh
  virtual Vector jvp(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                     const DataView& data, const Vector& z, const Vector& dh) const = 0;
};

/// Phi_0: lambda -> initial stacked state.
class InitMap {
 public:
  virtual ~InitMap() = default;

  virtual Index state_dim() const = 0;
  virtual Vector initial_state(const HyperVector& h) const = 0;
  virtual bool depends_on_hyper() const { return false; }
  /// (dPhi_0/dlambda)^T v
  virtual Vector vjp(const HyperVector& h, const Vector& v) const;
  /// (dPhi_0/dlambda) D for a block of hyper directions D (hyper_dim x k).
  virtual Matrix jvp(const HyperVector& h, const Matrix& directions) const;
};

/// Zero params, zero aux.
class ZeroInit final : public InitMap {
 public:
  explicit ZeroInit(Index state_dim) : state_dim_(state_dim) {}
  Index state_dim() const override { return state_dim_; }
  Vector initial_state(const HyperVector&) const override { return Vector::Zero(state_dim_); }

 private:
  Index state_dim_;
};

/// Seeded Gaussian params, zero aux. Independent of lambda.
class GaussianInit final : public InitMap {
 public:
  GaussianInit(Index param_dim, Index aux_dim, std::uint64_t seed, Scalar scale);
  Index state_dim() const override { return params_.size() + aux_dim_; }
  Vector initial_state(const HyperVector&) const override;

 private:
  Vector params_;
  Index aux_dim_;
};

/// Phi_0(lambda) = lambda[segment] for the params, zero aux.
class SegmentInit final : public InitMap {
 public:
  SegmentInit(Segment segment, Index aux_dim) : segment_(std::move(segment)), aux_dim_(aux_dim) {}
  Index state_dim() const override { return segment_.length + aux_dim_; }
  Vector initial_state(const HyperVector& h) const override;
  bool depends_on_hyper() const override { return true; }
  Vector vjp(const HyperVector& h, const Vector& v) const override;
  Matrix jvp(const HyperVector& h, const Matrix& directions) const override;

 private:
  Segment segment_;
  Index aux_dim_;
};

using DatasetList = std::vector<Dataset>;

/// Per-step mini-batching of the inner training data. Row subsets are a
/// deterministic function of (seed, t) so replays see the same slices.
struct InnerMiniBatch {
  Index batch_size = 0;
  std::uint64_t seed = 0;
};

struct BilevelProblem {
  std::shared_ptr<const InnerObjective> inner;
  std::shared_ptr<const OuterObjective> outer;
  std::shared_ptr<const Dynamics> dynamics;
  std::shared_ptr<const InitMap> init;
  int T = 0;
  std::shared_ptr<const DatasetList> train;
  std::shared_ptr<const DatasetList> validation;
  std::optional<InnerMiniBatch> inner_batch;
  /// Non-fatal findings from construction (e.g. a zero feature column).
  std::vector<std::string> warnings;

  Index param_dim() const { return dynamics->param_dim(); }
  Index state_dim() const { return dynamics->state_dim(); }
  Index hyper_dim() const { return inner->hyper_dim(); }

  DataView train_view(std::span<const Index> rows = {}) const { return {*train, rows}; }
  DataView validation_view() const { return {*validation, {}}; }

  /// Rows used by inner step t (1-based); empty for full batch.
  std::vector<Index> step_rows(int t) const;

  BilevelProblem with_unroll(int steps) const;
  BilevelProblem with_init(std::shared_ptr<const InitMap> init) const;
};

/// Validates dimensions across components and returns the problem.
/// Throws DimensionMismatch naming the two components, NonPositiveUnroll if T < 0.
BilevelProblem assemble_problem(std::shared_ptr<const InnerObjective> inner,
                                std::shared_ptr<const OuterObjective> outer,
                                std::shared_ptr<const Dynamics> dynamics,
                                std::shared_ptr<const InitMap> init, int T,
                                std::shared_ptr<const DatasetList> train,
                                std::shared_ptr<const DatasetList> validation,
                                std::optional<InnerMiniBatch> inner_batch = std::nullopt);

struct TransposeReport {
  Scalar max_defect = 0.0;
  int probes = 0;
  bool pass = false;
  static constexpr Scalar kThreshold = 1e-10;
};

/// Checks <vjp_state(v), z> + <vjp_hyper(v), dh> == <v, jvp(z, dh)> on random
/// probes around random states. Defect per probe is |lhs - rhs| / (|rhs| + 1e-12).
TransposeReport check_transpose_consistency(const BilevelProblem& problem, const HyperVector& h,
                                            int probe_count, std::uint64_t seed,
                                            Scalar state_scale = 0.5);

/// Same check with explicit zero cotangents (both sides vanish).
TransposeReport check_transpose_consistency_zero_cotangent(const BilevelProblem& problem,
                                                           const HyperVector& h);

/// Decorator that counts evaluations of the wrapped inner objective.
class CountingInnerObjective final : public InnerObjective {
 public:
  struct Counts {
    std::atomic<long> value{0};
    std::atomic<long> grad{0};
    std::atomic<long> hvp{0};
    std::atomic<long> cross_vjp{0};
    std::atomic<long> cross_jvp{0};

    long derivative_products() const { return hvp + cross_vjp + cross_jvp; }
    void reset();
  };

  explicit CountingInnerObjective(std::shared_ptr<const InnerObjective> wrapped)
      : wrapped_(std::move(wrapped)), counts_(std::make_shared<Counts>()) {}

  Counts& counts() const { return *counts_; }

  Index param_dim() const override { return wrapped_->param_dim(); }
  Index hyper_dim() const override { return wrapped_->hyper_dim(); }
  Scalar value(const Vector& w, const HyperVector& h, const DataView& d) const override;
  Vector grad(const Vector& w, const HyperVector& h, const DataView& d) const override;
  Vector hvp(const Vector& w, const HyperVector& h, const DataView& d,
             const Vector& v) const override;
  Vector cross_vjp(const Vector& w, const HyperVector& h, const DataView& d,
                   const Vector& v) const override;
  Vector cross_jvp(const Vector& w, const HyperVector& h, const DataView& d,
                   const Vector& dh) const override;

 private:
  std::shared_ptr<const InnerObjective> wrapped_;
  std::shared_ptr<Counts> counts_;
};

/// Random vector with N(0, scale^2) entries from a seeded engine.
Vector gaussian_vector(Index n, std::uint64_t seed, Scalar scale = 1.0);

}  // namespace bilevel
