#include "bilevel/problems.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/QR>

#include "bilevel/io.hpp"

namespace bilevel {

namespace {

using ConstMatrixMap = Eigen::Map<const Matrix>;

/// Row subset of a dataset; full batch aliases the dataset without copying.
class Rows {
 public:
  Rows(const Dataset& d, std::span<const Index> rows) {
    if (rows.empty()) {
      X_ = &d.inputs;
      y_ = &d.targets;
    } else {
      const std::vector<Index> idx(rows.begin(), rows.end());
      Xs_ = d.inputs(idx, Eigen::all);
      ys_ = d.targets(idx);
      X_ = &Xs_;
      y_ = &ys_;
    }
  }
  Rows(const Rows&) = delete;
  Rows& operator=(const Rows&) = delete;

  const Matrix& X() const { return *X_; }
  const Vector& y() const { return *y_; }

 private:
  Matrix Xs_;
  Vector ys_;
  const Matrix* X_ = nullptr;
  const Vector* y_ = nullptr;
};

Vector flatten(const Matrix& M) { return Eigen::Map<const Vector>(M.data(), M.size()); }

void require_dim(Index got, Index expected, const char* what) {
  if (got != expected) {
    throw Error(ErrorCode::DimensionMismatch, std::string(what) + ": got " + std::to_string(got) +
                                                  ", expected " + std::to_string(expected));
  }
}

std::shared_ptr<const InitMap> make_init(const ProblemOptions& options, Index param_dim,
                                         Index aux_dim) {
  if (options.init == InitKind::Gaussian) {
    return std::make_shared<GaussianInit>(param_dim, aux_dim, options.init_seed,
                                          options.init_scale);
  }
  return std::make_shared<ZeroInit>(param_dim + aux_dim);
}

ProblemInstance finish(std::shared_ptr<const InnerObjective> inner,
                       std::shared_ptr<const OuterObjective> outer, const ProblemOptions& options,
                       DatasetList train, DatasetList validation, HyperVector hyper) {
  const Index d = inner->param_dim();
  auto dynamics = make_dynamics(options.dynamics, d);
  auto init = make_init(options, d, dynamics->aux_dim());
  BilevelProblem p = assemble_problem(
      std::move(inner), std::move(outer), std::move(dynamics), std::move(init), options.T,
      std::make_shared<const DatasetList>(std::move(train)),
      std::make_shared<const DatasetList>(std::move(validation)), options.inner_batch);
  return {std::move(p), std::move(hyper)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Softmax helpers

Matrix softmax_rows(const Matrix& logits) {
  Matrix P = logits.colwise() - logits.rowwise().maxCoeff();
  P = P.array().exp();
  P.array().colwise() /= P.rowwise().sum().array();
  return P;
}

Matrix one_hot(const Vector& labels, Index classes) {
  Matrix Y = Matrix::Zero(labels.size(), classes);
  for (Index i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<Index>(labels[i]);
    if (c < 0 || c >= classes || static_cast<Scalar>(c) != labels[i]) {
      throw Error(ErrorCode::BadParams, "label " + format_scalar(labels[i]) +
                                            " outside [0, " + std::to_string(classes) + ")");
    }
    Y(i, c) = 1.0;
  }
  return Y;
}

Vector example_losses(const Matrix& logits, const Vector& labels) {
  const Vector row_max = logits.rowwise().maxCoeff();
  Vector out(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    const Scalar lse = row_max[i] + std::log((logits.row(i).array() - row_max[i]).exp().sum());
    out[i] = lse - logits(i, static_cast<Index>(labels[i]));
  }
  return out;
}

Matrix softmax_jacobian_apply(const Matrix& probs, const Matrix& dlogits) {
  const Matrix pd = probs.cwiseProduct(dlogits);
  return pd - probs.cwiseProduct(pd.rowwise().sum().replicate(1, probs.cols()));
}

Scalar cross_entropy_sum(const Matrix& X, const Vector& labels, const Matrix& W) {
  return example_losses(X * W.transpose(), labels).sum();
}

Scalar weighted_cross_entropy_sum(const Matrix& X, const Vector& labels, const Matrix& W,
                                  const Vector& weights) {
  return (weights.array() * example_losses(X * W.transpose(), labels).array()).sum();
}

// ---------------------------------------------------------------------------
// Squared-error outer

Scalar SquaredErrorOuter::value(const Vector& w, const HyperVector&, const DataView& data) const {
  const Dataset& v = data.single();
  return (v.inputs * w - v.targets).squaredNorm() / static_cast<Scalar>(v.rows());
}

Vector SquaredErrorOuter::grad_w(const Vector& w, const HyperVector&, const DataView& data) const {
  const Dataset& v = data.single();
  return (2.0 / static_cast<Scalar>(v.rows())) * (v.inputs.transpose() * (v.inputs * w - v.targets));
}

Vector SquaredErrorOuter::grad_hyper(const Vector&, const HyperVector&, const DataView&) const {
  return Vector::Zero(m_);
}

// ---------------------------------------------------------------------------
// Ridge

RidgeInner::RidgeInner(Index param_dim, Index hyper_dim, Segment reg)
    : d_(param_dim), m_(hyper_dim), reg_(std::move(reg)) {
  if (reg_.length != 1) throw Error(ErrorCode::BadParams, "ridge regularizer segment must be scalar");
}

Scalar RidgeInner::value(const Vector& w, const HyperVector& h, const DataView& data) const {
  const Rows r(data.single(), data.rows);
  return (r.X() * w - r.y()).squaredNorm() + h.values()[reg_.offset] * w.squaredNorm();
}

Vector RidgeInner::grad(const Vector& w, const HyperVector& h, const DataView& data) const {
  const Rows r(data.single(), data.rows);
  return 2.0 * (r.X().transpose() * (r.X() * w - r.y())) + (2.0 * h.values()[reg_.offset]) * w;
}

Vector RidgeInner::hvp(const Vector&, const HyperVector& h, const DataView& data,
                       const Vector& v) const {
  const Rows r(data.single(), data.rows);
  return 2.0 * (r.X().transpose() * (r.X() * v)) + (2.0 * h.values()[reg_.offset]) * v;
}

Vector RidgeInner::cross_vjp(const Vector& w, const HyperVector&, const DataView&,
                             const Vector& v) const {
  Vector out = Vector::Zero(m_);
  out[reg_.offset] = 2.0 * w.dot(v);
  return out;
}

Vector RidgeInner::cross_jvp(const Vector& w, const HyperVector&, const DataView&,
                             const Vector& dh) const {
  return (2.0 * dh[reg_.offset]) * w;
}

// ---------------------------------------------------------------------------
// Generic quadratic

QuadraticInnerObjective::QuadraticInnerObjective(QuadraticInner q, Index hyper_dim,
                                                 std::optional<Segment> coeffs)
    : q_(std::move(q)), m_(hyper_dim), coeffs_(std::move(coeffs)) {
  const Index expected = coeffs_ ? coeffs_->length : 0;
  require_dim(q_.coeff_dim(), expected, "quadratic coefficients vs segment");
}

Vector QuadraticInnerObjective::coefficients(const HyperVector& h) const {
  if (!coeffs_) return Vector(0);
  return h.values().segment(coeffs_->offset, coeffs_->length);
}

Scalar QuadraticInnerObjective::value(const Vector& w, const HyperVector& h,
                                      const DataView&) const {
  const Vector c = coefficients(h);
  return w.dot(q_.A(c) * w) - 2.0 * q_.b(c).dot(w);
}

Vector QuadraticInnerObjective::grad(const Vector& w, const HyperVector& h,
                                     const DataView&) const {
  const Vector c = coefficients(h);
  return 2.0 * (q_.A(c) * w - q_.b(c));
}

Vector QuadraticInnerObjective::hvp(const Vector&, const HyperVector& h, const DataView&,
                                   const Vector& v) const {
  return 2.0 * (q_.A(coefficients(h)) * v);
}

Vector QuadraticInnerObjective::cross_vjp(const Vector& w, const HyperVector&, const DataView&,
                                          const Vector& v) const {
  Vector out = Vector::Zero(m_);
  if (!coeffs_) return out;
  for (Index k = 0; k < coeffs_->length; ++k) {
    const Vector col = q_.A_terms[static_cast<std::size_t>(k)] * w - q_.B.col(k);
    out[coeffs_->offset + k] = 2.0 * v.dot(col);
  }
  return out;
}

Vector QuadraticInnerObjective::cross_jvp(const Vector& w, const HyperVector&, const DataView&,
                                          const Vector& dh) const {
  Vector out = Vector::Zero(q_.dim());
  if (!coeffs_) return out;
  for (Index k = 0; k < coeffs_->length; ++k) {
    const Scalar dc = dh[coeffs_->offset + k];
    out += (2.0 * dc) * (q_.A_terms[static_cast<std::size_t>(k)] * w - q_.B.col(k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weighted softmax (hyper-cleaning)

WeightedSoftmaxInner::WeightedSoftmaxInner(Index classes, Index features, Index hyper_dim,
                                           Segment weights, Scalar l2)
    : classes_(classes), features_(features), m_(hyper_dim), weights_(std::move(weights)), l2_(l2) {}

namespace {

Vector gather_weights(const Vector& values, const Segment& seg, std::span<const Index> rows,
                      Index n) {
  if (seg.length != n) {
    throw Error(ErrorCode::WeightSegmentMismatch, "weight segment has " +
                                                      std::to_string(seg.length) +
                                                      " entries for " + std::to_string(n) +
                                                      " training rows");
  }
  const auto all = values.segment(seg.offset, seg.length);
  if (rows.empty()) return all;
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Index>(i)] = all[rows[i]];
  return out;
}

}  // namespace

Scalar WeightedSoftmaxInner::value(const Vector& w, const HyperVector& h,
                                   const DataView& data) const {
  const Dataset& d = data.single();
  const Rows r(d, data.rows);
  const Vector lam = gather_weights(h.values(), weights_, data.rows, d.rows());
  const ConstMatrixMap W(w.data(), classes_, features_);
  return weighted_cross_entropy_sum(r.X(), r.y(), W, lam) / static_cast<Scalar>(r.X().rows()) +
         l2_ * w.squaredNorm();
}

Vector WeightedSoftmaxInner::grad(const Vector& w, const HyperVector& h,
                                  const DataView& data) const {
  const Dataset& d = data.single();
  const Rows r(d, data.rows);
  const Vector lam = gather_weights(h.values(), weights_, data.rows, d.rows());
  const ConstMatrixMap W(w.data(), classes_, features_);
  const Matrix R = softmax_rows(r.X() * W.transpose()) - one_hot(r.y(), classes_);
  const Matrix G = (R.array().colwise() * lam.array()).matrix().transpose() * r.X() /
                   static_cast<Scalar>(r.X().rows());
  return flatten(G) + (2.0 * l2_) * w;
}

Vector WeightedSoftmaxInner::hvp(const Vector& w, const HyperVector& h, const DataView& data,
                                 const Vector& v) const {
  const Dataset& d = data.single();
  const Rows r(d, data.rows);
  const Vector lam = gather_weights(h.values(), weights_, data.rows, d.rows());
  const ConstMatrixMap W(w.data(), classes_, features_);
  const ConstMatrixMap V(v.data(), classes_, features_);
  const Matrix P = softmax_rows(r.X() * W.transpose());
  const Matrix dP = softmax_jacobian_apply(P, r.X() * V.transpose());
  const Matrix HV = (dP.array().colwise() * lam.array()).matrix().transpose() * r.X() /
                    static_cast<Scalar>(r.X().rows());
  return flatten(HV) + (2.0 * l2_) * v;
}

Vector WeightedSoftmaxInner::cross_vjp(const Vector& w, const HyperVector& h,
                                       const DataView& data, const Vector& v) const {
  const Dataset& d = data.single();
  const Rows r(d, data.rows);
  gather_weights(h.values(), weights_, data.rows, d.rows());
  const ConstMatrixMap W(w.data(), classes_, features_);
  const ConstMatrixMap V(v.data(), classes_, features_);
  const Matrix R = softmax_rows(r.X() * W.transpose()) - one_hot(r.y(), classes_);
  // d grad / d lambda_i = R_i x_i^T / s, so the product with V is R_i . (V x_i) / s.
  const Vector per_row =
      R.cwiseProduct(r.X() * V.transpose()).rowwise().sum() / static_cast<Scalar>(r.X().rows());
  Vector out = Vector::Zero(m_);
  if (data.rows.empty()) {
    out.segment(weights_.offset, weights_.length) = per_row;
  } else {
    for (std::size_t i = 0; i < data.rows.size(); ++i) {
      out[weights_.offset + data.rows[i]] = per_row[static_cast<Index>(i)];
    }
  }
  return out;
}

Vector WeightedSoftmaxInner::cross_jvp(const Vector& w, const HyperVector&, const DataView& data,
                                       const Vector& dh) const {
  const Dataset& d = data.single();
  const Rows r(d, data.rows);
  const Vector dlam = gather_weights(dh, weights_, data.rows, d.rows());
  const ConstMatrixMap W(w.data(), classes_, features_);
  const Matrix R = softmax_rows(r.X() * W.transpose()) - one_hot(r.y(), classes_);
  const Matrix G = (R.array().colwise() * dlam.array()).matrix().transpose() * r.X() /
                   static_cast<Scalar>(r.X().rows());
  return flatten(G);
}

Scalar SoftmaxOuter::value(const Vector& w, const HyperVector&, const DataView& data) const {
  const Dataset& v = data.single();
  const ConstMatrixMap W(w.data(), classes_, features_);
  return cross_entropy_sum(v.inputs, v.targets, W) / static_cast<Scalar>(v.rows());
}

Vector SoftmaxOuter::grad_w(const Vector& w, const HyperVector&, const DataView& data) const {
  const Dataset& v = data.single();
  const ConstMatrixMap W(w.data(), classes_, features_);
  const Matrix R = softmax_rows(v.inputs * W.transpose()) - one_hot(v.targets, classes_);
  return flatten(R.transpose() * v.inputs / static_cast<Scalar>(v.rows()));
}

Vector SoftmaxOuter::grad_hyper(const Vector&, const HyperVector&, const DataView&) const {
  return Vector::Zero(m_);
}

// ---------------------------------------------------------------------------
// Hyper-representation

HeadLayout::HeadLayout(Index k_, std::vector<Index> classes_) : k(k_), classes(std::move(classes_)) {
  offsets.reserve(classes.size());
  for (Index c : classes) {
    offsets.push_back(total);
    total += c * k;
  }
}

namespace {

Matrix representation(const HyperVector& h, const Segment& repr, Index features) {
  return ConstMatrixMap(h.values().data() + repr.offset, repr.length / features, features);
}

void check_tasks(const DataView& data, const HeadLayout& heads) {
  if (data.tasks.size() != heads.classes.size()) {
    throw Error(ErrorCode::DimensionMismatch, "data has " + std::to_string(data.tasks.size()) +
                                                  " tasks, heads cover " +
                                                  std::to_string(heads.classes.size()));
  }
  if (!data.rows.empty()) {
    throw Error(ErrorCode::BadParams, "hyper-representation objectives are full-batch only");
  }
}

struct TaskPass {
  Matrix F;    // n x k features
  Matrix P;    // n x C probabilities
  Matrix Res;  // P - Y
};

TaskPass task_pass(const Dataset& d, const Matrix& R, const Eigen::Ref<const Matrix>& W,
                   Index classes) {
  TaskPass p;
  p.F = d.inputs * R.transpose();
  p.P = softmax_rows(p.F * W.transpose());
  p.Res = p.P - one_hot(d.targets, classes);
  return p;
}

}  // namespace

HyperReprInner::HyperReprInner(HeadLayout heads, Index features, Index hyper_dim, Segment repr)
    : heads_(std::move(heads)), features_(features), m_(hyper_dim), repr_(std::move(repr)) {
  require_dim(repr_.length, heads_.k * features_, "representation segment");
}

Scalar HyperReprInner::value(const Vector& w, const HyperVector& h, const DataView& data) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  Scalar total = 0.0;
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], heads_.classes[j], heads_.k);
    total += cross_entropy_sum(d.inputs * R.transpose(), d.targets, W) /
             static_cast<Scalar>(d.rows());
  }
  return total;
}

Vector HyperReprInner::grad(const Vector& w, const HyperVector& h, const DataView& data) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  Vector out(heads_.total);
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const Index C = heads_.classes[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], C, heads_.k);
    const TaskPass p = task_pass(d, R, W, C);
    out.segment(heads_.offsets[j], C * heads_.k) =
        flatten(p.Res.transpose() * p.F / static_cast<Scalar>(d.rows()));
  }
  return out;
}

Vector HyperReprInner::hvp(const Vector& w, const HyperVector& h, const DataView& data,
                           const Vector& v) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  Vector out(heads_.total);
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const Index C = heads_.classes[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], C, heads_.k);
    const ConstMatrixMap V(v.data() + heads_.offsets[j], C, heads_.k);
    const TaskPass p = task_pass(d, R, W, C);
    const Matrix dP = softmax_jacobian_apply(p.P, p.F * V.transpose());
    out.segment(heads_.offsets[j], C * heads_.k) =
        flatten(dP.transpose() * p.F / static_cast<Scalar>(d.rows()));
  }
  return out;
}

Vector HyperReprInner::cross_vjp(const Vector& w, const HyperVector& h, const DataView& data,
                                 const Vector& v) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  Matrix acc = Matrix::Zero(heads_.k, features_);
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const Index C = heads_.classes[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], C, heads_.k);
    const ConstMatrixMap V(v.data() + heads_.offsets[j], C, heads_.k);
    const TaskPass p = task_pass(d, R, W, C);
    // grad_W = Res^T F / n; R enters through F directly and through Res.
    const Matrix Q = softmax_jacobian_apply(p.P, p.F * V.transpose());
    acc += (V.transpose() * p.Res.transpose() + W.transpose() * Q.transpose()) * d.inputs /
           static_cast<Scalar>(d.rows());
  }
  Vector out = Vector::Zero(m_);
  out.segment(repr_.offset, repr_.length) = flatten(acc);
  return out;
}

Vector HyperReprInner::cross_jvp(const Vector& w, const HyperVector& h, const DataView& data,
                                 const Vector& dh) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  const Matrix dR = ConstMatrixMap(dh.data() + repr_.offset, heads_.k, features_);
  Vector out(heads_.total);
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const Index C = heads_.classes[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], C, heads_.k);
    const TaskPass p = task_pass(d, R, W, C);
    const Matrix dF = d.inputs * dR.transpose();
    const Matrix dRes = softmax_jacobian_apply(p.P, dF * W.transpose());
    out.segment(heads_.offsets[j], C * heads_.k) =
        flatten((dRes.transpose() * p.F + p.Res.transpose() * dF) / static_cast<Scalar>(d.rows()));
  }
  return out;
}

HyperReprOuter::HyperReprOuter(HeadLayout heads, Index features, Index hyper_dim, Segment repr)
    : heads_(std::move(heads)), features_(features), m_(hyper_dim), repr_(std::move(repr)) {
  require_dim(repr_.length, heads_.k * features_, "representation segment");
}

Scalar HyperReprOuter::value(const Vector& w, const HyperVector& h, const DataView& data) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  Scalar total = 0.0;
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], heads_.classes[j], heads_.k);
    total += cross_entropy_sum(d.inputs * R.transpose(), d.targets, W) /
             static_cast<Scalar>(d.rows());
  }
  return total / static_cast<Scalar>(heads_.classes.size());
}

Vector HyperReprOuter::grad_w(const Vector& w, const HyperVector& h, const DataView& data) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  const auto N = static_cast<Scalar>(heads_.classes.size());
  Vector out(heads_.total);
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const Index C = heads_.classes[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], C, heads_.k);
    const TaskPass p = task_pass(d, R, W, C);
    out.segment(heads_.offsets[j], C * heads_.k) =
        flatten(p.Res.transpose() * p.F / (N * static_cast<Scalar>(d.rows())));
  }
  return out;
}

Vector HyperReprOuter::grad_hyper(const Vector& w, const HyperVector& h,
                                  const DataView& data) const {
  check_tasks(data, heads_);
  const Matrix R = representation(h, repr_, features_);
  const auto N = static_cast<Scalar>(heads_.classes.size());
  Matrix acc = Matrix::Zero(heads_.k, features_);
  for (std::size_t j = 0; j < heads_.classes.size(); ++j) {
    const Dataset& d = data.tasks[j];
    const Index C = heads_.classes[j];
    const ConstMatrixMap W(w.data() + heads_.offsets[j], C, heads_.k);
    const TaskPass p = task_pass(d, R, W, C);
    acc += W.transpose() * p.Res.transpose() * d.inputs / (N * static_cast<Scalar>(d.rows()));
  }
  Vector out = Vector::Zero(m_);
  out.segment(repr_.offset, repr_.length) = flatten(acc);
  return out;
}

// ---------------------------------------------------------------------------
// Factories

void append_learning_rate(HyperVector& h, const DynamicsSpec& spec) {
  if (spec.kind != DynamicsKind::HyperLRGradientDescent) return;
  if (!(spec.eta > 0.0)) throw Error(ErrorCode::BadParams, "initial learning rate must be positive");
  h.add_segment(spec.lr_segment, Vector::Constant(1, std::log(spec.eta)));
}

ProblemInstance ridge_problem(const Dataset& train, const Dataset& validation,
                              const ProblemOptions& options, Scalar l2) {
  const Index d = train.features();
  if (train.rows() == 0) throw Error(ErrorCode::EmptyTrainingSet, "ridge training set is empty");
  require_dim(validation.features(), d, "validation features");
  require_dim(train.targets.size(), train.rows(), "training targets");
  HyperVector h;
  h.add_segment("l2", Vector::Constant(1, l2), 1e-8, HyperVector::kInf);
  append_learning_rate(h, options.dynamics);
  const Index m = h.size();
  auto inner = std::make_shared<RidgeInner>(d, m, h.segment("l2"));
  auto outer = std::make_shared<SquaredErrorOuter>(d, m);
  ProblemInstance inst = finish(inner, outer, options, {train}, {validation}, std::move(h));
  for (Index j = 0; j < d; ++j) {
    if (train.inputs.col(j).isZero(0.0)) {
      inst.problem.warnings.push_back("SingularData: training column " + std::to_string(j) +
                                      " is identically zero");
    }
  }
  return inst;
}

ProblemInstance quadratic_problem(const QuadraticInner& q, const Dataset& validation,
                                  const ProblemOptions& options, std::optional<Vector> coeffs) {
  validate_quadratic_inner(q);
  require_dim(validation.features(), q.dim(), "validation features");
  HyperVector h;
  if (q.coeff_dim() > 0) {
    const Vector c0 = coeffs ? *coeffs : Vector(q.lower.cwiseMax(Vector::Zero(q.coeff_dim())));
    h.add_segment("coeffs", c0, q.lower, q.upper);
  }
  append_learning_rate(h, options.dynamics);
  if (h.size() == 0) {
    throw Error(ErrorCode::BadParams, "quadratic problem has no hyperparameters");
  }
  const Index m = h.size();
  auto inner = std::make_shared<QuadraticInnerObjective>(q, m, h.find_segment("coeffs"));
  auto outer = std::make_shared<SquaredErrorOuter>(q.dim(), m);
  // Data-free inner: an empty placeholder dataset keeps the single-task view valid.
  return finish(inner, outer, options, {Dataset{}}, {validation}, std::move(h));
}

ProblemInstance hyperclean_problem(const HyperCleanData& data, const HyperCleanOptions& options) {
  const Index n = data.train.rows();
  if (n == 0) throw Error(ErrorCode::EmptyTrainingSet, "hyper-cleaning training set is empty");
  const Index p = data.train.features();
  require_dim(data.validation.features(), p, "validation features");
  const Vector w0 = options.initial_weights.value_or(Vector::Ones(n));
  if (w0.size() != n) {
    throw Error(ErrorCode::WeightSegmentMismatch, "initial weights have " +
                                                      std::to_string(w0.size()) + " entries for " +
                                                      std::to_string(n) + " training rows");
  }
  HyperVector h;
  h.add_segment("weights", w0, 0.0, 1.0);
  append_learning_rate(h, options.base.dynamics);
  const Index m = h.size();
  auto inner = std::make_shared<WeightedSoftmaxInner>(data.classes, p, m, h.segment("weights"),
                                                      options.l2);
  auto outer = std::make_shared<SoftmaxOuter>(data.classes, p, m);
  return finish(inner, outer, options.base, {data.train}, {data.validation}, std::move(h));
}

Index MetaDataset::features() const {
  return episodes.empty() ? 0 : episodes.front().train.features();
}

HyperVector hyperrepr_hyper(Index features, const HyperReprSpec& spec,
                            const DynamicsSpec& dynamics) {
  if (spec.k <= 0 || spec.k > features) {
    throw Error(ErrorCode::BadParams, "representation size k must be in [1, features]");
  }
  HyperVector h;
  h.add_segment("repr", gaussian_vector(spec.k * features, spec.repr_seed, spec.repr_init_scale));
  append_learning_rate(h, dynamics);
  return h;
}

BilevelProblem hyperrepr_problem_for(std::span<const Episode> episodes, const HyperVector& h,
                                     const ProblemOptions& options) {
  if (episodes.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no episodes");
  const Index p = episodes.front().train.features();
  std::vector<Index> classes;
  DatasetList train;
  DatasetList validation;
  for (const Episode& e : episodes) {
    if (e.train.features() != p || e.validation.features() != p) {
      throw Error(ErrorCode::InconsistentFeatureDim,
                  "episode " + std::to_string(e.task_id) + " has a different feature dimension");
    }
    if (e.train.rows() == 0) {
      throw Error(ErrorCode::EmptyTrainingSet, "episode " + std::to_string(e.task_id));
    }
    classes.push_back(e.classes);
    train.push_back(e.train);
    validation.push_back(e.validation);
  }
  const Segment& repr = h.segment("repr");
  if (repr.length % p != 0) {
    throw Error(ErrorCode::InconsistentFeatureDim, "representation length vs feature dimension");
  }
  const HeadLayout heads(repr.length / p, std::move(classes));
  const Index m = h.size();
  auto inner = std::make_shared<HyperReprInner>(heads, p, m, repr);
  auto outer = std::make_shared<HyperReprOuter>(heads, p, m, repr);
  ProblemOptions opts = options;
  opts.inner_batch.reset();
  return finish(inner, outer, opts, std::move(train), std::move(validation), h).problem;
}

ProblemInstance hyperrepr_problem(std::span<const Episode> episodes, const HyperReprSpec& spec,
                                  const ProblemOptions& options) {
  if (episodes.empty()) throw Error(ErrorCode::EmptyTrainingSet, "no episodes");
  HyperVector h = hyperrepr_hyper(episodes.front().train.features(), spec, options.dynamics);
  BilevelProblem p = hyperrepr_problem_for(episodes, h, options);
  return {std::move(p), std::move(h)};
}

std::vector<Index> sample_meta_batch(const MetaDataset& meta, Index batch, std::uint64_t seed) {
  const Index n = meta.size();
  if (batch <= 0) throw Error(ErrorCode::BadParams, "meta-batch size must be positive");
  if (batch > n) {
    throw Error(ErrorCode::BatchTooLarge, "meta-batch " + std::to_string(batch) + " > " +
                                              std::to_string(n) + " episodes");
  }
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(seed);
  for (Index i = 0; i < batch; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(batch));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

Matrix class_means(Index classes, Index features, Scalar separation, std::uint64_t seed) {
  Matrix means(classes, features);
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal;
  for (Index c = 0; c < classes; ++c) {
    if (classes == 2 && c == 1) {
      means.row(1) = -means.row(0);
      break;
    }
    Vector u(features);
    for (Index j = 0; j < features; ++j) u[j] = normal(rng);
    means.row(c) = (0.5 * separation / u.norm()) * u.transpose();
  }
  return means;
}

Dataset sample_gaussians(const Matrix& means, Index n, Scalar noise, std::uint64_t seed) {
  const Index classes = means.rows();
  const Index p = means.cols();
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal;
  std::uniform_int_distribution<Index> label(0, classes - 1);
  Dataset d{Matrix(n, p), Vector(n)};
  for (Index i = 0; i < n; ++i) {
    const Index c = label(rng);
    d.targets[i] = static_cast<Scalar>(c);
    for (Index j = 0; j < p; ++j) d.inputs(i, j) = means(c, j) + noise * normal(rng);
  }
  return d;
}

void check_gaussian_params(Index n, Index features, Index classes, Scalar separation,
                           Scalar noise) {
  if (n <= 0 || features <= 0 || classes < 2 || !(separation >= 0.0) || !(noise > 0.0)) {
    throw Error(ErrorCode::BadParams, "gaussian generator: need n, features > 0, classes >= 2, "
                                      "separation >= 0, noise > 0");
  }
}

}  // namespace

Dataset generate_gaussians(const GaussianParams& params, std::uint64_t seed,
                           std::uint64_t sample_seed) {
  check_gaussian_params(params.n, params.features, params.classes, params.separation,
                        params.noise);
  return sample_gaussians(class_means(params.classes, params.features, params.separation, seed),
                          params.n, params.noise, sample_seed);
}

std::pair<Dataset, Dataset> generate_regression(const RegressionParams& params,
                                                std::uint64_t seed) {
  if (params.n_train <= 0 || params.n_validation <= 0 || params.features <= 0 ||
      !(params.noise >= 0.0)) {
    throw Error(ErrorCode::BadParams, "regression generator parameters");
  }
  const Vector w_true = gaussian_vector(params.features, seed);
  auto split = [&](Index n, std::uint64_t s) {
    Dataset d;
    d.inputs = gaussian_vector(n * params.features, s).reshaped(n, params.features);
    d.targets = d.inputs * w_true + gaussian_vector(n, s + 1, params.noise);
    return d;
  };
  return {split(params.n_train, seed + 1), split(params.n_validation, seed + 3)};
}

HyperCleanData generate_hyperclean(const HyperCleanParams& params, std::uint64_t seed) {
  check_gaussian_params(params.n_train, params.features, params.classes, params.separation, 1.0);
  if (params.n_validation <= 0 || params.n_test <= 0) {
    throw Error(ErrorCode::BadParams, "hyperclean generator: validation/test sizes must be > 0");
  }
  if (!(params.corruption >= 0.0 && params.corruption < 1.0)) {
    throw Error(ErrorCode::BadParams, "corruption fraction must be in [0, 1)");
  }
  const Matrix means = class_means(params.classes, params.features, params.separation, seed);
  HyperCleanData out;
  out.classes = params.classes;
  out.train = sample_gaussians(means, params.n_train, 1.0, seed + 1);
  out.validation = sample_gaussians(means, params.n_validation, 1.0, seed + 2);
  out.test = sample_gaussians(means, params.n_test, 1.0, seed + 3);

  const Index n = params.n_train;
  const auto flips = static_cast<Index>(std::llround(params.corruption * static_cast<Scalar>(n)));
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(seed + 4);
  for (Index i = 0; i < flips; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  out.corrupted.assign(static_cast<std::size_t>(n), false);
  std::uniform_int_distribution<Index> shift(1, params.classes - 1);
  for (Index i = 0; i < flips; ++i) {
    const Index row = idx[static_cast<std::size_t>(i)];
    const auto y = static_cast<Index>(out.train.targets[row]);
    out.train.targets[row] = static_cast<Scalar>((y + shift(rng)) % params.classes);
    out.corrupted[static_cast<std::size_t>(row)] = true;
  }
  return out;
}

MetaDataset generate_shared_subspace(const SharedSubspaceParams& params, std::uint64_t seed) {
  const Index p = params.features;
  const Index k = params.true_rank;
  const Index C = params.classes;
  if (p <= 0 || k <= 0 || k > p || C < 2 || params.tasks <= 0 || params.shots <= 0 ||
      params.validation_shots <= 0) {
    throw Error(ErrorCode::BadParams, "shared-subspace generator parameters");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal;
  Matrix G(p, k);
  for (Index i = 0; i < G.size(); ++i) G.data()[i] = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(G);
  MetaDataset meta;
  meta.true_subspace = qr.householderQ() * Matrix::Identity(p, k);
  meta.seed = seed;
  meta.shots = params.shots;
  meta.classes = C;

  const Index per_class = params.shots + params.validation_shots;
  for (Index t = 0; t < params.tasks; ++t) {
    Matrix head(C, k);
    for (Index i = 0; i < head.size(); ++i) head.data()[i] = normal(rng);
    std::vector<std::vector<Vector>> buckets(static_cast<std::size_t>(C));
    Index filled = 0;
    for (long attempt = 0; filled < C; ++attempt) {
      if (attempt > 200000) {
        throw Error(ErrorCode::BadParams, "task " + std::to_string(t) +
                                              ": could not fill every class; lower the shots");
      }
      Vector x(p);
      for (Index j = 0; j < p; ++j) x[j] = normal(rng);
      Index label = 0;
      (head * (meta.true_subspace.transpose() * x)).maxCoeff(&label);
      auto& bucket = buckets[static_cast<std::size_t>(label)];
      if (static_cast<Index>(bucket.size()) < per_class) {
        bucket.push_back(std::move(x));
        if (static_cast<Index>(bucket.size()) == per_class) ++filled;
      }
    }
    Episode e;
    e.task_id = static_cast<int>(t);
    e.classes = C;
    e.train = {Matrix(params.shots * C, p), Vector(params.shots * C)};
    e.validation = {Matrix(params.validation_shots * C, p), Vector(params.validation_shots * C)};
    for (Index s = 0; s < per_class; ++s) {
      for (Index c = 0; c < C; ++c) {
        const Vector& x = buckets[static_cast<std::size_t>(c)][static_cast<std::size_t>(s)];
        Dataset& split = s < params.shots ? e.train : e.validation;
        const Index row = (s < params.shots ? s : s - params.shots) * C + c;
        split.inputs.row(row) = x.transpose();
        split.targets[row] = static_cast<Scalar>(c);
      }
    }
    meta.episodes.push_back(std::move(e));
  }
  return meta;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::ostringstream out;
  for (Index j = 0; j < data.features(); ++j) out << 'x' << j << ',';
  out << "label\n";
  for (Index i = 0; i < data.rows(); ++i) {
    for (Index j = 0; j < data.features(); ++j) out << format_scalar(data.inputs(i, j)) << ',';
    out << format_scalar(data.targets[i]) << '\n';
  }
  write_file_atomic(path, out.str());
}

void write_mask_csv(const std::filesystem::path& path, const std::vector<bool>& mask) {
  std::ostringstream out;
  out << "index,corrupted\n";
  for (std::size_t i = 0; i < mask.size(); ++i) out << i << ',' << (mask[i] ? 1 : 0) << '\n';
  write_file_atomic(path, out.str());
}

}  // namespace bilevel
