#include "bilevel/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

namespace bilevel {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonPositiveUnroll: return "NonPositiveUnroll";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteState: return "NonFiniteState";
    case ErrorCode::TrajectoryMismatch: return "TrajectoryMismatch";
    case ErrorCode::BoundaryTooClose: return "BoundaryTooClose";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::WeightSegmentMismatch: return "WeightSegmentMismatch";
    case ErrorCode::InconsistentFeatureDim: return "InconsistentFeatureDim";
    case ErrorCode::BatchTooLarge: return "BatchTooLarge";
    case ErrorCode::BadParams: return "BadParams";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::NotPositiveDefinite: return "NotPositiveDefinite";
    case ErrorCode::NonContractive: return "NonContractive";
    case ErrorCode::UnknownSegment: return "UnknownSegment";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// HyperVector

HyperVector& HyperVector::add_segment(std::string name, const Vector& values, Scalar lower,
                                      Scalar upper) {
  return add_segment(std::move(name), values, Vector::Constant(values.size(), lower),
                     Vector::Constant(values.size(), upper));
}

HyperVector& HyperVector::add_segment(std::string name, const Vector& values, const Vector& lower,
                                      const Vector& upper) {
  if (name.empty()) throw Error(ErrorCode::BadParams, "segment name must be non-empty");
  if (has_segment(name)) throw Error(ErrorCode::BadParams, "duplicate segment '" + name + "'");
  if (values.size() == 0) throw Error(ErrorCode::BadParams, "segment '" + name + "' is empty");
  if (lower.size() != values.size() || upper.size() != values.size()) {
    throw Error(ErrorCode::DimensionMismatch, "bounds of segment '" + name + "' vs its values");
  }
  if ((lower.array() > upper.array()).any()) {
    throw Error(ErrorCode::BadParams, "segment '" + name + "' has lower > upper");
  }
  const Index offset = size();
  const Index n = values.size();
  auto grow = [&](Vector& dst, const Vector& src) {
    dst.conservativeResize(offset + n);
    dst.segment(offset, n) = src;
  };
  grow(values_, values);
  grow(lower_, lower);
  grow(upper_, upper);
  segments_.push_back({std::move(name), offset, n});
  return *this;
}

std::optional<Segment> HyperVector::find_segment(std::string_view name) const {
  for (const Segment& s : segments_) {
    if (s.name == name) return s;
  }
  return std::nullopt;
}

const Segment& HyperVector::segment(std::string_view name) const {
  for (const Segment& s : segments_) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::UnknownSegment, "no segment named '" + std::string(name) + "'");
}

Vector HyperVector::segment_values(std::string_view name) const {
  const Segment& s = segment(name);
  return values_.segment(s.offset, s.length);
}

void HyperVector::set_segment_values(std::string_view name, const Vector& v) {
  const Segment& s = segment(name);
  if (v.size() != s.length) {
    throw Error(ErrorCode::DimensionMismatch, "segment '" + s.name + "' vs assigned values");
  }
  values_.segment(s.offset, s.length) = v;
}

bool HyperVector::is_feasible(Scalar slack) const {
  return ((values_.array() >= lower_.array() - slack) &&
          (values_.array() <= upper_.array() + slack))
      .all();
}

HyperVector HyperVector::with_values(const Vector& values) const {
  if (values.size() != size()) {
    throw Error(ErrorCode::DimensionMismatch, "hyper values of length " +
                                                  std::to_string(values.size()) + " vs layout " +
                                                  std::to_string(size()));
  }
  HyperVector out = *this;
  out.values_ = values;
  return out;
}

std::uint64_t HyperVector::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values_.data());
  const std::size_t n = static_cast<std::size_t>(values_.size()) * sizeof(Scalar);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// InnerState / DataView

Vector InnerState::stacked() const {
  Vector out(size());
  out << params, aux;
  return out;
}

InnerState InnerState::split(const Eigen::Ref<const Vector>& stacked, Index param_dim) {
  return {stacked.head(param_dim), stacked.tail(stacked.size() - param_dim)};
}

const Dataset& DataView::single() const {
  if (tasks.size() != 1) {
    throw Error(ErrorCode::DimensionMismatch,
                "expected a single-task data view, got " + std::to_string(tasks.size()));
  }
  return tasks.front();
}

// ---------------------------------------------------------------------------
// Init maps

Vector InitMap::vjp(const HyperVector& h, const Vector&) const { return Vector::Zero(h.size()); }

Matrix InitMap::jvp(const HyperVector&, const Matrix& directions) const {
  return Matrix::Zero(state_dim(), directions.cols());
}

GaussianInit::GaussianInit(Index param_dim, Index aux_dim, std::uint64_t seed, Scalar scale)
    : params_(gaussian_vector(param_dim, seed, scale)), aux_dim_(aux_dim) {}

Vector GaussianInit::initial_state(const HyperVector&) const {
  Vector s = Vector::Zero(state_dim());
  s.head(params_.size()) = params_;
  return s;
}

Vector SegmentInit::initial_state(const HyperVector& h) const {
  Vector s = Vector::Zero(state_dim());
  s.head(segment_.length) = h.values().segment(segment_.offset, segment_.length);
  return s;
}

Vector SegmentInit::vjp(const HyperVector& h, const Vector& v) const {
  Vector out = Vector::Zero(h.size());
  out.segment(segment_.offset, segment_.length) = v.head(segment_.length);
  return out;
}

Matrix SegmentInit::jvp(const HyperVector&, const Matrix& directions) const {
  Matrix out = Matrix::Zero(state_dim(), directions.cols());
  out.topRows(segment_.length) = directions.middleRows(segment_.offset, segment_.length);
  return out;
}

// ---------------------------------------------------------------------------
// BilevelProblem

std::vector<Index> BilevelProblem::step_rows(int t) const {
  if (!inner_batch) return {};
  const Index n = train->front().rows();
  const Index b = std::min(inner_batch->batch_size, n);
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(inner_batch->seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(t));
  // Partial Fisher-Yates: first b entries are a uniform sample without replacement.
  for (Index i = 0; i < b; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(b));
  std::sort(idx.begin(), idx.end());
  return idx;
}

BilevelProblem BilevelProblem::with_unroll(int steps) const {
  if (steps < 0) throw Error(ErrorCode::NonPositiveUnroll, "T = " + std::to_string(steps));
  BilevelProblem p = *this;
  p.T = steps;
  return p;
}

BilevelProblem BilevelProblem::with_init(std::shared_ptr<const InitMap> new_init) const {
  if (new_init->state_dim() != state_dim()) {
    throw Error(ErrorCode::DimensionMismatch, "init state vs dynamics state");
  }
  BilevelProblem p = *this;
  p.init = std::move(new_init);
  return p;
}

namespace {

void require_same(Index a, Index b, const char* what_a, const char* what_b) {
  if (a != b) {
    throw Error(ErrorCode::DimensionMismatch, std::string(what_a) + " (" + std::to_string(a) +
                                                  ") vs " + what_b + " (" + std::to_string(b) +
                                                  ")");
  }
}

}  // namespace

BilevelProblem assemble_problem(std::shared_ptr<const InnerObjective> inner,
                                std::shared_ptr<const OuterObjective> outer,
                                std::shared_ptr<const Dynamics> dynamics,
                                std::shared_ptr<const InitMap> init, int T,
                                std::shared_ptr<const DatasetList> train,
                                std::shared_ptr<const DatasetList> validation,
                                std::optional<InnerMiniBatch> inner_batch) {
  if (!inner || !outer || !dynamics || !init || !train || !validation) {
    throw Error(ErrorCode::BadParams, "assemble_problem: null component");
  }
  if (T < 0) throw Error(ErrorCode::NonPositiveUnroll, "T = " + std::to_string(T));
  require_same(inner->param_dim(), dynamics->param_dim(), "inner objective params",
               "dynamics params");
  require_same(outer->param_dim(), inner->param_dim(), "outer objective params",
               "inner objective params");
  require_same(init->state_dim(), dynamics->state_dim(), "init state", "dynamics state");
  require_same(outer->hyper_dim(), inner->hyper_dim(), "outer objective hyper",
               "inner objective hyper");
  if (inner_batch) {
    if (train->size() != 1) {
      throw Error(ErrorCode::BadParams, "inner mini-batching needs a single-task training set");
    }
    if (inner_batch->batch_size <= 0) {
      throw Error(ErrorCode::BadParams, "inner batch size must be positive");
    }
  }
  BilevelProblem p;
  p.inner = std::move(inner);
  p.outer = std::move(outer);
  p.dynamics = std::move(dynamics);
  p.init = std::move(init);
  p.T = T;
  p.train = std::move(train);
  p.validation = std::move(validation);
  p.inner_batch = inner_batch;
  return p;
}

// ---------------------------------------------------------------------------
// Transpose consistency

namespace {

Scalar probe_defect(const BilevelProblem& p, const HyperVector& h, const Vector& state,
                    const Vector& v, const Vector& z, const Vector& dh) {
  const auto rows = p.step_rows(1);
  const DataView data = p.train_view(rows);
  const Dynamics& dyn = *p.dynamics;
  const Vector vs = dyn.vjp_state(*p.inner, state, h, data, v);
  const Vector vh = dyn.vjp_hyper(*p.inner, state, h, data, v);
  const Vector jz = dyn.jvp(*p.inner, state, h, data, z, dh);
  const Scalar lhs = vs.dot(z) + vh.dot(dh);
  const Scalar rhs = v.dot(jz);
  return std::abs(lhs - rhs) / (std::abs(rhs) + 1e-12);
}

}  // namespace

TransposeReport check_transpose_consistency(const BilevelProblem& problem, const HyperVector& h,
                                            int probe_count, std::uint64_t seed,
                                            Scalar state_scale) {
  TransposeReport report;
  const Index n = problem.state_dim();
  const Index m = h.size();
  for (int k = 0; k < probe_count; ++k) {
    const std::uint64_t s = seed * 1000003ULL + static_cast<std::uint64_t>(k) * 4ULL;
    const Vector state = gaussian_vector(n, s, state_scale);
    const Vector v = gaussian_vector(n, s + 1);
    const Vector z = gaussian_vector(n, s + 2);
    const Vector dh = gaussian_vector(m, s + 3);
    report.max_defect = std::max(report.max_defect, probe_defect(problem, h, state, v, z, dh));
    ++report.probes;
  }
  report.pass = report.max_defect <= TransposeReport::kThreshold;
  return report;
}

TransposeReport check_transpose_consistency_zero_cotangent(const BilevelProblem& problem,
                                                           const HyperVector& h) {
  TransposeReport report;
  const Index n = problem.state_dim();
  const Vector state = gaussian_vector(n, 17, 0.5);
  report.max_defect = probe_defect(problem, h, state, Vector::Zero(n), gaussian_vector(n, 18),
                                   gaussian_vector(h.size(), 19));
  report.probes = 1;
  report.pass = report.max_defect <= TransposeReport::kThreshold;
  return report;
}

// ---------------------------------------------------------------------------
// Counting decorator

void CountingInnerObjective::Counts::reset() {
  value = 0;
  grad = 0;
  hvp = 0;
  cross_vjp = 0;
  cross_jvp = 0;
}

Scalar CountingInnerObjective::value(const Vector& w, const HyperVector& h,
                                     const DataView& d) const {
  ++counts_->value;
  return wrapped_->value(w, h, d);
}

Vector CountingInnerObjective::grad(const Vector& w, const HyperVector& h,
                                    const DataView& d) const {
  ++counts_->grad;
  return wrapped_->grad(w, h, d);
}

Vector CountingInnerObjective::hvp(const Vector& w, const HyperVector& h, const DataView& d,
                                   const Vector& v) const {
  ++counts_->hvp;
  return wrapped_->hvp(w, h, d, v);
}

Vector CountingInnerObjective::cross_vjp(const Vector& w, const HyperVector& h, const DataView& d,
                                         const Vector& v) const {
  ++counts_->cross_vjp;
  return wrapped_->cross_vjp(w, h, d, v);
}

Vector CountingInnerObjective::cross_jvp(const Vector& w, const HyperVector& h, const DataView& d,
                                         const Vector& dh) const {
  ++counts_->cross_jvp;
  return wrapped_->cross_jvp(w, h, d, dh);
}

Vector gaussian_vector(Index n, std::uint64_t seed, Scalar scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<Scalar> normal(0.0, scale);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

}  // namespace bilevel
