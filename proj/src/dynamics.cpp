#include "bilevel/dynamics.hpp"

#include <cmath>

namespace bilevel {

namespace {

Vector checked_grad(const InnerObjective& inner, const Vector& w, const HyperVector& h,
                    const DataView& data) {
  Vector g = inner.grad(w, h, data);
  if (!g.allFinite()) {
    throw Error(ErrorCode::NonFiniteGradient, "inner gradient contains NaN/Inf");
  }
  return g;
}

void check_eta(Scalar eta) {
  if (!(eta > 0.0) || !std::isfinite(eta)) {
    throw Error(ErrorCode::BadParams, "step size must be finite and positive");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Plain gradient descent

GradientDescent::GradientDescent(Index param_dim, Scalar eta) : param_dim_(param_dim), eta_(eta) {
  check_eta(eta);
}

Vector GradientDescent::step(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                             const DataView& data) const {
  const Vector g = checked_grad(inner, state, h, data);
  return state - eta_ * g;
}

Vector GradientDescent::vjp_state(const InnerObjective& inner, const Vector& state,
                                  const HyperVector& h, const DataView& data,
                                  const Vector& v) const {
  return v - eta_ * inner.hvp(state, h, data, v);
}

Vector GradientDescent::vjp_hyper(const InnerObjective& inner, const Vector& state,
                                  const HyperVector& h, const DataView& data,
                                  const Vector& v) const {
  return -eta_ * inner.cross_vjp(state, h, data, v);
}

Vector GradientDescent::jvp(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                            const DataView& data, const Vector& z, const Vector& dh) const {
  return z - eta_ * (inner.hvp(state, h, data, z) + inner.cross_jvp(state, h, data, dh));
}

// ---------------------------------------------------------------------------
// Gradient descent with log-domain learnable step size

HyperLRGradientDescent::HyperLRGradientDescent(Index param_dim, std::string lr_segment)
    : param_dim_(param_dim), lr_segment_(std::move(lr_segment)) {}

Index HyperLRGradientDescent::lr_offset(const HyperVector& h) const {
  const Segment& s = h.segment(lr_segment_);
  if (s.length != 1) {
    throw Error(ErrorCode::BadParams, "learning-rate segment '" + lr_segment_ +
                                          "' must have length 1, has " +
                                          std::to_string(s.length));
  }
  return s.offset;
}

Scalar HyperLRGradientDescent::step_size(const HyperVector& h) const {
  return std::exp(h.values()[lr_offset(h)]);
}

Vector HyperLRGradientDescent::step(const InnerObjective& inner, const Vector& state,
                                    const HyperVector& h, const DataView& data) const {
  const Vector g = checked_grad(inner, state, h, data);
  return state - step_size(h) * g;
}

Vector HyperLRGradientDescent::vjp_state(const InnerObjective& inner, const Vector& state,
                                         const HyperVector& h, const DataView& data,
                                         const Vector& v) const {
  return v - step_size(h) * inner.hvp(state, h, data, v);
}

Vector HyperLRGradientDescent::vjp_hyper(const InnerObjective& inner, const Vector& state,
                                         const HyperVector& h, const DataView& data,
                                         const Vector& v) const {
  const Scalar eta = step_size(h);
  Vector out = -eta * inner.cross_vjp(state, h, data, v);
  // dPhi/dtheta = -exp(theta) grad L
  out[lr_offset(h)] += -eta * inner.grad(state, h, data).dot(v);
  return out;
}

Vector HyperLRGradientDescent::jvp(const InnerObjective& inner, const Vector& state,
                                   const HyperVector& h, const DataView& data, const Vector& z,
                                   const Vector& dh) const {
  const Scalar eta = step_size(h);
  const Scalar dtheta = dh[lr_offset(h)];
  Vector out = z - eta * (inner.hvp(state, h, data, z) + inner.cross_jvp(state, h, data, dh));
  if (dtheta != 0.0) out -= (eta * dtheta) * inner.grad(state, h, data);
  return out;
}

// ---------------------------------------------------------------------------
// Heavy-ball momentum

Momentum::Momentum(Index param_dim, Scalar eta, Scalar mu)
    : param_dim_(param_dim), eta_(eta), mu_(mu) {
  check_eta(eta);
  if (!(mu >= 0.0 && mu < 1.0)) throw Error(ErrorCode::BadParams, "momentum must be in [0, 1)");
}

Vector Momentum::step(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                      const DataView& data) const {
  const Index d = param_dim_;
  const Vector w = state.head(d);
  const Vector g = checked_grad(inner, w, h, data);
  const Vector velocity = mu_ * state.tail(d) + g;
  Vector out(2 * d);
  out.head(d) = w - eta_ * velocity;
  out.tail(d) = velocity;
  return out;
}

Vector Momentum::vjp_state(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                           const DataView& data, const Vector& v) const {
  // With u = a_v - eta a_w:  out_w = a_w + H u,  out_v = mu u.
  const Index d = param_dim_;
  const Vector w = state.head(d);
  const Vector u = v.tail(d) - eta_ * v.head(d);
  Vector out(2 * d);
  out.head(d) = v.head(d) + inner.hvp(w, h, data, u);
  out.tail(d) = mu_ * u;
  return out;
}

Vector Momentum::vjp_hyper(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                           const DataView& data, const Vector& v) const {
  const Index d = param_dim_;
  const Vector u = v.tail(d) - eta_ * v.head(d);
  return inner.cross_vjp(state.head(d), h, data, u);
}

Vector Momentum::jvp(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                     const DataView& data, const Vector& z, const Vector& dh) const {
  const Index d = param_dim_;
  const Vector w = state.head(d);
  const Vector dvel = mu_ * z.tail(d) + inner.hvp(w, h, data, z.head(d)) +
                      inner.cross_jvp(w, h, data, dh);
  Vector out(2 * d);
  out.head(d) = z.head(d) - eta_ * dvel;
  out.tail(d) = dvel;
  return out;
}

// ---------------------------------------------------------------------------

std::shared_ptr<const Dynamics> make_dynamics(const DynamicsSpec& spec, Index param_dim) {
  switch (spec.kind) {
    case DynamicsKind::GradientDescent:
      return std::make_shared<GradientDescent>(param_dim, spec.eta);
    case DynamicsKind::HyperLRGradientDescent:
      return std::make_shared<HyperLRGradientDescent>(param_dim, spec.lr_segment);
    case DynamicsKind::Momentum:
      return std::make_shared<Momentum>(param_dim, spec.eta, spec.mu);
  }
  throw Error(ErrorCode::BadParams, "unknown dynamics kind");
}

DynamicsKind parse_dynamics_kind(std::string_view name) {
  if (name == "gd") return DynamicsKind::GradientDescent;
  if (name == "hyper_lr_gd") return DynamicsKind::HyperLRGradientDescent;
  if (name == "momentum") return DynamicsKind::Momentum;
  throw Error(ErrorCode::BadParams, "unknown dynamics '" + std::string(name) + "'");
}

std::string_view to_string(DynamicsKind kind) {
  switch (kind) {
    case DynamicsKind::GradientDescent: return "gd";
    case DynamicsKind::HyperLRGradientDescent: return "hyper_lr_gd";
    case DynamicsKind::Momentum: return "momentum";
  }
  return "unknown";
}

}  // namespace bilevel
