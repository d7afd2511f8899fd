#pragma once

#include <memory>
#include <string>

#include "bilevel/core.hpp"

namespace bilevel {

/// params' = params - eta * grad L. No aux state.
class GradientDescent final : public Dynamics {
 public:
  GradientDescent(Index param_dim, Scalar eta);

  DynamicsKind kind() const override { return DynamicsKind::GradientDescent; }
  std::string_view name() const override { return "gd"; }
  Index param_dim() const override { return param_dim_; }
  Index aux_dim() const override { return 0; }
  Scalar step_size(const HyperVector&) const override { return eta_; }

  Vector step(const InnerObjective& inner, const Vector& state, const HyperVector& h,
              const DataView& data) const override;
  Vector vjp_state(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                   const DataView& data, const Vector& v) const override;
  Vector vjp_hyper(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                   const DataView& data, const Vector& v) const override;
  Vector jvp(const InnerObjective& inner, const Vector& state, const HyperVector& h,
             const DataView& data, const Vector& z, const Vector& dh) const override;

 private:
  Index param_dim_;
  Scalar eta_;
};

/// Gradient descent whose step size eta = exp(theta) is read from a length-1
/// segment of the hyperparameters, so it can be learned by the outer loop.
class HyperLRGradientDescent final : public Dynamics {
 public:
  HyperLRGradientDescent(Index param_dim, std::string lr_segment);

  DynamicsKind kind() const override { return DynamicsKind::HyperLRGradientDescent; }
  std::string_view name() const override { return "hyper_lr_gd"; }
  Index param_dim() const override { return param_dim_; }
  Index aux_dim() const override { return 0; }
  Scalar step_size(const HyperVector& h) const override;
  const std::string& lr_segment() const { return lr_segment_; }

  Vector step(const InnerObjective& inner, const Vector& state, const HyperVector& h,
              const DataView& data) const override;
  Vector vjp_state(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                   const DataView& data, const Vector& v) const override;
  Vector vjp_hyper(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                   const DataView& data, const Vector& v) const override;
  Vector jvp(const InnerObjective& inner, const Vector& state, const HyperVector& h,
             const DataView& data, const Vector& z, const Vector& dh) const override;

 private:
  Index lr_offset(const HyperVector& h) const;

  Index param_dim_;
  std::string lr_segment_;
};

/// Heavy ball: v' = mu v + grad L(w); w' = w - eta v'. State is [w; v].
class Momentum final : public Dynamics {
 public:
  Momentum(Index param_dim, Scalar eta, Scalar mu);

  DynamicsKind kind() const override { return DynamicsKind::Momentum; }
  std::string_view name() const override { return "momentum"; }
  Index param_dim() const override { return param_dim_; }
  Index aux_dim() const override { return param_dim_; }
  Scalar step_size(const HyperVector&) const override { return eta_; }
  Scalar momentum() const { return mu_; }

  Vector step(const InnerObjective& inner, const Vector& state, const HyperVector& h,
              const DataView& data) const override;
  Vector vjp_state(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                   const DataView& data, const Vector& v) const override;
  Vector vjp_hyper(const InnerObjective& inner, const Vector& state, const HyperVector& h,
                   const DataView& data, const Vector& v) const override;
  Vector jvp(const InnerObjective& inner, const Vector& state, const HyperVector& h,
             const DataView& data, const Vector& z, const Vector& dh) const override;

 private:
  Index param_dim_;
  Scalar eta_;
  Scalar mu_;
};

struct DynamicsSpec {
  DynamicsKind kind = DynamicsKind::GradientDescent;
  Scalar eta = 0.1;
  Scalar mu = 0.9;
  std::string lr_segment = "log_lr";
};

std::shared_ptr<const Dynamics> make_dynamics(const DynamicsSpec& spec, Index param_dim);

/// Parses "gd", "hyper_lr_gd", "momentum"; throws BadParams otherwise.
DynamicsKind parse_dynamics_kind(std::string_view name);
std::string_view to_string(DynamicsKind kind);

}  // namespace bilevel
