#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace bilevel {

// Everything runs in double precision; the oracle comparisons need the headroom.
using Scalar = double;
using Index = Eigen::Index;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using IndexVector = Eigen::Matrix<Index, Eigen::Dynamic, 1>;

enum class ErrorCode {
  DimensionMismatch,
  NonPositiveUnroll,
  NonFiniteGradient,
  NonFiniteState,
  TrajectoryMismatch,
  BoundaryTooClose,
  EmptyTrainingSet,
  WeightSegmentMismatch,
  InconsistentFeatureDim,
  BatchTooLarge,
  BadParams,
  DivergenceDetected,
  NotPositiveDefinite,
  NonContractive,
  UnknownSegment,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; `code()` identifies the failure kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline bool all_finite(const Eigen::Ref<const Vector>& v) { return v.allFinite(); }

}  // namespace bilevel
