#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace msfm {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

using ImageId = std::uint32_t;
using FeatureId = std::uint32_t;
using PointId = std::uint32_t;

enum class ErrorCode {
  kArgument,
  kFormat,
  kIo,
  kNotRegistered,
  kAlreadyRegistered,
  kConflict,
  kInsufficientData,
  kDegenerateGeometry,
  kEpipoleDegenerate,
  kInvalidLine,
  kDegeneratePose,
  kDegenerateRay,
  kNoSeed,
  kInsufficientOverlap,
  kDegenerateAlignment,
  kStageFailure,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled exactly once; callers write results into per-index slots so the
/// outcome does not depend on scheduling.
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

/// One structured log record per line: `event=<name> k=v ...` on stderr.
/// Silenced unless set_log_enabled(true).
void log_record(const std::string& event, const std::string& fields);
void set_log_enabled(bool on);

}  // namespace msfm
