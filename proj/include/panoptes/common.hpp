#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace panoptes {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kJointLimit = kPi / 2.0;
inline constexpr int kNumJoints = 9;
inline constexpr int kNumCameras = 21;
inline constexpr int kNumBodyCameras = 16;

// Error categories. Each maps to one failure mode named by a module contract.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LimitError : Error {           // joint angle outside [-pi/2, pi/2]
  using Error::Error;
};
struct InvalidInput : Error {         // non-finite or malformed value
  using Error::Error;
};
struct DegenerateRotation : Error {
  using Error::Error;
};
struct PlacementError : Error {
  using Error::Error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct UndefinedMetric : Error {
  using Error::Error;
};
struct DatasetError : Error {
  using Error::Error;
};
struct CheckpointError : Error {
  using Error::Error;
};

/// Seeded random source with platform-independent conversions.
///
/// std::mt19937_64 is fully specified by the standard, but the standard
/// distributions are not, so uniform and normal draws are derived here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  /// Derives an independent stream for a (seed, a, b) tuple.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace panoptes
