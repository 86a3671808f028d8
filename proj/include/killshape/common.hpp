// Shared error types, deterministic RNG streams, and linear algebra aliases.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace killshape {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// A gradient too small to divide by; below this a level-set point is degenerate.
inline constexpr double kGradEpsilon = 1e-8;

struct DegenerateGradient : std::runtime_error {
  explicit DegenerateGradient(const std::string& what) : std::runtime_error(what) {}
};
struct NoValidSamples : std::runtime_error {
  explicit NoValidSamples(const std::string& what) : std::runtime_error(what) {}
};
struct SizeMismatch : std::runtime_error {
  explicit SizeMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct ZeroLatent : std::runtime_error {
  explicit ZeroLatent(const std::string& what) : std::runtime_error(what) {}
};
struct AntipodalLatent : std::runtime_error {
  explicit AntipodalLatent(const std::string& what) : std::runtime_error(what) {}
};
struct ZeroSpeed : std::runtime_error {
  explicit ZeroSpeed(const std::string& what) : std::runtime_error(what) {}
};
struct EmptySurface : std::runtime_error {
  explicit EmptySurface(const std::string& what) : std::runtime_error(what) {}
};
struct VersionError : std::runtime_error {
  explicit VersionError(const std::string& what) : std::runtime_error(what) {}
};
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};
struct NonFiniteValue : std::runtime_error {
  explicit NonFiniteValue(const std::string& what) : std::runtime_error(what) {}
};
struct NonFiniteLoss : NonFiniteValue {
  explicit NonFiniteLoss(const std::string& what) : NonFiniteValue(what) {}
};

// Deterministic random stream. All distributions are implemented here rather
// than with std::*_distribution so that draw sequences are identical across
// standard library implementations and stable across releases.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  // Independent stream derived from (seed, stream_id) via splitmix64.
  static RngStream derived(std::uint64_t seed, std::uint64_t stream_id) {
    std::uint64_t x = seed + 0x9e3779b97f4a7c15ull * (stream_id + 1);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    x = x ^ (x >> 31);
    return RngStream(x);
  }

  // Uniform in [0, 1), 53-bit resolution.
  std::uint64_t raw() { return engine_(); }

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive on both ends, unbiased via rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / span * span;
    std::uint64_t raw = engine_();
    while (raw >= limit) raw = engine_();
    return lo + static_cast<std::int64_t>(raw % span);
  }

  // Box-Muller without caching: two uniforms per draw, stateless.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Vec3 normal3() {
    Vec3 v;
    v.x() = normal();
    v.y() = normal();
    v.z() = normal();
    return v;
  }

  VecX normal_vec(int n) {
    VecX v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  Vec3 uniform_box(const Vec3& lo, const Vec3& hi) {
    Vec3 v;
    for (int i = 0; i < 3; ++i) v[i] = uniform(lo[i], hi[i]);
    return v;
  }

  // Uniform rotation (Shoemake's quaternion construction).
  Mat3 rotation() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double u3 = uniform();
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    Eigen::Quaterniond q(b * std::cos(2.0 * M_PI * u3), a * std::sin(2.0 * M_PI * u2),
                         a * std::cos(2.0 * M_PI * u2), b * std::sin(2.0 * M_PI * u3));
    return q.toRotationMatrix();
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) throw FormatError("bad rng state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace killshape
