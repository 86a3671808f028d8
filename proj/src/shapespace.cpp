#include "killshape/shapespace.hpp"

#include <algorithm>
#include <cmath>

namespace killshape {

namespace {

constexpr double kParallelAngle = 1e-6;
constexpr double kZeroSpeedNorm = 1e-12;

void check_pair(const VecX& z1, const VecX& z2, double t) {
  if (z1.size() != z2.size()) throw SizeMismatch("latent endpoints have different sizes");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolation parameter outside [0,1]");
}

// angle between unit directions plus the branch taken by the interpolator
struct SpiralGeometry {
  double n1, n2, omega;
  VecX d1, d2;
  bool parallel;
};

SpiralGeometry spiral_geometry(const VecX& z1, const VecX& z2) {
  SpiralGeometry geo;
  geo.n1 = z1.norm();
  geo.n2 = z2.norm();
  if (geo.n1 <= 0.0 || geo.n2 <= 0.0)
    throw ZeroLatent("spiral interpolation needs nonzero endpoint codes");
  geo.d1 = z1 / geo.n1;
  geo.d2 = z2 / geo.n2;
  const double dot = std::clamp(geo.d1.dot(geo.d2), -1.0, 1.0);
  geo.omega = std::acos(dot);
  if (geo.omega > M_PI - kParallelAngle)
    throw AntipodalLatent("spiral interpolation undefined for opposite directions");
  geo.parallel = geo.omega < kParallelAngle;
  return geo;
}

}  // namespace

LatentTable LatentTable::random(int count, int dim, double stddev, RngStream& rng) {
  if (count < 1 || dim < 1) throw std::invalid_argument("latent table needs positive dimensions");
  LatentTable table;
  table.codes.resize(count, dim);
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < dim; ++j) table.codes(i, j) = rng.normal(0.0, stddev);
  table.ids.resize(count);
  for (int i = 0; i < count; ++i) table.ids[i] = std::to_string(i);
  return table;
}

int LatentTable::index_of(const std::string& id) const {
  const auto it = std::find(ids.begin(), ids.end(), id);
  return it == ids.end() ? -1 : static_cast<int>(it - ids.begin());
}

void LatentTable::validate() const {
  if (codes.rows() < 1) throw std::invalid_argument("latent table is empty");
  if (!codes.allFinite()) throw std::invalid_argument("latent table has non-finite entries");
  if (ids.size() != static_cast<std::size_t>(codes.rows()))
    throw SizeMismatch("latent table id count does not match code count");
}

void LatentPathSample::validate() const {
  if (std::abs(eta.norm() - 1.0) > 1e-9)
    throw std::invalid_argument("path sample direction must be unit length");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("path sample t outside [0,1]");
}

VecX interpolate_linear(const VecX& z1, const VecX& z2, double t) {
  check_pair(z1, z2, t);
  if (t == 0.0) return z1;
  if (t == 1.0) return z2;
  return (1.0 - t) * z1 + t * z2;
}

VecX interpolate_spiral(const VecX& z1, const VecX& z2, double t) {
  check_pair(z1, z2, t);
  if (t == 0.0) return z1;
  if (t == 1.0) return z2;
  const SpiralGeometry geo = spiral_geometry(z1, z2);
  const double norm = (1.0 - t) * geo.n1 + t * geo.n2;
  VecX dir;
  if (geo.parallel) {
    dir = ((1.0 - t) * geo.d1 + t * geo.d2).normalized();
  } else {
    const double so = std::sin(geo.omega);
    dir = (std::sin((1.0 - t) * geo.omega) * geo.d1 + std::sin(t * geo.omega) * geo.d2) / so;
  }
  return norm * dir;
}

VecX latent_speed(const VecX& z1, const VecX& z2, double t, InterpolationMode mode) {
  check_pair(z1, z2, t);
  VecX velocity;
  if (mode == InterpolationMode::Linear) {
    velocity = z2 - z1;
  } else {
    const SpiralGeometry geo = spiral_geometry(z1, z2);
    const double norm = (1.0 - t) * geo.n1 + t * geo.n2;
    VecX dir, dir_dot;
    if (geo.parallel) {
      const VecX u = (1.0 - t) * geo.d1 + t * geo.d2;
      const double un = u.norm();
      dir = u / un;
      const VecX du = geo.d2 - geo.d1;
      dir_dot = (du - dir.dot(du) * dir) / un;
    } else {
      const double so = std::sin(geo.omega);
      dir = (std::sin((1.0 - t) * geo.omega) * geo.d1 + std::sin(t * geo.omega) * geo.d2) / so;
      dir_dot = geo.omega *
                (-std::cos((1.0 - t) * geo.omega) * geo.d1 + std::cos(t * geo.omega) * geo.d2) / so;
    }
    velocity = (geo.n2 - geo.n1) * dir + norm * dir_dot;
  }
  const double speed = velocity.norm();
  if (speed < kZeroSpeedNorm) throw ZeroSpeed("latent path has no motion at this point");
  return velocity / speed;
}

void latent_path_vjp(const VecX& z1, const VecX& z2, double t, const VecX& z_bar,
                     const VecX& eta_bar, VecX& z1_bar, VecX& z2_bar) {
  check_pair(z1, z2, t);
  if (z_bar.size() != z1.size() || eta_bar.size() != z1.size() || z1_bar.size() != z1.size() ||
      z2_bar.size() != z1.size())
    throw SizeMismatch("adjoint sizes do not match the latent size");
  z1_bar += (1.0 - t) * z_bar;
  z2_bar += t * z_bar;

  const VecX diff = z2 - z1;
  const double r = diff.norm();
  if (r < kZeroSpeedNorm) throw ZeroSpeed("latent path has no motion at this point");
  const VecX eta = diff / r;
  const VecX tangential = (eta_bar - eta.dot(eta_bar) * eta) / r;
  z1_bar -= tangential;
  z2_bar += tangential;
}

LatentPathSample sample_latent_path(const LatentTable& table, RngStream& rng) {
  table.validate();
  if (table.count() < 2) throw std::invalid_argument("need at least two codes to draw a path");
  LatentPathSample sample;
  sample.i1 = rng.uniform_int(0, table.count() - 1);
  sample.i2 = rng.uniform_int(0, table.count() - 2);
  if (sample.i2 >= sample.i1) ++sample.i2;
  sample.t = rng.uniform();
  const VecX z1 = table.codes.row(sample.i1).transpose();
  const VecX z2 = table.codes.row(sample.i2).transpose();
  sample.z = interpolate_linear(z1, z2, sample.t);
  sample.eta = latent_speed(z1, z2, sample.t, InterpolationMode::Linear);
  return sample;
}

std::vector<Vec3> project_to_levelset(const std::function<FirstOrder(const Vec3&)>& field,
                                      const std::vector<Vec3>& seeds, int iters, double noise_std,
                                      RngStream& rng, int* dropped) {
  if (iters < 1) throw std::invalid_argument("projection needs at least one iteration");
  std::vector<Vec3> points;
  points.reserve(seeds.size());
  int lost = 0;
  for (const Vec3& seed : seeds) {
    Vec3 p = seed;
    bool ok = true;
    for (int it = 0; it < iters; ++it) {
      const FirstOrder fo = field(p);
      const double n2 = fo.g.squaredNorm();
      if (std::sqrt(n2) < kGradEpsilon) {
        ok = false;
        break;
      }
      p -= (fo.f / n2) * fo.g;
    }
    if (!ok) {
      ++lost;
      continue;
    }
    if (noise_std > 0.0) p += noise_std * rng.normal3();
    points.push_back(p);
  }
  if (dropped) *dropped = lost;
  if (points.empty()) throw NoValidSamples("every projection seed hit a degenerate gradient");
  return points;
}

std::vector<Vec3> project_to_levelset(const NetworkParams& params, const VecX& z,
                                      const std::vector<Vec3>& seeds, int iters, double noise_std,
                                      RngStream& rng, int* dropped) {
  return project_to_levelset(
      [&](const Vec3& p) { return forward_first_order(params, p, z); }, seeds, iters, noise_std,
      rng, dropped);
}

}  // namespace killshape
