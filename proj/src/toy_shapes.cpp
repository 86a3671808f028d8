#include <cmath>
#include <stdexcept>

#include "killshape/geometry.hpp"

namespace killshape {

namespace {

// One ellipsoid part in world coordinates: point = center + Rz(angle) * local.
struct Part {
  Vec3 semi;
  Vec3 center;
  double angle = 0.0;  // about the global z axis

  Mat3 rot() const {
    const double c = std::cos(angle), s = std::sin(angle);
    Mat3 r;
    r << c, -s, 0, s, c, 0, 0, 0, 1;
    return r;
  }
  bool strictly_inside(const Vec3& world) const {
    const Vec3 local = rot().transpose() * (world - center);
    return (local.array() / semi.array()).square().sum() < 1.0;
  }
};

// Thomsen's surface-area approximation, exponent p = 1.6075.
double ellipsoid_area(const Vec3& s) {
  const double p = 1.6075;
  const double ap = std::pow(s.x(), p), bp = std::pow(s.y(), p), cp = std::pow(s.z(), p);
  return 4.0 * M_PI * std::pow((ap * bp + ap * cp + bp * cp) / 3.0, 1.0 / p);
}

// Uniform-by-area point on an ellipsoid in local coordinates: rejection on the
// sphere parametrization with the surface-element correction as weight.
Vec3 sample_ellipsoid_local(const Vec3& semi, RngStream& rng) {
  const double wmax = std::max({semi.y() * semi.z(), semi.x() * semi.z(), semi.x() * semi.y()});
  for (;;) {
    Vec3 u = rng.normal3();
    const double n = u.norm();
    if (n < 1e-12) continue;
    u /= n;
    const double w = std::sqrt(std::pow(u.x() * semi.y() * semi.z(), 2) +
                               std::pow(u.y() * semi.x() * semi.z(), 2) +
                               std::pow(u.z() * semi.x() * semi.y(), 2));
    if (rng.uniform() * wmax <= w) return semi.cwiseProduct(u);
  }
}

}  // namespace

PointCloud sample_cube(const RigidPose& pose, int samples, RngStream& rng) {
  PointCloud cloud;
  cloud.points.reserve(samples);
  for (int i = 0; i < samples; ++i) {
    const auto face = rng.uniform_int(0, 5);
    const int axis = static_cast<int>(face / 2);
    Vec3 p;
    p[axis] = face % 2 == 0 ? -0.5 : 0.5;
    p[(axis + 1) % 3] = rng.uniform(-0.5, 0.5);
    p[(axis + 2) % 3] = rng.uniform(-0.5, 0.5);
    cloud.points.push_back(pose.apply(p));
  }
  return cloud;
}

std::vector<PointCloud> generate_cubes(const ToySpec& spec) {
  if (spec.kind != ToyKind::Cubes) throw std::invalid_argument("spec.kind is not cubes");
  if (spec.count < 2) throw std::invalid_argument("toy dataset needs at least 2 shapes");
  RngStream rng(spec.rng_seed);
  std::vector<PointCloud> clouds;
  clouds.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    RigidPose pose;
    pose.rotation = rng.rotation();
    pose.translation = rng.uniform_box(Vec3(-0.5, -0.5, -0.5), Vec3(0.5, 0.5, 0.5));
    clouds.push_back(sample_cube(pose, spec.samples_per_shape, rng));
  }
  return clouds;
}

PointCloud sample_ellipsoid_figure(double body_tx, double arm_angle, double leg_angle,
                                   int samples, RngStream& rng) {
  const Vec3 body_semi(0.35, 0.2, 0.45);
  const Vec3 limb_semi(0.4, 0.12, 0.12);
  const Part parts[3] = {{body_semi, Vec3(body_tx, 0, 0), 0.0},
                         {limb_semi, Vec3(0, 0, 0.55), arm_angle},
                         {limb_semi, Vec3(0, 0, -0.55), leg_angle}};
  const double areas[3] = {ellipsoid_area(body_semi), ellipsoid_area(limb_semi),
                           ellipsoid_area(limb_semi)};
  const double total_area = areas[0] + areas[1] + areas[2];

  PointCloud cloud;
  cloud.points.reserve(samples);
  while (static_cast<int>(cloud.points.size()) < samples) {
    const double pick = rng.uniform() * total_area;
    const int part = pick < areas[0] ? 0 : (pick < areas[0] + areas[1] ? 1 : 2);
    const Vec3 local = sample_ellipsoid_local(parts[part].semi, rng);
    const Vec3 world = parts[part].center + parts[part].rot() * local;
    bool occluded = false;
    for (int other = 0; other < 3 && !occluded; ++other)
      occluded = other != part && parts[other].strictly_inside(world);
    if (!occluded) cloud.points.push_back(world);
  }
  return cloud;
}

std::vector<PointCloud> generate_ellipsoid_figures(const ToySpec& spec) {
  if (spec.kind != ToyKind::EllipsoidFigures)
    throw std::invalid_argument("spec.kind is not ellipsoid-figures");
  if (spec.count < 2) throw std::invalid_argument("toy dataset needs at least 2 shapes");
  RngStream rng(spec.rng_seed);
  std::vector<PointCloud> clouds;
  clouds.reserve(spec.count);
  for (int i = 0; i < spec.count; ++i) {
    const double tx = rng.uniform(-0.5, 0.5);
    const double arm = rng.uniform(-M_PI / 4, M_PI / 4);
    const double leg = rng.uniform(-M_PI / 4, M_PI / 4);
    clouds.push_back(sample_ellipsoid_figure(tx, arm, leg, spec.samples_per_shape, rng));
  }
  return clouds;
}

std::vector<PointCloud> generate_toy(const ToySpec& spec) {
  return spec.kind == ToyKind::Cubes ? generate_cubes(spec) : generate_ellipsoid_figures(spec);
}

}  // namespace killshape
