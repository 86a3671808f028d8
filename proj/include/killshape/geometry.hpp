// Toy shape generation, point-cloud storage, kd-tree distance queries,
// and reconstruction-sample construction.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "killshape/common.hpp"

namespace killshape {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> sigma1;  // 10th-NN distance per point; empty until computed

  bool has_sigma1() const { return !points.empty() && sigma1.size() == points.size(); }
  void validate() const;  // nonempty, finite coords, sigma1 size/nonneg
};

struct RigidPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  bool orthonormal(double tol = 1e-12) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }
  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
};

enum class ToyKind { Cubes, EllipsoidFigures };

struct ToySpec {
  ToyKind kind = ToyKind::Cubes;
  int count = 12;
  int samples_per_shape = 2000;
  std::uint64_t rng_seed = 0;
};

std::vector<PointCloud> generate_cubes(const ToySpec& spec);
std::vector<PointCloud> generate_ellipsoid_figures(const ToySpec& spec);
std::vector<PointCloud> generate_toy(const ToySpec& spec);

// Uniform area-weighted sample of the unit cube surface under a pose.
PointCloud sample_cube(const RigidPose& pose, int samples, RngStream& rng);

// One ellipsoid figure: body translated along x, arm/leg bars rotated about z.
PointCloud sample_ellipsoid_figure(double body_tx, double arm_angle, double leg_angle,
                                   int samples, RngStream& rng);

class KdTree {
 public:
  struct Hit {
    int index = -1;
    double dist = 0.0;
  };

  explicit KdTree(std::vector<Vec3> points);

  Hit nearest(const Vec3& q) const;
  // k hits sorted by ascending distance; skip_index excludes one point (self queries).
  std::vector<Hit> knearest(const Vec3& q, int k, int skip_index = -1) const;
  const std::vector<Vec3>& points() const { return pts_; }

 private:
  struct Node {
    int axis = 0;
    double split = 0.0;
    int begin = 0, end = 0;  // leaf range into order_ when right < 0
    int left = -1, right = -1;
  };

  int build(int begin, int end);
  template <class Visit>
  void search(int node, const Vec3& q, double& bound, Visit&& visit) const;

  std::vector<Vec3> pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

struct DistanceQuery {
  double d = 0.0;
  Vec3 grad = Vec3::Zero();
  bool on_point = false;  // d == 0: grad undefined, reported as zero
};

// Repeated-query form: builds the tree once. Read-only queries are safe to
// call from concurrent workers.
class CloudDistance {
 public:
  explicit CloudDistance(const PointCloud& cloud);
  DistanceQuery operator()(const Vec3& q) const;
  const KdTree& tree() const { return tree_; }

 private:
  KdTree tree_;
};

// One-off form, linear scan (also the oracle the kd-tree is tested against).
DistanceQuery unsigned_distance(const Vec3& q, const PointCloud& cloud);

// Cache 10th-nearest-neighbor distance per point.
void compute_sigma1(PointCloud& cloud);

// Perturbed surface samples for the reconstruction loss: point x uniform from
// the cloud, noise from N(0, sigma1(x)^2 I) or N(0, sigma2^2 I) w.p. 1/2 each.
std::vector<Vec3> sample_recon_points(const PointCloud& cloud, int batch, double sigma2,
                                      RngStream& rng);

struct Box {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
  Vec3 extent() const { return hi - lo; }
  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
};

Box bounding_box(const std::vector<PointCloud>& clouds, double margin);

// ASCII point I/O.
void write_ply(const PointCloud& cloud, const std::string& path);
PointCloud read_ply(const std::string& path);
void write_xyz(const PointCloud& cloud, const std::string& path);
PointCloud read_xyz(const std::string& path);

}  // namespace killshape
