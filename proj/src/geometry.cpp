#include <algorithm>
#include <stdexcept>

#include "killshape/geometry.hpp"

namespace killshape {

void PointCloud::validate() const {
  if (points.empty()) throw std::invalid_argument("point cloud is empty");
  for (const Vec3& p : points)
    if (!p.allFinite()) throw std::invalid_argument("point cloud has non-finite coordinates");
  if (!sigma1.empty()) {
    if (sigma1.size() != points.size())
      throw SizeMismatch("sigma1 cache size does not match point count");
    for (double s : sigma1)
      if (!(s >= 0.0) || !std::isfinite(s))
        throw std::invalid_argument("sigma1 cache has invalid entries");
  }
}

CloudDistance::CloudDistance(const PointCloud& cloud) : tree_(cloud.points) {}

DistanceQuery CloudDistance::operator()(const Vec3& q) const {
  const KdTree::Hit hit = tree_.nearest(q);
  DistanceQuery out;
  out.d = hit.dist;
  if (hit.dist > 0.0) {
    out.grad = (q - tree_.points()[hit.index]) / hit.dist;
  } else {
    out.on_point = true;
  }
  return out;
}

DistanceQuery unsigned_distance(const Vec3& q, const PointCloud& cloud) {
  if (cloud.points.empty()) throw std::invalid_argument("distance query against empty cloud");
  int best = 0;
  double b2 = (cloud.points[0] - q).squaredNorm();
  for (int i = 1; i < static_cast<int>(cloud.points.size()); ++i) {
    const double d2 = (cloud.points[i] - q).squaredNorm();
    if (d2 < b2) {
      b2 = d2;
      best = i;
    }
  }
  DistanceQuery out;
  out.d = std::sqrt(b2);
  if (out.d > 0.0)
    out.grad = (q - cloud.points[best]) / out.d;
  else
    out.on_point = true;
  return out;
}

void compute_sigma1(PointCloud& cloud) {
  cloud.validate();
  if (cloud.points.size() < 11)
    throw std::invalid_argument("10th-nearest-neighbor cache needs at least 11 points");
  const KdTree tree(cloud.points);
  cloud.sigma1.resize(cloud.points.size());
  for (int i = 0; i < static_cast<int>(cloud.points.size()); ++i) {
    const auto hits = tree.knearest(cloud.points[i], 10, i);
    cloud.sigma1[i] = hits.back().dist;
  }
}

std::vector<Vec3> sample_recon_points(const PointCloud& cloud, int batch, double sigma2,
                                      RngStream& rng) {
  if (!cloud.has_sigma1()) throw std::invalid_argument("sigma1 cache missing");
  if (batch <= 0) throw std::invalid_argument("batch must be positive");
  std::vector<Vec3> out;
  out.reserve(batch);
  const auto n = static_cast<std::int64_t>(cloud.points.size());
  for (int i = 0; i < batch; ++i) {
    const auto idx = rng.uniform_int(0, n - 1);
    const double std_dev = rng.uniform() < 0.5 ? cloud.sigma1[idx] : sigma2;
    out.push_back(cloud.points[idx] + std_dev * rng.normal3());
  }
  return out;
}

Box bounding_box(const std::vector<PointCloud>& clouds, double margin) {
  bool any = false;
  Box box;
  for (const PointCloud& cloud : clouds) {
    for (const Vec3& p : cloud.points) {
      if (!any) {
        box.lo = box.hi = p;
        any = true;
      } else {
        box.lo = box.lo.cwiseMin(p);
        box.hi = box.hi.cwiseMax(p);
      }
    }
  }
  if (!any) throw std::invalid_argument("bounding box of empty cloud list");
  box.lo.array() -= margin;
  box.hi.array() += margin;
  return box;
}

}  // namespace killshape
