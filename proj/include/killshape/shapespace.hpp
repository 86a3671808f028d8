#pragma once

#include <functional>
#include <string>
#include <vector>

#include "killshape/common.hpp"
#include "killshape/diffnet.hpp"

namespace killshape {

enum class InterpolationMode { Linear, Spiral };

// Learnable latent codes, one row per training shape.
struct LatentTable {
  MatX codes;                   // count x dim
  std::vector<std::string> ids; // shape id per row

  static LatentTable random(int count, int dim, double stddev, RngStream& rng);
  int count() const { return static_cast<int>(codes.rows()); }
  int dim() const { return static_cast<int>(codes.cols()); }
  int index_of(const std::string& id) const;  // -1 when absent
  void validate() const;
};

// One draw on a latent segment: the interpolated code, the unit speed
// direction, and where on which segment it sits.
struct LatentPathSample {
  VecX z;
  VecX eta;
  double t = 0.0;
  int i1 = -1, i2 = -1;
  void validate() const;
};

VecX interpolate_linear(const VecX& z1, const VecX& z2, double t);

// Blends the norm linearly and the direction along the great circle, so the
// interpolated code never dips toward the origin.
VecX interpolate_spiral(const VecX& z1, const VecX& z2, double t);

// Unit tangent of the chosen interpolation at t.
VecX latent_speed(const VecX& z1, const VecX& z2, double t, InterpolationMode mode);

// Folds adjoints of (z, eta) from a linear path sample back onto the endpoint
// codes, accumulating into z1_bar / z2_bar.
void latent_path_vjp(const VecX& z1, const VecX& z2, double t, const VecX& z_bar,
                     const VecX& eta_bar, VecX& z1_bar, VecX& z2_bar);

// Uniform pair (i1 != i2) and t ~ U[0,1] on the linear path.
LatentPathSample sample_latent_path(const LatentTable& table, RngStream& rng);

// Damped-Newton projection of seed points onto the zero level set, followed by
// Gaussian jitter. Seeds whose gradient degenerates at any step are dropped
// and counted in *dropped.
std::vector<Vec3> project_to_levelset(const std::function<FirstOrder(const Vec3&)>& field,
                                      const std::vector<Vec3>& seeds, int iters, double noise_std,
                                      RngStream& rng, int* dropped = nullptr);
std::vector<Vec3> project_to_levelset(const NetworkParams& params, const VecX& z,
                                      const std::vector<Vec3>& seeds, int iters, double noise_std,
                                      RngStream& rng, int* dropped = nullptr);

}  // namespace killshape
