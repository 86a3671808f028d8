#pragma once

#include <utility>
#include <vector>

#include "killshape/common.hpp"
#include "killshape/diffnet.hpp"
#include "killshape/geometry.hpp"
#include "killshape/shapespace.hpp"

namespace killshape {

struct LossWeights {
  double lambda_d = 0.0;
  double lambda_e = 0.1;
  double lambda_ad = 0.001;
  double lambda_sald_grad = 0.1;
  void validate() const;
};

// Piecewise-constant lambda_d over epochs: each entry applies from its epoch
// threshold until the next one; the last value holds forever.
struct Schedule {
  std::vector<std::pair<int, double>> phases;

  static Schedule constant(double value);
  static Schedule three_phase();  // 0 until 2000, 1e-3 until 4000, 1e-4 after
  void validate() const;
};

double schedule_lambda_d(const Schedule& schedule, int epoch);

// Sign-agnostic distance: min(|a-b|, |a+b|).
double sald_tau(double a, double b);
double sald_tau(const Vec3& a, const Vec3& b);

// One reconstruction query against an unsigned distance measurement. The
// gradient term is dropped for queries flagged as sitting on a data point,
// where the unsigned distance has no gradient.
struct ReconAdjoint {
  double f = 0.0;
  Vec3 g = Vec3::Zero();
};
double recon_term(double f, const Vec3& g, const DistanceQuery& measured, double lambda_grad,
                  ReconAdjoint* adjoint = nullptr, double bar = 1.0);

// Mean recon_term over a batch of query points, each tied to one shape's code
// and point cloud.
double recon_loss(const NetworkParams& params, const MatX& codes,
                  const std::vector<const CloudDistance*>& clouds, const std::vector<Vec3>& queries,
                  const std::vector<int>& shape_of, double lambda_grad);

// (||g|| - 1)^2 with its adjoint.
double eikonal_term(const Vec3& g, Vec3* g_bar = nullptr, double bar = 1.0);

// Mean eikonal_term at one uniform box point per code.
double eikonal_loss(const NetworkParams& params, const std::vector<VecX>& codes, const Box& box,
                    RngStream& rng);

// Mean squared code norm.
double ad_reg(const LatentTable& table);

struct LossComponents {
  double recon = 0.0;
  double deform = 0.0;
  double eikonal = 0.0;
  double ad = 0.0;
};

// recon + lambda_d*deform + lambda_e*eikonal + lambda_ad*ad; refuses
// non-finite components by name.
double total_loss(const LossComponents& parts, const LossWeights& weights);

}  // namespace killshape
