#pragma once

#include <vector>

#include "killshape/common.hpp"
#include "killshape/diffnet.hpp"

namespace killshape {

using Vec9 = Eigen::Matrix<double, 9, 1>;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using Mat12 = Eigen::Matrix<double, 12, 12>;

// Affine velocity generator u(x) = A x + b. Fields returned by
// solve_affine_fields carry gradient_frozen = true: they are treated as
// constants by every gradient path, which is what makes the deformation loss
// differentiable despite the inner minimization.
struct AffineField {
  Mat3 A = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  bool gradient_frozen = false;
};

// One surface point prepared for the deformation loss: a latent code, a unit
// latent direction, a point on the level set, its derivative bundle, and the
// part probabilities at (x, z).
struct DeformationSample {
  VecX z;
  VecX eta;
  Vec3 x = Vec3::Zero();
  DerivativeBundle bundle;
  VecX probs;

  // Shape and unit-direction checks; throws on violation.
  void validate(int pieces) const;
  // True when the spatial gradient is too small to build a consistent field.
  // Degenerate samples are skipped (and counted by callers), never fatal.
  bool degenerate() const { return bundle.g.norm() < kGradEpsilon; }
};

// Normal equations of one piece's weighted least squares in the unknowns
// xi = [vec(A) column-major; b].
struct LsSystem {
  Mat12 normal = Mat12::Zero();
  Vec12 rhs = Vec12::Zero();
};

// Rigidity energy of one sample as an explicit quadratic:
// rho(A, b) = || k0 + M xi ||^2.
struct RhoLinearization {
  Vec9 k0 = Vec9::Zero();
  Eigen::Matrix<double, 9, 12> M = Eigen::Matrix<double, 9, 12>::Zero();
};

inline constexpr double kLsDamping = 1e-9;

// w = -(s/||g||^2) g, the minimal-norm field matching the level-set motion.
Vec3 particular_solution_w(const DerivativeBundle& bundle);

// P = I - g g^T/||g||^2, orthogonal projector onto the tangent plane.
Mat3 projector_P(const DerivativeBundle& bundle);

// v = w + P u.
Vec3 consistent_field_v(const DerivativeBundle& bundle, const Vec3& u);

// Spatial Jacobian of w.
Mat3 grad_w(const DerivativeBundle& bundle);

// The matrix [(DxP) q], row i column l = sum_j d(P_ij)/d(x_l) q_j.
Mat3 projector_gradient_action(const DerivativeBundle& bundle, const Vec3& q);

// Spatial Jacobian of v for the affine generator: grad_w + (DxP)(Ax+b) + PA.
Mat3 jacobian_v(const DerivativeBundle& bundle, const Vec3& x, const AffineField& field);

// rho(J) = ||J + J^T||_F^2.
double killing_energy(const Mat3& J);

RhoLinearization rho_linearization(const DerivativeBundle& bundle, const Vec3& x);

// Undamped per-piece normal equations; skips degenerate samples.
std::vector<LsSystem> build_ls_systems(const std::vector<DeformationSample>& samples, int pieces);

// Minimizes the probability-weighted rigidity energy per piece. Damped
// Cholesky on the normal equations; returned fields are gradient-frozen.
std::vector<AffineField> solve_affine_fields(const std::vector<DeformationSample>& samples,
                                             int pieces);

// Per-sample adjoints produced by the deformation loss backward path.
struct SampleAdjoint {
  BundleAdjoint bundle;
  VecX probs;
};

// Adjoint of jacobian_v at fixed x and fixed field: folds J_bar into the
// bundle adjoint (g, s, H, m components).
void accumulate_jacobian_v_adjoint(const DerivativeBundle& bundle, const Vec3& x,
                                   const AffineField& field, const Mat3& J_bar,
                                   BundleAdjoint& out);

// (1/n) sum_j sum_i p_j(x_i) rho(J_ij) over non-degenerate samples. When
// adjoints is given it is resized to samples.size() and filled with the
// derivative of loss_bar * loss w.r.t. each sample's bundle and probabilities,
// with the fields held constant.
double deformation_loss(const std::vector<DeformationSample>& samples,
                        const std::vector<AffineField>& fields, int pieces,
                        std::vector<SampleAdjoint>* adjoints = nullptr, double loss_bar = 1.0);

}  // namespace killshape
