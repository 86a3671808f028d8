#include "killshape/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace killshape {
namespace {

void require_finite_nonneg(double value, const char* name) {
  if (!std::isfinite(value) || value < 0.0)
    throw std::invalid_argument(std::string(name) + " must be finite and non-negative");
}

double sign_or_zero(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

void LossWeights::validate() const {
  require_finite_nonneg(lambda_d, "lambda_d");
  require_finite_nonneg(lambda_e, "lambda_e");
  require_finite_nonneg(lambda_ad, "lambda_ad");
  require_finite_nonneg(lambda_sald_grad, "lambda_sald_grad");
}

Schedule Schedule::constant(double value) { return {{{0, value}}}; }

Schedule Schedule::three_phase() { return {{{0, 0.0}, {2000, 1e-3}, {4000, 1e-4}}}; }

void Schedule::validate() const {
  if (phases.empty()) throw std::invalid_argument("schedule needs at least one phase");
  int prev = -1;
  for (const auto& [epoch, value] : phases) {
    if (epoch < 0) throw std::invalid_argument("schedule epochs must be non-negative");
    if (epoch <= prev) throw std::invalid_argument("schedule epochs must be strictly increasing");
    require_finite_nonneg(value, "schedule value");
    prev = epoch;
  }
}

double schedule_lambda_d(const Schedule& schedule, int epoch) {
  schedule.validate();
  double value = 0.0;  // before the first phase the term is off
  for (const auto& [threshold, phase_value] : schedule.phases) {
    if (epoch < threshold) break;
    value = phase_value;
  }
  return value;
}

double sald_tau(double a, double b) { return std::min(std::abs(a - b), std::abs(a + b)); }

double sald_tau(const Vec3& a, const Vec3& b) { return std::min((a - b).norm(), (a + b).norm()); }

double recon_term(double f, const Vec3& g, const DistanceQuery& measured, double lambda_grad,
                  ReconAdjoint* adjoint, double bar) {
  const double diff = f - measured.d;
  const double sum = f + measured.d;
  const bool diff_branch = std::abs(diff) <= std::abs(sum);
  double value = diff_branch ? std::abs(diff) : std::abs(sum);
  if (adjoint) adjoint->f += bar * sign_or_zero(diff_branch ? diff : sum);

  if (!measured.on_point) {
    const Vec3 gdiff = g - measured.grad;
    const Vec3 gsum = g + measured.grad;
    const bool gdiff_branch = gdiff.norm() <= gsum.norm();
    const Vec3& pick = gdiff_branch ? gdiff : gsum;
    const double norm = pick.norm();
    value += lambda_grad * norm;
    if (adjoint && norm > 0.0) adjoint->g += (bar * lambda_grad / norm) * pick;
  }
  return value;
}

double recon_loss(const NetworkParams& params, const MatX& codes,
                  const std::vector<const CloudDistance*>& clouds, const std::vector<Vec3>& queries,
                  const std::vector<int>& shape_of, double lambda_grad) {
  if (queries.empty()) throw std::invalid_argument("reconstruction batch is empty");
  if (queries.size() != shape_of.size())
    throw SizeMismatch("reconstruction batch: queries and shape indices differ in length");
  if (codes.rows() != static_cast<Eigen::Index>(clouds.size()))
    throw SizeMismatch("reconstruction batch: one code row per cloud required");

  double total = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const int shape = shape_of[i];
    if (shape < 0 || shape >= static_cast<int>(clouds.size()))
      throw std::out_of_range("reconstruction batch: shape index out of range");
    const VecX z = codes.row(shape).transpose();
    const FirstOrder fo = forward_first_order(params, queries[i], z);
    const DistanceQuery dq = (*clouds[shape])(queries[i]);
    total += recon_term(fo.f, fo.g, dq, lambda_grad);
  }
  return total / static_cast<double>(queries.size());
}

double eikonal_term(const Vec3& g, Vec3* g_bar, double bar) {
  const double norm = g.norm();
  const double off = norm - 1.0;
  if (g_bar && norm > 0.0) *g_bar += (bar * 2.0 * off / norm) * g;
  return off * off;
}

double eikonal_loss(const NetworkParams& params, const std::vector<VecX>& codes, const Box& box,
                    RngStream& rng) {
  if (codes.empty()) throw std::invalid_argument("eikonal batch is empty");
  double total = 0.0;
  for (const VecX& z : codes) {
    const Vec3 y = rng.uniform_box(box.lo, box.hi);
    total += eikonal_term(forward_first_order(params, y, z).g);
  }
  return total / static_cast<double>(codes.size());
}

double ad_reg(const LatentTable& table) {
  if (table.count() == 0) throw std::invalid_argument("latent table is empty");
  return table.codes.rowwise().squaredNorm().mean();
}

double total_loss(const LossComponents& parts, const LossWeights& weights) {
  weights.validate();
  if (!std::isfinite(parts.recon)) throw NonFiniteLoss("reconstruction loss is not finite");
  if (!std::isfinite(parts.deform)) throw NonFiniteLoss("deformation loss is not finite");
  if (!std::isfinite(parts.eikonal)) throw NonFiniteLoss("eikonal loss is not finite");
  if (!std::isfinite(parts.ad)) throw NonFiniteLoss("latent regularization loss is not finite");
  return parts.recon + weights.lambda_d * parts.deform + weights.lambda_e * parts.eikonal +
         weights.lambda_ad * parts.ad;
}

}  // namespace killshape
