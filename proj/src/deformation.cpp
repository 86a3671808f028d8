#include "killshape/deformation.hpp"

#include <Eigen/Cholesky>

#include <array>

namespace killshape {

namespace {

void require_gradient(const DerivativeBundle& bundle) {
  if (bundle.g.norm() < kGradEpsilon)
    throw DegenerateGradient("spatial gradient too small to build a consistent field");
}

Vec9 vec_symmetrized(const Mat3& S) {
  const Mat3 sym = S + S.transpose();
  return Eigen::Map<const Vec9>(sym.data());
}

}  // namespace

void DeformationSample::validate(int pieces) const {
  if (z.size() != eta.size()) throw SizeMismatch("latent code and direction sizes differ");
  if (probs.size() != pieces) throw SizeMismatch("part probability count does not match pieces");
  if (std::abs(eta.norm() - 1.0) > 1e-9)
    throw std::invalid_argument("latent direction must be unit length");
}

Vec3 particular_solution_w(const DerivativeBundle& bundle) {
  require_gradient(bundle);
  return -(bundle.s / bundle.g.squaredNorm()) * bundle.g;
}

Mat3 projector_P(const DerivativeBundle& bundle) {
  require_gradient(bundle);
  return Mat3::Identity() - bundle.g * bundle.g.transpose() / bundle.g.squaredNorm();
}

Vec3 consistent_field_v(const DerivativeBundle& bundle, const Vec3& u) {
  return particular_solution_w(bundle) + projector_P(bundle) * u;
}

Mat3 grad_w(const DerivativeBundle& bundle) {
  require_gradient(bundle);
  const double n2 = bundle.g.squaredNorm();
  const Vec3 h = bundle.H * bundle.g;
  return -(bundle.g * bundle.m.transpose() + bundle.s * bundle.H) / n2 +
         (2.0 * bundle.s / (n2 * n2)) * bundle.g * h.transpose();
}

Mat3 projector_gradient_action(const DerivativeBundle& bundle, const Vec3& q) {
  require_gradient(bundle);
  const double n2 = bundle.g.squaredNorm();
  const double alpha = bundle.g.dot(q);
  const Vec3 h = bundle.H * bundle.g;
  return -(alpha * bundle.H + bundle.g * (bundle.H * q).transpose()) / n2 +
         (2.0 * alpha / (n2 * n2)) * bundle.g * h.transpose();
}

Mat3 jacobian_v(const DerivativeBundle& bundle, const Vec3& x, const AffineField& field) {
  const Vec3 q = field.A * x + field.b;
  return grad_w(bundle) + projector_gradient_action(bundle, q) + projector_P(bundle) * field.A;
}

double killing_energy(const Mat3& J) { return (J + J.transpose()).squaredNorm(); }

RhoLinearization rho_linearization(const DerivativeBundle& bundle, const Vec3& x) {
  require_gradient(bundle);
  RhoLinearization lin;
  lin.k0 = vec_symmetrized(grad_w(bundle));

  const Mat3 P = projector_P(bundle);
  std::array<Mat3, 3> action;  // (DxP) e_r, reused for every unknown
  for (int r = 0; r < 3; ++r) action[r] = projector_gradient_action(bundle, Vec3::Unit(r));

  for (int col = 0; col < 3; ++col)
    for (int row = 0; row < 3; ++row) {
      // unknown A(row, col): u contributes x[col] e_row, the Jacobian P*E
      Mat3 S = x[col] * action[row];
      S.col(col) += P.col(row);
      lin.M.col(row + 3 * col) = vec_symmetrized(S);
    }
  for (int r = 0; r < 3; ++r) lin.M.col(9 + r) = vec_symmetrized(action[r]);
  return lin;
}

std::vector<LsSystem> build_ls_systems(const std::vector<DeformationSample>& samples, int pieces) {
  if (pieces < 1) throw std::invalid_argument("piece count must be positive");
  std::vector<LsSystem> systems(pieces);
  int valid = 0;
  for (const DeformationSample& sample : samples) {
    sample.validate(pieces);
    if (sample.degenerate()) continue;
    ++valid;
    const RhoLinearization lin = rho_linearization(sample.bundle, sample.x);
    const Mat12 mtm = lin.M.transpose() * lin.M;
    const Vec12 mtk = lin.M.transpose() * lin.k0;
    for (int j = 0; j < pieces; ++j) {
      systems[j].normal += sample.probs[j] * mtm;
      systems[j].rhs -= sample.probs[j] * mtk;
    }
  }
  if (valid == 0) throw NoValidSamples("no sample with a usable gradient");
  // mean convention: damping strength is then independent of the sample count
  const double inv_n = 1.0 / valid;
  for (LsSystem& sys : systems) {
    sys.normal *= inv_n;
    sys.rhs *= inv_n;
  }
  return systems;
}

std::vector<AffineField> solve_affine_fields(const std::vector<DeformationSample>& samples,
                                             int pieces) {
  const std::vector<LsSystem> systems = build_ls_systems(samples, pieces);
  std::vector<AffineField> fields(pieces);
  for (int j = 0; j < pieces; ++j) {
    const Mat12 damped = systems[j].normal + kLsDamping * Mat12::Identity();
    Vec12 xi;
    const Eigen::LLT<Mat12> llt(damped);
    if (llt.info() == Eigen::Success) {
      xi = llt.solve(systems[j].rhs);
    } else {
      xi = Eigen::LDLT<Mat12>(damped).solve(systems[j].rhs);
    }
    fields[j].A = Eigen::Map<const Mat3>(xi.data());
    fields[j].b = xi.tail<3>();
    fields[j].gradient_frozen = true;
  }
  return fields;
}

void accumulate_jacobian_v_adjoint(const DerivativeBundle& bundle, const Vec3& x,
                                   const AffineField& field, const Mat3& J_bar,
                                   BundleAdjoint& out) {
  require_gradient(bundle);
  const Vec3& g = bundle.g;
  const Mat3& H = bundle.H;
  const double s = bundle.s;
  const double n2 = g.squaredNorm();
  const double n4 = n2 * n2;
  const Vec3 h = H * g;
  const Vec3 q = field.A * x + field.b;
  const Vec3 hq = H * q;
  const double alpha = g.dot(q);

  const Vec3 Jg = J_bar.transpose() * g;
  const Vec3 Jh = J_bar * h;
  const double gJh = g.dot(Jh);
  const double trJH = (J_bar.array() * H.array()).sum();

  Vec3 g_bar = Vec3::Zero();
  Vec3 h_bar = Vec3::Zero();
  Mat3 H_bar = Mat3::Zero();

  // w = -(g m^T + s H)/n2 + (2s/n2^2) g h^T, differentiated in g, m, s, H, h
  g_bar += -(J_bar * bundle.m) / n2 + (2.0 * g.dot(J_bar * bundle.m) / n4) * g +
           (2.0 * s * trJH / n4) * g + (2.0 * s / n4) * Jh - (8.0 * s * gJh / (n4 * n2)) * g;
  out.m += -Jg / n2;
  out.s += -trJH / n2 + 2.0 * gJh / n4;
  H_bar += -(s / n2) * J_bar;
  h_bar += (2.0 * s / n4) * Jg;

  // (DxP)q = -(alpha H + g hq^T)/n2 + (2 alpha/n2^2) g h^T, q constant
  g_bar += (-trJH / n2 + 2.0 * gJh / n4) * q + (2.0 * alpha * trJH / n4) * g - (J_bar * hq) / n2 +
           (2.0 * g.dot(J_bar * hq) / n4) * g + (2.0 * alpha / n4) * Jh -
           (8.0 * alpha * gJh / (n4 * n2)) * g;
  H_bar += -(alpha / n2) * J_bar - Jg * q.transpose() / n2;
  h_bar += (2.0 * alpha / n4) * Jg;

  // P A term: P_bar = J_bar A^T folded through P = I - g g^T/n2
  const Mat3 P_bar = J_bar * field.A.transpose();
  g_bar += -((P_bar + P_bar.transpose()) * g) / n2 + (2.0 * g.dot(P_bar * g) / n4) * g;

  // h = H g
  H_bar += h_bar * g.transpose();
  g_bar += H.transpose() * h_bar;

  out.g += g_bar;
  out.H += H_bar;
}

double deformation_loss(const std::vector<DeformationSample>& samples,
                        const std::vector<AffineField>& fields, int pieces,
                        std::vector<SampleAdjoint>* adjoints, double loss_bar) {
  if (static_cast<int>(fields.size()) != pieces)
    throw SizeMismatch("field count does not match pieces");
  int valid = 0;
  for (const DeformationSample& sample : samples) {
    sample.validate(pieces);
    if (!sample.degenerate()) ++valid;
  }
  if (valid == 0) throw NoValidSamples("no sample with a usable gradient");

  if (adjoints) {
    adjoints->assign(samples.size(), SampleAdjoint{});
    for (SampleAdjoint& adj : *adjoints) adj.probs = VecX::Zero(pieces);
  }

  const double inv_n = 1.0 / valid;
  double loss = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const DeformationSample& sample = samples[i];
    if (sample.degenerate()) continue;
    for (int j = 0; j < pieces; ++j) {
      const Mat3 J = jacobian_v(sample.bundle, sample.x, fields[j]);
      const double rho = killing_energy(J);
      loss += inv_n * sample.probs[j] * rho;
      if (adjoints) {
        SampleAdjoint& adj = (*adjoints)[i];
        adj.probs[j] += loss_bar * inv_n * rho;
        const Mat3 K = J + J.transpose();
        const Mat3 J_bar = (4.0 * loss_bar * inv_n * sample.probs[j]) * K;
        accumulate_jacobian_v_adjoint(sample.bundle, sample.x, fields[j], J_bar, adj.bundle);
      }
    }
  }
  return loss;
}

}  // namespace killshape
