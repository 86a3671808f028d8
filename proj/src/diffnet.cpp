#include <cmath>
#include <stdexcept>

#include "killshape/diffnet.hpp"

namespace killshape {

namespace {

// Augmented-state column layout: value | Dx (3) | Hx (9, col-major) | s | m (3).
constexpr int kV = 0, kD = 1, kH = 4, kS = 13, kM = 14;

int ncols(EvalMode mode) {
  switch (mode) {
    case EvalMode::Value: return 1;
    case EvalMode::FirstOrder: return 4;
    case EvalMode::Full: return 17;
  }
  return 1;
}

double stable_sigmoid(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double softplus(double a, double beta) {
  const double t = beta * a;
  if (t > 30.0) return a + std::log1p(std::exp(-t)) / beta;
  return std::log1p(std::exp(t)) / beta;
}

MatX input_state(const MlpConfig& cfg, const Vec3& x, const VecX& z, const VecX* eta,
                 EvalMode mode) {
  if (z.size() != cfg.latent_dim) throw SizeMismatch("latent code size does not match config");
  MatX st = MatX::Zero(cfg.input_dim(), ncols(mode));
  st.col(kV).head<3>() = x;
  st.col(kV).tail(cfg.latent_dim) = z;
  if (mode != EvalMode::Value) {
    st(0, kD) = 1.0;
    st(1, kD + 1) = 1.0;
    st(2, kD + 2) = 1.0;
  }
  if (mode == EvalMode::Full) {
    if (!eta || eta->size() != cfg.latent_dim)
      throw SizeMismatch("latent direction size does not match config");
    st.col(kS).tail(cfg.latent_dim) = *eta;
  }
  return st;
}

// h = softplus(a) applied to the value slot; derivative slots get the chain
// rule with sigma', sigma'' as derived from the forward propagation rules.
void activate(const MatX& pre, MatX& out, double beta, EvalMode mode) {
  const auto n = pre.rows();
  out.resize(n, pre.cols());
  Eigen::ArrayXd s1(n), sp(n);
  for (Eigen::Index u = 0; u < n; ++u) {
    s1[u] = stable_sigmoid(beta * pre(u, kV));
    sp[u] = softplus(pre(u, kV), beta);
  }
  out.col(kV) = sp.matrix();
  if (mode == EvalMode::Value) return;
  for (int c = 0; c < 3; ++c) out.col(kD + c) = (s1 * pre.col(kD + c).array()).matrix();
  if (mode == EvalMode::FirstOrder) return;
  const Eigen::ArrayXd s2 = beta * s1 * (1.0 - s1);
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i <= j; ++i) {
      // compute each unordered pair once so symmetric inputs stay bitwise
      // symmetric through the rounding
      out.col(kH + 3 * j + i) = (s1 * pre.col(kH + 3 * j + i).array() +
                                 s2 * pre.col(kD + i).array() * pre.col(kD + j).array())
                                    .matrix();
      if (i != j) out.col(kH + 3 * i + j) = out.col(kH + 3 * j + i);
    }
  out.col(kS) = (s1 * pre.col(kS).array()).matrix();
  for (int c = 0; c < 3; ++c)
    out.col(kM + c) =
        (s1 * pre.col(kM + c).array() + s2 * pre.col(kS).array() * pre.col(kD + c).array())
            .matrix();
}

// Adjoint of activate: given the adjoint of the activated state, produce the
// adjoint of the pre-activation state.
MatX reverse_activate(const MatX& pre, const MatX& bar_h, double beta, EvalMode mode) {
  const auto n = pre.rows();
  MatX bar_pre = MatX::Zero(n, pre.cols());
  Eigen::ArrayXd s1(n);
  for (Eigen::Index u = 0; u < n; ++u) s1[u] = stable_sigmoid(beta * pre(u, kV));

  Eigen::ArrayXd abar = bar_h.col(kV).array() * s1;
  if (mode != EvalMode::Value) {
    const Eigen::ArrayXd s2 = beta * s1 * (1.0 - s1);
    for (int c = 0; c < 3; ++c) {
      abar += s2 * bar_h.col(kD + c).array() * pre.col(kD + c).array();
      bar_pre.col(kD + c) = (s1 * bar_h.col(kD + c).array()).matrix();
    }
    if (mode == EvalMode::Full) {
      const Eigen::ArrayXd s3 = beta * s2 * (1.0 - 2.0 * s1);
      for (int j = 0; j < 3; ++j)
        for (int i = 0; i < 3; ++i) {
          const auto hbar = bar_h.col(kH + 3 * j + i).array();
          abar += s2 * hbar * pre.col(kH + 3 * j + i).array() +
                  s3 * hbar * pre.col(kD + i).array() * pre.col(kD + j).array();
          bar_pre.col(kD + i) +=
              (s2 * hbar * pre.col(kD + j).array()).matrix();
          bar_pre.col(kD + j) +=
              (s2 * hbar * pre.col(kD + i).array()).matrix();
          bar_pre.col(kH + 3 * j + i) = (s1 * hbar).matrix();
        }
      Eigen::ArrayXd mdotD = Eigen::ArrayXd::Zero(n);
      for (int c = 0; c < 3; ++c) {
        const auto mbar = bar_h.col(kM + c).array();
        abar += s2 * mbar * pre.col(kM + c).array() +
                s3 * mbar * pre.col(kD + c).array() * pre.col(kS).array();
        mdotD += mbar * pre.col(kD + c).array();
        bar_pre.col(kD + c) += (s2 * pre.col(kS).array() * mbar).matrix();
        bar_pre.col(kM + c) = (s1 * mbar).matrix();
      }
      abar += s2 * bar_h.col(kS).array() * pre.col(kS).array();
      bar_pre.col(kS) = (s1 * bar_h.col(kS).array() + s2 * mdotD).matrix();
    }
  }
  bar_pre.col(kV) = abar.matrix();
  return bar_pre;
}

MatX run_forward(const NetworkParams& params, const Vec3& x, const VecX& z, const VecX* eta,
                 EvalMode mode, ForwardTrace* trace) {
  const MlpConfig& cfg = params.config();
  const int L = cfg.hidden_layers;
  const MatX xz = input_state(cfg, x, z, eta, mode);
  if (trace) {
    trace->mode = mode;
    trace->in_state.assign(L + 1, MatX());
    trace->pre_state.assign(L + 1, MatX());
  }
  MatX h = xz;
  for (int l = 0; l <= L; ++l) {
    MatX in;
    if (l == cfg.skip_layer) {
      in.resize(h.rows() + xz.rows(), h.cols());
      in << h, xz;
    } else {
      in = h;
    }
    MatX pre = params.f_weight(l) * in;
    pre.col(kV) += params.f_bias(l);
    if (!pre.allFinite())
      throw NonFiniteValue("non-finite value at f linear layer " + std::to_string(l));
    if (trace) {
      trace->in_state[l] = in;
      trace->pre_state[l] = pre;
    }
    if (l < L)
      activate(pre, h, cfg.softplus_beta, mode);
    else
      h = pre;
  }
  return h;
}

}  // namespace

void MlpConfig::validate() const {
  if (hidden_layers < 2) throw std::invalid_argument("need at least 2 hidden layers");
  if (hidden_width < 1) throw std::invalid_argument("hidden width must be positive");
  if (latent_dim < 1) throw std::invalid_argument("latent dim must be positive");
  if (skip_layer < 1 || skip_layer > hidden_layers - 1)
    throw std::invalid_argument("skip layer must be strictly inside the stack");
  if (!(softplus_beta > 0.0)) throw std::invalid_argument("softplus beta must be positive");
  if (!(geometric_init_radius > 0.0)) throw std::invalid_argument("init radius must be positive");
}

int NetworkParams::f_in_width(int layer) const {
  if (layer == 0) return config_.input_dim();
  return config_.hidden_width + (layer == config_.skip_layer ? config_.input_dim() : 0);
}

int NetworkParams::f_out_width(int layer) const {
  return layer == config_.hidden_layers ? 1 : config_.hidden_width;
}

NetworkParams::NetworkParams(const MlpConfig& config, int pieces)
    : config_(config), pieces_(pieces) {
  config_.validate();
  if (pieces_ < 1) throw std::invalid_argument("pieces must be >= 1");
  std::ptrdiff_t offset = 0;
  auto add = [&](const std::string& name, int rows, int cols) {
    tensors_.push_back(TensorInfo{name, rows, cols, offset});
    offset += static_cast<std::ptrdiff_t>(rows) * cols;
  };
  for (int l = 0; l <= config_.hidden_layers; ++l) {
    add("f.w" + std::to_string(l), f_out_width(l), f_in_width(l));
    add("f.b" + std::to_string(l), f_out_width(l), 1);
  }
  p_base_ = static_cast<int>(tensors_.size());
  add("p.w0", kPHiddenWidth, config_.input_dim());
  add("p.b0", kPHiddenWidth, 1);
  add("p.w1", pieces_, kPHiddenWidth);
  add("p.b1", pieces_, 1);
  flat_ = VecX::Zero(offset);
}

NetworkParams geometric_init(const MlpConfig& config, int pieces, RngStream& rng) {
  NetworkParams params(config, pieces);
  const int L = config.hidden_layers;
  for (int l = 0; l <= L; ++l) {
    auto W = params.f_weight(l);
    params.f_bias(l).setZero();
    if (l == L) {
      W.setConstant(std::sqrt(M_PI) / std::sqrt(static_cast<double>(W.cols())));
      params.f_bias(l)[0] = -config.geometric_init_radius;
    } else {
      const double std_dev = std::sqrt(2.0 / W.rows());
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = rng.normal(0.0, std_dev);
      if (l == config.skip_layer) W.rightCols(config.input_dim()).setZero();
    }
  }
  {
    auto W0 = params.p_weight(0);
    const double std_dev = std::sqrt(2.0 / W0.cols());
    for (Eigen::Index j = 0; j < W0.cols(); ++j)
      for (Eigen::Index i = 0; i < W0.rows(); ++i) W0(i, j) = rng.normal(0.0, std_dev);
    params.p_bias(0).setZero();
    auto W1 = params.p_weight(1);
    for (Eigen::Index j = 0; j < W1.cols(); ++j)
      for (Eigen::Index i = 0; i < W1.rows(); ++i) W1(i, j) = rng.normal(0.0, 0.01);
    params.p_bias(1).setZero();
  }
  return params;
}

double forward_f(const NetworkParams& params, const Vec3& x, const VecX& z) {
  return run_forward(params, x, z, nullptr, EvalMode::Value, nullptr)(0, 0);
}

VecX forward_f_batch(const NetworkParams& params, const MatX& xs, const VecX& z) {
  const MlpConfig& cfg = params.config();
  if (xs.rows() != 3) throw SizeMismatch("batch points must be 3 x n");
  if (z.size() != cfg.latent_dim) throw SizeMismatch("latent code size does not match config");
  const auto n = xs.cols();
  const double beta = cfg.softplus_beta;
  MatX xz(cfg.input_dim(), n);
  xz.topRows(3) = xs;
  xz.bottomRows(cfg.latent_dim) = z.replicate(1, n);
  MatX h = xz;
  for (int l = 0; l <= cfg.hidden_layers; ++l) {
    MatX in;
    if (l == cfg.skip_layer) {
      in.resize(h.rows() + xz.rows(), n);
      in << h, xz;
    } else {
      in = h;
    }
    h = params.f_weight(l) * in;
    h.colwise() += params.f_bias(l);
    if (!h.allFinite())
      throw NonFiniteValue("non-finite value at f linear layer " + std::to_string(l));
    if (l < cfg.hidden_layers)
      h = h.unaryExpr([beta](double a) { return softplus(a, beta); });
  }
  return h.row(0).transpose();
}

FirstOrder forward_first_order(const NetworkParams& params, const Vec3& x, const VecX& z,
                               ForwardTrace* trace) {
  const MatX out = run_forward(params, x, z, nullptr, EvalMode::FirstOrder, trace);
  FirstOrder fo;
  fo.f = out(0, kV);
  fo.g = out.row(0).segment<3>(kD).transpose();
  return fo;
}

DerivativeBundle derivative_bundle(const NetworkParams& params, const Vec3& x, const VecX& z,
                                   const VecX& eta, ForwardTrace* trace) {
  const MatX out = run_forward(params, x, z, &eta, EvalMode::Full, trace);
  DerivativeBundle b;
  b.f = out(0, kV);
  b.g = out.row(0).segment<3>(kD).transpose();
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3; ++i) b.H(i, j) = out(0, kH + 3 * j + i);
  b.s = out(0, kS);
  b.m = out.row(0).segment<3>(kM).transpose();
  return b;
}

void backward_f(const NetworkParams& params, const ForwardTrace& trace, const BundleAdjoint& seed,
                VecX& net_grad, Vec3* x_bar, VecX* z_bar, VecX* eta_bar) {
  const MlpConfig& cfg = params.config();
  const int L = cfg.hidden_layers;
  const int nc = ncols(trace.mode);
  if (net_grad.size() != params.flat().size())
    throw SizeMismatch("gradient buffer size does not match parameters");
  if (static_cast<int>(trace.in_state.size()) != L + 1)
    throw SizeMismatch("trace does not match network depth");

  MatX bar_pre = MatX::Zero(1, nc);
  bar_pre(0, kV) = seed.f;
  if (nc >= 4) bar_pre.row(0).segment<3>(kD) = seed.g.transpose();
  if (nc == 17) {
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 3; ++i) bar_pre(0, kH + 3 * j + i) = seed.H(i, j);
    bar_pre(0, kS) = seed.s;
    bar_pre.row(0).segment<3>(kM) = seed.m.transpose();
  }

  MatX xz_bar = MatX::Zero(cfg.input_dim(), nc);
  for (int l = L; l >= 0; --l) {
    const MatX& in = trace.in_state[l];
    const auto& info = params.tensors()[2 * l];
    Eigen::Map<MatX>(net_grad.data() + info.offset, info.rows, info.cols).noalias() +=
        bar_pre * in.transpose();
    const auto& binfo = params.tensors()[2 * l + 1];
    Eigen::Map<VecX>(net_grad.data() + binfo.offset, binfo.rows) += bar_pre.col(kV);

    MatX bar_in = params.f_weight(l).transpose() * bar_pre;
    MatX bar_h;
    if (l == cfg.skip_layer) {
      bar_h = bar_in.topRows(cfg.hidden_width);
      xz_bar += bar_in.bottomRows(cfg.input_dim());
    } else if (l == 0) {
      xz_bar += bar_in;
      break;
    } else {
      bar_h = bar_in;
    }
    if (l > 0) bar_pre = reverse_activate(trace.pre_state[l - 1], bar_h, cfg.softplus_beta,
                                          trace.mode);
  }

  if (x_bar) *x_bar += xz_bar.col(kV).head<3>();
  if (z_bar) {
    if (z_bar->size() != cfg.latent_dim) throw SizeMismatch("z_bar size");
    *z_bar += xz_bar.col(kV).tail(cfg.latent_dim);
  }
  if (eta_bar) {
    if (nc != 17) throw std::invalid_argument("eta adjoint needs a full-mode trace");
    if (eta_bar->size() != cfg.latent_dim) throw SizeMismatch("eta_bar size");
    *eta_bar += xz_bar.col(kS).tail(cfg.latent_dim);
  }
}

VecX forward_p(const NetworkParams& params, const Vec3& x, const VecX& z, PTrace* trace) {
  const MlpConfig& cfg = params.config();
  if (z.size() != cfg.latent_dim) throw SizeMismatch("latent code size does not match config");
  VecX in(cfg.input_dim());
  in << x, z;
  const VecX pre0 = params.p_weight(0) * in + params.p_bias(0);
  const VecX h = pre0.cwiseMax(0.0);
  const VecX logits = params.p_weight(1) * h + params.p_bias(1);
  if (!logits.allFinite()) throw NonFiniteValue("non-finite value in p network");
  const VecX shifted = (logits.array() - logits.maxCoeff()).exp();
  const VecX probs = shifted / shifted.sum();
  if (trace) {
    trace->input = in;
    trace->pre0 = pre0;
    trace->probs = probs;
  }
  return probs;
}

void backward_p(const NetworkParams& params, const PTrace& trace, const VecX& p_bar,
                VecX& net_grad, Vec3* x_bar, VecX* z_bar) {
  const MlpConfig& cfg = params.config();
  if (net_grad.size() != params.flat().size())
    throw SizeMismatch("gradient buffer size does not match parameters");
  if (p_bar.size() != trace.probs.size()) throw SizeMismatch("p adjoint size");

  const double inner = trace.probs.dot(p_bar);
  const VecX logits_bar = trace.probs.array() * (p_bar.array() - inner);
  const VecX h = trace.pre0.cwiseMax(0.0);

  const int pw1 = 2 * (cfg.hidden_layers + 1) + 2;  // tensor index of p.w1
  const auto& w1 = params.tensors()[pw1];
  Eigen::Map<MatX>(net_grad.data() + w1.offset, w1.rows, w1.cols).noalias() +=
      logits_bar * h.transpose();
  const auto& b1 = params.tensors()[pw1 + 1];
  Eigen::Map<VecX>(net_grad.data() + b1.offset, b1.rows) += logits_bar;

  const VecX h_bar = params.p_weight(1).transpose() * logits_bar;
  const VecX pre0_bar = (trace.pre0.array() > 0.0).select(h_bar.array(), 0.0).matrix();

  const int pw0 = pw1 - 2;
  const auto& w0 = params.tensors()[pw0];
  Eigen::Map<MatX>(net_grad.data() + w0.offset, w0.rows, w0.cols).noalias() +=
      pre0_bar * trace.input.transpose();
  const auto& b0 = params.tensors()[pw0 + 1];
  Eigen::Map<VecX>(net_grad.data() + b0.offset, b0.rows) += pre0_bar;

  const VecX in_bar = params.p_weight(0).transpose() * pre0_bar;
  if (x_bar) *x_bar += in_bar.head<3>();
  if (z_bar) {
    if (z_bar->size() != cfg.latent_dim) throw SizeMismatch("z_bar size");
    *z_bar += in_bar.tail(cfg.latent_dim);
  }
}

void adam_update(double lr, double beta1, double beta2, double eps, std::int64_t step, double* x,
                 const double* g, double* m1, double* m2, std::ptrdiff_t n) {
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
    x[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
  }
}

bool adam_step(AdamState& state, NetworkParams& params, MatX& latent_codes,
               const GradAccum& grads) {
  if (state.m1_net.size() != params.flat().size() || grads.net.size() != params.flat().size())
    throw SizeMismatch("optimizer state does not match network parameters");
  if (state.m1_lat.rows() != latent_codes.rows() || state.m1_lat.cols() != latent_codes.cols() ||
      grads.latents.rows() != latent_codes.rows() || grads.latents.cols() != latent_codes.cols())
    throw SizeMismatch("optimizer state does not match latent table");
  if (!grads.all_finite()) return false;
  ++state.step;
  adam_update(state.lr_net, state.beta1, state.beta2, state.eps, state.step,
              params.flat().data(), grads.net.data(), state.m1_net.data(), state.m2_net.data(),
              params.flat().size());
  adam_update(state.lr_latent, state.beta1, state.beta2, state.eps, state.step,
              latent_codes.data(), grads.latents.data(), state.m1_lat.data(), state.m2_lat.data(),
              latent_codes.size());
  return true;
}

}  // namespace killshape
