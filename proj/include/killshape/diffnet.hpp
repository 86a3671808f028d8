// The implicit network f(x,z), the part-probability network p(x,z), their
// nested spatial/latent derivatives, and the Adam optimizer.
//
// Derivative strategy: every neuron carries an augmented state
//   (value, Dx: 3-vector, Hx: 3x3, s, m: 3-vector)
// where s is the latent directional derivative (df/dz)eta and m its spatial
// gradient. The augmented state propagates forward through each layer; a
// single reverse pass over the recorded states yields exact parameter
// gradients of any scalar seeded on (f, g, H, s, m).
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "killshape/common.hpp"

namespace killshape {

struct MlpConfig {
  int hidden_layers = 4;
  int hidden_width = 64;
  int latent_dim = 8;
  int skip_layer = 2;  // hidden layer whose input gets the raw (x,z) appended
  double softplus_beta = 100.0;
  double geometric_init_radius = 1.0;

  static MlpConfig desk_preset() { return {}; }
  static MlpConfig paper_preset() { return {8, 512, 256, 4, 100.0, 1.0}; }

  int input_dim() const { return 3 + latent_dim; }
  void validate() const;  // throws std::invalid_argument
};

// All parameters of f and p in one flat vector, with named matrix/vector
// views. Flat layout: f weights/biases in layer order, then p layers.
class NetworkParams {
 public:
  struct TensorInfo {
    std::string name;
    int rows = 0, cols = 0;  // cols == 1 for biases
    std::ptrdiff_t offset = 0;
  };

  NetworkParams(const MlpConfig& config, int pieces);

  const MlpConfig& config() const { return config_; }
  int pieces() const { return pieces_; }
  int f_linear_count() const { return config_.hidden_layers + 1; }
  int f_in_width(int layer) const;
  int f_out_width(int layer) const;

  Eigen::Map<MatX> f_weight(int layer) { return map(2 * layer); }
  Eigen::Map<const MatX> f_weight(int layer) const { return map(2 * layer); }
  Eigen::Map<VecX> f_bias(int layer) { return vec_map(2 * layer + 1); }
  Eigen::Map<const VecX> f_bias(int layer) const { return vec_map(2 * layer + 1); }
  Eigen::Map<MatX> p_weight(int layer) { return map(p_base_ + 2 * layer); }
  Eigen::Map<const MatX> p_weight(int layer) const { return map(p_base_ + 2 * layer); }
  Eigen::Map<VecX> p_bias(int layer) { return vec_map(p_base_ + 2 * layer + 1); }
  Eigen::Map<const VecX> p_bias(int layer) const { return vec_map(p_base_ + 2 * layer + 1); }

  VecX& flat() { return flat_; }
  const VecX& flat() const { return flat_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }

  static constexpr int kPHiddenWidth = 128;

 private:
  Eigen::Map<MatX> map(int idx) {
    const TensorInfo& t = tensors_[idx];
    return {flat_.data() + t.offset, t.rows, t.cols};
  }
  Eigen::Map<const MatX> map(int idx) const {
    const TensorInfo& t = tensors_[idx];
    return {flat_.data() + t.offset, t.rows, t.cols};
  }
  Eigen::Map<VecX> vec_map(int idx) {
    const TensorInfo& t = tensors_[idx];
    return {flat_.data() + t.offset, t.rows};
  }
  Eigen::Map<const VecX> vec_map(int idx) const {
    const TensorInfo& t = tensors_[idx];
    return {flat_.data() + t.offset, t.rows};
  }

  MlpConfig config_;
  int pieces_ = 1;
  int p_base_ = 0;  // index of first p tensor
  std::vector<TensorInfo> tensors_;
  VecX flat_;
};

// Sphere-like start: hidden weights N(0, 2/fan_out), zeroed skip columns,
// constant final layer sqrt(pi)/sqrt(fan_in) with bias -radius, so that
// f(x, 0) approximates ||x|| - radius. p gets a small-variance init.
NetworkParams geometric_init(const MlpConfig& config, int pieces, RngStream& rng);

struct DerivativeBundle {
  double f = 0.0;
  Vec3 g = Vec3::Zero();   // spatial gradient
  double s = 0.0;          // (df/dz) eta
  Mat3 H = Mat3::Zero();   // spatial Hessian
  Vec3 m = Vec3::Zero();   // spatial gradient of s
};

// Adjoint seed for backward_f: d(scalar)/d(each bundle slot).
struct BundleAdjoint {
  double f = 0.0, s = 0.0;
  Vec3 g = Vec3::Zero(), m = Vec3::Zero();
  Mat3 H = Mat3::Zero();
};

enum class EvalMode { Value, FirstOrder, Full };

// Recorded per-layer states of one evaluation, consumed by backward_f.
struct ForwardTrace {
  EvalMode mode = EvalMode::Value;
  std::vector<MatX> in_state;   // input to each linear layer (after skip concat)
  std::vector<MatX> pre_state;  // pre-activation state of each linear layer
};

double forward_f(const NetworkParams& params, const Vec3& x, const VecX& z);
VecX forward_f_batch(const NetworkParams& params, const MatX& xs /*3xN*/, const VecX& z);

struct FirstOrder {
  double f = 0.0;
  Vec3 g = Vec3::Zero();
};
FirstOrder forward_first_order(const NetworkParams& params, const Vec3& x, const VecX& z,
                               ForwardTrace* trace = nullptr);

DerivativeBundle derivative_bundle(const NetworkParams& params, const Vec3& x, const VecX& z,
                                   const VecX& eta, ForwardTrace* trace = nullptr);

// Reverse pass over a recorded evaluation. Accumulates (+=) into net_grad and,
// when given, into the input adjoints. For FirstOrder traces only seed.f and
// seed.g may be nonzero; eta_bar needs a Full trace.
void backward_f(const NetworkParams& params, const ForwardTrace& trace, const BundleAdjoint& seed,
                VecX& net_grad, Vec3* x_bar = nullptr, VecX* z_bar = nullptr,
                VecX* eta_bar = nullptr);

struct PTrace {
  VecX input;   // (x,z)
  VecX pre0;    // hidden pre-activation
  VecX probs;   // softmax output
};

VecX forward_p(const NetworkParams& params, const Vec3& x, const VecX& z,
               PTrace* trace = nullptr);
void backward_p(const NetworkParams& params, const PTrace& trace, const VecX& p_bar,
                VecX& net_grad, Vec3* x_bar = nullptr, VecX* z_bar = nullptr);

// Gradient container aligned with NetworkParams.flat() and a latent table of
// shape (count x dim).
struct GradAccum {
  VecX net;
  MatX latents;

  GradAccum(int net_size, int latent_count, int latent_dim)
      : net(VecX::Zero(net_size)), latents(MatX::Zero(latent_count, latent_dim)) {}
  void set_zero() {
    net.setZero();
    latents.setZero();
  }
  bool all_finite() const { return net.allFinite() && latents.allFinite(); }
};

struct AdamState {
  double lr_net = 0.0005;
  double lr_latent = 0.001;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t step = 0;
  VecX m1_net, m2_net;
  MatX m1_lat, m2_lat;

  AdamState() = default;
  AdamState(int net_size, int latent_count, int latent_dim)
      : m1_net(VecX::Zero(net_size)),
        m2_net(VecX::Zero(net_size)),
        m1_lat(MatX::Zero(latent_count, latent_dim)),
        m2_lat(MatX::Zero(latent_count, latent_dim)) {}
};

// One bias-corrected Adam update of a flat parameter block.
void adam_update(double lr, double beta1, double beta2, double eps, std::int64_t step,
                 double* x, const double* g, double* m1, double* m2, std::ptrdiff_t n);

// Joint step over network and latent codes. Returns false (and changes
// nothing) when the gradient has non-finite entries.
bool adam_step(AdamState& state, NetworkParams& params, MatX& latent_codes,
               const GradAccum& grads);

}  // namespace killshape
