#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "killshape/deformation.hpp"
#include "killshape/diffnet.hpp"
#include "killshape/geometry.hpp"
#include "killshape/losses.hpp"
#include "killshape/shapespace.hpp"

namespace killshape {

struct TrainConfig {
  int epochs = 2000;
  int recon_batch = 8;   // queries per shape per epoch
  int deform_batch = 8;  // latent path draws per epoch (also the eikonal count)
  int pieces = 1;
  InterpolationMode mode = InterpolationMode::Linear;  // downstream interpolation default
  LossWeights weights;  // lambda_d is driven by the schedule, not this field
  Schedule lambda_d_schedule = Schedule::constant(0.001);
  MlpConfig mlp;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int newton_iters = 5;
  double projection_noise = 0.02;
  double sigma2 = 0.3;
  double box_margin = 0.1;
  bool deformation_enabled = true;
  double latent_init_std = 0.01;

  void validate() const;
  static TrainConfig toy_cubes();
  static TrainConfig toy_ellipsoids();
  static TrainConfig paper_preset();
};

// Canonical key=value text form of TrainConfig; the checkpoint stores this
// verbatim. decode fills absent keys with defaults (reported via *defaulted)
// and rejects unknown or duplicate keys.
std::string encode_train_config(const TrainConfig& config);
TrainConfig decode_train_config(const std::string& text,
                                std::vector<std::string>* defaulted = nullptr);

struct Checkpoint {
  std::uint32_t version = 1;
  TrainConfig config;
  NetworkParams params;
  LatentTable latents;
  AdamState adam;
  std::int64_t epoch = 0;
  std::string rng_state;

  explicit Checkpoint(const TrainConfig& cfg)
      : config(cfg), params(cfg.mlp, cfg.pieces) {}
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// One epoch's drawn sample positions. Latent codes are looked up again at
// evaluation time so gradients can flow into the endpoints of each path.
struct PathDraw {
  int i1 = -1, i2 = -1;
  double t = 0.0;
};
struct SampledBatch {
  std::vector<Vec3> recon_queries;
  std::vector<int> recon_shape;
  std::vector<PathDraw> paths;
  std::vector<Vec3> eikonal_points;                // aligned with paths
  std::vector<std::pair<int, Vec3>> deform_points; // (path index, projected point)
  int paths_rejected = 0;
  int projection_dropped = 0;
  bool deformation_active = false;
};

SampledBatch sample_batch(const NetworkParams& params, const LatentTable& table,
                          const std::vector<PointCloud>& clouds, const TrainConfig& config,
                          const Box& box, bool deformation_active, RngStream& recon_rng,
                          RngStream& path_rng, RngStream& proj_rng, RngStream& eikonal_rng);

struct BatchEval {
  LossComponents parts;
  double total = 0.0;
  int deform_samples = 0;     // valid deformation samples this step
  bool deform_skipped = false;  // active but no sample survived
};

// Loss and, when grads is given, its gradient over network parameters and
// latent codes. Sample positions are treated as fixed; affine fields are
// solved fresh and then frozen.
BatchEval batch_loss_and_grad(const NetworkParams& params, const LatentTable& table,
                              const std::vector<CloudDistance>& dists, const SampledBatch& batch,
                              const LossWeights& weights, int pieces, GradAccum* grads);

struct EpochStats {
  int epoch = 0;
  double recon = 0.0, deform = 0.0, eikonal = 0.0, ad = 0.0, total = 0.0;
  double lambda_d = 0.0;
  int paths_rejected = 0;
  int projection_dropped = 0;
  int deform_samples = 0;
  bool deform_skipped = false;
  bool aborted = false;  // non-finite loss or gradient; training stopped
};
using ProgressSink = std::function<void(const EpochStats&)>;
using CheckpointSink = std::function<void(const Checkpoint&)>;

Checkpoint train(const std::vector<PointCloud>& clouds, const TrainConfig& config,
                 const ProgressSink& progress = {}, const CheckpointSink& on_checkpoint = {});

struct FitOptions {
  int batch = 8;
  double lr = 0.001;
  double latent_init_std = 0.01;
  double sigma2 = 0.3;
  bool include_code_penalty = false;  // adds lambda_ad * ||z||^2
  std::uint64_t seed = 0;
};
struct FitResult {
  VecX code;
  double loss = 0.0;
  bool diverged = false;
  int steps_taken = 0;
};

// Adam over a single latent code with the network held fixed.
FitResult fit_test_latent(const Checkpoint& ckpt, const PointCloud& cloud, int steps,
                          const FitOptions& options = {});

}  // namespace killshape
