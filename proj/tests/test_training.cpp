#include "killshape/training.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"

using namespace killshape;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 30;
  c.recon_batch = 4;
  c.deform_batch = 4;
  c.pieces = 1;
  c.mlp.hidden_layers = 2;
  c.mlp.hidden_width = 16;
  c.mlp.latent_dim = 4;
  c.mlp.skip_layer = 1;
  c.mlp.softplus_beta = 20.0;
  c.seed = 17;
  return c;
}

std::vector<PointCloud> two_cubes(int samples, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<PointCloud> clouds;
  for (int i = 0; i < 2; ++i) {
    RigidPose pose;
    pose.rotation = rng.rotation();
    pose.translation = 0.2 * rng.normal3();
    clouds.push_back(sample_cube(pose, samples, rng));
  }
  return clouds;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint make_busy_checkpoint() {
  TrainConfig cfg = tiny_config();
  Checkpoint ckpt(cfg);
  RngStream rng(99);
  ckpt.params = geometric_init(cfg.mlp, cfg.pieces, rng);
  for (Eigen::Index i = 0; i < ckpt.params.flat().size(); ++i)
    ckpt.params.flat()[i] += rng.normal(0.0, 0.01);
  ckpt.latents = LatentTable::random(3, cfg.mlp.latent_dim, 0.5, rng);
  ckpt.latents.ids = {"alpha", "beta", "gamma"};
  ckpt.adam = AdamState(static_cast<int>(ckpt.params.flat().size()), 3, cfg.mlp.latent_dim);
  ckpt.adam.step = 421;
  for (Eigen::Index i = 0; i < ckpt.adam.m1_net.size(); ++i) {
    ckpt.adam.m1_net[i] = rng.normal();
    ckpt.adam.m2_net[i] = std::abs(rng.normal());
  }
  ckpt.adam.m1_lat.setRandom();
  ckpt.adam.m2_lat.setRandom();
  ckpt.adam.m2_lat = ckpt.adam.m2_lat.cwiseAbs();
  ckpt.epoch = 1234;
  ckpt.rng_state = RngStream(7).serialize();
  return ckpt;
}

}  // namespace

TEST_CASE("train config text codec round trips") {
  TrainConfig c = tiny_config();
  c.lambda_d_schedule = Schedule{{{0, 0.0}, {2000, 0.001}, {4000, 0.0001}}};
  c.mode = InterpolationMode::Spiral;
  c.weights.lambda_e = 0.125;
  c.projection_noise = 0.017;
  c.deformation_enabled = false;
  c.seed = 18446744073709551615ull;

  const std::string text = encode_train_config(c);
  const TrainConfig back = decode_train_config(text);
  CHECK_EQ(encode_train_config(back), text);
  CHECK_EQ(back.seed, c.seed);
  CHECK_EQ(back.mode, InterpolationMode::Spiral);
  CHECK_EQ(back.deformation_enabled, false);
  CHECK_EQ(back.lambda_d_schedule.phases.size(), 3);
  CHECK_EQ(back.lambda_d_schedule.phases[1].first, 2000);
  CHECK_EQ(back.lambda_d_schedule.phases[1].second, 0.001);

  SUBCASE("absent keys default and are reported") {
    std::vector<std::string> defaulted;
    const TrainConfig sparse = decode_train_config("epochs = 7\npieces = 3\n", &defaulted);
    CHECK_EQ(sparse.epochs, 7);
    CHECK_EQ(sparse.pieces, 3);
    CHECK_EQ(sparse.recon_batch, 8);
    CHECK_EQ(sparse.weights.lambda_e, 0.1);
    CHECK_GT(defaulted.size(), 15);
    CHECK(std::find(defaulted.begin(), defaulted.end(), "seed") != defaulted.end());
    CHECK(std::find(defaulted.begin(), defaulted.end(), "epochs") == defaulted.end());
  }
  SUBCASE("bad input rejected") {
    CHECK_THROWS_AS(decode_train_config("bogus_key = 1\n"), std::invalid_argument);
    CHECK_THROWS_AS(decode_train_config("epochs = 1\nepochs = 2\n"), std::invalid_argument);
    CHECK_THROWS_AS(decode_train_config("epochs\n"), std::invalid_argument);
    CHECK_THROWS_AS(decode_train_config("epochs = abc\n"), std::invalid_argument);
    CHECK_THROWS_AS(decode_train_config("interpolation = cubic\n"), std::invalid_argument);
    CHECK_THROWS_AS(decode_train_config("epochs = 0\n"), std::invalid_argument);
    CHECK_THROWS_AS(decode_train_config("schedule = 5-0.1\n"), std::invalid_argument);
  }
  SUBCASE("comments and blank lines are ignored") {
    const TrainConfig ok = decode_train_config("# a comment\n\nepochs = 9\n");
    CHECK_EQ(ok.epochs, 9);
  }
}

TEST_CASE("train config presets") {
  const TrainConfig cubes = TrainConfig::toy_cubes();
  CHECK_EQ(cubes.pieces, 1);
  CHECK_EQ(cubes.epochs, 2000);
  CHECK_EQ(cubes.recon_batch, 8);
  CHECK_EQ(cubes.deform_batch, 8);
  CHECK_EQ(cubes.mlp.hidden_layers, 4);
  CHECK_EQ(cubes.mlp.hidden_width, 64);
  CHECK_EQ(cubes.mlp.latent_dim, 8);
  CHECK_EQ(schedule_lambda_d(cubes.lambda_d_schedule, 0), 0.001);
  CHECK_EQ(schedule_lambda_d(cubes.lambda_d_schedule, 1999), 0.001);
  CHECK_NOTHROW(cubes.validate());

  const TrainConfig figs = TrainConfig::toy_ellipsoids();
  CHECK_EQ(figs.pieces, 2);
  CHECK_NOTHROW(figs.validate());

  const TrainConfig paper = TrainConfig::paper_preset();
  CHECK_EQ(paper.epochs, 5000);
  CHECK_EQ(paper.recon_batch, 64);
  CHECK_EQ(paper.pieces, 20);
  CHECK_EQ(paper.mlp.hidden_width, 512);
  CHECK_EQ(paper.mlp.latent_dim, 256);
  CHECK_EQ(schedule_lambda_d(paper.lambda_d_schedule, 1999), 0.0);
  CHECK_EQ(schedule_lambda_d(paper.lambda_d_schedule, 2000), 0.001);
  CHECK_EQ(schedule_lambda_d(paper.lambda_d_schedule, 4500), 0.0001);
  CHECK_NOTHROW(paper.validate());

  SUBCASE("validation catches bad fields") {
    TrainConfig bad = tiny_config();
    bad.recon_batch = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.sigma2 = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = tiny_config();
    bad.newton_iters = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_CASE("checkpoint io") {
  const Checkpoint ckpt = make_busy_checkpoint();
  const std::string path_a = "/tmp/ks_test_a.ndfs";
  const std::string path_b = "/tmp/ks_test_b.ndfs";
  save_checkpoint(ckpt, path_a);
  const Checkpoint loaded = load_checkpoint(path_a);

  SUBCASE("round trip is exact") {
    CHECK_EQ(loaded.version, ckpt.version);
    CHECK_EQ(encode_train_config(loaded.config), encode_train_config(ckpt.config));
    CHECK_EQ(loaded.params.flat().size(), ckpt.params.flat().size());
    CHECK_EQ((loaded.params.flat() - ckpt.params.flat()).cwiseAbs().maxCoeff(), 0.0);
    CHECK(loaded.latents.ids == ckpt.latents.ids);
    CHECK_EQ((loaded.latents.codes - ckpt.latents.codes).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ(loaded.adam.step, 421);
    CHECK_EQ((loaded.adam.m1_net - ckpt.adam.m1_net).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ((loaded.adam.m2_net - ckpt.adam.m2_net).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ((loaded.adam.m1_lat - ckpt.adam.m1_lat).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ((loaded.adam.m2_lat - ckpt.adam.m2_lat).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ(loaded.epoch, 1234);
    CHECK_EQ(loaded.rng_state, ckpt.rng_state);
  }
  SUBCASE("save, load, save produces identical bytes") {
    save_checkpoint(loaded, path_b);
    CHECK(read_file(path_a) == read_file(path_b));
  }
  SUBCASE("forward evaluation survives the round trip bit for bit") {
    RngStream rng(5);
    for (int i = 0; i < 5; ++i) {
      const Vec3 x = rng.normal3();
      const VecX z = rng.normal_vec(ckpt.config.mlp.latent_dim);
      CHECK_EQ(forward_f(loaded.params, x, z), forward_f(ckpt.params, x, z));
    }
  }
  SUBCASE("corrupt magic and version are rejected") {
    std::string bytes = read_file(path_a);
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write_file(path_b, bad_magic);
    CHECK_THROWS_AS(load_checkpoint(path_b), VersionError);

    std::string bad_version = bytes;
    bad_version[4] = 2;
    write_file(path_b, bad_version);
    CHECK_THROWS_AS(load_checkpoint(path_b), VersionError);
  }
  SUBCASE("truncation and trailing bytes are format errors") {
    const std::string bytes = read_file(path_a);
    for (const std::size_t keep :
         {std::size_t{8}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
      write_file(path_b, bytes.substr(0, keep));
      CHECK_THROWS_AS(load_checkpoint(path_b), FormatError);
    }
    write_file(path_b, bytes + "x");
    CHECK_THROWS_AS(load_checkpoint(path_b), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint("/tmp/ks_does_not_exist.ndfs"), std::runtime_error);
  }
  std::remove(path_a.c_str());
  std::remove(path_b.c_str());
}

TEST_CASE("sampled batches are deterministic and well formed") {
  TrainConfig cfg = tiny_config();
  std::vector<PointCloud> clouds = two_cubes(120, 3);
  for (PointCloud& c : clouds) compute_sigma1(c);
  const Box box = bounding_box(clouds, cfg.box_margin);

  RngStream net_rng(1);
  const NetworkParams params = geometric_init(cfg.mlp, cfg.pieces, net_rng);
  RngStream lat_rng(2);
  const LatentTable table = LatentTable::random(2, cfg.mlp.latent_dim, 0.1, lat_rng);

  const auto draw = [&](bool active) {
    RngStream recon(10), path(11), proj(12), eik(13);
    return sample_batch(params, table, clouds, cfg, box, active, recon, path, proj, eik);
  };

  const SampledBatch a = draw(true);
  const SampledBatch b = draw(true);
  CHECK_EQ(a.recon_queries.size(), 2 * cfg.recon_batch);
  CHECK_EQ(a.recon_shape.size(), a.recon_queries.size());
  CHECK_EQ(a.paths.size() + a.paths_rejected, cfg.deform_batch);
  CHECK_EQ(a.eikonal_points.size(), a.paths.size());
  CHECK(a.deformation_active);
  CHECK_EQ(a.deform_points.size() + a.projection_dropped, a.paths.size());
  for (const PathDraw& p : a.paths) {
    CHECK_GE(p.i1, 0);
    CHECK_LT(p.i1, 2);
    CHECK_NE(p.i1, p.i2);
    CHECK_GE(p.t, 0.0);
    CHECK_LE(p.t, 1.0);
  }
  for (const Vec3& y : a.eikonal_points) CHECK(box.contains(y));

  // identical streams, identical batch
  CHECK_EQ(b.recon_queries.size(), a.recon_queries.size());
  for (std::size_t i = 0; i < a.recon_queries.size(); ++i)
    CHECK_EQ((a.recon_queries[i] - b.recon_queries[i]).norm(), 0.0);
  for (std::size_t i = 0; i < a.paths.size(); ++i) {
    CHECK_EQ(a.paths[i].i1, b.paths[i].i1);
    CHECK_EQ(a.paths[i].t, b.paths[i].t);
  }

  const SampledBatch inactive = draw(false);
  CHECK_FALSE(inactive.deformation_active);
  CHECK(inactive.deform_points.empty());
  CHECK_EQ(inactive.projection_dropped, 0);
  // the gated projection stream must not disturb the others
  CHECK_EQ(inactive.paths.size(), a.paths.size());
  for (std::size_t i = 0; i < a.eikonal_points.size(); ++i)
    CHECK_EQ((inactive.eikonal_points[i] - a.eikonal_points[i]).norm(), 0.0);
}

TEST_CASE("batch loss gradient agrees with finite differences") {
  TrainConfig cfg = tiny_config();
  cfg.mlp.hidden_width = 12;
  cfg.pieces = 2;
  cfg.recon_batch = 3;
  cfg.deform_batch = 4;

  std::vector<PointCloud> clouds = two_cubes(40, 21);
  for (PointCloud& c : clouds) compute_sigma1(c);
  const Box box = bounding_box(clouds, cfg.box_margin);
  std::vector<CloudDistance> dists;
  for (const PointCloud& c : clouds) dists.emplace_back(c);

  RngStream net_rng(8);
  NetworkParams params = geometric_init(cfg.mlp, cfg.pieces, net_rng);
  for (Eigen::Index i = 0; i < params.flat().size(); ++i)
    params.flat()[i] += net_rng.normal(0.0, 0.05);
  RngStream lat_rng(9);
  LatentTable table = LatentTable::random(2, cfg.mlp.latent_dim, 0.3, lat_rng);

  RngStream recon(30), path(31), proj(32), eik(33);
  const SampledBatch batch =
      sample_batch(params, table, clouds, cfg, box, true, recon, path, proj, eik);
  REQUIRE_GE(batch.paths.size(), 3);
  REQUIRE_GE(batch.deform_points.size(), 3);

  LossWeights weights;
  weights.lambda_d = 0.7;
  weights.lambda_e = 0.3;
  weights.lambda_ad = 0.05;

  GradAccum grads(static_cast<int>(params.flat().size()), 2, cfg.mlp.latent_dim);
  const BatchEval ev =
      batch_loss_and_grad(params, table, dists, batch, weights, cfg.pieces, &grads);
  CHECK(std::isfinite(ev.total));
  CHECK_GT(ev.parts.recon, 0.0);
  CHECK_GT(ev.parts.eikonal, 0.0);
  CHECK_GT(ev.parts.deform, 0.0);
  CHECK_GT(ev.parts.ad, 0.0);
  CHECK_EQ(ev.total, doctest::Approx(ev.parts.recon + 0.7 * ev.parts.deform +
                                     0.3 * ev.parts.eikonal + 0.05 * ev.parts.ad)
                         .epsilon(1e-14));

  const BatchEval value_only =
      batch_loss_and_grad(params, table, dists, batch, weights, cfg.pieces, nullptr);
  CHECK_EQ(value_only.total, ev.total);

  const double h = 1e-5;
  const auto loss_at = [&](NetworkParams& p, LatentTable& t) {
    return batch_loss_and_grad(p, t, dists, batch, weights, cfg.pieces, nullptr).total;
  };

  double worst_net = 0.0;
  for (Eigen::Index i = 0; i < params.flat().size(); ++i) {
    const double saved = params.flat()[i];
    params.flat()[i] = saved + h;
    const double up = loss_at(params, table);
    params.flat()[i] = saved - h;
    const double down = loss_at(params, table);
    params.flat()[i] = saved;
    const double fd = (up - down) / (2 * h);
    const double err =
        std::abs(grads.net[i] - fd) / std::max({1e-3, std::abs(fd), std::abs(grads.net[i])});
    worst_net = std::max(worst_net, err);
  }
  CHECK_LT(worst_net, 2e-3);

  double worst_lat = 0.0;
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < cfg.mlp.latent_dim; ++c) {
      const double saved = table.codes(r, c);
      table.codes(r, c) = saved + h;
      const double up = loss_at(params, table);
      table.codes(r, c) = saved - h;
      const double down = loss_at(params, table);
      table.codes(r, c) = saved;
      const double fd = (up - down) / (2 * h);
      const double err = std::abs(grads.latents(r, c) - fd) /
                         std::max({1e-3, std::abs(fd), std::abs(grads.latents(r, c))});
      worst_lat = std::max(worst_lat, err);
    }
  }
  CHECK_LT(worst_lat, 2e-3);

  SUBCASE("zero deformation weight zeroes its gradient share") {
    LossWeights off = weights;
    off.lambda_d = 0.0;
    GradAccum with_points(static_cast<int>(params.flat().size()), 2, cfg.mlp.latent_dim);
    const BatchEval ev_a =
        batch_loss_and_grad(params, table, dists, batch, weights, cfg.pieces, nullptr);
    const BatchEval ev_b =
        batch_loss_and_grad(params, table, dists, batch, off, cfg.pieces, &with_points);

    SampledBatch gated = batch;
    gated.deform_points.clear();
    gated.deformation_active = false;
    GradAccum without_points(static_cast<int>(params.flat().size()), 2, cfg.mlp.latent_dim);
    const BatchEval ev_c =
        batch_loss_and_grad(params, table, dists, gated, off, cfg.pieces, &without_points);

    CHECK_EQ(ev_b.parts.deform, ev_a.parts.deform);  // value still reported
    CHECK_EQ(ev_c.parts.deform, 0.0);
    CHECK_EQ(ev_b.total, ev_c.total);  // weight zero: same objective
    CHECK_EQ((with_points.net - without_points.net).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ((with_points.latents - without_points.latents).cwiseAbs().maxCoeff(), 0.0);
  }

  SUBCASE("non-finite parameters are reported by component") {
    NetworkParams broken = params;
    broken.flat()[0] = std::nan("");
    CHECK_THROWS_AS(batch_loss_and_grad(broken, table, dists, batch, weights, cfg.pieces, nullptr),
                    NonFiniteValue);
  }
}

TEST_CASE("training runs deterministically and matches the gated baseline") {
  TrainConfig cfg = tiny_config();
  const std::vector<PointCloud> clouds = two_cubes(120, 5);

  std::vector<EpochStats> log_a, log_b;
  const Checkpoint run_a = train(clouds, cfg, [&](const EpochStats& s) { log_a.push_back(s); });
  const Checkpoint run_b = train(clouds, cfg, [&](const EpochStats& s) { log_b.push_back(s); });

  CHECK_EQ(static_cast<int>(log_a.size()), cfg.epochs);
  CHECK_EQ(run_a.epoch, cfg.epochs);
  for (const EpochStats& s : log_a) {
    CHECK(std::isfinite(s.total));
    CHECK(std::isfinite(s.recon));
    CHECK_FALSE(s.aborted);
    CHECK_EQ(s.lambda_d, 0.001);
  }
  // loss should come down over 30 epochs at least somewhat
  CHECK_LT(log_a.back().recon, log_a.front().recon);

  CHECK_EQ((run_a.params.flat() - run_b.params.flat()).cwiseAbs().maxCoeff(), 0.0);
  CHECK_EQ((run_a.latents.codes - run_b.latents.codes).cwiseAbs().maxCoeff(), 0.0);
  CHECK_EQ(run_a.rng_state, run_b.rng_state);
  for (std::size_t i = 0; i < log_a.size(); ++i) CHECK_EQ(log_a[i].total, log_b[i].total);

  SUBCASE("different seed diverges") {
    TrainConfig other = cfg;
    other.seed = 18;
    const Checkpoint run_c = train(clouds, other);
    CHECK_GT((run_a.params.flat() - run_c.params.flat()).cwiseAbs().maxCoeff(), 0.0);
  }

  SUBCASE("zero deformation weight is bit-identical to disabling the module") {
    TrainConfig zero = cfg;
    zero.lambda_d_schedule = Schedule::constant(0.0);
    zero.deformation_enabled = true;
    std::vector<EpochStats> log_zero;
    const Checkpoint run_zero =
        train(clouds, zero, [&](const EpochStats& s) { log_zero.push_back(s); });

    TrainConfig disabled = zero;
    disabled.deformation_enabled = false;
    std::vector<EpochStats> log_disabled;
    const Checkpoint run_disabled =
        train(clouds, disabled, [&](const EpochStats& s) { log_disabled.push_back(s); });

    CHECK_EQ((run_zero.params.flat() - run_disabled.params.flat()).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ((run_zero.latents.codes - run_disabled.latents.codes).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ((run_zero.adam.m1_net - run_disabled.adam.m1_net).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ(run_zero.rng_state, run_disabled.rng_state);
    for (std::size_t i = 0; i < log_zero.size(); ++i) {
      CHECK_EQ(log_zero[i].total, log_disabled[i].total);
      CHECK_EQ(log_zero[i].deform, 0.0);
      CHECK_EQ(log_zero[i].deform_samples, 0);
    }
    // and both differ from the regularized run
    CHECK_GT((run_zero.params.flat() - run_a.params.flat()).cwiseAbs().maxCoeff(), 0.0);
  }

  SUBCASE("schedule gates when deformation work starts") {
    TrainConfig gated = cfg;
    gated.epochs = 6;
    gated.lambda_d_schedule = Schedule{{{0, 0.0}, {3, 0.5}}};
    std::vector<EpochStats> log;
    train(clouds, gated, [&](const EpochStats& s) { log.push_back(s); });
    REQUIRE_EQ(log.size(), 6);
    for (int e = 0; e < 3; ++e) {
      CHECK_EQ(log[e].lambda_d, 0.0);
      CHECK_EQ(log[e].deform_samples, 0);
    }
    for (int e = 3; e < 6; ++e) {
      CHECK_EQ(log[e].lambda_d, 0.5);
      CHECK_GT(log[e].deform_samples, 0);
    }
  }

  SUBCASE("checkpoint cadence fires mid run only") {
    TrainConfig cad = cfg;
    cad.epochs = 25;
    cad.checkpoint_every = 10;
    std::vector<std::int64_t> seen;
    train(clouds, cad, {}, [&](const Checkpoint& c) { seen.push_back(c.epoch); });
    CHECK(seen == std::vector<std::int64_t>{10, 20});
  }

  SUBCASE("too few clouds rejected") {
    CHECK_THROWS_AS(train({clouds[0]}, cfg), std::invalid_argument);
  }
}

TEST_CASE("test-time latent fitting") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 400;
  const std::vector<PointCloud> clouds = two_cubes(150, 44);
  std::vector<EpochStats> log;
  const Checkpoint ckpt = train(clouds, cfg, [&](const EpochStats& s) { log.push_back(s); });

  // reference: reconstruction quality of the trained code for shape 0
  PointCloud target = clouds[0];
  compute_sigma1(target);
  const CloudDistance dist(target);
  RngStream probe_rng(71);
  const std::vector<Vec3> probes = sample_recon_points(target, 256, cfg.sigma2, probe_rng);
  const auto recon_of = [&](const VecX& code) {
    double loss = 0.0;
    for (const Vec3& q : probes) {
      const FirstOrder fo = forward_first_order(ckpt.params, q, code);
      loss += recon_term(fo.f, fo.g, dist(q), cfg.weights.lambda_sald_grad);
    }
    return loss / probes.size();
  };
  const double trained_loss = recon_of(ckpt.latents.codes.row(0).transpose());

  FitOptions opts;
  opts.batch = 8;
  opts.seed = 91;
  const FitResult fit = fit_test_latent(ckpt, clouds[0], 400, opts);
  CHECK_FALSE(fit.diverged);
  CHECK_EQ(fit.steps_taken, 400);
  const double fitted_loss = recon_of(fit.code);
  CHECK_LT(fitted_loss, 2.0 * trained_loss + 1e-6);

  SUBCASE("zero steps returns the initial draw unchanged") {
    const FitResult none = fit_test_latent(ckpt, clouds[0], 0, opts);
    CHECK_EQ(none.steps_taken, 0);
    RngStream rng = RngStream::derived(opts.seed, 3);
    VecX init(cfg.mlp.latent_dim);
    for (int i = 0; i < cfg.mlp.latent_dim; ++i) init[i] = rng.normal(0.0, opts.latent_init_std);
    CHECK_EQ((none.code - init).cwiseAbs().maxCoeff(), 0.0);
    CHECK(std::isfinite(none.loss));
  }
  SUBCASE("same seed reproduces the code exactly") {
    const FitResult again = fit_test_latent(ckpt, clouds[0], 400, opts);
    CHECK_EQ((again.code - fit.code).cwiseAbs().maxCoeff(), 0.0);
    CHECK_EQ(again.loss, fit.loss);
  }
  SUBCASE("absurd learning rate is reported as divergence") {
    FitOptions wild = opts;
    wild.lr = 1e3;
    const FitResult blown = fit_test_latent(ckpt, clouds[0], 200, wild);
    CHECK(blown.diverged);
    CHECK_LT(blown.steps_taken, 200);
  }
  SUBCASE("bad arguments") {
    CHECK_THROWS_AS(fit_test_latent(ckpt, clouds[0], -1, opts), std::invalid_argument);
    FitOptions bad = opts;
    bad.batch = 0;
    CHECK_THROWS_AS(fit_test_latent(ckpt, clouds[0], 1, bad), std::invalid_argument);
  }
}
