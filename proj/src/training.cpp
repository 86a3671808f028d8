#include "killshape/training.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace killshape {
namespace {

// ---- config text codec ----

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_schedule(const Schedule& s) {
  std::string out;
  for (std::size_t i = 0; i < s.phases.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s.phases[i].first) + ':' + fmt_double(s.phases[i].second);
  }
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

long long parse_ll(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' has a bad integer value: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config key '" + key + "' has a bad integer value: " + v);
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  std::uint64_t out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' has a bad integer value: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config key '" + key + "' has a bad integer value: " + v);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "' has a bad number value: " + v);
  }
  if (pos != v.size())
    throw std::invalid_argument("config key '" + key + "' has a bad number value: " + v);
  return out;
}

Schedule parse_schedule(const std::string& key, const std::string& v) {
  Schedule s;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("config key '" + key + "' expects epoch:value pairs");
    s.phases.emplace_back(static_cast<int>(parse_ll(key, trim(item.substr(0, colon)))),
                          parse_double(key, trim(item.substr(colon + 1))));
  }
  return s;
}

// Pulls typed values out of parsed key=value text, recording which keys fell
// back to their defaults.
struct ConfigReader {
  std::map<std::string, std::string> kv;
  std::vector<std::string>* defaulted;

  bool take(const std::string& key, std::string& out) {
    const auto it = kv.find(key);
    if (it == kv.end()) {
      if (defaulted) defaulted->push_back(key);
      return false;
    }
    out = it->second;
    kv.erase(it);
    return true;
  }
  void get(const std::string& key, int& field) {
    std::string v;
    if (take(key, v)) field = static_cast<int>(parse_ll(key, v));
  }
  void get(const std::string& key, double& field) {
    std::string v;
    if (take(key, v)) field = parse_double(key, v);
  }
  void get(const std::string& key, std::uint64_t& field) {
    std::string v;
    if (take(key, v)) field = parse_u64(key, v);
  }
  void get(const std::string& key, bool& field) {
    std::string v;
    if (!take(key, v)) return;
    if (v == "1" || v == "true")
      field = true;
    else if (v == "0" || v == "false")
      field = false;
    else
      throw std::invalid_argument("config key '" + key + "' expects a boolean");
  }
};

// ---- binary helpers ----

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_i64(std::string& b, std::int64_t v) { put_u64(b, static_cast<std::uint64_t>(v)); }
void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }
void put_str(std::string& b, const std::string& s) {
  put_u32(b, static_cast<std::uint32_t>(s.size()));
  b += s;
}
void put_f64_array(std::string& b, const double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) put_f64(b, p[i]);
}
void put_section(std::string& out, const std::string& name, const std::string& payload) {
  put_str(out, name);
  put_u64(out, payload.size());
  out += payload;
}

struct Reader {
  const unsigned char* p = nullptr;
  const unsigned char* end = nullptr;

  std::size_t left() const { return static_cast<std::size_t>(end - p); }
  void need(std::size_t n) const {
    if (left() < n) throw FormatError("truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    return s;
  }
  void f64_array(double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f64();
  }
};

std::uint64_t expect_section(Reader& r, const std::string& name) {
  if (r.str() != name) throw FormatError("checkpoint section '" + name + "' missing");
  const std::uint64_t len = r.u64();
  r.need(len);
  return len;
}

constexpr char kMagic[4] = {'N', 'D', 'F', 'S'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (recon_batch < 1) throw std::invalid_argument("recon_batch must be at least 1");
  if (deform_batch < 1) throw std::invalid_argument("deform_batch must be at least 1");
  if (pieces < 1) throw std::invalid_argument("pieces must be at least 1");
  if (mode != InterpolationMode::Linear && mode != InterpolationMode::Spiral)
    throw std::invalid_argument("invalid interpolation mode");
  weights.validate();
  lambda_d_schedule.validate();
  mlp.validate();
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be non-negative");
  if (newton_iters < 1) throw std::invalid_argument("newton_iters must be at least 1");
  if (!std::isfinite(projection_noise) || projection_noise < 0.0)
    throw std::invalid_argument("projection_noise must be finite and non-negative");
  if (!std::isfinite(sigma2) || sigma2 <= 0.0)
    throw std::invalid_argument("sigma2 must be positive");
  if (!std::isfinite(box_margin) || box_margin < 0.0)
    throw std::invalid_argument("box_margin must be finite and non-negative");
  if (!std::isfinite(latent_init_std) || latent_init_std < 0.0)
    throw std::invalid_argument("latent_init_std must be finite and non-negative");
}

TrainConfig TrainConfig::toy_cubes() {
  TrainConfig c;
  c.pieces = 1;
  return c;
}

TrainConfig TrainConfig::toy_ellipsoids() {
  TrainConfig c;
  c.pieces = 2;
  return c;
}

TrainConfig TrainConfig::paper_preset() {
  TrainConfig c;
  c.epochs = 5000;
  c.recon_batch = 64;
  c.deform_batch = 64;
  c.pieces = 20;
  c.mlp = MlpConfig::paper_preset();
  c.lambda_d_schedule = Schedule::three_phase();
  c.mode = InterpolationMode::Spiral;
  return c;
}

std::string encode_train_config(const TrainConfig& c) {
  std::string out;
  const auto line = [&out](const std::string& key, const std::string& value) {
    out += key + " = " + value + "\n";
  };
  line("epochs", std::to_string(c.epochs));
  line("recon_batch", std::to_string(c.recon_batch));
  line("deform_batch", std::to_string(c.deform_batch));
  line("pieces", std::to_string(c.pieces));
  line("interpolation", c.mode == InterpolationMode::Spiral ? "spiral" : "linear");
  line("lambda_e", fmt_double(c.weights.lambda_e));
  line("lambda_ad", fmt_double(c.weights.lambda_ad));
  line("lambda_sald_grad", fmt_double(c.weights.lambda_sald_grad));
  line("schedule", fmt_schedule(c.lambda_d_schedule));
  line("hidden_layers", std::to_string(c.mlp.hidden_layers));
  line("hidden_width", std::to_string(c.mlp.hidden_width));
  line("latent_dim", std::to_string(c.mlp.latent_dim));
  line("skip_layer", std::to_string(c.mlp.skip_layer));
  line("softplus_beta", fmt_double(c.mlp.softplus_beta));
  line("geometric_init_radius", fmt_double(c.mlp.geometric_init_radius));
  line("seed", std::to_string(c.seed));
  line("checkpoint_every", std::to_string(c.checkpoint_every));
  line("newton_iters", std::to_string(c.newton_iters));
  line("projection_noise", fmt_double(c.projection_noise));
  line("sigma2", fmt_double(c.sigma2));
  line("box_margin", fmt_double(c.box_margin));
  line("deformation_enabled", c.deformation_enabled ? "1" : "0");
  line("latent_init_std", fmt_double(c.latent_init_std));
  return out;
}

TrainConfig decode_train_config(const std::string& text, std::vector<std::string>* defaulted) {
  ConfigReader reader;
  reader.defaulted = defaulted;
  std::stringstream ss(text);
  std::string raw_line;
  while (std::getline(ss, raw_line)) {
    const std::string stripped = trim(raw_line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line without '=': " + stripped);
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line with empty key");
    if (!reader.kv.emplace(key, value).second)
      throw std::invalid_argument("duplicate config key: " + key);
  }

  TrainConfig c;
  reader.get("epochs", c.epochs);
  reader.get("recon_batch", c.recon_batch);
  reader.get("deform_batch", c.deform_batch);
  reader.get("pieces", c.pieces);
  {
    std::string mode;
    if (reader.take("interpolation", mode)) {
      if (mode == "linear")
        c.mode = InterpolationMode::Linear;
      else if (mode == "spiral")
        c.mode = InterpolationMode::Spiral;
      else
        throw std::invalid_argument("config key 'interpolation' must be linear or spiral");
    }
  }
  reader.get("lambda_e", c.weights.lambda_e);
  reader.get("lambda_ad", c.weights.lambda_ad);
  reader.get("lambda_sald_grad", c.weights.lambda_sald_grad);
  {
    std::string sched;
    if (reader.take("schedule", sched)) c.lambda_d_schedule = parse_schedule("schedule", sched);
  }
  reader.get("hidden_layers", c.mlp.hidden_layers);
  reader.get("hidden_width", c.mlp.hidden_width);
  reader.get("latent_dim", c.mlp.latent_dim);
  reader.get("skip_layer", c.mlp.skip_layer);
  reader.get("softplus_beta", c.mlp.softplus_beta);
  reader.get("geometric_init_radius", c.mlp.geometric_init_radius);
  reader.get("seed", c.seed);
  reader.get("checkpoint_every", c.checkpoint_every);
  reader.get("newton_iters", c.newton_iters);
  reader.get("projection_noise", c.projection_noise);
  reader.get("sigma2", c.sigma2);
  reader.get("box_margin", c.box_margin);
  reader.get("deformation_enabled", c.deformation_enabled);
  reader.get("latent_init_std", c.latent_init_std);

  if (!reader.kv.empty())
    throw std::invalid_argument("unknown config key: " + reader.kv.begin()->first);
  c.validate();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, ckpt.version);

  put_section(out, "config", encode_train_config(ckpt.config));

  std::string net;
  const auto& tensors = ckpt.params.tensors();
  put_u32(net, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_str(net, t.name);
    put_u32(net, static_cast<std::uint32_t>(t.rows));
    put_u32(net, static_cast<std::uint32_t>(t.cols));
    put_f64_array(net, ckpt.params.flat().data() + t.offset,
                  static_cast<std::size_t>(t.rows) * t.cols);
  }
  put_section(out, "net", net);

  std::string lat;
  put_u32(lat, static_cast<std::uint32_t>(ckpt.latents.count()));
  put_u32(lat, static_cast<std::uint32_t>(ckpt.latents.dim()));
  for (const std::string& id : ckpt.latents.ids) put_str(lat, id);
  put_f64_array(lat, ckpt.latents.codes.data(), ckpt.latents.codes.size());
  put_section(out, "latents", lat);

  std::string adam;
  put_f64(adam, ckpt.adam.lr_net);
  put_f64(adam, ckpt.adam.lr_latent);
  put_f64(adam, ckpt.adam.beta1);
  put_f64(adam, ckpt.adam.beta2);
  put_f64(adam, ckpt.adam.eps);
  put_i64(adam, ckpt.adam.step);
  put_u64(adam, static_cast<std::uint64_t>(ckpt.adam.m1_net.size()));
  put_f64_array(adam, ckpt.adam.m1_net.data(), ckpt.adam.m1_net.size());
  put_f64_array(adam, ckpt.adam.m2_net.data(), ckpt.adam.m2_net.size());
  put_u32(adam, static_cast<std::uint32_t>(ckpt.adam.m1_lat.rows()));
  put_u32(adam, static_cast<std::uint32_t>(ckpt.adam.m1_lat.cols()));
  put_f64_array(adam, ckpt.adam.m1_lat.data(), ckpt.adam.m1_lat.size());
  put_f64_array(adam, ckpt.adam.m2_lat.data(), ckpt.adam.m2_lat.size());
  put_section(out, "adam", adam);

  std::string state;
  put_i64(state, ckpt.epoch);
  put_str(state, ckpt.rng_state);
  put_section(out, "state", state);

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open checkpoint: " + path);
  std::ostringstream buf;
  buf << file.rdbuf();
  const std::string bytes = buf.str();

  Reader r;
  r.p = reinterpret_cast<const unsigned char*>(bytes.data());
  r.end = r.p + bytes.size();

  if (r.left() < 4 || std::memcmp(r.p, kMagic, 4) != 0)
    throw VersionError("not a checkpoint file (bad magic)");
  r.p += 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(version));

  const std::uint64_t cfg_len = expect_section(r, "config");
  const std::string config_text(reinterpret_cast<const char*>(r.p), cfg_len);
  r.p += cfg_len;
  TrainConfig config;
  try {
    config = decode_train_config(config_text);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }

  Checkpoint ckpt(config);

  {
    const std::uint64_t len = expect_section(r, "net");
    const unsigned char* start = r.p;
    const std::uint32_t count = r.u32();
    const auto& tensors = ckpt.params.tensors();
    if (count != tensors.size()) throw FormatError("checkpoint tensor count mismatch");
    for (const auto& t : tensors) {
      if (r.str() != t.name) throw FormatError("checkpoint tensor name mismatch");
      if (r.u32() != static_cast<std::uint32_t>(t.rows) ||
          r.u32() != static_cast<std::uint32_t>(t.cols))
        throw FormatError("checkpoint tensor shape mismatch");
      r.f64_array(ckpt.params.flat().data() + t.offset, static_cast<std::size_t>(t.rows) * t.cols);
    }
    if (r.p != start + len) throw FormatError("checkpoint net section size mismatch");
  }

  {
    const std::uint64_t len = expect_section(r, "latents");
    const unsigned char* start = r.p;
    const std::uint32_t count = r.u32();
    const std::uint32_t dim = r.u32();
    if (dim != static_cast<std::uint32_t>(config.mlp.latent_dim))
      throw FormatError("checkpoint latent dimension mismatch");
    ckpt.latents.codes.resize(count, dim);
    ckpt.latents.ids.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) ckpt.latents.ids[i] = r.str();
    r.f64_array(ckpt.latents.codes.data(), ckpt.latents.codes.size());
    if (r.p != start + len) throw FormatError("checkpoint latents section size mismatch");
  }

  {
    const std::uint64_t len = expect_section(r, "adam");
    const unsigned char* start = r.p;
    ckpt.adam.lr_net = r.f64();
    ckpt.adam.lr_latent = r.f64();
    ckpt.adam.beta1 = r.f64();
    ckpt.adam.beta2 = r.f64();
    ckpt.adam.eps = r.f64();
    ckpt.adam.step = r.i64();
    const std::uint64_t n_net = r.u64();
    if (n_net != static_cast<std::uint64_t>(ckpt.params.flat().size()))
      throw FormatError("checkpoint optimizer state size mismatch");
    ckpt.adam.m1_net.resize(static_cast<Eigen::Index>(n_net));
    ckpt.adam.m2_net.resize(static_cast<Eigen::Index>(n_net));
    r.f64_array(ckpt.adam.m1_net.data(), n_net);
    r.f64_array(ckpt.adam.m2_net.data(), n_net);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows != static_cast<std::uint32_t>(ckpt.latents.count()) ||
        cols != static_cast<std::uint32_t>(ckpt.latents.dim()))
      throw FormatError("checkpoint optimizer latent state mismatch");
    ckpt.adam.m1_lat.resize(rows, cols);
    ckpt.adam.m2_lat.resize(rows, cols);
    r.f64_array(ckpt.adam.m1_lat.data(), ckpt.adam.m1_lat.size());
    r.f64_array(ckpt.adam.m2_lat.data(), ckpt.adam.m2_lat.size());
    if (r.p != start + len) throw FormatError("checkpoint adam section size mismatch");
  }

  {
    const std::uint64_t len = expect_section(r, "state");
    const unsigned char* start = r.p;
    ckpt.epoch = r.i64();
    ckpt.rng_state = r.str();
    if (r.p != start + len) throw FormatError("checkpoint state section size mismatch");
  }

  if (r.p != r.end) throw FormatError("trailing bytes in checkpoint");
  return ckpt;
}

SampledBatch sample_batch(const NetworkParams& params, const LatentTable& table,
                          const std::vector<PointCloud>& clouds, const TrainConfig& config,
                          const Box& box, bool deformation_active, RngStream& recon_rng,
                          RngStream& path_rng, RngStream& proj_rng, RngStream& eikonal_rng) {
  SampledBatch batch;
  batch.deformation_active = deformation_active;

  for (std::size_t shape = 0; shape < clouds.size(); ++shape) {
    const std::vector<Vec3> qs =
        sample_recon_points(clouds[shape], config.recon_batch, config.sigma2, recon_rng);
    for (const Vec3& q : qs) {
      batch.recon_queries.push_back(q);
      batch.recon_shape.push_back(static_cast<int>(shape));
    }
  }

  for (int j = 0; j < config.deform_batch; ++j) {
    LatentPathSample sample;
    try {
      sample = sample_latent_path(table, path_rng);
    } catch (const ZeroSpeed&) {
      ++batch.paths_rejected;
      continue;
    }
    const int path_index = static_cast<int>(batch.paths.size());
    batch.paths.push_back({sample.i1, sample.i2, sample.t});
    batch.eikonal_points.push_back(eikonal_rng.uniform_box(box.lo, box.hi));

    if (deformation_active) {
      const Vec3 seed = proj_rng.uniform_box(box.lo, box.hi);
      try {
        int dropped = 0;
        const std::vector<Vec3> projected =
            project_to_levelset(params, sample.z, {seed}, config.newton_iters,
                                config.projection_noise, proj_rng, &dropped);
        batch.projection_dropped += dropped;
        batch.deform_points.emplace_back(path_index, projected.front());
      } catch (const NoValidSamples&) {
        ++batch.projection_dropped;
      }
    }
  }
  return batch;
}

BatchEval batch_loss_and_grad(const NetworkParams& params, const LatentTable& table,
                              const std::vector<CloudDistance>& dists, const SampledBatch& batch,
                              const LossWeights& weights, int pieces, GradAccum* grads) {
  weights.validate();
  BatchEval ev;
  const int latent_dim = table.dim();
  VecX z_bar(latent_dim), eta_bar(latent_dim), z1_bar(latent_dim), z2_bar(latent_dim);

  // reconstruction
  if (!batch.recon_queries.empty()) {
    if (batch.recon_queries.size() != batch.recon_shape.size())
      throw SizeMismatch("batch queries and shape indices differ in length");
    const double inv_b = 1.0 / static_cast<double>(batch.recon_queries.size());
    double total = 0.0;
    for (std::size_t i = 0; i < batch.recon_queries.size(); ++i) {
      const int shape = batch.recon_shape[i];
      if (shape < 0 || shape >= static_cast<int>(dists.size()))
        throw std::out_of_range("batch shape index out of range");
      const VecX z = table.codes.row(shape).transpose();
      ForwardTrace trace;
      const FirstOrder fo = forward_first_order(params, batch.recon_queries[i], z, &trace);
      const DistanceQuery dq = dists[shape](batch.recon_queries[i]);
      ReconAdjoint adj;
      total += recon_term(fo.f, fo.g, dq, weights.lambda_sald_grad, grads ? &adj : nullptr, inv_b);
      if (grads) {
        BundleAdjoint seed;
        seed.f = adj.f;
        seed.g = adj.g;
        z_bar.setZero();
        backward_f(params, trace, seed, grads->net, nullptr, &z_bar);
        grads->latents.row(shape) += z_bar.transpose();
      }
    }
    ev.parts.recon = total * inv_b;
  }

  // eikonal at the interpolated codes
  if (!batch.paths.empty()) {
    if (batch.eikonal_points.size() != batch.paths.size())
      throw SizeMismatch("eikonal points must align with path draws");
    const double inv_n = 1.0 / static_cast<double>(batch.paths.size());
    double total = 0.0;
    for (std::size_t j = 0; j < batch.paths.size(); ++j) {
      const PathDraw& path = batch.paths[j];
      const VecX z1 = table.codes.row(path.i1).transpose();
      const VecX z2 = table.codes.row(path.i2).transpose();
      const VecX z = interpolate_linear(z1, z2, path.t);
      ForwardTrace trace;
      const FirstOrder fo = forward_first_order(params, batch.eikonal_points[j], z, &trace);
      Vec3 g_bar = Vec3::Zero();
      total += eikonal_term(fo.g, grads ? &g_bar : nullptr, weights.lambda_e * inv_n);
      if (grads) {
        BundleAdjoint seed;
        seed.g = g_bar;
        z_bar.setZero();
        backward_f(params, trace, seed, grads->net, nullptr, &z_bar);
        z1_bar.setZero();
        z2_bar.setZero();
        latent_path_vjp(z1, z2, path.t, z_bar, VecX::Zero(latent_dim), z1_bar, z2_bar);
        grads->latents.row(path.i1) += z1_bar.transpose();
        grads->latents.row(path.i2) += z2_bar.transpose();
      }
    }
    ev.parts.eikonal = total * inv_n;
  }

  // deformation at projected surface points, fields solved then frozen
  if (batch.deformation_active && !batch.deform_points.empty()) {
    std::vector<DeformationSample> samples;
    std::vector<ForwardTrace> traces(batch.deform_points.size());
    std::vector<PTrace> ptraces(batch.deform_points.size());
    samples.reserve(batch.deform_points.size());
    for (std::size_t j = 0; j < batch.deform_points.size(); ++j) {
      const auto& [path_index, x] = batch.deform_points[j];
      const PathDraw& path = batch.paths[path_index];
      const VecX z1 = table.codes.row(path.i1).transpose();
      const VecX z2 = table.codes.row(path.i2).transpose();
      DeformationSample sample;
      sample.z = interpolate_linear(z1, z2, path.t);
      sample.eta = latent_speed(z1, z2, path.t, InterpolationMode::Linear);
      sample.x = x;
      sample.bundle = derivative_bundle(params, x, sample.z, sample.eta, &traces[j]);
      sample.probs = forward_p(params, x, sample.z, &ptraces[j]);
      samples.push_back(std::move(sample));
    }
    try {
      const std::vector<AffineField> fields = solve_affine_fields(samples, pieces);
      std::vector<SampleAdjoint> adjoints;
      ev.parts.deform =
          deformation_loss(samples, fields, pieces, grads ? &adjoints : nullptr, weights.lambda_d);
      for (const DeformationSample& s : samples)
        if (!s.degenerate()) ++ev.deform_samples;
      if (grads) {
        for (std::size_t j = 0; j < samples.size(); ++j) {
          if (samples[j].degenerate()) continue;
          const PathDraw& path = batch.paths[batch.deform_points[j].first];
          const VecX z1 = table.codes.row(path.i1).transpose();
          const VecX z2 = table.codes.row(path.i2).transpose();
          z_bar.setZero();
          eta_bar.setZero();
          backward_f(params, traces[j], adjoints[j].bundle, grads->net, nullptr, &z_bar, &eta_bar);
          backward_p(params, ptraces[j], adjoints[j].probs, grads->net, nullptr, &z_bar);
          z1_bar.setZero();
          z2_bar.setZero();
          latent_path_vjp(z1, z2, path.t, z_bar, eta_bar, z1_bar, z2_bar);
          grads->latents.row(path.i1) += z1_bar.transpose();
          grads->latents.row(path.i2) += z2_bar.transpose();
        }
      }
    } catch (const NoValidSamples&) {
      ev.parts.deform = 0.0;
      ev.deform_skipped = true;
    }
  } else if (batch.deformation_active) {
    ev.deform_skipped = true;
  }

  // code regularizer
  ev.parts.ad = ad_reg(table);
  if (grads)
    grads->latents += (2.0 * weights.lambda_ad / table.count()) * table.codes;

  ev.total = total_loss(ev.parts, weights);
  return ev;
}

Checkpoint train(const std::vector<PointCloud>& clouds, const TrainConfig& config,
                 const ProgressSink& progress, const CheckpointSink& on_checkpoint) {
  config.validate();
  if (clouds.size() < 2) throw std::invalid_argument("training needs at least two point clouds");

  std::vector<PointCloud> owned = clouds;
  for (PointCloud& cloud : owned) {
    cloud.validate();
    if (!cloud.has_sigma1()) compute_sigma1(cloud);
  }
  const Box box = bounding_box(owned, config.box_margin);
  std::vector<CloudDistance> dists;
  dists.reserve(owned.size());
  for (const PointCloud& cloud : owned) dists.emplace_back(cloud);

  const int shape_count = static_cast<int>(owned.size());
  const int latent_dim = config.mlp.latent_dim;

  RngStream net_rng = RngStream::derived(config.seed, 1);
  RngStream latent_rng = RngStream::derived(config.seed, 2);
  RngStream master = RngStream::derived(config.seed, 0);

  Checkpoint ckpt(config);
  ckpt.params = geometric_init(config.mlp, config.pieces, net_rng);
  ckpt.latents = LatentTable::random(shape_count, latent_dim, config.latent_init_std, latent_rng);
  ckpt.adam = AdamState(static_cast<int>(ckpt.params.flat().size()), shape_count, latent_dim);
  ckpt.rng_state = master.serialize();

  Checkpoint last_good = ckpt;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::uint64_t key = master.raw();
    RngStream recon_rng = RngStream::derived(key, 0);
    RngStream path_rng = RngStream::derived(key, 1);
    RngStream proj_rng = RngStream::derived(key, 2);
    RngStream eik_rng = RngStream::derived(key, 3);

    const double lambda_d = schedule_lambda_d(config.lambda_d_schedule, epoch);
    const bool active = config.deformation_enabled && lambda_d > 0.0;
    const SampledBatch batch = sample_batch(ckpt.params, ckpt.latents, owned, config, box, active,
                                            recon_rng, path_rng, proj_rng, eik_rng);
    LossWeights weights = config.weights;
    weights.lambda_d = lambda_d;

    EpochStats stats;
    stats.epoch = epoch;
    stats.lambda_d = lambda_d;
    stats.paths_rejected = batch.paths_rejected;
    stats.projection_dropped = batch.projection_dropped;

    GradAccum grads(static_cast<int>(ckpt.params.flat().size()), shape_count, latent_dim);
    bool ok = true;
    try {
      const BatchEval ev =
          batch_loss_and_grad(ckpt.params, ckpt.latents, dists, batch, weights, config.pieces, &grads);
      stats.recon = ev.parts.recon;
      stats.deform = ev.parts.deform;
      stats.eikonal = ev.parts.eikonal;
      stats.ad = ev.parts.ad;
      stats.total = ev.total;
      stats.deform_samples = ev.deform_samples;
      stats.deform_skipped = ev.deform_skipped;
      ok = adam_step(ckpt.adam, ckpt.params, ckpt.latents.codes, grads);
    } catch (const NonFiniteValue&) {
      ok = false;
    }
    if (!ok) {
      stats.aborted = true;
      if (progress) progress(stats);
      return last_good;
    }

    ckpt.epoch = epoch + 1;
    ckpt.rng_state = master.serialize();
    last_good = ckpt;
    if (progress) progress(stats);
    if (on_checkpoint && config.checkpoint_every > 0 &&
        (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs)
      on_checkpoint(ckpt);
  }
  return ckpt;
}

FitResult fit_test_latent(const Checkpoint& ckpt, const PointCloud& cloud, int steps,
                          const FitOptions& options) {
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (options.batch < 1) throw std::invalid_argument("fit batch must be at least 1");
  if (!std::isfinite(options.lr) || options.lr <= 0.0)
    throw std::invalid_argument("fit learning rate must be positive");

  PointCloud owned = cloud;
  owned.validate();
  if (!owned.has_sigma1()) compute_sigma1(owned);
  const CloudDistance dist(owned);

  const int latent_dim = ckpt.config.mlp.latent_dim;
  RngStream rng = RngStream::derived(options.seed, 3);

  VecX z(latent_dim);
  for (int i = 0; i < latent_dim; ++i) z[i] = rng.normal(0.0, options.latent_init_std);
  VecX m1 = VecX::Zero(latent_dim), m2 = VecX::Zero(latent_dim);
  VecX scratch_net = VecX::Zero(ckpt.params.flat().size());
  VecX z_grad(latent_dim);

  const auto eval = [&](const VecX& code, VecX* grad) {
    const std::vector<Vec3> qs = sample_recon_points(owned, options.batch, options.sigma2, rng);
    if (grad) grad->setZero();
    scratch_net.setZero();
    const double inv_b = 1.0 / static_cast<double>(qs.size());
    double loss = 0.0;
    for (const Vec3& q : qs) {
      ForwardTrace trace;
      const FirstOrder fo = forward_first_order(ckpt.params, q, code, &trace);
      ReconAdjoint adj;
      loss += recon_term(fo.f, fo.g, dist(q), ckpt.config.weights.lambda_sald_grad,
                         grad ? &adj : nullptr, inv_b);
      if (grad) {
        BundleAdjoint seed;
        seed.f = adj.f;
        seed.g = adj.g;
        backward_f(ckpt.params, trace, seed, scratch_net, nullptr, grad);
      }
    }
    loss *= inv_b;
    if (options.include_code_penalty) {
      loss += ckpt.config.weights.lambda_ad * code.squaredNorm();
      if (grad) *grad += 2.0 * ckpt.config.weights.lambda_ad * code;
    }
    return loss;
  };

  FitResult result;
  double init_loss = -1.0;
  std::int64_t step = 0;
  for (int s = 0; s < steps; ++s) {
    const double loss = eval(z, &z_grad);
    if (s == 0) init_loss = loss;
    if (!std::isfinite(loss) || !z_grad.allFinite() ||
        (init_loss > 0.0 && loss > 10.0 * init_loss)) {
      result.diverged = true;
      break;
    }
    adam_update(options.lr, 0.9, 0.999, 1e-8, ++step, z.data(), z_grad.data(), m1.data(),
                m2.data(), latent_dim);
    result.steps_taken = s + 1;
  }
  result.code = z;
  result.loss = eval(z, nullptr);
  return result;
}

}  // namespace killshape
