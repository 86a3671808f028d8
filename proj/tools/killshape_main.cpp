// killshape: data generation, training, reconstruction, interpolation,
// evaluation, and mesh export for the deformation-regularized shape space.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "killshape/deformation.hpp"
#include "killshape/evaluation.hpp"
#include "killshape/shapespace.hpp"
#include "killshape/training.hpp"

namespace fs = std::filesystem;
using namespace killshape;

namespace {

// Argument combinations CLI11 cannot express (e.g. --run XOR --checkpoint);
// mapped to the usage exit code.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// config files: "key = value" lines grouped under [train] / [toy] / [eval]

struct ConfigFile {
  std::map<std::string, std::string> sections;
};

std::string trimmed(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

ConfigFile read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file " + path);
  ConfigFile file;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trimmed(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::invalid_argument("bad section header at line " + std::to_string(lineno));
      section = trimmed(t.substr(1, t.size() - 2));
      if (section != "train" && section != "toy" && section != "eval")
        throw std::invalid_argument("unknown config section [" + section + "]");
      file.sections.try_emplace(section);
      continue;
    }
    if (section.empty())
      throw std::invalid_argument("key outside any section at line " + std::to_string(lineno));
    file.sections[section] += t + "\n";
  }
  return file;
}

std::string section_or_empty(const std::optional<ConfigFile>& file, const std::string& name) {
  if (!file) return {};
  const auto it = file->sections.find(name);
  return it == file->sections.end() ? std::string{} : it->second;
}

// key = value parsing for the small [toy] and [eval] sections
std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trimmed(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("expected key = value: " + t);
    const std::string key = trimmed(t.substr(0, eq));
    if (kv.count(key)) throw std::invalid_argument("duplicate key " + key);
    kv[key] = trimmed(t.substr(eq + 1));
  }
  return kv;
}

long long to_ll(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad integer for " + key + ": " + value);
  }
  if (pos != value.size()) throw std::invalid_argument("bad integer for " + key + ": " + value);
  return v;
}

double to_double(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad number for " + key + ": " + value);
  }
  if (pos != value.size()) throw std::invalid_argument("bad number for " + key + ": " + value);
  return v;
}

void reject_unknown(const std::map<std::string, std::string>& kv,
                    std::initializer_list<const char*> allowed, const std::string& section) {
  for (const auto& [key, value] : kv) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw std::invalid_argument("unknown key in [" + section + "]: " + key);
  }
}

ToySpec decode_toy_section(const std::string& text) {
  ToySpec spec;
  const auto kv = parse_kv(text);
  reject_unknown(kv, {"kind", "count", "samples_per_shape", "seed"}, "toy");
  for (const char* key : {"kind", "count", "samples_per_shape", "seed"})
    if (!kv.count(key)) std::cerr << "note: toy." << key << " defaulted\n";
  if (kv.count("kind")) {
    const std::string& k = kv.at("kind");
    if (k == "cubes")
      spec.kind = ToyKind::Cubes;
    else if (k == "ellipsoids")
      spec.kind = ToyKind::EllipsoidFigures;
    else
      throw std::invalid_argument("unknown toy kind: " + k);
  }
  if (kv.count("count")) spec.count = static_cast<int>(to_ll("count", kv.at("count")));
  if (kv.count("samples_per_shape"))
    spec.samples_per_shape = static_cast<int>(to_ll("samples_per_shape", kv.at("samples_per_shape")));
  if (kv.count("seed"))
    spec.rng_seed = static_cast<std::uint64_t>(to_ll("seed", kv.at("seed")));
  return spec;
}

struct EvalSettings {
  ReportOptions report;
  int steps = 5;
  std::string mode = "auto";  // auto = the checkpoint's stored preference
};

EvalSettings decode_eval_section(const std::string& text) {
  EvalSettings s;
  const auto kv = parse_kv(text);
  reject_unknown(kv, {"resolution", "samples", "killing_samples", "steps", "mode", "iso", "seed"},
                 "eval");
  for (const char* key : {"resolution", "samples", "killing_samples", "steps", "mode", "iso", "seed"})
    if (!kv.count(key)) std::cerr << "note: eval." << key << " defaulted\n";
  if (kv.count("resolution")) s.report.resolution = static_cast<int>(to_ll("resolution", kv.at("resolution")));
  if (kv.count("samples")) s.report.samples = static_cast<int>(to_ll("samples", kv.at("samples")));
  if (kv.count("killing_samples"))
    s.report.killing_samples = static_cast<int>(to_ll("killing_samples", kv.at("killing_samples")));
  if (kv.count("iso")) s.report.iso = to_double("iso", kv.at("iso"));
  if (kv.count("seed")) s.report.seed = static_cast<std::uint64_t>(to_ll("seed", kv.at("seed")));
  if (kv.count("steps")) s.steps = static_cast<int>(to_ll("steps", kv.at("steps")));
  if (kv.count("mode")) {
    s.mode = kv.at("mode");
    if (s.mode != "linear" && s.mode != "spiral" && s.mode != "auto")
      throw std::invalid_argument("unknown mode: " + s.mode);
  }
  return s;
}

// ---------------------------------------------------------------------------
// shared io helpers

PointCloud read_cloud_file(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".ply") return read_ply(path);
  if (ext == ".xyz") return read_xyz(path);
  throw std::runtime_error("unsupported point format (want .ply or .xyz): " + path);
}

std::vector<std::string> list_cloud_files(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".ply" || ext == ".xyz") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .ply or .xyz files in " + dir);
  return files;
}

void write_box(const Box& box, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g %.17g %.17g %.17g\n", box.lo.x(), box.lo.y(),
                box.lo.z(), box.hi.x(), box.hi.y(), box.hi.z());
  out << buf;
}

Box read_box(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read box file " + path);
  Box box;
  if (!(in >> box.lo.x() >> box.lo.y() >> box.lo.z() >> box.hi.x() >> box.hi.y() >> box.hi.z()))
    throw std::runtime_error("malformed box file " + path);
  return box;
}

Box parse_box_arg(const std::vector<double>& v) {
  Box box;
  box.lo = Vec3(v[0], v[1], v[2]);
  box.hi = Vec3(v[3], v[4], v[5]);
  if ((box.extent().array() <= 0).any()) throw std::runtime_error("box extents must be positive");
  return box;
}

InterpolationMode parse_mode(const std::string& name, const Checkpoint& ckpt) {
  if (name == "linear") return InterpolationMode::Linear;
  if (name == "spiral") return InterpolationMode::Spiral;
  return ckpt.config.mode;  // "auto"
}

// A run directory bundles checkpoint.ndfs and box.txt.
struct ModelRef {
  std::string run_dir;
  std::string checkpoint_path;
  std::vector<double> box_arg;

  Checkpoint load() const {
    const std::string path =
        !checkpoint_path.empty() ? checkpoint_path : run_dir + "/checkpoint.ndfs";
    return load_checkpoint(path);
  }
  Box box() const {
    if (!box_arg.empty()) return parse_box_arg(box_arg);
    if (!run_dir.empty()) return read_box(run_dir + "/box.txt");
    throw std::runtime_error("need --run or --box to locate the shape volume");
  }
  void add_options(CLI::App* cmd) {
    cmd->add_option("--run", run_dir, "run directory holding checkpoint.ndfs and box.txt");
    cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file (overrides --run)");
    cmd->add_option("--box", box_arg, "shape volume as x0 y0 z0 x1 y1 z1 (overrides box.txt)")
        ->expected(6);
  }
  void require_some(const CLI::App* cmd) const {
    if (run_dir.empty() && checkpoint_path.empty())
      throw UsageError(cmd->get_name() + " needs --run or --checkpoint");
  }
};

std::string index_name(const std::string& prefix, int index, const std::string& ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%03d%s", prefix.c_str(), index, ext.c_str());
  return buf;
}

// ---------------------------------------------------------------------------
// subcommands

struct GenToyArgs {
  std::string out, config, kind = "cubes";
  int count = 12, samples = 2000;
  std::uint64_t seed = 0;
};

int run_gen_toy(const GenToyArgs& args, const CLI::App* cmd) {
  ToySpec spec;
  if (!args.config.empty())
    spec = decode_toy_section(section_or_empty(read_config_file(args.config), "toy"));
  if (cmd->count("--kind")) {
    if (args.kind == "cubes")
      spec.kind = ToyKind::Cubes;
    else
      spec.kind = ToyKind::EllipsoidFigures;
  }
  if (cmd->count("--count")) spec.count = args.count;
  if (cmd->count("--samples")) spec.samples_per_shape = args.samples;
  if (cmd->count("--seed")) spec.rng_seed = args.seed;

  const std::vector<PointCloud> clouds = generate_toy(spec);
  fs::create_directories(args.out);
  for (std::size_t i = 0; i < clouds.size(); ++i)
    write_ply(clouds[i], args.out + "/" + index_name("shape_", static_cast<int>(i), ".ply"));
  std::cout << "wrote " << clouds.size() << " point clouds to " << args.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, out, config, preset;
  int epochs = 0, checkpoint_every = -1;
  std::uint64_t seed = 0;
  double lambda_d = -1.0;
  bool disable_deformation = false;
};

std::string stats_csv_header() {
  return "epoch,lambda_d,recon,deform,eikonal,ad,total,deform_samples,deform_skipped,"
         "paths_rejected,projection_dropped,aborted\n";
}

std::string stats_csv_row(const EpochStats& s) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%d,%d,%d\n",
                static_cast<long long>(s.epoch), s.lambda_d, s.recon, s.deform, s.eikonal, s.ad,
                s.total, s.deform_samples, s.deform_skipped ? 1 : 0, s.paths_rejected,
                s.projection_dropped, s.aborted ? 1 : 0);
  return buf;
}

int run_train(const TrainArgs& args, const CLI::App* cmd) {
  TrainConfig config;
  if (!args.preset.empty() && !args.config.empty())
    throw std::runtime_error("--preset and --config both name a base config; choose one");
  if (!args.preset.empty()) {
    if (args.preset == "toy-cubes")
      config = TrainConfig::toy_cubes();
    else if (args.preset == "toy-ellipsoids")
      config = TrainConfig::toy_ellipsoids();
    else
      config = TrainConfig::paper_preset();
  } else if (!args.config.empty()) {
    std::vector<std::string> defaulted;
    config = decode_train_config(section_or_empty(read_config_file(args.config), "train"),
                                 &defaulted);
    for (const std::string& key : defaulted) std::cerr << "note: train." << key << " defaulted\n";
  }
  if (cmd->count("--epochs")) config.epochs = args.epochs;
  if (cmd->count("--seed")) config.seed = args.seed;
  if (cmd->count("--checkpoint-every")) config.checkpoint_every = args.checkpoint_every;
  if (cmd->count("--lambda-d")) config.lambda_d_schedule = Schedule::constant(args.lambda_d);
  if (args.disable_deformation) config.deformation_enabled = false;
  config.validate();

  const std::vector<std::string> files = list_cloud_files(args.data);
  std::vector<PointCloud> clouds;
  for (const std::string& f : files) clouds.push_back(read_cloud_file(f));

  fs::create_directories(args.out);
  {
    std::ofstream cfg_out(args.out + "/config.cfg", std::ios::trunc);
    cfg_out << "[train]\n" << encode_train_config(config);
    std::ofstream shapes(args.out + "/shapes.csv", std::ios::trunc);
    shapes << "index,file\n";
    for (std::size_t i = 0; i < files.size(); ++i)
      shapes << i << "," << fs::path(files[i]).filename().string() << "\n";
  }
  write_box(bounding_box(clouds, config.box_margin), args.out + "/box.txt");

  std::ofstream log(args.out + "/training_log.csv", std::ios::trunc);
  log << stats_csv_header();
  const std::int64_t print_every = std::max<std::int64_t>(1, config.epochs / 20);
  bool aborted = false;
  const auto progress = [&](const EpochStats& s) {
    log << stats_csv_row(s);
    aborted = aborted || s.aborted;
    if (s.aborted || s.epoch % print_every == 0 || s.epoch + 1 == config.epochs)
      std::cout << "epoch " << s.epoch << "  total " << s.total << "  recon " << s.recon
                << "  deform " << s.deform << "  eikonal " << s.eikonal << "\n";
  };
  const auto on_checkpoint = [&](const Checkpoint& c) {
    save_checkpoint(c, args.out + "/" + index_name("checkpoint_", static_cast<int>(c.epoch), ".ndfs"));
  };

  const Checkpoint trained = train(clouds, config, progress, on_checkpoint);
  save_checkpoint(trained, args.out + "/checkpoint.ndfs");
  log.flush();
  if (aborted) {
    std::cerr << "training aborted on a non-finite loss; last good checkpoint saved at epoch "
              << trained.epoch << "\n";
    return 2;
  }
  std::cout << "trained " << trained.epoch << " epochs; checkpoint at " << args.out
            << "/checkpoint.ndfs\n";
  return 0;
}

struct FitArgs {
  ModelRef model;
  std::string cloud, out;
  int steps = 400;
  FitOptions options;
};

int run_fit(const FitArgs& args) {
  const Checkpoint ckpt = args.model.load();
  const PointCloud cloud = read_cloud_file(args.cloud);
  const FitResult result = fit_test_latent(ckpt, cloud, args.steps, args.options);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "loss %.17g diverged %d steps %d\n", result.loss,
                result.diverged ? 1 : 0, result.steps_taken);
  std::cout << buf;
  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + args.out);
    for (Eigen::Index i = 0; i < result.code.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g\n", result.code[i]);
      out << buf;
    }
  }
  return 0;
}

struct InterpolateArgs {
  ModelRef model;
  std::string out, config;
  std::vector<int> pair;
  EvalSettings settings;
  bool no_colors = false;
};

int run_interpolate(const InterpolateArgs& args, const CLI::App* cmd) {
  EvalSettings settings;
  if (!args.config.empty())
    settings = decode_eval_section(section_or_empty(read_config_file(args.config), "eval"));
  if (cmd->count("--resolution")) settings.report.resolution = args.settings.report.resolution;
  if (cmd->count("--samples")) settings.report.samples = args.settings.report.samples;
  if (cmd->count("--killing-samples"))
    settings.report.killing_samples = args.settings.report.killing_samples;
  if (cmd->count("--iso")) settings.report.iso = args.settings.report.iso;
  if (cmd->count("--seed")) settings.report.seed = args.settings.report.seed;
  if (cmd->count("--steps")) settings.steps = args.settings.steps;
  if (cmd->count("--mode")) settings.mode = args.settings.mode;

  const Checkpoint ckpt = args.model.load();
  const Box box = args.model.box();
  const InterpolationMode mode = parse_mode(settings.mode, ckpt);
  const int a = args.pair[0], b = args.pair[1];
  if (a < 0 || b < 0 || a >= ckpt.latents.count() || b >= ckpt.latents.count())
    throw std::out_of_range("pair index out of range (checkpoint has " +
                            std::to_string(ckpt.latents.count()) + " shapes)");

  fs::create_directories(args.out);
  const std::string stem = "interp_" + std::to_string(a) + "_" + std::to_string(b);
  const VecX z1 = ckpt.latents.codes.row(a).transpose();
  const VecX z2 = ckpt.latents.codes.row(b).transpose();
  for (int s = 0; s <= settings.steps + 1; ++s) {
    const double t = static_cast<double>(s) / (settings.steps + 1);
    const VecX z = (mode == InterpolationMode::Spiral) ? interpolate_spiral(z1, z2, t)
                                                       : interpolate_linear(z1, z2, t);
    const TriangleMesh mesh = extract_mesh(ckpt.params, z, box, settings.report.resolution,
                                           settings.report.iso, !args.no_colors);
    write_obj(mesh, args.out + "/" + index_name(stem + "_t", s, ".obj"));
  }
  const std::vector<ReportRow> rows =
      interpolation_report(ckpt, box, {{a, b}}, settings.steps, mode, settings.report);
  write_report_csv(rows, args.out + "/" + stem + ".csv");
  std::cout << "wrote " << settings.steps + 2 << " meshes and " << stem << ".csv to " << args.out
            << "\n";
  return 0;
}

struct EvalArgs {
  ModelRef model;
  std::string data, out, config;
  ReportOptions options;
  int wasserstein_samples = 256;
};

int run_eval(const EvalArgs& args, const CLI::App* cmd) {
  EvalSettings settings;
  if (!args.config.empty())
    settings = decode_eval_section(section_or_empty(read_config_file(args.config), "eval"));
  if (cmd->count("--resolution")) settings.report.resolution = args.options.resolution;
  if (cmd->count("--samples")) settings.report.samples = args.options.samples;
  if (cmd->count("--seed")) settings.report.seed = args.options.seed;

  const Checkpoint ckpt = args.model.load();
  const Box box = args.model.box();
  const std::vector<std::string> files = list_cloud_files(args.data);
  if (static_cast<int>(files.size()) != ckpt.latents.count())
    throw std::runtime_error("data directory holds " + std::to_string(files.size()) +
                             " shapes but the checkpoint has " +
                             std::to_string(ckpt.latents.count()) + " codes");

  const auto stride_sample = [](const PointCloud& cloud, int m) {
    PointCloud out;
    const int n = static_cast<int>(cloud.points.size());
    for (int i = 0; i < m; ++i)
      out.points.push_back(cloud.points[static_cast<std::size_t>(i) * n / m]);
    return out;
  };

  std::string csv = "index,file,chamfer,wasserstein,area\n";
  for (std::size_t i = 0; i < files.size(); ++i) {
    const PointCloud cloud = read_cloud_file(files[i]);
    const VecX z = ckpt.latents.codes.row(static_cast<int>(i)).transpose();
    const TriangleMesh mesh =
        extract_mesh(ckpt.params, z, box, settings.report.resolution, settings.report.iso);
    RngStream rng = RngStream::derived(settings.report.seed, i);
    const PointCloud sample = sample_mesh_surface(mesh, settings.report.samples, rng);
    const int m = std::min({args.wasserstein_samples, static_cast<int>(sample.points.size()),
                            static_cast<int>(cloud.points.size())});
    const double w = wasserstein(stride_sample(sample, m), stride_sample(cloud, m));
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%zu,%s,%.17g,%.17g,%.17g\n", i,
                  fs::path(files[i]).filename().string().c_str(), chamfer(sample, cloud), w,
                  surface_area(mesh));
    csv += buf;
    std::cout << buf;
  }
  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + args.out);
    out << csv;
  }
  return 0;
}

struct ExportArgs {
  ModelRef model;
  std::string out;
  int index = 0;
  int resolution = 64;
  double iso = 0.0;
  bool no_colors = false;
};

int run_export_mesh(const ExportArgs& args) {
  const Checkpoint ckpt = args.model.load();
  if (args.index < 0 || args.index >= ckpt.latents.count())
    throw std::runtime_error("shape index out of range");
  const VecX z = ckpt.latents.codes.row(args.index).transpose();
  const TriangleMesh mesh =
      extract_mesh(ckpt.params, z, args.model.box(), args.resolution, args.iso, !args.no_colors);
  write_obj(mesh, args.out);
  std::cout << "wrote " << mesh.vertices.size() << " vertices, " << mesh.triangles.size()
            << " triangles to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// selftest: analytic oracles exercised end to end

bool report(const char* name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << "  (" << detail << ")\n";
  return ok;
}

// Analytic derivative data of f(x; t) = ||x - t*eta||^2 - 1 at t = 0.
DeformationSample sphere_sample(const Vec3& x, const VecX& eta) {
  DeformationSample s;
  s.z = VecX::Zero(3);
  s.eta = eta;
  s.x = x;
  s.bundle.f = x.squaredNorm() - 1.0;
  s.bundle.g = 2.0 * x;
  s.bundle.s = -2.0 * x.dot(eta.head<3>());
  s.bundle.H = 2.0 * Mat3::Identity();
  s.bundle.m = -2.0 * Mat3::Identity() * eta.head<3>();
  s.probs = VecX::Ones(1);
  return s;
}

bool selftest_sphere() {
  RngStream rng(101);
  VecX eta(3);
  eta << rng.normal3();
  eta.normalize();
  std::vector<DeformationSample> samples;
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Vec3 x = rng.normal3().normalized();
    const DeformationSample s = sphere_sample(x, eta);
    const Vec3 w = particular_solution_w(s.bundle);
    worst = std::max(worst, (w - x.dot(eta.head<3>()) * x).norm());
    samples.push_back(s);
  }
  const std::vector<AffineField> fields = solve_affine_fields(samples, 1);
  const double b_err = (fields[0].b - eta.head<3>()).norm();
  const double a_norm = fields[0].A.norm();
  const double loss = deformation_loss(samples, fields, 1);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "w err %.3g, |b-eta| %.3g, |A| %.3g, loss %.3g", worst, b_err,
                a_norm, loss);
  return report("sphere-field", worst < 1e-12 && b_err < 1e-6 && a_norm < 1e-6 && loss < 1e-10,
                buf);
}

bool selftest_consistency() {
  double worst = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    MlpConfig cfg;
    cfg.hidden_layers = 2;
    cfg.hidden_width = 24;
    cfg.latent_dim = 5;
    cfg.skip_layer = 1;
    cfg.softplus_beta = 25.0;
    RngStream rng(500 + trial);
    NetworkParams params = geometric_init(cfg, 1, rng);
    for (Eigen::Index i = 0; i < params.flat().size(); ++i)
      params.flat()[i] += rng.normal(0.0, 0.05);
    for (int probe = 0; probe < 50; ++probe) {
      const Vec3 x = rng.uniform_box(Vec3(-1.2, -1.2, -1.2), Vec3(1.2, 1.2, 1.2));
      const VecX z = rng.normal_vec(cfg.latent_dim);
      VecX eta = rng.normal_vec(cfg.latent_dim);
      eta.normalize();
      const DerivativeBundle bundle = derivative_bundle(params, x, z, eta);
      if (bundle.g.norm() < 1e-4) continue;
      const Mat3 A = 0.3 * Mat3::Random();
      const Vec3 u = A * x + Vec3(0.1, -0.2, 0.05);
      const Vec3 v = consistent_field_v(bundle, u);
      const double residual = std::abs(bundle.g.dot(v) + bundle.s);
      worst = std::max(worst, residual / std::max(1.0, bundle.g.norm()));
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max relative residual %.3g over 2000 probes", worst);
  return report("consistency", worst < 1e-9, buf);
}

bool selftest_derivatives() {
  MlpConfig cfg;  // 4x64 desk network
  RngStream rng(77);
  NetworkParams params = geometric_init(cfg, 1, rng);
  for (Eigen::Index i = 0; i < params.flat().size(); ++i)
    params.flat()[i] += rng.normal(0.0, 0.05);
  const double h = 1e-5;
  double worst = 0.0;
  for (int probe = 0; probe < 20; ++probe) {
    const Vec3 x = rng.uniform_box(Vec3(-1, -1, -1), Vec3(1, 1, 1));
    const VecX z = rng.normal_vec(cfg.latent_dim);
    VecX eta = rng.normal_vec(cfg.latent_dim);
    eta.normalize();
    const DerivativeBundle bundle = derivative_bundle(params, x, z, eta);
    for (int d = 0; d < 3; ++d) {
      Vec3 xp = x, xm = x;
      xp[d] += h;
      xm[d] -= h;
      const DerivativeBundle bp = derivative_bundle(params, xp, z, eta);
      const DerivativeBundle bm = derivative_bundle(params, xm, z, eta);
      const double fd_g = (bp.f - bm.f) / (2 * h);
      worst = std::max(worst, std::abs(bundle.g[d] - fd_g) / std::max(1.0, std::abs(fd_g)));
      const Vec3 fd_h = (bp.g - bm.g) / (2 * h);
      worst = std::max(worst,
                       (bundle.H.col(d) - fd_h).norm() / std::max(1.0, fd_h.norm()));
      const double fd_m = (bp.s - bm.s) / (2 * h);
      worst = std::max(worst, std::abs(bundle.m[d] - fd_m) / std::max(1.0, std::abs(fd_m)));
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max relative error %.3g vs step %.0e", worst, h);
  return report("derivatives", worst < 1e-3, buf);
}

bool selftest_spiral_norms() {
  RngStream rng(909);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const VecX z1 = rng.normal_vec(6);
    const VecX z2 = rng.normal_vec(6);
    const double t = rng.uniform();
    const VecX z = interpolate_spiral(z1, z2, t);
    worst = std::max(worst, std::abs(z.norm() - ((1 - t) * z1.norm() + t * z2.norm())));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max norm deviation %.3g over 1000 draws", worst);
  return report("spiral-norms", worst < 1e-9, buf);
}

int run_selftest() {
  bool ok = true;
  ok &= selftest_sphere();
  ok &= selftest_consistency();
  ok &= selftest_derivatives();
  ok &= selftest_spiral_norms();
  std::cout << (ok ? "all checks passed\n" : "checks FAILED\n");
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"killshape: deformation-regularized implicit shape spaces"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker threads for grid evaluation")
      ->envname("KILLSHAPE_THREADS")
      ->check(CLI::PositiveNumber);

  GenToyArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-toy", "generate a toy shape dataset");
  gen->add_option("--kind", gen_args.kind, "cubes or ellipsoids")
      ->check(CLI::IsMember({"cubes", "ellipsoids"}));
  gen->add_option("--count", gen_args.count, "number of shapes");
  gen->add_option("--samples", gen_args.samples, "surface samples per shape");
  gen->add_option("--seed", gen_args.seed, "rng seed");
  gen->add_option("--config", gen_args.config, "config file with a [toy] section");
  gen->add_option("--out", gen_args.out, "output directory")->required();

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train a shape space on a data directory");
  train_cmd->add_option("--data", train_args.data, "directory of .ply/.xyz clouds")->required();
  train_cmd->add_option("--out", train_args.out, "run output directory")->required();
  train_cmd->add_option("--config", train_args.config, "config file with a [train] section");
  train_cmd->add_option("--preset", train_args.preset, "base preset instead of a config file")
      ->check(CLI::IsMember({"toy-cubes", "toy-ellipsoids", "paper"}));
  train_cmd->add_option("--epochs", train_args.epochs, "override epoch count");
  train_cmd->add_option("--seed", train_args.seed, "override rng seed");
  train_cmd->add_option("--checkpoint-every", train_args.checkpoint_every,
                        "override checkpoint cadence");
  train_cmd->add_option("--lambda-d", train_args.lambda_d,
                        "override the deformation weight with a constant schedule");
  train_cmd->add_flag("--disable-deformation", train_args.disable_deformation,
                      "build the objective without the deformation term");

  FitArgs fit_args;
  CLI::App* fit_cmd = app.add_subcommand("fit", "fit a latent code to a new cloud");
  fit_args.model.add_options(fit_cmd);
  fit_cmd->add_option("--cloud", fit_args.cloud, "point cloud to reconstruct")->required();
  fit_cmd->add_option("--steps", fit_args.steps, "optimization steps");
  fit_cmd->add_option("--batch", fit_args.options.batch, "reconstruction batch per step");
  fit_cmd->add_option("--lr", fit_args.options.lr, "learning rate");
  fit_cmd->add_option("--seed", fit_args.options.seed, "rng seed");
  fit_cmd->add_option("--init-std", fit_args.options.latent_init_std,
                      "stddev of the initial code draw");
  fit_cmd->add_option("--sigma2", fit_args.options.sigma2, "global sample noise scale");
  fit_cmd->add_flag("--code-penalty", fit_args.options.include_code_penalty,
                    "include the latent norm penalty in the objective");
  fit_cmd->add_option("--out", fit_args.out, "write the fitted code here, one value per line");

  InterpolateArgs interp_args;
  CLI::App* interp_cmd =
      app.add_subcommand("interpolate", "mesh and report a latent-space path");
  interp_args.model.add_options(interp_cmd);
  interp_cmd->add_option("--pair", interp_args.pair, "two shape indices")
      ->required()
      ->expected(2);
  interp_cmd->add_option("--steps", interp_args.settings.steps, "interior steps on the path");
  interp_cmd->add_option("--mode", interp_args.settings.mode, "linear, spiral, or auto")
      ->check(CLI::IsMember({"linear", "spiral", "auto"}));
  interp_cmd->add_option("--resolution", interp_args.settings.report.resolution, "grid cells");
  interp_cmd->add_option("--samples", interp_args.settings.report.samples,
                         "surface samples per shape");
  interp_cmd->add_option("--killing-samples", interp_args.settings.report.killing_samples,
                         "surface points in the rigidity solve");
  interp_cmd->add_option("--iso", interp_args.settings.report.iso, "isovalue");
  interp_cmd->add_option("--seed", interp_args.settings.report.seed, "sampling seed");
  interp_cmd->add_option("--config", interp_args.config, "config file with an [eval] section");
  interp_cmd->add_flag("--no-colors", interp_args.no_colors, "plain OBJ without piece colors");
  interp_cmd->add_option("--out", interp_args.out, "output directory")->required();

  EvalArgs eval_args;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "reconstruction metrics of a checkpoint against its data");
  eval_args.model.add_options(eval_cmd);
  eval_cmd->add_option("--data", eval_args.data, "directory of .ply/.xyz clouds")->required();
  eval_cmd->add_option("--resolution", eval_args.options.resolution, "grid cells");
  eval_cmd->add_option("--samples", eval_args.options.samples, "surface samples per shape");
  eval_cmd->add_option("--wasserstein-samples", eval_args.wasserstein_samples,
                       "points per side in the assignment metric");
  eval_cmd->add_option("--seed", eval_args.options.seed, "sampling seed");
  eval_cmd->add_option("--config", eval_args.config, "config file with an [eval] section");
  eval_cmd->add_option("--out", eval_args.out, "also write the csv here");

  ExportArgs export_args;
  CLI::App* export_cmd = app.add_subcommand("export-mesh", "extract one shape as OBJ");
  export_args.model.add_options(export_cmd);
  export_cmd->add_option("--index", export_args.index, "shape index")->required();
  export_cmd->add_option("--resolution", export_args.resolution, "grid cells");
  export_cmd->add_option("--iso", export_args.iso, "isovalue");
  export_cmd->add_flag("--no-colors", export_args.no_colors, "plain OBJ without piece colors");
  export_cmd->add_option("--out", export_args.out, "output OBJ path")->required();

  CLI::App* selftest_cmd = app.add_subcommand("selftest", "run the analytic oracle suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    set_mesh_threads(threads);
    if (gen->parsed()) return run_gen_toy(gen_args, gen);
    if (train_cmd->parsed()) return run_train(train_args, train_cmd);
    if (fit_cmd->parsed()) {
      fit_args.model.require_some(fit_cmd);
      return run_fit(fit_args);
    }
    if (interp_cmd->parsed()) {
      interp_args.model.require_some(interp_cmd);
      return run_interpolate(interp_args, interp_cmd);
    }
    if (eval_cmd->parsed()) {
      eval_args.model.require_some(eval_cmd);
      return run_eval(eval_args, eval_cmd);
    }
    if (export_cmd->parsed()) {
      export_args.model.require_some(export_cmd);
      return run_export_mesh(export_args);
    }
    if (selftest_cmd->parsed()) return run_selftest();
  } catch (const UsageError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
