#include "killshape/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <limits>
#include <thread>
#include <unordered_map>

#include "killshape/deformation.hpp"
#include "killshape/shapespace.hpp"

namespace killshape {

namespace {

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

// Exact minimal-cost perfect matching on a square cost matrix, Hungarian
// algorithm with potentials, O(n^3).
double assignment_cost(const MatX& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += cost(p[j] - 1, j - 1);
  return total;
}

// Corner bit layout: x -> bit 2, y -> bit 1, z -> bit 0. The six tetrahedra
// share the 0-7 diagonal; the induced face diagonals agree between adjacent
// cells, so interpolated vertices are shared exactly.
constexpr int kTets[6][4] = {{0, 4, 6, 7}, {0, 4, 5, 7}, {0, 2, 6, 7},
                             {0, 2, 3, 7}, {0, 1, 5, 7}, {0, 1, 3, 7}};

struct GridShape {
  Vec3 lo;
  Vec3 step;
  int npts;  // points per axis

  Vec3 point(int i, int j, int k) const {
    return lo + Vec3(i * step.x(), j * step.y(), k * step.z());
  }
  std::int64_t id(int i, int j, int k) const {
    return (static_cast<std::int64_t>(i) * npts + j) * npts + k;
  }
};

std::atomic<int> g_mesh_threads{1};

}  // namespace

void set_mesh_threads(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be at least 1");
  g_mesh_threads.store(n);
}

int mesh_threads() { return g_mesh_threads.load(); }

void TriangleMesh::validate() const {
  const int n = static_cast<int>(vertices.size());
  for (const auto& tri : triangles)
    for (int v : tri)
      if (v < 0 || v >= n) throw std::out_of_range("triangle index out of range");
  if (!piece.empty() && piece.size() != vertices.size())
    throw SizeMismatch("piece labels must be empty or one per vertex");
}

double surface_area(const TriangleMesh& mesh) {
  double total = 0.0;
  for (const auto& tri : mesh.triangles)
    total += triangle_area(mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]);
  return total;
}

double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty())
    throw std::invalid_argument("chamfer requires nonempty clouds");
  const KdTree ta(a.points), tb(b.points);
  double ab = 0.0, ba = 0.0;
  for (const Vec3& p : a.points) {
    const double d = tb.nearest(p).dist;
    ab += d * d;
  }
  for (const Vec3& p : b.points) {
    const double d = ta.nearest(p).dist;
    ba += d * d;
  }
  return 0.5 * (ab / a.points.size() + ba / b.points.size());
}

double wasserstein(const PointCloud& a, const PointCloud& b) {
  if (a.points.empty() || b.points.empty())
    throw std::invalid_argument("wasserstein requires nonempty clouds");
  if (a.points.size() != b.points.size())
    throw SizeMismatch("wasserstein requires equal-size clouds");
  const int n = static_cast<int>(a.points.size());
  MatX cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = (a.points[i] - b.points[j]).norm();
  return assignment_cost(cost);
}

TriangleMesh extract_mesh(const NetworkParams& params, const VecX& z, const Box& box,
                          int resolution, double iso, bool piece_labels) {
  if (resolution < 8) throw std::invalid_argument("mesh resolution must be at least 8");
  if ((box.extent().array() <= 0.0).any())
    throw std::invalid_argument("mesh extraction box is degenerate");

  GridShape grid{box.lo, box.extent() / resolution, resolution + 1};
  const std::int64_t total = static_cast<std::int64_t>(grid.npts) * grid.npts * grid.npts;
  VecX values(total);
  const auto fill_range = [&](std::int64_t begin, std::int64_t end) {
    constexpr int kChunk = 8192;
    MatX xs(3, kChunk);
    std::int64_t done = begin;
    while (done < end) {
      const int m = static_cast<int>(std::min<std::int64_t>(kChunk, end - done));
      for (int c = 0; c < m; ++c) {
        const std::int64_t a = done + c;
        const int k = static_cast<int>(a % grid.npts);
        const int j = static_cast<int>((a / grid.npts) % grid.npts);
        const int i = static_cast<int>(a / grid.npts / grid.npts);
        xs.col(c) = grid.point(i, j, k);
      }
      values.segment(done, m) = forward_f_batch(params, xs.leftCols(m), z);
      done += m;
    }
  };
  const int workers = std::min<int>(mesh_threads(), std::max<std::int64_t>(1, total / 4096));
  if (workers <= 1) {
    fill_range(0, total);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          fill_range(total * w / workers, total * (w + 1) / workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
      if (e) std::rethrow_exception(e);
  }

  TriangleMesh mesh;
  std::unordered_map<std::uint64_t, int> edge_vertex;
  const auto vertex_on_edge = [&](std::int64_t pa, std::int64_t pb) {
    if (pa > pb) std::swap(pa, pb);
    const std::uint64_t key =
        (static_cast<std::uint64_t>(pa) << 32) | static_cast<std::uint64_t>(pb);
    const auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double fa = values[pa], fb = values[pb];
    const double t = (iso - fa) / (fb - fa);
    const auto unpack = [&](std::int64_t id) {
      return grid.point(static_cast<int>(id / grid.npts / grid.npts),
                        static_cast<int>((id / grid.npts) % grid.npts),
                        static_cast<int>(id % grid.npts));
    };
    const Vec3 pos = unpack(pa) + t * (unpack(pb) - unpack(pa));
    const int idx = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pos);
    edge_vertex.emplace(key, idx);
    return idx;
  };

  const auto emit = [&](int a, int b, int c, const Vec3& toward_positive) {
    const Vec3& va = mesh.vertices[a];
    const Vec3& vb = mesh.vertices[b];
    const Vec3& vc = mesh.vertices[c];
    if (triangle_area(va, vb, vc) <= 1e-14) return;
    if ((vb - va).cross(vc - va).dot(toward_positive) < 0.0)
      mesh.triangles.push_back({a, c, b});
    else
      mesh.triangles.push_back({a, b, c});
  };

  std::int64_t corner_ids[8];
  double corner_f[8];
  Vec3 corner_pos[8];
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      for (int k = 0; k < resolution; ++k) {
        for (int c = 0; c < 8; ++c) {
          const int ci = i + ((c >> 2) & 1), cj = j + ((c >> 1) & 1), ck = k + (c & 1);
          corner_ids[c] = grid.id(ci, cj, ck);
          corner_f[c] = values[corner_ids[c]];
          corner_pos[c] = grid.point(ci, cj, ck);
        }
        for (const auto& tet : kTets) {
          int inside[4], outside[4];
          int nin = 0, nout = 0;
          for (int c = 0; c < 4; ++c) {
            if (corner_f[tet[c]] < iso)
              inside[nin++] = tet[c];
            else
              outside[nout++] = tet[c];
          }
          if (nin == 0 || nin == 4) continue;
          Vec3 pos_centroid = Vec3::Zero(), neg_centroid = Vec3::Zero();
          for (int c = 0; c < nin; ++c) neg_centroid += corner_pos[inside[c]] / nin;
          for (int c = 0; c < nout; ++c) pos_centroid += corner_pos[outside[c]] / nout;
          const Vec3 toward = pos_centroid - neg_centroid;
          if (nin == 1 || nin == 3) {
            const int lone = (nin == 1) ? inside[0] : outside[0];
            const int* others = (nin == 1) ? outside : inside;
            const int v0 = vertex_on_edge(corner_ids[lone], corner_ids[others[0]]);
            const int v1 = vertex_on_edge(corner_ids[lone], corner_ids[others[1]]);
            const int v2 = vertex_on_edge(corner_ids[lone], corner_ids[others[2]]);
            emit(v0, v1, v2, toward);
          } else {
            const int v00 = vertex_on_edge(corner_ids[inside[0]], corner_ids[outside[0]]);
            const int v01 = vertex_on_edge(corner_ids[inside[0]], corner_ids[outside[1]]);
            const int v11 = vertex_on_edge(corner_ids[inside[1]], corner_ids[outside[1]]);
            const int v10 = vertex_on_edge(corner_ids[inside[1]], corner_ids[outside[0]]);
            emit(v00, v01, v11, toward);
            emit(v00, v11, v10, toward);
          }
        }
      }
    }
  }

  if (mesh.triangles.empty()) throw EmptySurface("no level-set crossing inside the box");
  if (piece_labels) {
    mesh.piece.resize(mesh.vertices.size());
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
      const VecX probs = forward_p(params, mesh.vertices[v], z);
      int arg = 0;
      probs.maxCoeff(&arg);
      mesh.piece[v] = arg;
    }
  }
  return mesh;
}

PointCloud sample_mesh_surface(const TriangleMesh& mesh, int n, RngStream& rng) {
  if (n <= 0) throw std::invalid_argument("sample count must be positive");
  if (mesh.triangles.empty()) throw EmptySurface("cannot sample an empty mesh");
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    total += triangle_area(mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]);
    cumulative[t] = total;
  }
  if (total <= 0.0) throw EmptySurface("mesh has zero total area");

  PointCloud cloud;
  cloud.points.reserve(n);
  for (int s = 0; s < n; ++s) {
    const double pick = rng.uniform(0.0, total);
    const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), pick);
    const auto& tri = mesh.triangles[it == cumulative.end() ? mesh.triangles.size() - 1
                                                            : it - cumulative.begin()];
    const double r1 = std::sqrt(rng.uniform());
    const double r2 = rng.uniform();
    cloud.points.push_back((1.0 - r1) * mesh.vertices[tri[0]] +
                           r1 * (1.0 - r2) * mesh.vertices[tri[1]] +
                           r1 * r2 * mesh.vertices[tri[2]]);
  }
  return cloud;
}

std::vector<ReportRow> interpolation_report(const Checkpoint& ckpt, const Box& box,
                                            const std::vector<std::pair<int, int>>& pairs,
                                            int steps, InterpolationMode mode,
                                            const ReportOptions& options) {
  if (steps < 0) throw std::invalid_argument("steps must be nonnegative");
  if (options.samples <= 0 || options.killing_samples <= 0)
    throw std::invalid_argument("sample counts must be positive");
  if (options.killing_samples > options.samples)
    throw std::invalid_argument("killing_samples cannot exceed samples");
  const int count = ckpt.latents.count();
  const int pieces = ckpt.config.pieces;

  std::vector<ReportRow> rows;
  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto [ia, ib] = pairs[pi];
    if (ia < 0 || ia >= count || ib < 0 || ib >= count)
      throw std::out_of_range("latent pair index out of range");
    if (ia == ib) throw std::invalid_argument("latent pair must name two distinct shapes");
    const VecX z1 = ckpt.latents.codes.row(ia).transpose();
    const VecX z2 = ckpt.latents.codes.row(ib).transpose();
    RngStream rng = RngStream::derived(options.seed, pi);

    const auto shape_at = [&](double t) {
      const VecX z = (mode == InterpolationMode::Spiral) ? interpolate_spiral(z1, z2, t)
                                                         : interpolate_linear(z1, z2, t);
      return extract_mesh(ckpt.params, z, box, options.resolution, options.iso);
    };
    const TriangleMesh mesh_start = shape_at(0.0);
    const TriangleMesh mesh_end = shape_at(1.0);
    const PointCloud ref_start = sample_mesh_surface(mesh_start, options.samples, rng);
    const PointCloud ref_end = sample_mesh_surface(mesh_end, options.samples, rng);

    for (int s = 0; s <= steps + 1; ++s) {
      const double t = static_cast<double>(s) / (steps + 1);
      const VecX z = (mode == InterpolationMode::Spiral) ? interpolate_spiral(z1, z2, t)
                                                         : interpolate_linear(z1, z2, t);
      const VecX eta = latent_speed(z1, z2, t, mode);
      const TriangleMesh mesh =
          (s == 0) ? mesh_start : (s == steps + 1) ? mesh_end : shape_at(t);
      const PointCloud sample = sample_mesh_surface(mesh, options.samples, rng);

      std::vector<DeformationSample> dsamples(options.killing_samples);
      for (int m = 0; m < options.killing_samples; ++m) {
        DeformationSample& ds = dsamples[m];
        ds.z = z;
        ds.eta = eta;
        ds.x = sample.points[m];
        ds.bundle = derivative_bundle(ckpt.params, ds.x, z, eta);
        ds.probs = forward_p(ckpt.params, ds.x, z);
      }
      const std::vector<AffineField> fields = solve_affine_fields(dsamples, pieces);

      ReportRow row;
      row.pair_a = ia;
      row.pair_b = ib;
      row.t = t;
      row.chamfer_start = chamfer(sample, ref_start);
      row.chamfer_end = chamfer(sample, ref_end);
      row.wasserstein_start = wasserstein(sample, ref_start);
      row.wasserstein_end = wasserstein(sample, ref_end);
      row.killing = deformation_loss(dsamples, fields, pieces);
      row.area = surface_area(mesh);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string report_csv_text(const std::vector<ReportRow>& rows) {
  std::string out =
      "pair_a,pair_b,t,chamfer_start,chamfer_end,wasserstein_start,wasserstein_end,"
      "killing,area\n";
  char buf[512];
  for (const ReportRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.pair_a,
                  r.pair_b, r.t, r.chamfer_start, r.chamfer_end, r.wasserstein_start,
                  r.wasserstein_end, r.killing, r.area);
    out += buf;
  }
  return out;
}

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::string text = report_csv_text(rows);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

namespace {

Vec3 piece_color(int label) {
  // Golden-ratio hue walk; fixed saturation/value keeps neighbors distinct.
  const double hue = std::fmod(0.618033988749895 * (label + 1), 1.0) * 6.0;
  const int sector = static_cast<int>(hue);
  const double frac = hue - sector;
  const double p = 0.35, q = 0.95 - 0.6 * frac, r = 0.35 + 0.6 * frac;
  switch (sector % 6) {
    case 0: return {0.95, r, p};
    case 1: return {q, 0.95, p};
    case 2: return {p, 0.95, r};
    case 3: return {p, q, 0.95};
    case 4: return {r, p, 0.95};
    default: return {0.95, p, q};
  }
}

}  // namespace

void write_obj(const TriangleMesh& mesh, const std::string& path) {
  mesh.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  char buf[512];
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    const Vec3& p = mesh.vertices[v];
    if (mesh.piece.empty()) {
      std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", p.x(), p.y(), p.z());
    } else {
      const Vec3 c = piece_color(mesh.piece[v]);
      std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g %.6g %.6g %.6g\n", p.x(), p.y(), p.z(),
                    c.x(), c.y(), c.z());
    }
    out << buf;
  }
  for (const auto& tri : mesh.triangles) {
    std::snprintf(buf, sizeof(buf), "f %d %d %d\n", tri[0] + 1, tri[1] + 1, tri[2] + 1);
    out << buf;
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace killshape
