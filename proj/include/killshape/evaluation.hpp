// Metrics (Chamfer, assignment Wasserstein), isosurface extraction, and
// interpolation reports.
#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "killshape/geometry.hpp"
#include "killshape/training.hpp"

namespace killshape {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<int> piece;  // per-vertex argmax piece label; empty unless requested

  void validate() const;  // indices in range, piece empty or one label per vertex
};

double surface_area(const TriangleMesh& mesh);

// Symmetrized mean squared nearest-neighbor distance.
double chamfer(const PointCloud& a, const PointCloud& b);

// Minimal total displacement over bijections between equal-size sets, solved
// exactly in O(n^3).
double wasserstein(const PointCloud& a, const PointCloud& b);

// Worker count for the grid-evaluation pass of extract_mesh. Slabs are
// stitched deterministically, so the output is identical for any count.
void set_mesh_threads(int n);
int mesh_threads();

// Isosurface of f(., z) on a resolution^3 cell grid over the box. Cells are
// split into six tetrahedra sharing the main diagonal, which makes the
// triangulation consistent across neighboring cells and the output watertight
// for surfaces closed inside the box. With piece_labels, each vertex carries
// the argmax of the piece probabilities.
TriangleMesh extract_mesh(const NetworkParams& params, const VecX& z, const Box& box,
                          int resolution = 64, double iso = 0.0, bool piece_labels = false);

// Area-weighted uniform sample of the mesh surface.
PointCloud sample_mesh_surface(const TriangleMesh& mesh, int n, RngStream& rng);

struct ReportRow {
  int pair_a = 0, pair_b = 0;
  double t = 0.0;
  double chamfer_start = 0.0, chamfer_end = 0.0;
  double wasserstein_start = 0.0, wasserstein_end = 0.0;
  double killing = 0.0;  // mean Killing density of the LS-optimal affine fields
  double area = 0.0;
};

struct ReportOptions {
  int resolution = 64;
  int samples = 512;          // surface samples per shape for the metrics
  int killing_samples = 128;  // surface points entering the LS solve
  double iso = 0.0;
  std::uint64_t seed = 0;
};

// For each latent pair and each t on the (steps+2)-point grid including both
// endpoints: distances of a fresh surface sample to the endpoint
// reconstructions, the LS-optimal Killing energy, and the mesh area.
std::vector<ReportRow> interpolation_report(const Checkpoint& ckpt, const Box& box,
                                            const std::vector<std::pair<int, int>>& pairs,
                                            int steps, InterpolationMode mode,
                                            const ReportOptions& options = {});

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);
std::string report_csv_text(const std::vector<ReportRow>& rows);

// OBJ export; piece labels become per-vertex colors (extended v records).
void write_obj(const TriangleMesh& mesh, const std::string& path);

}  // namespace killshape
