#include <fstream>
#include <iomanip>
#include <sstream>

#include "killshape/geometry.hpp"

namespace killshape {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path);
  os.imbue(std::locale::classic());
  os << std::setprecision(17);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open for reading: " + path);
  is.imbue(std::locale::classic());
  return is;
}

std::vector<Vec3> read_rows(std::istream& is, std::size_t count, const std::string& path) {
  std::vector<Vec3> pts;
  pts.reserve(count);
  Vec3 p;
  while (pts.size() < count && (is >> p.x() >> p.y() >> p.z())) pts.push_back(p);
  if (pts.size() != count) throw FormatError("truncated vertex data in " + path);
  return pts;
}

}  // namespace

void write_ply(const PointCloud& cloud, const std::string& path) {
  cloud.validate();
  auto os = open_out(path);
  os << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
     << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  for (const Vec3& p : cloud.points) os << p.x() << " " << p.y() << " " << p.z() << "\n";
  if (!os) throw FormatError("write failed: " + path);
}

PointCloud read_ply(const std::string& path) {
  auto is = open_in(path);
  std::string line;
  if (!std::getline(is, line) || line != "ply") throw FormatError("missing ply magic in " + path);
  std::size_t count = 0;
  bool ascii = false;
  int coord_props = 0;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "end_header") break;
    if (tok == "comment") continue;
    if (tok == "format") {
      std::string kind;
      ls >> kind;
      ascii = kind == "ascii";
    } else if (tok == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw FormatError("unsupported element '" + name + "' in " + path);
    } else if (tok == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type != "double" && type != "float64")
        throw FormatError("unsupported property type '" + type + "' in " + path);
      if (name == "x" || name == "y" || name == "z") ++coord_props;
    }
  }
  if (!ascii) throw FormatError("only ascii ply supported: " + path);
  if (coord_props != 3) throw FormatError("ply without x y z properties: " + path);
  if (count == 0) throw FormatError("ply with zero vertices: " + path);
  PointCloud cloud;
  cloud.points = read_rows(is, count, path);
  return cloud;
}

void write_xyz(const PointCloud& cloud, const std::string& path) {
  cloud.validate();
  auto os = open_out(path);
  for (const Vec3& p : cloud.points) os << p.x() << " " << p.y() << " " << p.z() << "\n";
  if (!os) throw FormatError("write failed: " + path);
}

PointCloud read_xyz(const std::string& path) {
  auto is = open_in(path);
  PointCloud cloud;
  Vec3 p;
  while (is >> p.x() >> p.y() >> p.z()) cloud.points.push_back(p);
  if (cloud.points.empty()) throw FormatError("no points in " + path);
  return cloud;
}

}  // namespace killshape
