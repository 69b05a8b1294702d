#include "ctn/pointcloud.hpp"

#include <Eigen/Dense>
#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

namespace ctn {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

double parse_real(std::string_view token, std::size_t line) {
  double value = 0.0;
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw ParseError("invalid number '" + std::string(token) + "'", line);
  }
  return value;
}

std::size_t parse_count(std::string_view token, std::size_t line) {
  std::size_t value = 0;
  const char* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ParseError("invalid count '" + std::string(token) + "'", line);
  return value;
}

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec3 unit_or_throw(Vec3 n, std::size_t line) {
  const double len = norm(n);
  if (len == 0.0) throw ParseError("zero-length normal", line);
  if (std::abs(len - 1.0) > 1e-6) {
    for (double& c : n) c /= len;
  }
  return n;
}

// Reads the next line that is neither blank nor a comment.
bool next_content_line(std::istream& in, std::string& line, std::size_t& line_no) {
  while (std::getline(in, line)) {
    ++line_no;
    const auto tokens = split_ws(line);
    if (!tokens.empty() && tokens.front().front() != '#') return true;
  }
  return false;
}

// Area-weighted vertex normals from polygon faces; zero where no face touches.
std::vector<Vec3> face_normals(const std::vector<Vec3>& v, const std::vector<std::vector<std::size_t>>& faces) {
  std::vector<Vec3> acc(v.size(), Vec3{0, 0, 0});
  for (const auto& f : faces) {
    // Fan triangulation; the cross product magnitude carries the area weight.
    for (std::size_t t = 1; t + 1 < f.size(); ++t) {
      const Vec3& a = v[f[0]];
      const Vec3& b = v[f[t]];
      const Vec3& c = v[f[t + 1]];
      const Vec3 e1{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
      const Vec3 e2{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
      const Vec3 n{e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2],
                   e1[0] * e2[1] - e1[1] * e2[0]};
      for (std::size_t idx : f) {
        for (int d = 0; d < 3; ++d) acc[idx][d] += n[d];
      }
    }
  }
  return acc;
}

// Fills normals from faces where possible, PCA elsewhere.
PointCloud finish_mesh(std::vector<Vec3> vertices, const std::vector<std::vector<std::size_t>>& faces) {
  if (vertices.empty()) throw ParseError("cloud has no points", 0);
  PointCloud cloud;
  cloud.positions = std::move(vertices);
  auto normals = face_normals(cloud.positions, faces);
  const bool all_from_faces =
      std::all_of(normals.begin(), normals.end(), [](const Vec3& n) { return norm(n) > 0.0; });
  if (!faces.empty() && all_from_faces) {
    for (auto& n : normals) {
      const double len = norm(n);
      for (double& c : n) c /= len;
    }
    cloud.normals = std::move(normals);
    return cloud;
  }
  const std::size_t k = std::min<std::size_t>(16, cloud.size() - 1);
  if (k == 0) {
    cloud.normals.assign(cloud.size(), Vec3{0, 0, 1});
    return cloud;
  }
  return estimate_normals(std::move(cloud), k);
}

}  // namespace

CloudFormat format_from_path(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".xyz" || ext == ".txt" || ext == ".pts") return CloudFormat::xyz;
  if (ext == ".off") return CloudFormat::off;
  if (ext == ".ply") return CloudFormat::ply;
  throw ParseError("unknown point cloud extension '" + ext + "' (expected .xyz, .off or .ply)", 0);
}

PointCloud parse_xyz(std::istream& in) {
  std::vector<Vec3> positions, normals;
  std::string line;
  std::size_t line_no = 0, columns = 0;
  while (next_content_line(in, line, line_no)) {
    const auto tokens = split_ws(line);
    if (tokens.size() != 3 && tokens.size() != 6) {
      throw ParseError("expected 3 or 6 columns, found " + std::to_string(tokens.size()), line_no);
    }
    if (columns == 0) columns = tokens.size();
    if (tokens.size() != columns) {
      throw ParseError("column count changed from " + std::to_string(columns) + " to " +
                           std::to_string(tokens.size()),
                       line_no);
    }
    positions.push_back({parse_real(tokens[0], line_no), parse_real(tokens[1], line_no),
                         parse_real(tokens[2], line_no)});
    if (columns == 6) {
      normals.push_back(unit_or_throw({parse_real(tokens[3], line_no), parse_real(tokens[4], line_no),
                                       parse_real(tokens[5], line_no)},
                                      line_no));
    }
  }
  if (positions.empty()) throw ParseError("cloud has no points", 0);
  if (columns == 6) {
    PointCloud cloud;
    cloud.positions = std::move(positions);
    cloud.normals = std::move(normals);
    return cloud;
  }
  return finish_mesh(std::move(positions), {});
}

PointCloud parse_off(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!next_content_line(in, line, line_no)) throw ParseError("empty OFF file", 1);
  auto tokens = split_ws(line);
  // The counts may share the header line ("OFF 8 6 0").
  if (tokens.front() != "OFF") throw ParseError("missing OFF header", line_no);
  tokens.erase(tokens.begin());
  if (tokens.empty()) {
    if (!next_content_line(in, line, line_no)) throw ParseError("missing OFF counts", line_no);
    tokens = split_ws(line);
  }
  if (tokens.size() < 2) throw ParseError("expected vertex and face counts", line_no);
  const std::size_t nv = parse_count(tokens[0], line_no);
  const std::size_t nf = parse_count(tokens[1], line_no);
  std::vector<Vec3> vertices;
  vertices.reserve(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    if (!next_content_line(in, line, line_no)) throw ParseError("unexpected end of vertex list", line_no);
    tokens = split_ws(line);
    if (tokens.size() < 3) throw ParseError("vertex needs 3 coordinates", line_no);
    vertices.push_back({parse_real(tokens[0], line_no), parse_real(tokens[1], line_no),
                        parse_real(tokens[2], line_no)});
  }
  std::vector<std::vector<std::size_t>> faces;
  for (std::size_t i = 0; i < nf; ++i) {
    if (!next_content_line(in, line, line_no)) throw ParseError("unexpected end of face list", line_no);
    tokens = split_ws(line);
    const std::size_t count = parse_count(tokens.at(0), line_no);
    if (count < 3 || tokens.size() < count + 1) throw ParseError("malformed face", line_no);
    std::vector<std::size_t> face;
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t idx = parse_count(tokens[j + 1], line_no);
      if (idx >= nv) throw ParseError("face index " + std::to_string(idx) + " out of range", line_no);
      face.push_back(idx);
    }
    faces.push_back(std::move(face));
  }
  return finish_mesh(std::move(vertices), faces);
}

PointCloud parse_ply(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || split_ws(line) != std::vector<std::string_view>{"ply"}) {
    throw ParseError("missing ply magic", 1);
  }
  line_no = 1;
  std::size_t nv = 0, nf = 0;
  std::vector<std::string> vertex_props;
  std::string current;
  bool ascii = false;
  while (true) {
    if (!std::getline(in, line)) throw ParseError("unterminated PLY header", line_no);
    ++line_no;
    const auto tokens = split_ws(line);
    if (tokens.empty() || tokens[0] == "comment" || tokens[0] == "obj_info") continue;
    if (tokens[0] == "end_header") break;
    if (tokens[0] == "format") {
      if (tokens.size() < 2 || tokens[1] != "ascii") throw ParseError("only ASCII PLY is supported", line_no);
      ascii = true;
    } else if (tokens[0] == "element") {
      if (tokens.size() != 3) throw ParseError("malformed element line", line_no);
      current = tokens[1];
      if (current == "vertex") nv = parse_count(tokens[2], line_no);
      if (current == "face") nf = parse_count(tokens[2], line_no);
    } else if (tokens[0] == "property") {
      if (current == "vertex") {
        if (tokens.size() != 3) throw ParseError("malformed vertex property", line_no);
        vertex_props.emplace_back(tokens[2]);
      }
    } else {
      throw ParseError("unexpected header keyword '" + std::string(tokens[0]) + "'", line_no);
    }
  }
  if (!ascii) throw ParseError("missing format line", line_no);
  auto find = [&](const char* name) -> std::optional<std::size_t> {
    auto it = std::find(vertex_props.begin(), vertex_props.end(), name);
    if (it == vertex_props.end()) return std::nullopt;
    return static_cast<std::size_t>(it - vertex_props.begin());
  };
  const auto ix = find("x"), iy = find("y"), iz = find("z");
  if (!ix || !iy || !iz) throw ParseError("vertex element lacks x/y/z properties", line_no);
  const auto inx = find("nx"), iny = find("ny"), inz = find("nz");
  const bool has_normals = inx && iny && inz;

  std::vector<Vec3> vertices, normals;
  for (std::size_t i = 0; i < nv; ++i) {
    if (!next_content_line(in, line, line_no)) throw ParseError("unexpected end of vertex data", line_no);
    const auto tokens = split_ws(line);
    if (tokens.size() != vertex_props.size()) {
      throw ParseError("expected " + std::to_string(vertex_props.size()) + " vertex values", line_no);
    }
    vertices.push_back({parse_real(tokens[*ix], line_no), parse_real(tokens[*iy], line_no),
                        parse_real(tokens[*iz], line_no)});
    if (has_normals) {
      normals.push_back(unit_or_throw({parse_real(tokens[*inx], line_no), parse_real(tokens[*iny], line_no),
                                       parse_real(tokens[*inz], line_no)},
                                      line_no));
    }
  }
  std::vector<std::vector<std::size_t>> faces;
  for (std::size_t i = 0; i < nf; ++i) {
    if (!next_content_line(in, line, line_no)) throw ParseError("unexpected end of face data", line_no);
    const auto tokens = split_ws(line);
    const std::size_t count = parse_count(tokens.at(0), line_no);
    if (count < 3 || tokens.size() < count + 1) throw ParseError("malformed face", line_no);
    std::vector<std::size_t> face;
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t idx = parse_count(tokens[j + 1], line_no);
      if (idx >= nv) throw ParseError("face index out of range", line_no);
      face.push_back(idx);
    }
    faces.push_back(std::move(face));
  }
  if (vertices.empty()) throw ParseError("cloud has no points", 0);
  if (has_normals) {
    PointCloud cloud;
    cloud.positions = std::move(vertices);
    cloud.normals = std::move(normals);
    return cloud;
  }
  return finish_mesh(std::move(vertices), faces);
}

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  switch (format) {
    case CloudFormat::xyz: return parse_xyz(in);
    case CloudFormat::off: return parse_off(in);
    case CloudFormat::ply: return parse_ply(in);
  }
  throw std::logic_error("unreachable");
}

PointCloud load_cloud(const std::filesystem::path& path) { return load_cloud(path, format_from_path(path)); }

void write_xyz(std::ostream& out, const PointCloud& cloud, std::span<const double> scores) {
  if (!scores.empty() && scores.size() != cloud.size()) {
    throw std::invalid_argument("write_xyz: score count does not match point count");
  }
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    const Vec3& n = cloud.normals[i];
    out << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << n[0] << ' ' << n[1] << ' ' << n[2];
    if (!scores.empty()) out << ' ' << scores[i];
    out << '\n';
  }
}

void save_xyz(const std::filesystem::path& path, const PointCloud& cloud, std::span<const double> scores) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_xyz(out, cloud, scores);
}

PointCloud estimate_normals(PointCloud cloud, std::size_t k) {
  const std::size_t n = cloud.size();
  if (n == 0) throw std::invalid_argument("estimate_normals: empty cloud");
  if (k == 0 || n <= k) {
    throw std::invalid_argument("estimate_normals: need more than k=" + std::to_string(k) +
                                " points, got " + std::to_string(n));
  }
  Vec3 centroid{0, 0, 0};
  for (const auto& p : cloud.positions) {
    for (int d = 0; d < 3; ++d) centroid[d] += p[d];
  }
  for (double& c : centroid) c /= static_cast<double>(n);

  cloud.normals.assign(n, Vec3{0, 0, 1});
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& pi = cloud.positions[i];
    for (std::size_t j = 0; j < n; ++j) {
      const Vec3& pj = cloud.positions[j];
      const double dx = pj[0] - pi[0], dy = pj[1] - pi[1], dz = pj[2] - pi[2];
      dist[j] = {dx * dx + dy * dy + dz * dz, j};
    }
    // Self plus the k nearest others.
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k + 1), dist.end());
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (std::size_t t = 0; t <= k; ++t) {
      const Vec3& q = cloud.positions[dist[t].second];
      mean += Eigen::Vector3d(q[0], q[1], q[2]);
    }
    mean /= static_cast<double>(k + 1);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t t = 0; t <= k; ++t) {
      const Vec3& q = cloud.positions[dist[t].second];
      const Eigen::Vector3d d = Eigen::Vector3d(q[0], q[1], q[2]) - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
    const Eigen::Vector3d ev = solver.eigenvalues();
    if (ev[2] <= 0.0 || ev[1] <= 1e-12 * ev[2]) continue;  // rank < 2: keep fallback
    Eigen::Vector3d normal = solver.eigenvectors().col(0).normalized();
    const Eigen::Vector3d outward(pi[0] - centroid[0], pi[1] - centroid[1], pi[2] - centroid[2]);
    if (normal.dot(outward) < 0.0) normal = -normal;
    cloud.normals[i] = {normal[0], normal[1], normal[2]};
  }
  return cloud;
}

PointCloud normalize(PointCloud cloud) {
  if (cloud.size() == 0) throw std::invalid_argument("normalize: empty cloud");
  Vec3 centroid{0, 0, 0};
  for (const auto& p : cloud.positions) {
    for (int d = 0; d < 3; ++d) centroid[d] += p[d];
  }
  for (double& c : centroid) c /= static_cast<double>(cloud.size());
  double radius = 0.0;
  for (auto& p : cloud.positions) {
    for (int d = 0; d < 3; ++d) p[d] -= centroid[d];
    radius = std::max(radius, norm(p));
  }
  if (radius > 0.0) {
    for (auto& p : cloud.positions) {
      for (double& c : p) c /= radius;
    }
  }
  return cloud;
}

PointCloud resample(const PointCloud& cloud, std::size_t m, std::uint64_t seed) {
  if (cloud.size() == 0) throw std::invalid_argument("resample: empty cloud");
  if (m == 0) throw std::invalid_argument("resample: target size must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pick;
  if (m <= cloud.size()) {
    pick.resize(cloud.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    std::shuffle(pick.begin(), pick.end(), rng);
    pick.resize(m);
  } else {
    std::uniform_int_distribution<std::size_t> draw(0, cloud.size() - 1);
    for (std::size_t i = 0; i < m; ++i) pick.push_back(draw(rng));
  }
  PointCloud out;
  out.label = cloud.label;
  for (std::size_t i : pick) {
    out.positions.push_back(cloud.positions[i]);
    out.normals.push_back(cloud.normals[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

constexpr double kPi = std::numbers::pi;

struct Box {
  Vec3 lo, hi;
  bool strictly_inside(const Vec3& p) const {
    for (int d = 0; d < 3; ++d) {
      if (!(p[d] > lo[d] && p[d] < hi[d])) return false;
    }
    return true;
  }
};

// One area-uniform sample on the surface of an axis-aligned box.
void sample_box(const Box& box, std::mt19937_64& rng, Vec3& p, Vec3& n) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Vec3 ext{box.hi[0] - box.lo[0], box.hi[1] - box.lo[1], box.hi[2] - box.lo[2]};
  const std::array<double, 3> face_area{ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]};
  const double total = 2.0 * (face_area[0] + face_area[1] + face_area[2]);
  double u = unit(rng) * total;
  int axis = 0;
  while (axis < 2 && u >= 2.0 * face_area[axis]) u -= 2.0 * face_area[axis++];
  const bool upper = u >= face_area[axis];
  for (int d = 0; d < 3; ++d) p[d] = box.lo[d] + unit(rng) * ext[d];
  p[axis] = upper ? box.hi[axis] : box.lo[axis];
  n = {0, 0, 0};
  n[axis] = upper ? 1.0 : -1.0;
}

void sample_sphere(double radius, const Vec3& center, std::mt19937_64& rng, Vec3& p, Vec3& n) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 d{0, 0, 0};
  double len = 0.0;
  while (len < 1e-9) {
    d = {gauss(rng), gauss(rng), gauss(rng)};
    len = norm(d);
  }
  for (int i = 0; i < 3; ++i) {
    n[i] = d[i] / len;
    p[i] = center[i] + radius * n[i];
  }
}

void sample_point(ShapeKind kind, std::mt19937_64& rng, Vec3& p, Vec3& n) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (kind) {
    case ShapeKind::sphere:
      sample_sphere(1.0, {0, 0, 0}, rng, p, n);
      return;
    case ShapeKind::cube:
      sample_box({{-1, -1, -1}, {1, 1, 1}}, rng, p, n);
      return;
    case ShapeKind::cylinder: {
      // Radius 1, z in [-1, 1]; side area 4*pi, caps pi each.
      const double u = unit(rng) * 6.0 * kPi;
      const double theta = 2.0 * kPi * unit(rng);
      if (u < 4.0 * kPi) {
        p = {std::cos(theta), std::sin(theta), -1.0 + 2.0 * unit(rng)};
        n = {std::cos(theta), std::sin(theta), 0.0};
      } else {
        const double r = std::sqrt(unit(rng));
        const double z = u < 5.0 * kPi ? 1.0 : -1.0;
        p = {r * std::cos(theta), r * std::sin(theta), z};
        n = {0.0, 0.0, z};
      }
      return;
    }
    case ShapeKind::cone: {
      // Apex (0,0,1), base radius 1 at z = -1; slant length sqrt(5).
      const double side = kPi * std::sqrt(5.0);
      const double theta = 2.0 * kPi * unit(rng);
      if (unit(rng) * (side + kPi) < side) {
        const double t = std::sqrt(unit(rng));
        p = {t * std::cos(theta), t * std::sin(theta), 1.0 - 2.0 * t};
        const double s = 1.0 / std::sqrt(5.0);
        n = {2.0 * s * std::cos(theta), 2.0 * s * std::sin(theta), s};
      } else {
        const double r = std::sqrt(unit(rng));
        p = {r * std::cos(theta), r * std::sin(theta), -1.0};
        n = {0.0, 0.0, -1.0};
      }
      return;
    }
    case ShapeKind::torus: {
      constexpr double major = 1.0, minor = 0.35;
      double tube = 0.0;
      // Rejection on the tube angle gives area-uniform density.
      do {
        tube = 2.0 * kPi * unit(rng);
      } while (unit(rng) * (major + minor) > major + minor * std::cos(tube));
      const double around = 2.0 * kPi * unit(rng);
      const double ring = major + minor * std::cos(tube);
      p = {ring * std::cos(around), ring * std::sin(around), minor * std::sin(tube)};
      n = {std::cos(tube) * std::cos(around), std::cos(tube) * std::sin(around), std::sin(tube)};
      return;
    }
    case ShapeKind::plane:
      p = {-1.0 + 2.0 * unit(rng), -1.0 + 2.0 * unit(rng), 0.0};
      n = {0.0, 0.0, 1.0};
      return;
    case ShapeKind::two_spheres:
      sample_sphere(0.5, {unit(rng) < 0.5 ? -0.9 : 0.9, 0.0, 0.0}, rng, p, n);
      return;
    case ShapeKind::l_bracket: {
      // Union of a floor plate and an upright plate; surface points buried
      // inside the other plate are rejected.
      const Box floor{{-1.0, -0.3, -1.0}, {1.0, 0.3, -0.4}};
      const Box upright{{-1.0, -0.3, -1.0}, {-0.4, 0.3, 1.0}};
      auto area = [](const Box& b) {
        const double x = b.hi[0] - b.lo[0], y = b.hi[1] - b.lo[1], z = b.hi[2] - b.lo[2];
        return 2.0 * (x * y + y * z + x * z);
      };
      const double a0 = area(floor), a1 = area(upright);
      while (true) {
        const bool first = unit(rng) * (a0 + a1) < a0;
        sample_box(first ? floor : upright, rng, p, n);
        if (!(first ? upright : floor).strictly_inside(p)) return;
      }
    }
  }
}

}  // namespace

ShapeKind shape_from_name(std::string_view name) {
  for (ShapeKind kind : default_shape_classes()) {
    if (shape_name(kind) == name) return kind;
  }
  throw std::invalid_argument("unknown shape '" + std::string(name) +
                              "' (expected sphere, cube, cylinder, cone, torus, plane, two-spheres, L-bracket)");
}

std::string_view shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::cone: return "cone";
    case ShapeKind::torus: return "torus";
    case ShapeKind::plane: return "plane";
    case ShapeKind::two_spheres: return "two-spheres";
    case ShapeKind::l_bracket: return "L-bracket";
  }
  return "unknown";
}

std::vector<ShapeKind> default_shape_classes() {
  return {ShapeKind::sphere, ShapeKind::cube,  ShapeKind::cylinder,    ShapeKind::cone,
          ShapeKind::torus,  ShapeKind::plane, ShapeKind::two_spheres, ShapeKind::l_bracket};
}

PointCloud sample_shape(ShapeKind kind, std::size_t points, std::mt19937_64& rng) {
  if (points == 0) throw std::invalid_argument("sample_shape: need at least one point");
  PointCloud cloud;
  cloud.positions.resize(points);
  cloud.normals.resize(points);
  for (std::size_t i = 0; i < points; ++i) sample_point(kind, rng, cloud.positions[i], cloud.normals[i]);
  return cloud;
}

Dataset synth_dataset(const std::vector<ShapeKind>& classes, std::size_t per_class, std::size_t points,
                      double noise_sigma, std::uint64_t seed, std::string split) {
  if (classes.empty() || per_class == 0 || points == 0) {
    throw std::invalid_argument("synth_dataset: classes, per_class and points must be positive");
  }
  Dataset ds;
  ds.split = std::move(split);
  for (ShapeKind kind : classes) ds.class_names.emplace_back(shape_name(kind));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t label = 0; label < classes.size(); ++label) {
    for (std::size_t s = 0; s < per_class; ++s) {
      PointCloud cloud = sample_shape(classes[label], points, rng);
      const double angle = 2.0 * kPi * unit(rng);
      const double c = std::cos(angle), sn = std::sin(angle);
      const Vec3 stretch{0.8 + 0.4 * unit(rng), 0.8 + 0.4 * unit(rng), 0.8 + 0.4 * unit(rng)};
      for (std::size_t i = 0; i < points; ++i) {
        Vec3 p = cloud.positions[i];
        Vec3 n = cloud.normals[i];
        for (int d = 0; d < 3; ++d) {
          p[d] *= stretch[d];
          n[d] /= stretch[d];  // inverse-transpose keeps normals perpendicular
        }
        const double len = norm(n);
        for (double& v : n) v /= len;
        const Vec3 pr{c * p[0] - sn * p[1], sn * p[0] + c * p[1], p[2]};
        const Vec3 nr{c * n[0] - sn * n[1], sn * n[0] + c * n[1], n[2]};
        const double offset = noise_sigma > 0.0 ? noise_sigma * gauss(rng) : 0.0;
        for (int d = 0; d < 3; ++d) cloud.positions[i][d] = pr[d] + offset * nr[d];
        cloud.normals[i] = nr;
      }
      cloud = normalize(std::move(cloud));
      cloud.label = label;
      ds.clouds.push_back(std::move(cloud));
    }
  }
  return ds;
}

std::filesystem::path write_manifest(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / dataset.split);
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& cloud = dataset.clouds[i];
    const std::size_t label = cloud.label.value_or(0);
    std::ostringstream name;
    name << dataset.split << '/' << dataset.class_names.at(label) << '_' << std::setw(5)
         << std::setfill('0') << i << ".xyz";
    save_xyz(dir / name.str(), cloud);
    samples.push_back({{"path", name.str()}, {"label", label}});
  }
  const nlohmann::json manifest{
      {"classes", dataset.class_names}, {"split", dataset.split}, {"samples", samples}};
  const fs::path path = dir / (dataset.split + ".json");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << manifest.dump(2) << '\n';
  return path;
}

Dataset load_manifest(const std::filesystem::path& manifest, std::optional<std::size_t> points,
                      std::uint64_t seed) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("manifest is not valid JSON: ") + e.what(), 0);
  }
  Dataset ds;
  try {
    ds.class_names = doc.at("classes").get<std::vector<std::string>>();
    ds.split = doc.value("split", std::string("train"));
    const auto base = manifest.parent_path();
    std::size_t index = 0;
    for (const auto& entry : doc.at("samples")) {
      const std::size_t label = entry.at("label").get<std::size_t>();
      if (label >= ds.class_names.size()) {
        throw ParseError("label " + std::to_string(label) + " outside class table", 0);
      }
      PointCloud cloud = load_cloud(base / entry.at("path").get<std::string>());
      if (points) cloud = normalize(resample(cloud, *points, seed + index));
      cloud.label = label;
      ds.clouds.push_back(std::move(cloud));
      ++index;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed manifest: ") + e.what(), 0);
  }
  if (ds.clouds.empty()) throw ParseError("manifest lists no samples", 0);
  return ds;
}

}  // namespace ctn
