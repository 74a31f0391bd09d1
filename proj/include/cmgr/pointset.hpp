#pragma once

// Synthetic point clouds, normalization, on-disk formats and the base /
// incremental task schedule.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmgr/core/autodiff.hpp"
#include "cmgr/core/errors.hpp"
#include "cmgr/core/random.hpp"

namespace cmgr {

inline constexpr Index kMinPoints = 16;

struct PointCloud {
  Mat<double> points;  // N x 3
  std::string label;
  std::string id;

  Index size() const { return points.rows(); }
};

enum class ShapeKind { Sphere, Cube, Cylinder, Cone, Torus, Pyramid, Ellipsoid, Helix, Cross, Ring };

inline constexpr std::array<ShapeKind, 10> kAllShapeKinds = {
    ShapeKind::Sphere, ShapeKind::Cube,      ShapeKind::Cylinder, ShapeKind::Cone,  ShapeKind::Torus,
    ShapeKind::Pyramid, ShapeKind::Ellipsoid, ShapeKind::Helix,    ShapeKind::Cross, ShapeKind::Ring};

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Cone: return "cone";
    case ShapeKind::Torus: return "torus";
    case ShapeKind::Pyramid: return "pyramid";
    case ShapeKind::Ellipsoid: return "ellipsoid";
    case ShapeKind::Helix: return "helix";
    case ShapeKind::Cross: return "cross";
    case ShapeKind::Ring: return "ring";
  }
  throw InvalidArgument("unknown shape kind");
}

inline ShapeKind parse_shape_kind(const std::string& name) {
  for (ShapeKind k : kAllShapeKinds) {
    if (to_string(k) == name) return k;
  }
  throw InvalidArgument("unknown shape kind '" + name + "'");
}

// Dimensions of the parametric families. All of them fit inside the unit sphere.
namespace shape_dims {
inline const double kCubeHalf = 1.0 / std::sqrt(3.0);
inline constexpr double kCylinderRadius = 0.6;
inline constexpr double kCylinderHalfHeight = 0.6;
inline constexpr double kConeRadius = 0.7;
inline constexpr double kConeBaseY = -0.6;
inline constexpr double kConeApexY = 0.6;
inline constexpr double kTorusMajor = 0.7;
inline constexpr double kTorusMinor = 0.25;
inline constexpr double kPyramidHalfBase = 0.6;
inline constexpr double kPyramidBaseY = -0.5;
inline constexpr double kPyramidApexY = 0.7;
inline constexpr std::array<double, 3> kEllipsoidAxes = {1.0, 0.5, 0.35};
inline constexpr double kHelixRadius = 0.55;
inline constexpr double kHelixTurns = 2.0;
inline constexpr double kHelixHalfHeight = 0.7;
inline constexpr double kHelixTube = 0.08;
inline constexpr double kCrossLong = 0.85;
inline constexpr double kCrossThin = 0.18;
inline constexpr double kRingInner = 0.5;
inline constexpr double kRingOuter = 0.9;
}  // namespace shape_dims

namespace detail {

using Vec3 = std::array<double, 3>;

inline Vec3 sample_box_surface(const Vec3& half, Rng& rng) {
  const double ax = half[1] * half[2], ay = half[0] * half[2], az = half[0] * half[1];
  const double total = 2.0 * (ax + ay + az);
  double u = rng.uniform() * total;
  int axis = 0;
  if (u < 2.0 * ax) {
    axis = 0;
  } else if (u < 2.0 * (ax + ay)) {
    axis = 1;
  } else {
    axis = 2;
  }
  const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
  Vec3 p{};
  for (int a = 0; a < 3; ++a) {
    p[a] = a == axis ? sign * half[a] : rng.uniform(-half[a], half[a]);
  }
  return p;
}

inline Vec3 sample_triangle(const Vec3& a, const Vec3& b, const Vec3& c, Rng& rng) {
  double r1 = rng.uniform(), r2 = rng.uniform();
  if (r1 + r2 > 1.0) {
    r1 = 1.0 - r1;
    r2 = 1.0 - r2;
  }
  Vec3 p{};
  for (int i = 0; i < 3; ++i) p[i] = a[i] + r1 * (b[i] - a[i]) + r2 * (c[i] - a[i]);
  return p;
}

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const Vec3 x{u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
  return 0.5 * std::sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
}

inline Vec3 sample_surface(ShapeKind kind, Rng& rng) {
  using namespace shape_dims;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  switch (kind) {
    case ShapeKind::Sphere: {
      Vec3 g{rng.normal(), rng.normal(), rng.normal()};
      double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
      while (n < 1e-12) {
        g = {rng.normal(), rng.normal(), rng.normal()};
        n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
      }
      return {g[0] / n, g[1] / n, g[2] / n};
    }
    case ShapeKind::Cube:
      return sample_box_surface({kCubeHalf, kCubeHalf, kCubeHalf}, rng);
    case ShapeKind::Cylinder: {
      const double side = kTwoPi * kCylinderRadius * 2.0 * kCylinderHalfHeight;
      const double cap = std::numbers::pi * kCylinderRadius * kCylinderRadius;
      const double u = rng.uniform() * (side + 2.0 * cap);
      const double theta = rng.uniform() * kTwoPi;
      if (u < side) {
        return {kCylinderRadius * std::cos(theta), rng.uniform(-kCylinderHalfHeight, kCylinderHalfHeight),
                kCylinderRadius * std::sin(theta)};
      }
      const double r = kCylinderRadius * std::sqrt(rng.uniform());
      const double y = u < side + cap ? kCylinderHalfHeight : -kCylinderHalfHeight;
      return {r * std::cos(theta), y, r * std::sin(theta)};
    }
    case ShapeKind::Cone: {
      const double height = kConeApexY - kConeBaseY;
      const double slant = std::sqrt(height * height + kConeRadius * kConeRadius);
      const double lateral = std::numbers::pi * kConeRadius * slant;
      const double base = std::numbers::pi * kConeRadius * kConeRadius;
      const double theta = rng.uniform() * kTwoPi;
      if (rng.uniform() * (lateral + base) < lateral) {
        const double t = std::sqrt(rng.uniform());  // fraction of the way from apex to rim
        const double r = t * kConeRadius;
        return {r * std::cos(theta), kConeApexY - t * height, r * std::sin(theta)};
      }
      const double r = kConeRadius * std::sqrt(rng.uniform());
      return {r * std::cos(theta), kConeBaseY, r * std::sin(theta)};
    }
    case ShapeKind::Torus: {
      // Rejection on the area element (R + r cos v).
      for (;;) {
        const double u = rng.uniform() * kTwoPi;
        const double v = rng.uniform() * kTwoPi;
        const double w = rng.uniform() * (kTorusMajor + kTorusMinor);
        if (w <= kTorusMajor + kTorusMinor * std::cos(v)) {
          const double rr = kTorusMajor + kTorusMinor * std::cos(v);
          return {rr * std::cos(u), kTorusMinor * std::sin(v), rr * std::sin(u)};
        }
      }
    }
    case ShapeKind::Pyramid: {
      const double b = kPyramidHalfBase;
      const Vec3 apex{0.0, kPyramidApexY, 0.0};
      const std::array<Vec3, 4> corners = {Vec3{-b, kPyramidBaseY, -b}, Vec3{b, kPyramidBaseY, -b},
                                           Vec3{b, kPyramidBaseY, b}, Vec3{-b, kPyramidBaseY, b}};
      std::array<double, 5> area{};
      for (int i = 0; i < 4; ++i) area[i] = triangle_area(apex, corners[i], corners[(i + 1) % 4]);
      area[4] = 4.0 * b * b;
      double total = 0.0;
      for (double a : area) total += a;
      double u = rng.uniform() * total;
      for (int i = 0; i < 4; ++i) {
        if (u < area[i]) return sample_triangle(apex, corners[i], corners[(i + 1) % 4], rng);
        u -= area[i];
      }
      return {rng.uniform(-b, b), kPyramidBaseY, rng.uniform(-b, b)};
    }
    case ShapeKind::Ellipsoid: {
      const Vec3 s = sample_surface(ShapeKind::Sphere, rng);
      return {s[0] * kEllipsoidAxes[0], s[1] * kEllipsoidAxes[1], s[2] * kEllipsoidAxes[2]};
    }
    case ShapeKind::Helix: {
      // Tube of radius kHelixTube around a helical centre line.
      const double t = rng.uniform();
      const double phi = t * kHelixTurns * kTwoPi;
      const Vec3 c{kHelixRadius * std::cos(phi), -kHelixHalfHeight + 2.0 * kHelixHalfHeight * t,
                   kHelixRadius * std::sin(phi)};
      const double dphi = kHelixTurns * kTwoPi;
      Vec3 tan{-kHelixRadius * dphi * std::sin(phi), 2.0 * kHelixHalfHeight, kHelixRadius * dphi * std::cos(phi)};
      const double tn = std::sqrt(tan[0] * tan[0] + tan[1] * tan[1] + tan[2] * tan[2]);
      for (double& x : tan) x /= tn;
      const Vec3 n1{std::cos(phi), 0.0, std::sin(phi)};  // radial, orthogonal to tan
      const Vec3 n2{tan[1] * n1[2] - tan[2] * n1[1], tan[2] * n1[0] - tan[0] * n1[2],
                    tan[0] * n1[1] - tan[1] * n1[0]};
      const double a = rng.uniform() * kTwoPi;
      Vec3 p{};
      for (int i = 0; i < 3; ++i) p[i] = c[i] + kHelixTube * (std::cos(a) * n1[i] + std::sin(a) * n2[i]);
      return p;
    }
    case ShapeKind::Cross: {
      if (rng.uniform() < 0.5) return sample_box_surface({kCrossLong, kCrossThin, kCrossThin}, rng);
      return sample_box_surface({kCrossThin, kCrossLong, kCrossThin}, rng);
    }
    case ShapeKind::Ring: {
      const double r2 = rng.uniform(kRingInner * kRingInner, kRingOuter * kRingOuter);
      const double r = std::sqrt(r2);
      const double theta = rng.uniform() * kTwoPi;
      return {r * std::cos(theta), 0.0, r * std::sin(theta)};
    }
  }
  throw InvalidArgument("unknown shape kind");
}

}  // namespace detail

// Points on the surface of `kind`, each displaced by isotropic Gaussian noise of
// standard deviation `jitter` whose length is truncated at 3 * jitter.
inline PointCloud generate_shape(ShapeKind kind, Index n_points, std::uint64_t seed, double jitter) {
  if (n_points < kMinPoints) throw InvalidArgument("generate_shape: need at least 16 points");
  if (!(jitter >= 0.0) || !std::isfinite(jitter)) throw InvalidArgument("generate_shape: jitter must be >= 0");
  Rng rng(seed);
  PointCloud pc;
  pc.label = to_string(kind);
  pc.points.resize(n_points, 3);
  std::array<double, 3> last_noise{};
  for (Index i = 0; i < n_points; ++i) {
    // Spheres are sampled in antipodal pairs so the centroid of the clean
    // surface points is exactly the origin.
    std::array<double, 3> p{};
    if (kind == ShapeKind::Sphere && i % 2 == 1) {
      for (int a = 0; a < 3; ++a) p[a] = -(pc.points(i - 1, a) - last_noise[a]);
    } else {
      p = detail::sample_surface(kind, rng);
    }
    std::array<double, 3> noise{};
    if (jitter > 0.0) {
      noise = {rng.normal() * jitter, rng.normal() * jitter, rng.normal() * jitter};
      const double len = std::sqrt(noise[0] * noise[0] + noise[1] * noise[1] + noise[2] * noise[2]);
      if (len > 3.0 * jitter) {
        for (double& x : noise) x *= 3.0 * jitter / len;
      }
    }
    for (int a = 0; a < 3; ++a) pc.points(i, a) = p[a] + noise[a];
    last_noise = noise;
  }
  return pc;
}

inline PointCloud generate_shape(const std::string& kind, Index n_points, std::uint64_t seed, double jitter) {
  return generate_shape(parse_shape_kind(kind), n_points, seed, jitter);
}

// Centroid to the origin, farthest point to unit distance.
inline PointCloud normalize_unit_sphere(const PointCloud& pc) {
  if (pc.points.rows() < 1 || pc.points.cols() != 3) throw InvalidArgument("normalize: need an N x 3 cloud, N >= 1");
  if (!pc.points.allFinite()) throw InvalidArgument("normalize: non-finite coordinates");
  PointCloud out = pc;
  const RowVec<double> mean = pc.points.colwise().mean();
  out.points.rowwise() -= mean;
  const double scale = out.points.rowwise().norm().maxCoeff();
  if (!(scale > 1e-12)) throw DegenerateInput("normalize: all points coincide");
  out.points /= scale;
  return out;
}

// --- class catalog --------------------------------------------------------

// A synthetic class: a shape family with a fixed aspect. The name doubles as the
// class description used for prototype lookup.
struct ClassSpec {
  std::string name;
  ShapeKind kind;
  std::array<double, 3> aspect;
};

inline const std::vector<ClassSpec>& class_catalog() {
  static const std::vector<ClassSpec> catalog = {
      {"sphere", ShapeKind::Sphere, {1.0, 1.0, 1.0}},
      {"cube", ShapeKind::Cube, {1.0, 1.0, 1.0}},
      {"cylinder", ShapeKind::Cylinder, {1.0, 1.0, 1.0}},
      {"cone", ShapeKind::Cone, {1.0, 1.0, 1.0}},
      {"torus", ShapeKind::Torus, {1.0, 1.0, 1.0}},
      {"pyramid", ShapeKind::Pyramid, {1.0, 1.0, 1.0}},
      {"ellipsoid", ShapeKind::Ellipsoid, {1.0, 1.0, 1.0}},
      {"helix", ShapeKind::Helix, {1.0, 1.0, 1.0}},
      {"cross", ShapeKind::Cross, {1.0, 1.0, 1.0}},
      {"ring", ShapeKind::Ring, {1.0, 1.0, 1.0}},
      {"tall_cylinder", ShapeKind::Cylinder, {0.45, 1.8, 0.45}},
      {"flat_box", ShapeKind::Cube, {1.6, 0.35, 1.6}},
      {"squat_cone", ShapeKind::Cone, {1.6, 0.55, 1.6}},
      {"tall_pyramid", ShapeKind::Pyramid, {0.55, 1.8, 0.55}},
      {"long_box", ShapeKind::Cube, {2.0, 0.5, 0.5}},
      {"tall_helix", ShapeKind::Helix, {0.6, 1.8, 0.6}},
  };
  return catalog;
}

inline const ClassSpec& find_class_spec(const std::string& name) {
  for (const auto& c : class_catalog()) {
    if (c.name == name) return c;
  }
  throw InvalidArgument("unknown class '" + name + "'");
}

inline std::uint64_t sample_seed(std::uint64_t seed, const std::string& sample_id) {
  return fnv1a(sample_id, kFnvOffset ^ (seed * 0x9E3779B97F4A7C15ULL));
}

// One normalized sample of a catalog class with a small random anisotropic scale.
inline PointCloud generate_class_sample(const ClassSpec& spec, const std::string& sample_id, Index n_points,
                                        std::uint64_t seed, double jitter, double scale_jitter = 0.12) {
  const std::uint64_t s = sample_seed(seed, sample_id);
  PointCloud pc = generate_shape(spec.kind, n_points, s, jitter);
  Rng rng(s ^ 0xA5A5A5A5ULL);
  for (int a = 0; a < 3; ++a) {
    pc.points.col(a) *= spec.aspect[a] * rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter);
  }
  pc = normalize_unit_sphere(pc);
  pc.label = spec.name;
  pc.id = sample_id;
  return pc;
}

// Perturbed copy: per-axis scale in [1 - s, 1 + s], Gaussian noise, random
// point duplication in place of dropped points, then renormalization.
inline PointCloud augment_cloud(const PointCloud& pc, Rng& rng, double scale_jitter = 0.12, double jitter = 0.01,
                                double drop = 0.1) {
  PointCloud out = pc;
  const Index n = pc.points.rows();
  for (Index i = 0; i < n; ++i) {
    if (rng.uniform() < drop) out.points.row(i) = pc.points.row(static_cast<Index>(rng.index(static_cast<std::size_t>(n))));
  }
  for (int a = 0; a < 3; ++a) out.points.col(a) *= rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter);
  for (Index i = 0; i < out.points.size(); ++i) out.points.data()[i] += rng.normal() * jitter;
  return normalize_unit_sphere(out);
}

// --- xyz files ------------------------------------------------------------

inline void save_xyz(const PointCloud& pc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing", path.string());
  out << "label " << pc.label << '\n';
  char buf[96];
  for (Index i = 0; i < pc.points.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", pc.points(i, 0), pc.points(i, 1), pc.points(i, 2));
    out << buf;
  }
  if (!out) throw IoError("write failed", path.string());
}

inline PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading", path.string());
  PointCloud pc;
  pc.id = path.stem().string();
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("missing 'label' header in " + path.string(), 1);
  ++line_no;
  if (line.rfind("label ", 0) != 0 || line.size() <= 6) {
    throw ParseError("expected 'label <name>' header in " + path.string(), line_no);
  }
  pc.label = line.substr(6);
  std::vector<std::array<double, 3>> pts;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    std::array<double, 3> p{};
    std::string extra;
    if (!(ss >> p[0] >> p[1] >> p[2]) || (ss >> extra)) {
      throw ParseError("malformed point line in " + path.string(), line_no);
    }
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw ParseError("non-finite coordinate in " + path.string(), line_no);
    }
    pts.push_back(p);
  }
  if (pts.empty()) throw DegenerateInput("empty cloud: " + path.string());
  pc.points.resize(static_cast<Index>(pts.size()), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (int a = 0; a < 3; ++a) pc.points(static_cast<Index>(i), a) = pts[i][a];
  }
  return pc;
}

// --- datasets -------------------------------------------------------------

// In-memory dataset: every sample by id, plus train/test id lists per class.
struct Dataset {
  std::map<std::string, PointCloud> samples;
  std::map<std::string, std::vector<std::string>> train;
  std::map<std::string, std::vector<std::string>> test;

  const PointCloud& at(const std::string& id) const {
    auto it = samples.find(id);
    if (it == samples.end()) throw InvalidArgument("unknown sample '" + id + "'");
    return it->second;
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    for (const auto& [k, v] : train) names.push_back(k);
    return names;
  }
};

inline std::string make_sample_id(const std::string& cls, const std::string& split, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04zu", i);
  return cls + "_" + split + "_" + buf;
}

struct SyntheticDataSpec {
  std::vector<std::string> classes;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;
  Index points = 512;
  double jitter = 0.01;
  std::uint64_t seed = 0;
};

inline Dataset generate_dataset(const SyntheticDataSpec& spec) {
  Dataset ds;
  for (const auto& cls : spec.classes) {
    const ClassSpec& cs = find_class_spec(cls);
    auto& tr = ds.train[cls];
    auto& te = ds.test[cls];
    for (std::size_t i = 0; i < spec.train_per_class; ++i) {
      auto id = make_sample_id(cls, "train", i);
      ds.samples.emplace(id, generate_class_sample(cs, id, spec.points, spec.seed, spec.jitter));
      tr.push_back(id);
    }
    for (std::size_t i = 0; i < spec.test_per_class; ++i) {
      auto id = make_sample_id(cls, "test", i);
      ds.samples.emplace(id, generate_class_sample(cs, id, spec.points, spec.seed, spec.jitter));
      te.push_back(id);
    }
  }
  return ds;
}

// Layout: <dir>/<class>/<sample_id>.xyz; ids containing "_test_" form the test split.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  for (const auto& [id, pc] : ds.samples) {
    const auto cls_dir = dir / pc.label;
    std::filesystem::create_directories(cls_dir);
    save_xyz(pc, cls_dir / (id + ".xyz"));
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a dataset directory", dir.string());
  Dataset ds;
  std::vector<std::filesystem::path> class_dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const auto& cdir : class_dirs) {
    const std::string cls = cdir.filename().string();
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(cdir)) {
      if (e.is_regular_file() && e.path().extension() == ".xyz") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    auto& tr = ds.train[cls];
    auto& te = ds.test[cls];
    for (const auto& f : files) {
      PointCloud pc = load_xyz(f);
      if (pc.label != cls) throw ParseError("label '" + pc.label + "' does not match directory " + cls, 1);
      (pc.id.find("_test_") != std::string::npos ? te : tr).push_back(pc.id);
      ds.samples.emplace(pc.id, std::move(pc));
    }
  }
  if (ds.samples.empty()) throw IoError("no .xyz files found", dir.string());
  return ds;
}

// --- schedule -------------------------------------------------------------

struct ClassSamples {
  std::string name;
  std::vector<std::string> sample_ids;
};

struct Task {
  std::vector<std::string> classes;
  std::map<std::string, std::vector<std::string>> samples;

  std::size_t sample_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : samples) n += v.size();
    return n;
  }
};

struct IncrementalSchedule {
  std::vector<Task> tasks;
  std::size_t shots = 0;

  std::size_t task_count() const { return tasks.size(); }

  // Classes of tasks 0..t in schedule order.
  std::vector<std::string> classes_upto(std::size_t t) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i <= t && i < tasks.size(); ++i) {
      out.insert(out.end(), tasks[i].classes.begin(), tasks[i].classes.end());
    }
    return out;
  }

  // Classes of tasks 1..t.
  std::vector<std::string> novel_classes_upto(std::size_t t) const {
    std::vector<std::string> out;
    for (std::size_t i = 1; i <= t && i < tasks.size(); ++i) {
      out.insert(out.end(), tasks[i].classes.begin(), tasks[i].classes.end());
    }
    return out;
  }
};

// Base task takes `base_count` classes with all their samples; each of the
// `tasks` incremental tasks takes `ways` classes with `shots` samples each.
// ways == 0 divides the remaining classes evenly.
inline IncrementalSchedule build_schedule(const std::vector<ClassSamples>& classes, std::size_t base_count,
                                          std::size_t tasks, std::size_t shots, std::uint64_t seed,
                                          std::size_t ways = 0) {
  if (shots < 1) throw InvalidArgument("build_schedule: shots must be >= 1");
  if (base_count < 1) throw InvalidArgument("build_schedule: base task needs at least one class");
  std::set<std::string> names;
  for (const auto& c : classes) {
    if (!names.insert(c.name).second) throw InvalidArgument("build_schedule: duplicate class '" + c.name + "'");
  }
  if (ways == 0 && tasks > 0) {
    if (classes.size() < base_count) throw InvalidArgument("build_schedule: insufficient classes");
    ways = (classes.size() - base_count) / tasks;
    if (ways == 0) throw InvalidArgument("build_schedule: insufficient classes for incremental tasks");
  }
  if (base_count + tasks * ways > classes.size()) throw InvalidArgument("build_schedule: insufficient classes");

  Rng rng(seed);
  std::vector<std::size_t> order(classes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  IncrementalSchedule s;
  s.shots = shots;
  Task base;
  for (std::size_t i = 0; i < base_count; ++i) {
    const auto& c = classes[order[i]];
    if (c.sample_ids.empty()) throw InvalidArgument("build_schedule: base class '" + c.name + "' has no samples");
    base.classes.push_back(c.name);
    base.samples[c.name] = c.sample_ids;
  }
  s.tasks.push_back(std::move(base));
  for (std::size_t t = 0; t < tasks; ++t) {
    Task task;
    for (std::size_t j = 0; j < ways; ++j) {
      const auto& c = classes[order[base_count + t * ways + j]];
      if (c.sample_ids.size() < shots) {
        throw InvalidArgument("build_schedule: class '" + c.name + "' has fewer samples than shots");
      }
      std::vector<std::string> ids = c.sample_ids;
      rng.shuffle(ids);
      ids.resize(shots);
      std::sort(ids.begin(), ids.end());
      task.classes.push_back(c.name);
      task.samples[c.name] = std::move(ids);
    }
    s.tasks.push_back(std::move(task));
  }
  for (std::size_t t = 1; t < s.tasks.size(); ++t) {
    if (s.tasks[0].sample_count() <= s.tasks[t].sample_count()) {
      throw InvalidArgument("build_schedule: base task must hold more samples than every incremental task");
    }
  }
  return s;
}

inline std::string join(const std::vector<std::string>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

inline std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Flat "key = value" text: schedule.tasks, schedule.shots, task.<t>.classes,
// task.<t>.samples.<class>.
inline std::string serialize_schedule(const IncrementalSchedule& s) {
  std::ostringstream out;
  out << "schedule.tasks = " << s.tasks.size() << '\n';
  out << "schedule.shots = " << s.shots << '\n';
  for (std::size_t t = 0; t < s.tasks.size(); ++t) {
    out << "task." << t << ".classes = " << join(s.tasks[t].classes) << '\n';
    for (const auto& c : s.tasks[t].classes) {
      out << "task." << t << ".samples." << c << " = " << join(s.tasks[t].samples.at(c)) << '\n';
    }
  }
  return out.str();
}

inline IncrementalSchedule parse_schedule(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string tl = trim(line);
    if (tl.empty() || tl[0] == '#') continue;
    const auto eq = tl.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    kv[trim(tl.substr(0, eq))] = trim(tl.substr(eq + 1));
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ParseError("missing key '" + k + "'", line_no);
    return it->second;
  };
  IncrementalSchedule s;
  const std::size_t n = std::stoul(get("schedule.tasks"));
  s.shots = std::stoul(get("schedule.shots"));
  for (std::size_t t = 0; t < n; ++t) {
    Task task;
    task.classes = split(get("task." + std::to_string(t) + ".classes"));
    for (const auto& c : task.classes) {
      task.samples[c] = split(get("task." + std::to_string(t) + ".samples." + c));
    }
    s.tasks.push_back(std::move(task));
  }
  return s;
}

// Stored representatives per learned class.
struct ExemplarStore {
  std::size_t per_class = 1;
  std::map<std::string, std::vector<std::string>> exemplars;

  bool contains(const std::string& cls) const { return exemplars.count(cls) != 0; }
};

}  // namespace cmgr
