#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "test_support.hpp"

using namespace cmgr;
using cmgr::testing::TempDir;

namespace {

double dist_to_segment_2d(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  double t = ((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy);
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

TEST(GenerateShape, SphereIsUnitAfterNormalization) {
  const auto pc = normalize_unit_sphere(generate_shape(ShapeKind::Sphere, 256, 0, 0.0));
  for (Index i = 0; i < pc.size(); ++i) EXPECT_NEAR(pc.points.row(i).norm(), 1.0, 1e-6);
}

TEST(GenerateShape, CubeExtremes) {
  const auto pc = generate_shape(ShapeKind::Cube, 256, 7, 0.0);
  for (int a = 0; a < 3; ++a) {
    EXPECT_NEAR(pc.points.col(a).maxCoeff(), 1.0 / std::sqrt(3.0), 1e-12);
    EXPECT_NEAR(pc.points.col(a).minCoeff(), -1.0 / std::sqrt(3.0), 1e-12);
  }
  const auto n = normalize_unit_sphere(pc);
  EXPECT_NEAR(n.points.rowwise().norm().maxCoeff(), 1.0, 1e-12);
}

TEST(GenerateShape, ConeResidualWithinThreeSigma) {
  // Distance to the cone surface measured in the meridian half-plane: the
  // lateral edge from apex (0, 0.6) to rim (0.7, -0.6) and the base disk.
  const auto pc = generate_shape(ShapeKind::Cone, 512, 3, 0.02);
  for (Index i = 0; i < pc.size(); ++i) {
    const double r = std::hypot(pc.points(i, 0), pc.points(i, 2));
    const double y = pc.points(i, 1);
    const double d = std::min(dist_to_segment_2d(r, y, 0.0, 0.6, 0.7, -0.6), dist_to_segment_2d(r, y, 0.0, -0.6, 0.7, -0.6));
    EXPECT_LE(d, 3 * 0.02 + 1e-12);
  }
}

TEST(GenerateShape, DeterministicAndSeedSensitive) {
  for (ShapeKind k : kAllShapeKinds) {
    const auto a = generate_shape(k, 64, 9, 0.01);
    const auto b = generate_shape(k, 64, 9, 0.01);
    EXPECT_EQ(a.points, b.points) << to_string(k);
    EXPECT_NE(a.points, generate_shape(k, 64, 10, 0.01).points) << to_string(k);
    EXPECT_TRUE(a.points.allFinite());
  }
}

TEST(GenerateShape, Errors) {
  EXPECT_THROW(generate_shape(ShapeKind::Sphere, 15, 0, 0.0), InvalidArgument);
  EXPECT_THROW(generate_shape("dodecahedron", 64, 0, 0.0), InvalidArgument);
  EXPECT_THROW(generate_shape(ShapeKind::Sphere, 64, 0, -1.0), InvalidArgument);
}

TEST(Normalize, HandFixture) {
  PointCloud pc;
  pc.points.resize(4, 3);
  pc.points << 2, 0, 0, 0, 2, 0, 0, 0, 2, -2, -2, -2;
  const auto n = normalize_unit_sphere(pc);
  EXPECT_LT(n.points.colwise().mean().norm(), 1e-12);
  EXPECT_NEAR(n.points.rowwise().norm().maxCoeff(), 1.0, 1e-12);
}

TEST(Normalize, TwoPassOracle) {
  Rng rng(42);
  PointCloud pc;
  pc.points = cmgr::testing::random_mat(64, 3, rng, 2.5);
  const auto n = normalize_unit_sphere(pc);
  double mean[3] = {0, 0, 0};
  for (Index i = 0; i < 64; ++i) {
    for (int a = 0; a < 3; ++a) mean[a] += pc.points(i, a) / 64.0;
  }
  double far = 0.0;
  for (Index i = 0; i < 64; ++i) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += (pc.points(i, a) - mean[a]) * (pc.points(i, a) - mean[a]);
    far = std::max(far, std::sqrt(s));
  }
  for (Index i = 0; i < 64; ++i) {
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(n.points(i, a), (pc.points(i, a) - mean[a]) / far, 1e-12);
  }
}

TEST(Normalize, IdempotentAndAffineInvariant) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto pc = generate_shape(kAllShapeKinds[seed % 10], 128, seed, 0.01);
    const auto n = normalize_unit_sphere(pc);
    EXPECT_LT((normalize_unit_sphere(n).points - n.points).cwiseAbs().maxCoeff(), 1e-6);
    PointCloud moved = pc;
    moved.points *= 3.7;
    moved.points.rowwise() += RowVec<double>::Constant(3, -1.25);
    EXPECT_LT((normalize_unit_sphere(moved).points - n.points).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Normalize, DegenerateCloud) {
  PointCloud pc;
  pc.points = Mat<double>::Ones(20, 3);
  EXPECT_THROW(normalize_unit_sphere(pc), DegenerateInput);
}

TEST(Xyz, RoundTrip) {
  TempDir dir("xyz");
  auto pc = normalize_unit_sphere(generate_shape(ShapeKind::Sphere, 100, 0, 0.0));
  pc.label = "sphere";
  save_xyz(pc, dir.path() / "a.xyz");
  const auto back = load_xyz(dir.path() / "a.xyz");
  EXPECT_EQ(back.label, "sphere");
  EXPECT_LT((back.points - pc.points).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Xyz, HandWrittenAndMalformed) {
  TempDir dir("xyz2");
  {
    std::ofstream(dir.path() / "ok.xyz") << "label cube\n1 2 3\n-0.5 0 0.25\n\n4e-1 5 6\n";
    std::ofstream(dir.path() / "empty.xyz") << "label cube\n";
    std::ofstream(dir.path() / "bad.xyz") << "label cube\n1 2 3\n1 2\n";
    std::ofstream(dir.path() / "extra.xyz") << "label cube\n1 2 3 4\n";
    std::ofstream(dir.path() / "nohdr.xyz") << "1 2 3\n";
  }
  const auto pc = load_xyz(dir.path() / "ok.xyz");
  ASSERT_EQ(pc.size(), 3);
  EXPECT_EQ(pc.points(1, 0), -0.5);
  EXPECT_EQ(pc.points(1, 2), 0.25);
  EXPECT_EQ(pc.points(2, 0), 0.4);
  EXPECT_EQ(pc.label, "cube");
  EXPECT_THROW(load_xyz(dir.path() / "empty.xyz"), DegenerateInput);
  try {
    load_xyz(dir.path() / "bad.xyz");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(load_xyz(dir.path() / "extra.xyz"), ParseError);
  EXPECT_THROW(load_xyz(dir.path() / "nohdr.xyz"), ParseError);
  EXPECT_THROW(load_xyz(dir.path() / "missing.xyz"), IoError);
}

std::vector<ClassSamples> fake_classes(std::size_t n, std::size_t per_class) {
  std::vector<ClassSamples> out;
  for (std::size_t c = 0; c < n; ++c) {
    ClassSamples cs{"class" + std::to_string(c), {}};
    for (std::size_t i = 0; i < per_class; ++i) cs.sample_ids.push_back(make_sample_id(cs.name, "train", i));
    out.push_back(cs);
  }
  return out;
}

TEST(Schedule, Counting) {
  const auto s = build_schedule(fake_classes(10, 20), 6, 2, 5, 1, 2);
  ASSERT_EQ(s.task_count(), 3u);
  EXPECT_EQ(s.tasks[0].classes.size(), 6u);
  EXPECT_EQ(s.tasks[1].classes.size(), 2u);
  EXPECT_EQ(s.tasks[2].classes.size(), 2u);
  EXPECT_EQ(s.tasks[0].sample_count(), 120u);
  for (std::size_t t = 1; t < 3; ++t) {
    for (const auto& [c, ids] : s.tasks[t].samples) EXPECT_EQ(ids.size(), 5u);
  }
}

TEST(Schedule, FullScaleRatio) {
  const auto s = build_schedule(fake_classes(89, 10), 39, 10, 5, 3);
  EXPECT_EQ(s.tasks[0].classes.size(), 39u);
  std::size_t novel = 0;
  for (std::size_t t = 1; t < s.task_count(); ++t) novel += s.tasks[t].classes.size();
  EXPECT_EQ(novel, 50u);
}

TEST(Schedule, DisjointOverManySeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = build_schedule(fake_classes(12, 8), 4 + seed % 3, 3, 1 + seed % 4, seed, 2);
    std::set<std::string> seen;
    for (const auto& t : s.tasks) {
      for (const auto& c : t.classes) ASSERT_TRUE(seen.insert(c).second) << "seed " << seed;
    }
    for (std::size_t t = 1; t < s.task_count(); ++t) ASSERT_GT(s.tasks[0].sample_count(), s.tasks[t].sample_count());
  }
}

TEST(Schedule, ShotsComeFromTheClass) {
  const auto s = build_schedule(fake_classes(6, 10), 4, 1, 3, 5, 2);
  for (const auto& [c, ids] : s.tasks[1].samples) {
    for (const auto& id : ids) EXPECT_EQ(id.rfind(c + "_", 0), 0u);
  }
}

TEST(Schedule, Errors) {
  EXPECT_THROW(build_schedule(fake_classes(5, 10), 4, 1, 5, 0, 2), InvalidArgument);
  EXPECT_THROW(build_schedule(fake_classes(6, 10), 4, 1, 0, 0, 2), InvalidArgument);
  EXPECT_THROW(build_schedule(fake_classes(6, 4), 4, 1, 5, 0, 2), InvalidArgument);
}

TEST(Schedule, SerializeRoundTrip) {
  const auto s = build_schedule(fake_classes(8, 6), 4, 2, 2, 9, 2);
  const auto back = parse_schedule(serialize_schedule(s));
  ASSERT_EQ(back.task_count(), s.task_count());
  EXPECT_EQ(back.shots, s.shots);
  for (std::size_t t = 0; t < s.task_count(); ++t) {
    EXPECT_EQ(back.tasks[t].classes, s.tasks[t].classes);
    EXPECT_EQ(back.tasks[t].samples, s.tasks[t].samples);
  }
}

TEST(Dataset, WriteLoadRoundTrip) {
  TempDir dir("ds");
  SyntheticDataSpec spec{{"sphere", "cube", "flat_box"}, 3, 2, 32, 0.01, 5};
  const auto ds = generate_dataset(spec);
  write_dataset(ds, dir.path());
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "cube" / "cube_train_0000.xyz"));
  const auto back = load_dataset(dir.path());
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.test, ds.test);
  for (const auto& [id, pc] : ds.samples) {
    EXPECT_LT((back.at(id).points - pc.points).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_NEAR(pc.points.rowwise().norm().maxCoeff(), 1.0, 1e-9);
  }
}

TEST(Dataset, Deterministic) {
  SyntheticDataSpec spec{{"torus", "helix"}, 2, 1, 64, 0.01, 1};
  const auto a = generate_dataset(spec), b = generate_dataset(spec);
  for (const auto& [id, pc] : a.samples) EXPECT_EQ(pc.points, b.at(id).points);
}

TEST(Augment, StaysNormalized) {
  Rng rng(3);
  const auto pc = cmgr::testing::fixture_cloud("cone", 0);
  const auto a = augment_cloud(pc, rng);
  EXPECT_EQ(a.size(), pc.size());
  EXPECT_NEAR(a.points.rowwise().norm().maxCoeff(), 1.0, 1e-9);
  EXPECT_LT(a.points.colwise().mean().norm(), 1e-9);
  EXPECT_NE(a.points, pc.points);
}

}  // namespace
