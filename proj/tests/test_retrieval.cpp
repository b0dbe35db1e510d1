#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <unordered_map>

#include "test_support.hpp"
#include "vistr/retrieval.hpp"

namespace vistr {
namespace {

std::vector<std::uint32_t> brute_radius(const std::vector<Point3>& pts, const Point3& q, double r) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t i = 0; i < pts.size(); ++i)
    if ((pts[i] - q).squaredNorm() <= r * r) out.push_back(i);
  return out;
}

std::vector<Point3> random_cloud(std::mt19937_64& rng, std::size_t n, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<Point3> pts;
  for (std::size_t i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  return pts;
}

TEST(KdTree, RadiusSearchEqualsBruteForce) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> r(0.01, 30.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = random_cloud(rng, 50 + 200 * trial, 50.0);
    const KdTree tree(pts, 1 + trial % 20);
    for (int q = 0; q < 50; ++q) {
      const auto query = random_cloud(rng, 1, 60.0)[0];
      const double rad = r(rng);
      ASSERT_EQ(tree.radius_search(query, rad), brute_radius(pts, query, rad));
    }
  }
}

TEST(KdTree, BoundaryDistanceIsInclusive) {
  std::vector<Point3> grid;
  for (int x = 0; x < 10; ++x)
    for (int y = 0; y < 10; ++y)
      for (int z = 0; z < 10; ++z) grid.emplace_back(x, y, z);
  const KdTree tree(grid, 4);
  for (const Point3 q : {Point3(5, 5, 5), Point3(0, 0, 0), Point3(9, 0, 3)})
    for (double r : {1.0, 2.0, 3.0})
      EXPECT_EQ(tree.radius_search(q, r), brute_radius(grid, q, r));
}

TEST(KdTree, DuplicatesAndCoincidentPoints) {
  std::vector<Point3> pts(100, Point3(1, 1, 1));
  pts.emplace_back(2, 1, 1);
  pts.emplace_back(1, 1, 1);
  const KdTree tree(pts, 2);
  EXPECT_EQ(tree.radius_search(Point3(1, 1, 1), 0.5).size(), 101u);
  EXPECT_EQ(tree.radius_search(Point3(2, 1, 1), 1.0).size(), 102u);
}

TEST(KdTree, EmptyPointSetIsEmptyMapError) {
  try {
    KdTree tree(std::vector<Point3>{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyMap);
  }
}

TEST(KdTree, DepthIsLogarithmic) {
  std::mt19937_64 rng(2);
  const KdTree tree(random_cloud(rng, 100000, 100.0), 16);
  EXPECT_LE(tree.depth(), 14u);
  for (const auto& n : tree.nodes())
    if (n.is_leaf()) EXPECT_LE(n.end - n.begin, 16u);
}

TEST(Voxel, MatchesHashGridOracle) {
  std::mt19937_64 rng(3);
  for (double v : {0.5, 1.0, 3.7}) {
    const auto pts = random_cloud(rng, 3000, 20.0);
    struct Acc {
      Eigen::Vector3d sum = Eigen::Vector3d::Zero();
      int n = 0;
    };
    std::map<std::tuple<long, long, long>, Acc> grid;
    for (const auto& p : pts) {
      auto& a = grid[{std::lround(std::floor(p.x() / v)), std::lround(std::floor(p.y() / v)),
                      std::lround(std::floor(p.z() / v))}];
      a.sum += p;
      ++a.n;
    }
    const auto out = voxel_downsample(pts, v);
    ASSERT_EQ(out.size(), grid.size());
    std::size_t k = 0;
    for (const auto& [key, a] : grid) EXPECT_LT((out[k++] - a.sum / a.n).norm(), 1e-12);
  }
}

TEST(Voxel, CentroidsStayNearTheirPoints) {
  std::mt19937_64 rng(4);
  const double v = 2.0;
  const auto pts = random_cloud(rng, 2000, 10.0);
  const auto out = voxel_downsample(pts, v);
  EXPECT_LE(out.size(), pts.size());
  const KdTree tree(out, 8);
  for (const auto& p : pts) EXPECT_FALSE(tree.radius_search(p, std::sqrt(3.0) * v).empty());
  EXPECT_THROW(voxel_downsample(pts, 0.0), Error);
}

SceneBundle bundle_from(const std::vector<Point3>& pts) {
  SceneBundle b;
  b.embedding_dim = 2;
  b.descriptor_dim = 4;
  b.intrinsics.push_back({0, 100, 100, 50, 50, 100, 100});
  std::mt19937_64 rng(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i)
    b.points.push_back({5 * pts.size() - 3 * i, pts[i], random_unit_descriptor(4, rng)});
  MappingImage img;
  img.embedding = Embedding::Zero(2);
  img.visible_point_ids = {b.points[0].id};
  b.images.push_back(img);
  b.norm = compute_norm_transform(b.positions());
  return b;
}

TEST(RadiusRetrieve, EqualsBruteForceUnion) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> n_map(100, 5000), n_gen(1, 200);
  std::uniform_real_distribution<double> r(0.1, 10.0);
  for (int trial = 0; trial < 15; ++trial) {
    const SceneBundle b = bundle_from(random_cloud(rng, n_map(rng), 40.0));
    const SpatialIndex index = build_spatial_index(b.positions());
    GeneratedPointSet g;
    g.points = random_cloud(rng, n_gen(rng), 45.0);
    const double rad = r(rng);
    const Submap s = radius_retrieve(index, b, g, rad, 0.0);
    std::vector<std::uint64_t> expected;
    for (const auto& p : b.points)
      for (const auto& q : g.points)
        if ((p.position - q).squaredNorm() <= rad * rad) {
          expected.push_back(p.id);
          break;
        }
    std::sort(expected.begin(), expected.end());
    ASSERT_EQ(s.ids, expected);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const auto& p = b.points[s.point_indices[k]];
      EXPECT_EQ(p.id, s.ids[k]);
      EXPECT_EQ(p.position, s.positions[k]);
      EXPECT_EQ(Descriptor(s.descriptors.col(k)), p.descriptor);
    }
  }
}

TEST(RadiusRetrieve, MonotoneInRadius) {
  std::mt19937_64 rng(6);
  const SceneBundle b = bundle_from(random_cloud(rng, 2000, 30.0));
  const SpatialIndex index = build_spatial_index(b.positions());
  GeneratedPointSet g;
  g.points = random_cloud(rng, 50, 30.0);
  std::vector<std::uint64_t> prev;
  for (double r : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    const Submap s = radius_retrieve(index, b, g, r, 0.0);
    EXPECT_TRUE(std::includes(s.ids.begin(), s.ids.end(), prev.begin(), prev.end()));
    prev = s.ids;
  }
  EXPECT_THROW(radius_retrieve(index, b, g, 0.0, 0.0), Error);
}

TEST(RadiusRetrieve, VoxelisedResultIsBoundedByInflatedRadius) {
  std::mt19937_64 rng(7);
  const SceneBundle b = bundle_from(random_cloud(rng, 3000, 30.0));
  const SpatialIndex index = build_spatial_index(b.positions());
  GeneratedPointSet g;
  g.points = random_cloud(rng, 500, 20.0);
  const double r = 2.0, v = 1.5;
  const Submap coarse = radius_retrieve(index, b, g, r, v);
  const Submap wide = radius_retrieve(index, b, g, r + std::sqrt(3.0) * v, 0.0);
  EXPECT_TRUE(std::includes(wide.ids.begin(), wide.ids.end(), coarse.ids.begin(), coarse.ids.end()));
}

TEST(SampleStructure, SeededAndInSceneCoordinates) {
  VaeModel<float> m(testing::tiny_arch(4, 3), NormTransform{0.01, Eigen::Vector3d(0.5, 0.5, 0.5)});
  m.initialise(1);
  const Vec<float> e = Vec<float>::Ones(4);
  const auto a = sample_structure(m, e, 100, 9);
  const auto b = sample_structure(m, e, 100, 9);
  const auto c = sample_structure(m, e, 100, 10);
  ASSERT_EQ(a.points.size(), 100u);
  EXPECT_EQ(a.points, b.points);
  EXPECT_NE(a.points, c.points);
  // The first sample is the decoded first prior draw mapped out of the cube.
  Mat<float> z(3, 1);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : z.reshaped()) v = static_cast<float>(n(rng));
  const Mat<float> y = decode_many(m, e, z);
  EXPECT_LT((a.points[0] - invert_norm(m.norm(), y.col(0).cast<double>())).norm(), 1e-4);
  EXPECT_THROW(sample_structure(m, e, 0, 1), Error);
}

}  // namespace
}  // namespace vistr
