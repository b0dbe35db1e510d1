#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "test_support.hpp"
#include "vistr/metrics.hpp"
#include "vistr/pnp.hpp"

namespace vistr {
namespace {

using testing::random_view;

TEST(Geometry, ReprojectPinholeArithmetic) {
  CameraIntrinsics k{0, 100, 200, 50, 60, 100, 120};
  Pose id;
  const auto uv = reproject(Point3(1, 2, 4), id, k);
  ASSERT_TRUE(uv);
  EXPECT_DOUBLE_EQ(uv->x(), 75.0);
  EXPECT_DOUBLE_EQ(uv->y(), 160.0);
  EXPECT_FALSE(reproject(Point3(1, 2, -4), id, k));
  EXPECT_FALSE(reproject(Point3(1, 2, 0), id, k));
}

TEST(Geometry, PoseDirectionsAreInverse) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto v = random_view(rng, 1);
    const Pose back = Pose::from_camera_from_world(v.pose.camera_from_world_rotation(),
                                                   v.pose.camera_from_world_translation());
    EXPECT_LT((back.centre() - v.pose.centre()).norm(), 1e-12);
    EXPECT_LT(pose_errors(back, v.pose).r_err, 1e-6);
    EXPECT_LT((v.pose.to_camera(v.pose.centre())).norm(), 1e-12);
  }
}

TEST(PoseError, KnownRotationsAndOffsets) {
  Pose a, b;
  b.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ()));
  b.translation = Point3(3, 4, 0);
  const PoseError e = pose_errors(b, a);
  EXPECT_NEAR(e.r_err, 90.0, 1e-9);
  EXPECT_NEAR(e.t_err, 5.0, 1e-12);
  EXPECT_EQ(pose_errors(a, a).r_err, 0.0);
  b.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(std::numbers::pi, Eigen::Vector3d::UnitX()));
  EXPECT_NEAR(pose_errors(b, a).r_err, 180.0, 1e-9);
  b.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(1e-9, Eigen::Vector3d(1, 2, 3).normalized()));
  EXPECT_NEAR(pose_errors(b, a).r_err, rad_to_deg(1e-9), 1e-20);
}

TEST(PolyRoots, KnownQuartic) {
  // (x - 1)(x - 2)(x + 3)(x^2 + 1) = x^5 - 6x^3 + 6x^2 - 7x + 6
  auto r = detail::real_poly_roots({1, 0, -6, 6, -7, 6});
  std::sort(r.begin(), r.end());
  ASSERT_EQ(r.size(), 3u);
  EXPECT_NEAR(r[0], -3, 1e-12);
  EXPECT_NEAR(r[1], 1, 1e-12);
  EXPECT_NEAR(r[2], 2, 1e-12);
  // Leading zero drops the degree.
  r = detail::real_poly_roots({0, 1, -5, 6});
  std::sort(r.begin(), r.end());
  ASSERT_EQ(r.size(), 2u);
  EXPECT_NEAR(r[0], 2, 1e-12);
  EXPECT_NEAR(r[1], 3, 1e-12);
}

TEST(AbsoluteOrientation, RecoversRigidTransform) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  const Eigen::Matrix3d r = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng)).normalized().toRotationMatrix();
  const Eigen::Vector3d t(n(rng), n(rng), n(rng));
  std::vector<Eigen::Vector3d> src, dst;
  for (int i = 0; i < 5; ++i) {
    src.emplace_back(n(rng), n(rng), n(rng));
    dst.push_back(r * src.back() + t);
  }
  Eigen::Matrix3d r_est;
  Eigen::Vector3d t_est;
  detail::absolute_orientation(src, dst, r_est, t_est);
  EXPECT_LT((r_est - r).norm(), 1e-12);
  EXPECT_LT((t_est - t).norm(), 1e-12);
}

TEST(P3P, OneSolutionMatchesGroundTruth) {
  std::mt19937_64 rng(3);
  int hits = 0;
  const int trials = 300;
  for (int trial = 0; trial < trials; ++trial) {
    const auto v = random_view(rng, 3);
    const auto poses = p3p_solve({v.pixels[0], v.pixels[1], v.pixels[2]}, {v.points[0], v.points[1], v.points[2]}, v.k);
    EXPECT_LE(poses.size(), 4u);
    bool found = false;
    for (const auto& p : poses) {
      const PoseError e = pose_errors(p, v.pose);
      found = found || (e.t_err < 1e-6 && e.r_err < 1e-6);
      // Every returned pose reprojects the three points exactly.
      for (int i = 0; i < 3; ++i) {
        const auto uv = reproject(v.points[i], p, v.k);
        ASSERT_TRUE(uv);
        EXPECT_LT((*uv - v.pixels[i]).norm(), 1e-5);
      }
    }
    hits += found;
  }
  EXPECT_GE(hits, trials - 3);
}

TEST(P3P, CollinearPointsAreDegenerate) {
  CameraIntrinsics k{0, 500, 500, 320, 240, 640, 480};
  Pose id;
  const std::array<Point3, 3> pts{Point3(0, 0, 5), Point3(1, 0, 5), Point3(2, 0, 5)};
  std::array<Pixel, 3> px;
  for (int i = 0; i < 3; ++i) px[i] = *reproject(pts[i], id, k);
  try {
    p3p_solve(px, pts, k);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

Pose perturb(const Pose& p, double rot_rad, double trans, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Pose q = p;
  const Eigen::Vector3d axis = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  q.rotation = (Eigen::Quaterniond(Eigen::AngleAxisd(rot_rad, axis)) * p.rotation).normalized();
  q.translation += trans * Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
  q.canonicalise();
  return q;
}

TEST(Refine, ConvergesToTruthOnExactData) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = random_view(rng, 30);
    const Pose start = perturb(v.pose, 0.05, 0.3, rng);
    const RefineResult r = refine_pose(v.pixels, v.points, start, v.k);
    EXPECT_TRUE(r.converged);
    const PoseError e = pose_errors(r.pose, v.pose);
    EXPECT_LT(e.t_err, 1e-8);
    EXPECT_LT(e.r_err, 1e-7);
    EXPECT_LT(r.final_cost, 1e-12);
    EXPECT_LE(r.iterations, 50);
  }
}

TEST(Refine, AcceptedCostsDecreaseOnNoisyData) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = random_view(rng, 40);
    for (auto& p : v.pixels) p += Pixel(n(rng), n(rng));
    const Pose start = perturb(v.pose, 0.02, 0.2, rng);
    const RefineResult r = refine_pose(v.pixels, v.points, start, v.k);
    EXPECT_LE(r.final_cost, r.initial_cost);
    double prev = r.initial_cost;
    for (double c : r.accepted_costs) {
      EXPECT_LT(c, prev);
      prev = c;
    }
    // The noisy optimum is no worse than the true pose.
    EXPECT_LE(r.final_cost, reprojection_cost(v.pixels, v.points, v.pose, v.k) + 1e-9);
  }
}

TEST(Refine, CauchyLossSuppressesNearThresholdOutlier) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> ang(0, 2 * std::numbers::pi);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = random_view(rng, 50);
    // One wrong correspondence a few pixels off, inside any RANSAC threshold.
    const double a = ang(rng);
    v.pixels[0] += 6.0 * Pixel(std::cos(a), std::sin(a));
    const RefineResult ls = refine_pose(v.pixels, v.points, v.pose, v.k);
    const RefineResult robust = refine_pose(v.pixels, v.points, v.pose, v.k, 1.0);
    EXPECT_TRUE(robust.converged);
    double prev = robust.initial_cost;
    for (double c : robust.accepted_costs) {
      EXPECT_LT(c, prev);
      prev = c;
    }
    const PoseError el = pose_errors(ls.pose, v.pose);
    const PoseError er = pose_errors(robust.pose, v.pose);
    EXPECT_LT(er.t_err, 0.2 * el.t_err);
    EXPECT_LT(er.t_err, 1e-3);
  }
}

TEST(Refine, TooFewPointsRejected) {
  std::mt19937_64 rng(6);
  const auto v = random_view(rng, 3);
  try {
    refine_pose(v.pixels, v.points, v.pose, v.k);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientMatches);
  }
}

struct Correspondences {
  testing::SyntheticView view;
  std::vector<Pixel> pixels;
  std::vector<Point3> points;
};

Correspondences with_outliers(std::mt19937_64& rng, std::size_t n_in, std::size_t n_out) {
  Correspondences c{random_view(rng, n_in + n_out), {}, {}};
  std::uniform_real_distribution<double> ux(0, c.view.k.width), uy(0, c.view.k.height);
  for (std::size_t i = 0; i < n_in + n_out; ++i) {
    c.points.push_back(c.view.points[i]);
    c.pixels.push_back(i < n_in ? c.view.pixels[i] : Pixel(ux(rng), uy(rng)));
  }
  return c;
}

TEST(Ransac, RecoversPoseWithHalfOutliers) {
  std::mt19937_64 rng(7);
  int good = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const Correspondences c = with_outliers(rng, 50, 50);
    RansacConfig cfg;
    cfg.seed = trial;
    const PoseEstimate est = ransac_pnp(c.pixels, c.points, c.view.k, cfg);
    ASSERT_TRUE(est.success);
    const PoseError e = pose_errors(est.pose, c.view.pose);
    good += e.t_err < 1e-3 && e.r_err < 0.01;
    for (std::uint32_t i = 0; i < 50; ++i)
      EXPECT_TRUE(std::binary_search(est.inliers.begin(), est.inliers.end(), i));
  }
  EXPECT_GE(good, 29);
}

TEST(Ransac, SeedDeterminism) {
  std::mt19937_64 rng(8);
  const Correspondences c = with_outliers(rng, 30, 60);
  RansacConfig cfg;
  cfg.seed = 3;
  const PoseEstimate a = ransac_pnp(c.pixels, c.points, c.view.k, cfg);
  const PoseEstimate b = ransac_pnp(c.pixels, c.points, c.view.k, cfg);
  EXPECT_EQ(a.num_iterations, b.num_iterations);
  EXPECT_EQ(a.inliers, b.inliers);
  EXPECT_EQ(a.pose.translation, b.pose.translation);
  EXPECT_EQ(a.pose.rotation.coeffs(), b.pose.rotation.coeffs());
}

TEST(Ransac, AllOutliersFailWithoutThrowing) {
  std::mt19937_64 rng(9);
  const Correspondences c = with_outliers(rng, 0, 60);
  RansacConfig cfg;
  cfg.max_iterations = 300;
  cfg.min_matches = 30;
  const PoseEstimate est = ransac_pnp(c.pixels, c.points, c.view.k, cfg);
  EXPECT_FALSE(est.success);
  EXPECT_EQ(est.num_iterations, 300u);
}

TEST(Ransac, TooFewMatchesIsError) {
  std::mt19937_64 rng(10);
  const Correspondences c = with_outliers(rng, 8, 0);
  try {
    ransac_pnp(c.pixels, c.points, c.view.k, RansacConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientMatches);
  }
}

TEST(Ransac, AdaptiveBoundStopsEarlyOnCleanData) {
  std::mt19937_64 rng(11);
  const Correspondences c = with_outliers(rng, 60, 0);
  const PoseEstimate est = ransac_pnp(c.pixels, c.points, c.view.k, RansacConfig{});
  EXPECT_TRUE(est.success);
  EXPECT_LE(est.num_iterations, 5u);
  EXPECT_EQ(est.inliers.size(), 60u);
}

}  // namespace
}  // namespace vistr
