#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vistr/errors.hpp"
#include "vistr/geometry.hpp"

namespace vistr {

struct RansacConfig {
  double threshold_px = 12.0;
  std::uint64_t max_iterations = 10000;
  double confidence = 0.9999;
  std::uint32_t min_matches = 12;
  std::uint64_t seed = 0;
  // Cauchy scale for the final refinement; 0 gives plain least squares.
  double refine_loss_px = 1.0;

  void validate() const {
    require(refine_loss_px >= 0, ErrorKind::Config, "refinement loss scale must be non-negative");
    require(threshold_px > 0, ErrorKind::Config, "RANSAC threshold must be positive");
    require(confidence > 0 && confidence < 1, ErrorKind::Config, "RANSAC confidence must lie in (0, 1)");
    require(max_iterations >= 1 && min_matches >= 4, ErrorKind::Config, "invalid RANSAC limits");
  }
};

namespace detail {

// Real roots of c[0] x^n + ... + c[n]; leading near-zero coefficients drop
// the degree.
inline std::vector<double> real_poly_roots(std::vector<double> c) {
  const double scale = std::abs(*std::max_element(c.begin(), c.end(), [](double a, double b) {
    return std::abs(a) < std::abs(b);
  }));
  if (scale == 0) return {};
  while (c.size() > 1 && std::abs(c.front()) <= 1e-14 * scale) c.erase(c.begin());
  const auto n = static_cast<Eigen::Index>(c.size()) - 1;
  if (n < 1) return {};
  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k) comp(0, k) = -c[k + 1] / c[0];
  for (Eigen::Index k = 1; k < n; ++k) comp(k, k - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(comp, false);
  std::vector<double> roots;
  for (const auto& r : es.eigenvalues()) {
    if (std::abs(r.imag()) > 1e-4 * std::max(1.0, std::abs(r.real()))) continue;
    double x = r.real();
    for (int it = 0; it < 8; ++it) {  // Newton polish
      double f = 0, df = 0;
      for (const double ck : c) {
        df = df * x + f;
        f = f * x + ck;
      }
      if (df == 0) break;
      x -= f / df;
    }
    roots.push_back(x);
  }
  return roots;
}

// Rigid transform (R, t) with dst ~ R src + t for three or more pairs.
inline void absolute_orientation(std::span<const Eigen::Vector3d> src, std::span<const Eigen::Vector3d> dst,
                                 Eigen::Matrix3d& r, Eigen::Vector3d& t) {
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= static_cast<double>(src.size());
  cd /= static_cast<double>(dst.size());
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  r = svd.matrixV() * d * svd.matrixU().transpose();
  t = cd - r * cs;
}

}  // namespace detail

/// Minimal three-point absolute pose (Grunert's formulation): solves the
/// quartic in the depth ratio, polishes the three depths with Newton steps
/// on the distance constraints, then aligns the camera-frame points with the
/// world points. Returns every geometrically valid candidate.
inline std::vector<Pose> p3p_solve(const std::array<Pixel, 3>& pixels, const std::array<Point3, 3>& points,
                                   const CameraIntrinsics& k) {
  const Point3 &p1 = points[0], &p2 = points[1], &p3 = points[2];
  const double scale = std::max({(p2 - p1).squaredNorm(), (p3 - p1).squaredNorm(), (p3 - p2).squaredNorm()});
  require(scale > 0 && (p2 - p1).cross(p3 - p1).norm() > 1e-10 * scale, ErrorKind::Degenerate,
          "P3P needs three non-collinear points");
  for (const auto& px : pixels) require(px.allFinite(), ErrorKind::Data, "non-finite pixel in P3P sample");

  const std::array<Eigen::Vector3d, 3> f{k.bearing(pixels[0]), k.bearing(pixels[1]), k.bearing(pixels[2])};
  const double a2 = (p2 - p3).squaredNorm(), b2 = (p1 - p3).squaredNorm(), c2 = (p1 - p2).squaredNorm();
  const double ca = f[1].dot(f[2]), cb = f[0].dot(f[2]), cg = f[0].dot(f[1]);

  const double amc = (a2 - c2) / b2, apc = (a2 + c2) / b2;
  const double a4 = (amc - 1) * (amc - 1) - 4 * c2 / b2 * ca * ca;
  const double a3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca * ca * cb);
  const double a2c = 2 * (amc * amc - 1 + 2 * amc * amc * cb * cb + 2 * (b2 - c2) / b2 * ca * ca -
                          4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg);
  const double a1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - apc) * ca * cg);
  const double a0 = (1 + amc) * (1 + amc) - 4 * a2 / b2 * cg * cg;

  std::vector<Pose> out;
  for (const double v : detail::real_poly_roots({a4, a3, a2c, a1, a0})) {
    if (!(v > 0)) continue;
    const double den = 2 * (cg - v * ca);
    if (std::abs(den) < 1e-14) continue;
    const double u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den;
    if (!(u > 0)) continue;
    const double s1sq = b2 / (1 + v * v - 2 * v * cb);
    if (!(s1sq > 0)) continue;
    Eigen::Vector3d s;
    s << std::sqrt(s1sq), u * std::sqrt(s1sq), v * std::sqrt(s1sq);

    // Newton on the law-of-cosines residuals.
    for (int it = 0; it < 10; ++it) {
      Eigen::Vector3d res(s[1] * s[1] + s[2] * s[2] - 2 * s[1] * s[2] * ca - a2,
                          s[0] * s[0] + s[2] * s[2] - 2 * s[0] * s[2] * cb - b2,
                          s[0] * s[0] + s[1] * s[1] - 2 * s[0] * s[1] * cg - c2);
      Eigen::Matrix3d jac;
      jac << 0, 2 * s[1] - 2 * s[2] * ca, 2 * s[2] - 2 * s[1] * ca,
             2 * s[0] - 2 * s[2] * cb, 0, 2 * s[2] - 2 * s[0] * cb,
             2 * s[0] - 2 * s[1] * cg, 2 * s[1] - 2 * s[0] * cg, 0;
      const Eigen::Vector3d step = jac.fullPivLu().solve(res);
      if (!step.allFinite()) break;
      s -= step;
      if (step.norm() <= 1e-15 * s.norm()) break;
    }
    if (!(s.array() > 0).all()) continue;
    const double resid = std::abs(s[1] * s[1] + s[2] * s[2] - 2 * s[1] * s[2] * ca - a2) +
                         std::abs(s[0] * s[0] + s[2] * s[2] - 2 * s[0] * s[2] * cb - b2) +
                         std::abs(s[0] * s[0] + s[1] * s[1] - 2 * s[0] * s[1] * cg - c2);
    if (!(resid <= 1e-6 * scale)) continue;

    const std::array<Eigen::Vector3d, 3> cam{s[0] * f[0], s[1] * f[1], s[2] * f[2]};
    Eigen::Matrix3d r_cw;
    Eigen::Vector3d t_cw;
    detail::absolute_orientation(points, cam, r_cw, t_cw);
    if (!r_cw.allFinite() || !t_cw.allFinite()) continue;
    const Pose pose = Pose::from_camera_from_world(r_cw, t_cw);
    bool dup = false;
    for (const auto& q : out)
      dup = dup || ((q.translation - pose.translation).norm() < 1e-9 * (1 + pose.translation.norm()) &&
                    q.rotation.angularDistance(pose.rotation) < 1e-9);
    if (!dup) out.push_back(pose);
  }
  return out;
}

struct RefineResult {
  Pose pose;
  double initial_cost = 0;
  double final_cost = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> accepted_costs;  // objective after each accepted step
};

/// Sum of squared reprojection errors, or of the Cauchy loss
/// c^2 log(1 + e^2 / c^2) when loss_px = c > 0; infinity if a point is
/// behind the camera.
inline double reprojection_cost(std::span<const Pixel> pixels, std::span<const Point3> points, const Pose& pose,
                                const CameraIntrinsics& k, double loss_px = 0) {
  double cost = 0;
  const double c2 = loss_px * loss_px;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto uv = reproject(points[i], pose, k);
    if (!uv) return std::numeric_limits<double>::infinity();
    const double e2 = (*uv - pixels[i]).squaredNorm();
    cost += c2 > 0 ? c2 * std::log1p(e2 / c2) : e2;
  }
  return cost;
}

/// Levenberg-Marquardt on reprojection_cost over the camera-from-world
/// transform, with left-multiplied rotation updates. A positive loss_px
/// makes each step iteratively reweighted by the Cauchy weight
/// 1 / (1 + e^2 / c^2). At most 50 iterations; stops once the update norm
/// drops below 1e-10.
inline RefineResult refine_pose(std::span<const Pixel> pixels, std::span<const Point3> points, const Pose& initial,
                                const CameraIntrinsics& k, double loss_px = 0) {
  require(pixels.size() == points.size(), ErrorKind::Shape, "pixel/point count mismatch");
  require(pixels.size() >= 4, ErrorKind::InsufficientMatches, "pose refinement needs at least 4 correspondences");
  RefineResult res;
  res.pose = initial;
  res.initial_cost = reprojection_cost(pixels, points, initial, k, loss_px);
  res.final_cost = res.initial_cost;
  if (!std::isfinite(res.initial_cost)) return res;

  Eigen::Matrix3d r = initial.camera_from_world_rotation();
  Eigen::Vector3d t = initial.camera_from_world_translation();
  double cost = res.initial_cost;
  double lambda = 1e-4;
  constexpr int kMaxIterations = 50;

  for (int it = 0; it < kMaxIterations; ++it) {
    res.iterations = it + 1;
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      const Eigen::Vector3d xc = r * points[i] + t;
      const double iz = 1.0 / xc.z();
      const Eigen::Vector2d e(k.fx * xc.x() * iz + k.cx - pixels[i].x(), k.fy * xc.y() * iz + k.cy - pixels[i].y());
      Eigen::Matrix<double, 2, 3> dproj;
      dproj << k.fx * iz, 0, -k.fx * xc.x() * iz * iz, 0, k.fy * iz, -k.fy * xc.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dx;
      dx.leftCols<3>() = -skew(xc);
      dx.rightCols<3>().setIdentity();
      const Eigen::Matrix<double, 2, 6> jac = dproj * dx;
      const double w = loss_px > 0 ? 1.0 / (1.0 + e.squaredNorm() / (loss_px * loss_px)) : 1.0;
      h.noalias() += w * jac.transpose() * jac;
      g.noalias() += w * jac.transpose() * e;
    }

    bool accepted = false;
    while (lambda < 1e16) {
      Eigen::Matrix<double, 6, 6> damped = h;
      damped.diagonal() += lambda * h.diagonal().cwiseMax(1e-12);
      const Eigen::Matrix<double, 6, 1> delta = damped.ldlt().solve(-g);
      if (!delta.allFinite()) {
        lambda *= 10;
        continue;
      }
      if (delta.norm() < 1e-10) {
        res.converged = true;
        break;
      }
      const Eigen::Matrix3d dr = so3_exp(delta.head<3>());
      const Eigen::Matrix3d r_new = dr * r;
      const Eigen::Vector3d t_new = dr * t + delta.tail<3>();
      const Pose candidate = Pose::from_camera_from_world(r_new, t_new);
      const double new_cost = reprojection_cost(pixels, points, candidate, k, loss_px);
      if (new_cost < cost) {
        r = candidate.camera_from_world_rotation();
        t = candidate.camera_from_world_translation();
        cost = new_cost;
        res.pose = candidate;
        res.accepted_costs.push_back(cost);
        lambda = std::max(1e-12, lambda * 0.1);
        accepted = true;
        break;
      }
      lambda *= 10;
    }
    if (res.converged) break;
    if (!accepted) {
      // No descent direction at working precision: stationary point.
      res.converged = true;
      break;
    }
  }
  res.final_cost = cost;
  if (!res.converged) {
    res.pose = initial;
    res.final_cost = res.initial_cost;
  }
  return res;
}

struct StageTimings {
  double global_search_us = 0;
  double tree_lookup_us = 0;
  double matching_us = 0;
  double pose_us = 0;

  double total_us() const { return global_search_us + tree_lookup_us + matching_us + pose_us; }
};

struct PoseEstimate {
  Pose pose;
  std::vector<std::uint32_t> inliers;  // indices into the correspondence list
  std::uint64_t num_iterations = 0;
  bool success = false;
  bool refine_warning = false;
  std::size_t num_matches = 0;
  std::size_t submap_size = 0;
  StageTimings timings;
};

inline std::vector<std::uint32_t> find_inliers(std::span<const Pixel> pixels, std::span<const Point3> points,
                                               const Pose& pose, const CameraIntrinsics& k, double threshold_px) {
  std::vector<std::uint32_t> in;
  const double t2 = threshold_px * threshold_px;
  for (std::uint32_t i = 0; i < pixels.size(); ++i) {
    const auto uv = reproject(points[i], pose, k);
    if (uv && (*uv - pixels[i]).squaredNorm() < t2) in.push_back(i);
  }
  return in;
}

/// Hypothesise-and-verify over minimal P3P samples with an adaptive
/// iteration bound, then LM refinement on the best consensus set.
inline PoseEstimate ransac_pnp(std::span<const Pixel> pixels, std::span<const Point3> points,
                               const CameraIntrinsics& k, const RansacConfig& cfg) {
  cfg.validate();
  require(pixels.size() == points.size(), ErrorKind::Shape, "pixel/point count mismatch");
  const std::size_t n = pixels.size();
  if (n < cfg.min_matches)
    fail(ErrorKind::InsufficientMatches,
         std::to_string(n) + " matches, need at least " + std::to_string(cfg.min_matches));

  PoseEstimate est;
  est.num_matches = n;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::uint32_t> best_inliers;
  Pose best_pose;
  const double log_fail = std::log(1.0 - cfg.confidence);
  std::uint64_t bound = cfg.max_iterations;

  std::uint64_t it = 0;
  for (; it < bound; ++it) {
    std::size_t i0 = pick(rng), i1 = pick(rng), i2 = pick(rng);
    while (i1 == i0) i1 = pick(rng);
    while (i2 == i0 || i2 == i1) i2 = pick(rng);
    std::vector<Pose> candidates;
    try {
      candidates = p3p_solve({pixels[i0], pixels[i1], pixels[i2]}, {points[i0], points[i1], points[i2]}, k);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Degenerate) throw;
      continue;
    }
    for (const auto& c : candidates) {
      auto inl = find_inliers(pixels, points, c, k, cfg.threshold_px);
      if (inl.size() > best_inliers.size()) {
        best_inliers = std::move(inl);
        best_pose = c;
        const double w = static_cast<double>(best_inliers.size()) / static_cast<double>(n);
        const double p_good = w * w * w;
        if (p_good >= 1.0) {
          bound = std::min<std::uint64_t>(bound, it + 1);
        } else if (p_good > 0) {
          const double need = std::ceil(log_fail / std::log(1.0 - p_good));
          if (need < static_cast<double>(bound)) bound = std::max<std::uint64_t>(it + 1, static_cast<std::uint64_t>(need));
        }
      }
    }
  }
  est.num_iterations = it;
  if (best_inliers.size() < std::max<std::size_t>(4, cfg.min_matches)) {
    est.pose = best_pose;
    est.inliers = std::move(best_inliers);
    return est;
  }

  // Refine on the consensus set, re-derive inliers under the refined pose,
  // and repeat until the set is stable.
  Pose pose = best_pose;
  std::vector<std::uint32_t> inliers = best_inliers;
  for (int round = 0; round < 4; ++round) {
    std::vector<Pixel> px;
    std::vector<Point3> pts;
    for (auto i : inliers) {
      px.push_back(pixels[i]);
      pts.push_back(points[i]);
    }
    const RefineResult rr = refine_pose(px, pts, pose, k, cfg.refine_loss_px);
    est.refine_warning = !rr.converged;
    auto next = find_inliers(pixels, points, rr.pose, k, cfg.threshold_px);
    if (next.size() < inliers.size()) break;
    pose = rr.pose;
    const bool stable = next == inliers;
    inliers = std::move(next);
    if (stable) break;
  }
  est.pose = pose;
  est.inliers = find_inliers(pixels, points, pose, k, cfg.threshold_px);
  est.success = est.inliers.size() >= cfg.min_matches;
  return est;
}

}  // namespace vistr
