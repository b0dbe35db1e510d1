#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "vistr/errors.hpp"

namespace vistr {

using Point3 = Eigen::Vector3d;
using Pixel = Eigen::Vector2d;

/// Six-degree-of-freedom camera pose stored world-from-camera: `rotation`
/// maps camera-frame directions into the world frame and `translation` is
/// the camera centre in world coordinates. The quaternion is kept unit-norm
/// with w >= 0.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose from_world_from_camera(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
    Pose p;
    p.rotation = Eigen::Quaterniond(r);
    p.translation = t;
    p.canonicalise();
    return p;
  }

  static Pose from_camera_from_world(const Eigen::Matrix3d& r_cw, const Eigen::Vector3d& t_cw) {
    const Eigen::Matrix3d r_wc = r_cw.transpose();
    return from_world_from_camera(r_wc, -r_wc * t_cw);
  }

  void canonicalise() {
    rotation.normalize();
    if (rotation.w() < 0) rotation.coeffs() *= -1.0;
  }

  Eigen::Matrix3d world_from_camera_rotation() const { return rotation.toRotationMatrix(); }
  Eigen::Matrix3d camera_from_world_rotation() const {
    return rotation.toRotationMatrix().transpose();
  }
  Eigen::Vector3d camera_from_world_translation() const {
    return -(camera_from_world_rotation() * translation);
  }
  const Eigen::Vector3d& centre() const { return translation; }

  Eigen::Vector3d to_camera(const Point3& world) const {
    return rotation.conjugate() * (world - translation);
  }

  bool is_valid() const {
    return std::abs(rotation.norm() - 1.0) <= 1e-9 && rotation.w() >= 0.0 &&
           rotation.coeffs().allFinite() && translation.allFinite();
  }
};

struct CameraIntrinsics {
  std::uint32_t id = 0;
  double fx = 1, fy = 1, cx = 0.5, cy = 0.5;
  std::uint32_t width = 1, height = 1;

  bool is_valid() const {
    return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height &&
           std::isfinite(fx) && std::isfinite(fy);
  }

  bool contains(const Pixel& uv) const {
    return uv.x() >= 0 && uv.y() >= 0 && uv.x() < width && uv.y() < height;
  }

  Eigen::Vector3d bearing(const Pixel& uv) const {
    return Eigen::Vector3d((uv.x() - cx) / fx, (uv.y() - cy) / fy, 1.0).normalized();
  }
};

/// Pinhole projection; returns nullopt when the point is not strictly in
/// front of the camera.
inline std::optional<Pixel> reproject(const Point3& world, const Pose& pose,
                                      const CameraIntrinsics& k) {
  const Eigen::Vector3d c = pose.to_camera(world);
  if (!(c.z() > 0.0)) return std::nullopt;
  return Pixel(k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy);
}

inline double rad_to_deg(double r) { return r * 180.0 / std::numbers::pi; }
inline double deg_to_rad(double d) { return d * std::numbers::pi / 180.0; }

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Eigen::Matrix3d so3_exp(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Eigen::Matrix3d::Identity() + skew(w);
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

}  // namespace vistr
