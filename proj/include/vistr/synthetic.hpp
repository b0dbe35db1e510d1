#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "vistr/errors.hpp"
#include "vistr/geometry.hpp"
#include "vistr/query.hpp"
#include "vistr/scene.hpp"

namespace vistr {

/// Desk-scale stand-in for an SfM map. Structure points lie on a ring of
/// facades around a courtyard; cameras move on a smooth closed path inside
/// the courtyard looking outwards. Embeddings are a random-feature function
/// of the camera pose so that nearby views have similar embeddings.
struct SyntheticSceneConfig {
  std::uint32_t num_points = 5000;
  std::uint32_t num_cameras = 250;
  std::uint32_t query_stride = 5;  // every query_stride-th camera is a held-out query
  double extent = 100.0;           // metres, largest side of the scene
  std::uint32_t embedding_dim = 64;
  std::uint32_t descriptor_dim = 128;
  double descriptor_noise = 0.03;   // per-component sigma before renormalising
  double embedding_noise = 0.05;    // per-component sigma added to each image
  double embedding_amplitude = 3.0;
  double embedding_bandwidth = 2.0;  // random-feature frequency scale
  double fov_deg = 60.0;            // horizontal
  std::uint32_t image_width = 640;
  std::uint32_t image_height = 480;
  double max_depth = 60.0;          // metres
  double dropout = 0.05;            // probability a frustum point is not observed
  double keypoint_noise_px = 0.5;
  double distractor_fraction = 0.2;  // extra query keypoints with random descriptors
  double query_jitter = 0.0;        // metres / radians of extra query pose noise
  std::uint32_t min_visible = 8;
  std::uint32_t max_retries = 10;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_points >= 100 && num_cameras >= 10, ErrorKind::Config, "synthetic scene needs >= 100 points, >= 10 cameras");
    require(query_stride >= 2, ErrorKind::Config, "query_stride must be >= 2");
    require(extent > 0 && max_depth > 0 && fov_deg > 0 && fov_deg < 170, ErrorKind::Config, "invalid scene geometry");
    require(embedding_dim >= 1 && descriptor_dim >= 2, ErrorKind::Config, "invalid dimensions");
    require(dropout >= 0 && dropout < 1 && distractor_fraction >= 0, ErrorKind::Config, "invalid rates");
    require(image_width > 1 && image_height > 1, ErrorKind::Config, "invalid image size");
  }

  CameraIntrinsics intrinsics() const {
    CameraIntrinsics k;
    k.id = 0;
    k.width = image_width;
    k.height = image_height;
    k.fx = k.fy = 0.5 * image_width / std::tan(deg_to_rad(fov_deg) / 2.0);
    k.cx = 0.5 * image_width;
    k.cy = 0.5 * image_height;
    return k;
  }
};

struct SyntheticScene {
  SceneBundle bundle;
  QuerySet queries;
};

inline Descriptor observe_descriptor(const Descriptor& base, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, static_cast<float>(sigma));
  Descriptor d = base;
  for (auto& v : d) v += n(rng);
  return d.normalized();
}

inline Descriptor random_unit_descriptor(std::uint32_t dim, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Descriptor d(dim);
  for (auto& v : d) v = n(rng);
  return d.normalized();
}

/// Points visible from `pose`: in front, inside the image, within range.
inline bool in_frustum(const Point3& p, const Pose& pose, const CameraIntrinsics& k, double max_depth) {
  const Eigen::Vector3d c = pose.to_camera(p);
  if (!(c.z() > 0.1) || c.z() > max_depth) return false;
  const auto uv = reproject(p, pose, k);
  return uv && k.contains(*uv);
}

namespace detail {

// Camera looking along +x_cam-right / +y_cam-down / +z_cam-forward with the
// given yaw (about world z) and pitch (positive looks up).
inline Pose camera_pose(const Eigen::Vector3d& centre, double yaw, double pitch) {
  const Eigen::Vector3d fwd(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw), std::sin(pitch));
  const Eigen::Vector3d world_up = Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d right = fwd.cross(world_up).normalized();
  const Eigen::Vector3d down = fwd.cross(right);
  Eigen::Matrix3d r_wc;
  r_wc.col(0) = right;
  r_wc.col(1) = down;
  r_wc.col(2) = fwd;
  return Pose::from_world_from_camera(r_wc, centre);
}

struct EmbeddingMap {
  Eigen::MatrixXd freq;    // D_e x 6
  Eigen::VectorXd phase;   // D_e
  double amplitude = 1.0;
  double extent = 1.0;

  EmbeddingMap(const SyntheticSceneConfig& cfg, std::mt19937_64& rng)
      : freq(cfg.embedding_dim, 6), phase(cfg.embedding_dim), amplitude(cfg.embedding_amplitude), extent(cfg.extent) {
    std::normal_distribution<double> n(0.0, cfg.embedding_bandwidth);
    std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
    for (auto& v : freq.reshaped()) v = n(rng);
    for (auto& v : phase) v = u(rng);
  }

  Embedding operator()(const Pose& pose) const {
    Eigen::Matrix<double, 6, 1> f;
    f.head<3>() = pose.centre() / extent;
    f.tail<3>() = pose.rotation * Eigen::Vector3d::UnitZ();
    const Eigen::VectorXd e = amplitude * (freq * f + phase).array().cos().matrix();
    return e.cast<float>();
  }
};

}  // namespace detail

inline SyntheticScene generate_synthetic_scene_once(const SyntheticSceneConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double wall_radius = 0.45 * cfg.extent;
  const double wall_height = 0.15 * cfg.extent;
  const double thickness = 0.01 * cfg.extent;
  const CameraIntrinsics k = cfg.intrinsics();

  SyntheticScene scene;
  SceneBundle& b = scene.bundle;
  b.embedding_dim = cfg.embedding_dim;
  b.descriptor_dim = cfg.descriptor_dim;
  b.intrinsics.push_back(k);

  b.points.reserve(cfg.num_points);
  for (std::uint32_t i = 0; i < cfg.num_points; ++i) {
    const double theta = 2.0 * pi * unit(rng);
    const double rad = wall_radius + thickness * normal(rng);
    SfmPoint p;
    p.id = 1000 + i;
    p.position = Point3(rad * std::cos(theta), rad * std::sin(theta), wall_height * unit(rng));
    p.descriptor = random_unit_descriptor(cfg.descriptor_dim, rng);
    b.points.push_back(std::move(p));
  }

  const detail::EmbeddingMap embed(cfg, rng);
  std::normal_distribution<float> emb_noise(0.0f, static_cast<float>(cfg.embedding_noise));
  std::normal_distribution<double> px_noise(0.0, cfg.keypoint_noise_px);
  std::bernoulli_distribution drop(cfg.dropout);
  scene.queries.embedding_dim = cfg.embedding_dim;
  scene.queries.descriptor_dim = cfg.descriptor_dim;

  for (std::uint32_t c = 0; c < cfg.num_cameras; ++c) {
    const double s = 2.0 * pi * c / cfg.num_cameras;
    const bool is_query = c % cfg.query_stride == cfg.query_stride - 1;
    const double ring = 0.2 * cfg.extent * (1.0 + 0.25 * std::sin(3.0 * s));
    Eigen::Vector3d centre(ring * std::cos(s), ring * std::sin(s), 0.02 * cfg.extent * (1.0 + 0.3 * std::sin(5.0 * s)));
    double yaw = s + 0.35 * std::sin(2.0 * s + 0.5);
    double pitch = deg_to_rad(8.0) + deg_to_rad(4.0) * std::sin(4.0 * s);
    if (is_query && cfg.query_jitter > 0) {
      centre += cfg.query_jitter * Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
      yaw += cfg.query_jitter * 0.05 * normal(rng);
    }
    const Pose pose = detail::camera_pose(centre, yaw, pitch);

    std::vector<std::uint32_t> visible;
    for (std::uint32_t i = 0; i < b.points.size(); ++i)
      if (in_frustum(b.points[i].position, pose, k, cfg.max_depth) && !drop(rng)) visible.push_back(i);
    if (visible.size() < cfg.min_visible)
      fail(ErrorKind::Data, "camera " + std::to_string(c) + " sees only " + std::to_string(visible.size()) + " points");

    Embedding e = embed(pose);
    for (auto& v : e) v += emb_noise(rng);

    if (!is_query) {
      MappingImage img;
      img.id = c;
      img.embedding = std::move(e);
      img.pose = pose;
      img.intrinsics_id = k.id;
      for (auto i : visible) img.visible_point_ids.push_back(b.points[i].id);
      b.images.push_back(std::move(img));
      continue;
    }

    QueryFeatures q;
    q.id = c;
    q.embedding = std::move(e);
    q.intrinsics_id = k.id;
    q.gt_pose = pose;
    std::vector<std::uint64_t> gt_ids;
    std::vector<std::pair<Pixel, Descriptor>> kps;
    for (auto i : visible) {
      const auto uv = reproject(b.points[i].position, pose, k);
      const Pixel noisy = *uv + Pixel(px_noise(rng), px_noise(rng));
      gt_ids.push_back(b.points[i].id);
      if (!k.contains(noisy)) continue;
      kps.emplace_back(noisy, observe_descriptor(b.points[i].descriptor, cfg.descriptor_noise, rng));
    }
    const auto n_distract = static_cast<std::size_t>(std::round(cfg.distractor_fraction * kps.size()));
    for (std::size_t d = 0; d < n_distract; ++d)
      kps.emplace_back(Pixel(unit(rng) * (k.width - 1), unit(rng) * (k.height - 1)),
                       random_unit_descriptor(cfg.descriptor_dim, rng));
    std::shuffle(kps.begin(), kps.end(), rng);
    q.descriptors.resize(cfg.descriptor_dim, static_cast<Eigen::Index>(kps.size()));
    for (std::size_t i = 0; i < kps.size(); ++i) {
      q.keypoints.push_back(kps[i].first);
      q.descriptors.col(static_cast<Eigen::Index>(i)) = kps[i].second;
    }
    quantise_keypoints(q);
    q.gt_visible_ids = std::move(gt_ids);
    scene.queries.queries.push_back(std::move(q));
  }

  b.norm = compute_norm_transform(b.positions(), 0.05);
  b.validate();
  return scene;
}

/// Retries with derived seeds when a camera sees too few points.
inline SyntheticScene generate_synthetic_scene(const SyntheticSceneConfig& cfg) {
  cfg.validate();
  std::string last;
  for (std::uint32_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    try {
      return generate_synthetic_scene_once(cfg, cfg.seed + 0x100000001b3ull * attempt);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Data) throw;
      last = e.what();
    }
  }
  fail(ErrorKind::Data, "synthetic scene generation failed after retries: " + last);
}

}  // namespace vistr
