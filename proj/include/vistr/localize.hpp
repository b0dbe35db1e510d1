#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "vistr/errors.hpp"
#include "vistr/matching.hpp"
#include "vistr/pnp.hpp"
#include "vistr/query.hpp"
#include "vistr/retrieval.hpp"
#include "vistr/scene.hpp"
#include "vistr/vae.hpp"

namespace vistr {

struct RetrievalConfig {
  std::size_t samples = 1000;
  double radius = 5.0;  // metres
  double voxel = 1.0;   // metres
  std::uint64_t seed = 0;

  void validate() const {
    require(samples >= 1, ErrorKind::Config, "samples must be >= 1");
    require(radius > 0, ErrorKind::Config, "radius must be positive");
    require(voxel >= 0, ErrorKind::Config, "voxel must be non-negative");
  }
};

struct LocalizeOutput {
  PoseEstimate estimate;
  Submap submap;
  std::vector<Match2D3D> matches;
  std::string failure_reason;
};

/// Map state shared across queries: bundle plus its spatial index.
struct LocalizationMap {
  const SceneBundle* bundle = nullptr;
  SpatialIndex index;

  explicit LocalizationMap(const SceneBundle& b) : bundle(&b), index(build_spatial_index(b.positions())) {}
};

/// Structure sampling -> radius retrieval -> descriptor matching ->
/// RANSAC PnP, with wall-clock time recorded for each stage.
inline LocalizeOutput localize(const LocalizationMap& map, const VaeModel<float>& model, const QueryFeatures& query,
                               const RetrievalConfig& rcfg, const MatchConfig& mcfg, const RansacConfig& pcfg) {
  using Clock = std::chrono::steady_clock;
  auto micros = [](Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double, std::micro>(b - a).count();
  };
  rcfg.validate();
  pcfg.validate();
  const SceneBundle& bundle = *map.bundle;
  require(model.arch().embedding_dim == bundle.embedding_dim, ErrorKind::Shape,
          "model embedding dimension does not match bundle");
  require(query.embedding.size() == bundle.embedding_dim, ErrorKind::Shape,
          "query embedding dimension does not match bundle");
  require(query.descriptors.rows() == bundle.descriptor_dim, ErrorKind::Shape,
          "query descriptor dimension does not match bundle");
  const CameraIntrinsics& k = bundle.camera(query.intrinsics_id);

  LocalizeOutput out;
  auto& est = out.estimate;

  auto t0 = Clock::now();
  const GeneratedPointSet generated = sample_structure(model, Vec<float>(query.embedding), rcfg.samples, rcfg.seed);
  auto t1 = Clock::now();
  out.submap = radius_retrieve(map.index, bundle, generated, rcfg.radius, rcfg.voxel);
  auto t2 = Clock::now();
  est.timings.global_search_us = micros(t0, t1);
  est.timings.tree_lookup_us = micros(t1, t2);
  est.submap_size = out.submap.size();
  if (out.submap.empty()) {
    out.failure_reason = "empty submap (0 points retrieved, 0 matches)";
    return out;
  }

  out.matches = match_descriptors(query.descriptors, out.submap, mcfg);
  auto t3 = Clock::now();
  est.timings.matching_us = micros(t2, t3);
  est.num_matches = out.matches.size();

  std::vector<Pixel> px;
  std::vector<Point3> pts;
  px.reserve(out.matches.size());
  pts.reserve(out.matches.size());
  for (const auto& m : out.matches) {
    px.push_back(query.keypoints[m.keypoint]);
    pts.push_back(out.submap.positions[m.submap_index]);
  }
  try {
    const auto timings = est.timings;
    const auto submap_size = est.submap_size;
    est = ransac_pnp(px, pts, k, pcfg);
    est.timings = timings;
    est.submap_size = submap_size;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::InsufficientMatches) throw;
    out.failure_reason = e.what();
  }
  est.timings.pose_us = micros(t3, Clock::now());
  if (!est.success && out.failure_reason.empty())
    out.failure_reason = "no hypothesis reached " + std::to_string(pcfg.min_matches) + " inliers";
  return out;
}

}  // namespace vistr
