#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "vistr/checkpoint.hpp"
#include "vistr/errors.hpp"
#include "vistr/geometry.hpp"
#include "vistr/pnp.hpp"
#include "vistr/retrieval.hpp"
#include "vistr/scene.hpp"

namespace vistr {

struct PoseError {
  double t_err = 0;  // metres between camera centres
  double r_err = 0;  // degrees
};

inline PoseError pose_errors(const Pose& est, const Pose& gt) {
  const Eigen::Matrix3d r_gt = gt.world_from_camera_rotation();
  const Eigen::Matrix3d r_est = est.world_from_camera_rotation();
  // atan2 of the sine (from the skew part) and cosine (from the trace)
  // keeps small angles accurate, where acos of the trace alone bottoms out
  // near 1e-8 rad.
  const Eigen::Matrix3d d = r_gt.transpose() * r_est;
  const double c = (d.trace() - 1.0) / 2.0;
  const double s = 0.5 * Eigen::Vector3d(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)).norm();
  return {(est.centre() - gt.centre()).norm(), rad_to_deg(std::atan2(s, c))};
}

struct RecallThreshold {
  double t = 0;  // metres
  double r = 0;  // degrees
};

inline const std::vector<RecallThreshold>& standard_thresholds() {
  static const std::vector<RecallThreshold> t{{0.25, 2.0}, {0.5, 5.0}, {5.0, 10.0}};
  return t;
}

/// Per-query outcome; failed queries carry infinite errors.
struct QueryOutcome {
  std::uint64_t id = 0;
  bool success = false;
  PoseError error{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  std::size_t submap_size = 0;
  std::size_t num_matches = 0;
  std::size_t num_inliers = 0;
  double retrieval_recall = std::numeric_limits<double>::quiet_NaN();
  double retrieval_precision = std::numeric_limits<double>::quiet_NaN();
  double reduction = std::numeric_limits<double>::quiet_NaN();
  StageTimings timings;
};

inline std::vector<double> recall_at_thresholds(std::span<const QueryOutcome> outcomes,
                                                std::span<const RecallThreshold> thresholds) {
  require(!outcomes.empty(), ErrorKind::UndefinedMetric, "recall over an empty query set");
  std::vector<double> out;
  for (const auto& th : thresholds) {
    require(th.t > 0 && th.r > 0, ErrorKind::Parameter, "thresholds must be positive");
    std::size_t hits = 0;
    for (const auto& o : outcomes)
      if (o.success && o.error.t_err <= th.t && o.error.r_err <= th.r) ++hits;
    out.push_back(static_cast<double>(hits) / static_cast<double>(outcomes.size()));
  }
  return out;
}

struct RetrievalMetrics {
  double recall = 0;
  double precision = 0;
  double reduction = 0;
};

inline RetrievalMetrics retrieval_metrics(std::span<const std::uint64_t> submap_ids,
                                          std::span<const std::uint64_t> visible_ids, std::size_t map_size) {
  require(!visible_ids.empty(), ErrorKind::UndefinedMetric, "retrieval metrics need a non-empty visible set");
  require(map_size > 0, ErrorKind::UndefinedMetric, "empty map");
  const std::unordered_set<std::uint64_t> visible(visible_ids.begin(), visible_ids.end());
  const std::unordered_set<std::uint64_t> retrieved(submap_ids.begin(), submap_ids.end());
  std::size_t both = 0;
  for (auto id : retrieved) both += visible.contains(id) ? 1 : 0;
  RetrievalMetrics m;
  m.recall = static_cast<double>(both) / static_cast<double>(visible.size());
  m.precision = retrieved.empty() ? 0.0 : static_cast<double>(both) / static_cast<double>(retrieved.size());
  m.reduction = static_cast<double>(retrieved.size()) / static_cast<double>(map_size);
  return m;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TimingReport {
  std::size_t count = 0;
  StageTimings mean;
  double total_us = 0;
};

inline TimingReport timing_report(std::span<const StageTimings> timings) {
  require(!timings.empty(), ErrorKind::UndefinedMetric, "timing report needs at least one estimate");
  TimingReport r;
  r.count = timings.size();
  for (const auto& t : timings) {
    r.mean.global_search_us += t.global_search_us;
    r.mean.tree_lookup_us += t.tree_lookup_us;
    r.mean.matching_us += t.matching_us;
    r.mean.pose_us += t.pose_us;
  }
  const double inv = 1.0 / static_cast<double>(r.count);
  r.mean.global_search_us *= inv;
  r.mean.tree_lookup_us *= inv;
  r.mean.matching_us *= inv;
  r.mean.pose_us *= inv;
  r.total_us = r.mean.total_us();
  return r;
}

inline void print_timing_table(std::ostream& out, const TimingReport& r) {
  char buf[256];
  out << "Average time per query in milliseconds (" << r.count << " queries)\n";
  out << "Global Search | SfM K-D Tree Lookup | Local Feature Matching | PnP RANSAC | Total\n";
  std::snprintf(buf, sizeof buf, "%13.3f | %19.3f | %22.3f | %10.3f | %.3f\n", r.mean.global_search_us / 1e3,
                r.mean.tree_lookup_us / 1e3, r.mean.matching_us / 1e3, r.mean.pose_us / 1e3, r.total_us / 1e3);
  out << buf;
}

struct EvalReport {
  std::vector<QueryOutcome> queries;  // sorted by id
  double median_t = 0;
  double median_r = 0;
  std::vector<RecallThreshold> thresholds;
  std::vector<double> recalls;
  double mean_retrieval_recall = std::numeric_limits<double>::quiet_NaN();
  double mean_retrieval_precision = std::numeric_limits<double>::quiet_NaN();
  double mean_reduction = std::numeric_limits<double>::quiet_NaN();
  TimingReport timing;
  std::size_t successes = 0;
};

inline EvalReport make_eval_report(std::vector<QueryOutcome> outcomes,
                                   std::span<const RecallThreshold> thresholds = standard_thresholds()) {
  require(!outcomes.empty(), ErrorKind::UndefinedMetric, "evaluation over an empty query set");
  std::sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  EvalReport r;
  std::vector<double> ts, rs;
  std::vector<StageTimings> timings;
  double rec = 0, prec = 0, red = 0;
  std::size_t n_ret = 0;
  for (const auto& o : outcomes) {
    ts.push_back(o.success ? o.error.t_err : std::numeric_limits<double>::infinity());
    rs.push_back(o.success ? o.error.r_err : std::numeric_limits<double>::infinity());
    timings.push_back(o.timings);
    r.successes += o.success ? 1 : 0;
    if (std::isfinite(o.retrieval_recall)) {
      rec += o.retrieval_recall;
      prec += o.retrieval_precision;
      red += o.reduction;
      ++n_ret;
    }
  }
  r.median_t = median(ts);
  r.median_r = median(rs);
  r.thresholds.assign(thresholds.begin(), thresholds.end());
  r.recalls = recall_at_thresholds(outcomes, thresholds);
  if (n_ret > 0) {
    r.mean_retrieval_recall = rec / n_ret;
    r.mean_retrieval_precision = prec / n_ret;
    r.mean_reduction = red / n_ret;
  }
  r.timing = timing_report(timings);
  r.queries = std::move(outcomes);
  return r;
}

inline void print_eval_report(std::ostream& out, const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "queries: %zu  localised: %zu\n", r.queries.size(), r.successes);
  out << buf;
  std::snprintf(buf, sizeof buf, "median error: t = %.4f m  R = %.4f deg\n", r.median_t, r.median_r);
  out << buf;
  out << "recall:";
  for (std::size_t i = 0; i < r.recalls.size(); ++i) {
    std::snprintf(buf, sizeof buf, "  (%gm, %gdeg) %.1f%%", r.thresholds[i].t, r.thresholds[i].r, 100.0 * r.recalls[i]);
    out << buf;
  }
  out << '\n';
  std::snprintf(buf, sizeof buf, "retrieval: recall %.4f  precision %.4f  reduction %.4f\n", r.mean_retrieval_recall,
                r.mean_retrieval_precision, r.mean_reduction);
  out << buf;
}

/// Sorted errors for CDF plots: two columns, error and cumulative fraction.
inline void write_error_cdf(std::ostream& out, std::span<const QueryOutcome> outcomes, bool rotation) {
  std::vector<double> e;
  for (const auto& o : outcomes)
    if (o.success) e.push_back(rotation ? o.error.r_err : o.error.t_err);
  std::sort(e.begin(), e.end());
  out.precision(9);
  for (std::size_t i = 0; i < e.size(); ++i)
    out << e[i] << ' ' << static_cast<double>(i + 1) / static_cast<double>(outcomes.size()) << '\n';
}

// ---------------------------------------------------------------------------
// Storage accounting.

/// Stand-in for an image-retrieval database: one global descriptor per
/// mapping image in the text exchange format, fixed-width values.
inline std::string serialize_image_retrieval_database(const SceneBundle& b) {
  std::string out = "vistr-text 1\ndims " + std::to_string(b.embedding_dim) + ' ' + std::to_string(b.descriptor_dim) + '\n';
  char buf[32];
  for (const auto& img : b.images) {
    std::snprintf(buf, sizeof buf, "embedding %020llu", static_cast<unsigned long long>(img.id));
    out += buf;
    for (float v : img.embedding) {
      std::snprintf(buf, sizeof buf, " %+.8e", static_cast<double>(v));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

struct StorageReport {
  std::size_t checkpoint_bytes = 0;       // retrieval stage: constant in image count
  std::size_t decoder_bytes = 0;          // decoder parameters only (query-time network)
  std::size_t map_point_bytes = 0;        // positions and ids
  std::size_t map_descriptor_bytes = 0;   // per-point descriptors
  std::size_t image_retrieval_db_bytes = 0;  // baseline stand-in: grows with image count
  std::size_t num_images = 0;
};

inline StorageReport storage_report(const VaeModel<float>& model, const TrainConfig& cfg, const SceneBundle& b) {
  StorageReport r;
  r.checkpoint_bytes = serialize_model(model, cfg).size();
  r.decoder_bytes = model.decoder_parameter_count() * sizeof(float);
  r.map_point_bytes = b.points.size() * (sizeof(std::uint64_t) + 3 * sizeof(double));
  r.map_descriptor_bytes = b.points.size() * b.descriptor_dim * sizeof(float);
  r.image_retrieval_db_bytes = serialize_image_retrieval_database(b).size();
  r.num_images = b.images.size();
  return r;
}

/// File-based variant: reads the checkpoint size from disk.
inline StorageReport storage_report(const std::string& checkpoint_path, const SceneBundle& b) {
  const Checkpoint ck = load_model(checkpoint_path);
  StorageReport r = storage_report(ck.model, ck.config, b);
  r.checkpoint_bytes = std::filesystem::file_size(checkpoint_path);
  return r;
}

inline void print_storage_report(std::ostream& out, const StorageReport& r) {
  out << "retrieval checkpoint bytes: " << r.checkpoint_bytes << " (O(1) in images)\n";
  out << "decoder parameter bytes: " << r.decoder_bytes << '\n';
  out << "map point bytes: " << r.map_point_bytes << '\n';
  out << "map descriptor bytes: " << r.map_descriptor_bytes << '\n';
  out << "image-retrieval database bytes: " << r.image_retrieval_db_bytes << " (O(n), n = " << r.num_images
      << " images)\n";
}

}  // namespace vistr
