#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "vistr/errors.hpp"
#include "vistr/nn.hpp"
#include "vistr/retrieval.hpp"

namespace vistr {

struct Match2D3D {
  std::uint32_t keypoint = 0;
  std::uint32_t submap_index = 0;
  std::uint64_t point_id = 0;
  double distance = 0;
};

enum class MatchMode { MutualNearest, Ratio };

struct MatchConfig {
  MatchMode mode = MatchMode::MutualNearest;
  double ratio = 0.9;
};

namespace detail {

// Squared L2 distances between descriptor columns (rows: query, cols: map).
inline Mat<float> pairwise_sq_dist(const Mat<float>& query, const Mat<float>& map) {
  const Eigen::VectorXf qn = query.colwise().squaredNorm().transpose();
  const Eigen::RowVectorXf mn = map.colwise().squaredNorm();
  Mat<float> d = query.transpose() * map;
  d *= -2.0f;
  d.colwise() += qn;
  d.rowwise() += mn;
  return d.cwiseMax(0.0f);
}

inline double exact_distance(const Mat<float>& a, Eigen::Index i, const Mat<float>& b, Eigen::Index j) {
  return (a.col(i).cast<double>() - b.col(j).cast<double>()).norm();
}

}  // namespace detail

/// Nearest-neighbour descriptor matching between query keypoints (columns
/// of `query_desc`) and a submap. Ties resolve to the lowest index.
inline std::vector<Match2D3D> match_descriptors(const Mat<float>& query_desc, const Submap& submap,
                                                const MatchConfig& cfg = {}) {
  if (submap.empty()) fail(ErrorKind::NoSubmap, "cannot match against an empty submap");
  require(query_desc.rows() == submap.descriptors.rows(), ErrorKind::Shape, "descriptor dimension mismatch");
  std::vector<Match2D3D> out;
  const auto nq = query_desc.cols(), nm = submap.descriptors.cols();
  if (nq == 0) return out;
  const Mat<float> d = detail::pairwise_sq_dist(query_desc, submap.descriptors);

  std::vector<Eigen::Index> best_for_query(nq);
  for (Eigen::Index i = 0; i < nq; ++i) d.row(i).minCoeff(&best_for_query[i]);

  if (cfg.mode == MatchMode::MutualNearest) {
    std::vector<Eigen::Index> best_for_map(nm);
    for (Eigen::Index j = 0; j < nm; ++j) d.col(j).minCoeff(&best_for_map[j]);
    for (Eigen::Index i = 0; i < nq; ++i) {
      const auto j = best_for_query[i];
      if (best_for_map[j] != i) continue;
      out.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), submap.ids[j],
                     detail::exact_distance(query_desc, i, submap.descriptors, j)});
    }
    return out;
  }

  require(cfg.ratio > 0.0 && cfg.ratio <= 1.0, ErrorKind::Parameter, "ratio must lie in (0, 1]");
  for (Eigen::Index i = 0; i < nq; ++i) {
    const auto j = best_for_query[i];
    float second = std::numeric_limits<float>::infinity();
    for (Eigen::Index k = 0; k < nm; ++k)
      if (k != j) second = std::min(second, d(i, k));
    const double d1 = std::sqrt(static_cast<double>(d(i, j)));
    const double d2 = std::sqrt(static_cast<double>(second));
    if (nm == 1 || d1 < cfg.ratio * d2)
      out.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), submap.ids[j],
                     detail::exact_distance(query_desc, i, submap.descriptors, j)});
  }
  return out;
}

}  // namespace vistr
