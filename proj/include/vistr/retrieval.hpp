#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "vistr/errors.hpp"
#include "vistr/scene.hpp"
#include "vistr/vae.hpp"

namespace vistr {

/// Balanced k-d tree over a fixed point set. Splits on the axis of largest
/// spread at the median; leaves hold up to `leaf_size` points.
class KdTree {
 public:
  struct Node {
    std::uint32_t begin = 0, end = 0;  // range in order()
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0;
    bool is_leaf() const { return left < 0; }
  };

  KdTree() = default;

  explicit KdTree(std::vector<Point3> points, std::uint32_t leaf_size = 16)
      : points_(std::move(points)), leaf_size_(std::max<std::uint32_t>(1, leaf_size)) {
    require(!points_.empty(), ErrorKind::EmptyMap, "cannot index an empty point set");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    nodes_.reserve(2 * points_.size() / leaf_size_ + 1);
    build(0, static_cast<std::uint32_t>(points_.size()), 0);
  }

  std::size_t size() const { return points_.size(); }
  std::size_t depth() const { return depth_; }
  std::uint32_t leaf_size() const { return leaf_size_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::uint32_t>& order() const { return order_; }
  const std::vector<Point3>& points() const { return points_; }

  /// Calls visit(index) for every point with |p - q| <= radius.
  template <typename Visit>
  void radius_search(const Point3& q, double radius, Visit&& visit) const {
    const double r2 = radius * radius;
    std::array<std::int32_t, 128> stack;
    std::size_t top = 0;
    stack[top++] = 0;
    while (top > 0) {
      const Node& n = nodes_[stack[--top]];
      if (n.is_leaf()) {
        for (std::uint32_t i = n.begin; i < n.end; ++i) {
          const auto idx = order_[i];
          if ((points_[idx] - q).squaredNorm() <= r2) visit(idx);
        }
        continue;
      }
      const double diff = q[n.axis] - n.split;
      const std::int32_t near = diff <= 0 ? n.left : n.right;
      const std::int32_t far = diff <= 0 ? n.right : n.left;
      if (diff * diff <= r2) stack[top++] = far;
      stack[top++] = near;
    }
  }

  std::vector<std::uint32_t> radius_search(const Point3& q, double radius) const {
    std::vector<std::uint32_t> out;
    radius_search(q, radius, [&](std::uint32_t i) { out.push_back(i); });
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::int32_t build(std::uint32_t begin, std::uint32_t end, std::size_t depth) {
    depth_ = std::max(depth_, depth);
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= leaf_size_) return id;

    Eigen::Vector3d lo = points_[order_[begin]], hi = lo;
    for (auto i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    Eigen::Index axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] == lo[axis]) return id;  // all coincident: keep as one leaf

    const auto mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       const double pa = points_[a][axis], pb = points_[b][axis];
                       return pa < pb || (pa == pb && a < b);
                     });
    // Points left of mid are <= split, points from mid on are >= split.
    const double split = points_[order_[mid]][axis];
    const auto left = build(begin, mid, depth + 1);
    const auto right = build(mid, end, depth + 1);
    Node& n = nodes_[id];
    n.axis = static_cast<std::uint8_t>(axis);
    n.split = split;
    n.left = left;
    n.right = right;
    return id;
  }

  std::vector<Point3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
  std::uint32_t leaf_size_ = 16;
  std::size_t depth_ = 0;
};

using SpatialIndex = KdTree;

inline SpatialIndex build_spatial_index(std::span<const Point3> points, std::uint32_t leaf_size = 16) {
  return SpatialIndex(std::vector<Point3>(points.begin(), points.end()), leaf_size);
}

/// One centroid per occupied voxel, emitted in lexicographic voxel order.
inline std::vector<Point3> voxel_downsample(std::span<const Point3> points, double voxel) {
  require(voxel > 0.0, ErrorKind::Parameter, "voxel size must be positive");
  using Key = std::array<std::int64_t, 3>;
  std::vector<std::pair<Key, std::uint32_t>> keyed;
  keyed.reserve(points.size());
  for (std::uint32_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    keyed.push_back({{static_cast<std::int64_t>(std::floor(p.x() / voxel)),
                      static_cast<std::int64_t>(std::floor(p.y() / voxel)),
                      static_cast<std::int64_t>(std::floor(p.z() / voxel))},
                     i});
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<Point3> out;
  for (std::size_t i = 0; i < keyed.size();) {
    std::size_t j = i;
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    while (j < keyed.size() && keyed[j].first == keyed[i].first) sum += points[keyed[j++].second];
    out.push_back(sum / static_cast<double>(j - i));
    i = j;
  }
  return out;
}

struct GeneratedPointSet {
  std::vector<Point3> points;  // scene coordinates
  std::uint64_t seed = 0;
  std::size_t n = 0;
};

/// Decodes n prior samples z ~ N(0, I) under `embedding` and maps them back
/// to scene coordinates.
template <typename S>
GeneratedPointSet sample_structure(const VaeModel<S>& model, const Vec<S>& embedding, std::size_t n,
                                   std::uint64_t seed) {
  require(n >= 1, ErrorKind::Parameter, "need at least one sample");
  detail::check_embedding(model, embedding.size());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat<S> z(model.arch().latent_dim, static_cast<Eigen::Index>(n));
  for (auto& v : z.reshaped()) v = static_cast<S>(normal(rng));
  const Mat<S> y = decode_many(model, embedding, z);
  GeneratedPointSet g;
  g.seed = seed;
  g.n = n;
  g.points.reserve(n);
  for (Eigen::Index i = 0; i < y.cols(); ++i)
    g.points.push_back(invert_norm(model.norm(), y.col(i).template cast<double>()));
  return g;
}

struct Submap {
  std::vector<std::uint64_t> ids;           // sorted, unique
  std::vector<std::uint32_t> point_indices;  // into the bundle, aligned with ids
  std::vector<Point3> positions;
  Mat<float> descriptors;  // D_f x n

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

inline Submap make_submap(const SceneBundle& bundle, std::vector<std::uint32_t> indices) {
  std::sort(indices.begin(), indices.end(), [&](std::uint32_t a, std::uint32_t b) {
    return bundle.points[a].id < bundle.points[b].id;
  });
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  Submap s;
  s.point_indices = std::move(indices);
  s.descriptors.resize(bundle.descriptor_dim, static_cast<Eigen::Index>(s.point_indices.size()));
  for (std::size_t k = 0; k < s.point_indices.size(); ++k) {
    const auto& p = bundle.points[s.point_indices[k]];
    s.ids.push_back(p.id);
    s.positions.push_back(p.position);
    s.descriptors.col(static_cast<Eigen::Index>(k)) = p.descriptor;
  }
  return s;
}

/// All map points within `radius` of the (voxel-downsampled) generated
/// points. `index` must be built over bundle.positions() in bundle order.
inline Submap radius_retrieve(const SpatialIndex& index, const SceneBundle& bundle, const GeneratedPointSet& generated,
                              double radius, double voxel) {
  require(radius > 0.0, ErrorKind::Parameter, "radius must be positive");
  require(index.size() == bundle.points.size(), ErrorKind::Shape, "index does not match bundle");
  const auto queries = voxel > 0 ? voxel_downsample(generated.points, voxel) : generated.points;
  std::vector<std::uint8_t> hit(index.size(), 0);
  for (const auto& q : queries) index.radius_search(q, radius, [&](std::uint32_t i) { hit[i] = 1; });
  std::vector<std::uint32_t> indices;
  for (std::uint32_t i = 0; i < hit.size(); ++i)
    if (hit[i]) indices.push_back(i);
  return make_submap(bundle, std::move(indices));
}

}  // namespace vistr
