#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "vistr/binary_io.hpp"
#include "vistr/errors.hpp"
#include "vistr/geometry.hpp"

namespace vistr {

using Embedding = Eigen::VectorXf;
using Descriptor = Eigen::VectorXf;

/// Isotropic affine map from scene metres into the unit cube:
/// normalised = scale * p + offset.
struct NormTransform {
  double scale = 1.0;
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();

  bool operator==(const NormTransform&) const = default;
};

inline Point3 apply_norm(const NormTransform& t, const Point3& p) {
  return t.scale * p + t.offset;
}

inline Point3 invert_norm(const NormTransform& t, const Point3& p) {
  return (p - t.offset) / t.scale;
}

/// Scale is (1 - 2 margin) / largest bounding-box extent; every axis is
/// centred in the cube, so all points land in [margin, 1 - margin]^3.
inline NormTransform compute_norm_transform(std::span<const Point3> points, double margin = 0.05) {
  require(margin >= 0.0 && margin <= 0.25, ErrorKind::Parameter, "margin must lie in [0, 0.25]");
  require(points.size() >= 2, ErrorKind::Degenerate, "need at least two points to normalise");
  Eigen::Vector3d lo = points.front(), hi = points.front();
  for (const auto& p : points) {
    require(p.allFinite(), ErrorKind::Data, "non-finite point position");
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double extent = (hi - lo).maxCoeff();
  require(extent > 0.0, ErrorKind::Degenerate, "degenerate extent: all points identical");
  NormTransform t;
  t.scale = (1.0 - 2.0 * margin) / extent;
  t.offset = Eigen::Vector3d::Constant(0.5) - t.scale * 0.5 * (lo + hi);
  return t;
}

struct SfmPoint {
  std::uint64_t id = 0;
  Point3 position = Point3::Zero();
  Descriptor descriptor;
};

struct MappingImage {
  std::uint64_t id = 0;
  Embedding embedding;
  Pose pose;
  std::uint32_t intrinsics_id = 0;
  std::vector<std::uint64_t> visible_point_ids;
};

struct TrainPair {
  std::uint32_t image_index = 0;
  std::uint32_t point_index = 0;
  Point3 point = Point3::Zero();  // normalised coordinates
};

inline constexpr std::string_view kBundleMagic = "VSTR";
inline constexpr std::uint32_t kBundleVersion = 1;

/// The SfM map plus mapping-image metadata. Immutable once validated.
class SceneBundle {
 public:
  std::uint32_t version = kBundleVersion;
  std::uint32_t embedding_dim = 0;
  std::uint32_t descriptor_dim = 0;
  std::vector<SfmPoint> points;
  std::vector<MappingImage> images;
  std::vector<CameraIntrinsics> intrinsics;
  NormTransform norm;

  /// Checks every invariant and builds the id lookup tables.
  void validate();

  std::size_t point_index(std::uint64_t id) const {
    auto it = point_lookup_.find(id);
    if (it == point_lookup_.end()) fail(ErrorKind::Integrity, "unknown point id " + std::to_string(id));
    return it->second;
  }

  const CameraIntrinsics& camera(std::uint32_t id) const {
    for (const auto& k : intrinsics)
      if (k.id == id) return k;
    fail(ErrorKind::Integrity, "unknown intrinsics id " + std::to_string(id));
  }

  /// Visible point indices (into `points`) for image `image_index`.
  const std::vector<std::uint32_t>& visible_indices(std::size_t image_index) const {
    return visible_indices_.at(image_index);
  }

  std::vector<Point3> positions() const {
    std::vector<Point3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(p.position);
    return out;
  }

  std::size_t total_visibility() const {
    std::size_t n = 0;
    for (const auto& img : images) n += img.visible_point_ids.size();
    return n;
  }

 private:
  std::unordered_map<std::uint64_t, std::size_t> point_lookup_;
  std::vector<std::vector<std::uint32_t>> visible_indices_;
};

inline void SceneBundle::validate() {
  require(version == kBundleVersion, ErrorKind::Format, "unsupported bundle version");
  require(embedding_dim > 0 && descriptor_dim > 0, ErrorKind::Format, "zero dimension in bundle header");

  point_lookup_.clear();
  point_lookup_.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    require(p.position.allFinite(), ErrorKind::Data, "non-finite position for point " + std::to_string(p.id));
    require(static_cast<std::uint32_t>(p.descriptor.size()) == descriptor_dim, ErrorKind::Shape,
            "descriptor dimension mismatch for point " + std::to_string(p.id));
    require(p.descriptor.allFinite(), ErrorKind::Data, "non-finite descriptor for point " + std::to_string(p.id));
    require(std::abs(p.descriptor.cast<double>().norm() - 1.0) <= 1e-4, ErrorKind::Data,
            "descriptor not unit-norm for point " + std::to_string(p.id));
    require(point_lookup_.emplace(p.id, i).second, ErrorKind::Integrity,
            "duplicate point id " + std::to_string(p.id));
  }

  std::unordered_set<std::uint32_t> camera_ids;
  for (const auto& k : intrinsics) {
    require(k.is_valid(), ErrorKind::Data, "invalid intrinsics " + std::to_string(k.id));
    require(camera_ids.insert(k.id).second, ErrorKind::Integrity, "duplicate intrinsics id " + std::to_string(k.id));
  }

  std::unordered_set<std::uint64_t> image_ids;
  visible_indices_.assign(images.size(), {});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    const std::string tag = "image " + std::to_string(img.id);
    require(image_ids.insert(img.id).second, ErrorKind::Integrity, "duplicate " + tag);
    require(static_cast<std::uint32_t>(img.embedding.size()) == embedding_dim, ErrorKind::Shape,
            "embedding dimension mismatch for " + tag);
    require(img.embedding.allFinite(), ErrorKind::Data, "non-finite embedding for " + tag);
    require(img.pose.is_valid(), ErrorKind::Data, "invalid pose for " + tag);
    require(camera_ids.contains(img.intrinsics_id), ErrorKind::Integrity, "unknown intrinsics for " + tag);
    require(!img.visible_point_ids.empty(), ErrorKind::Integrity, "empty visibility for " + tag);
    auto& vis = visible_indices_[i];
    vis.reserve(img.visible_point_ids.size());
    for (auto id : img.visible_point_ids) {
      auto it = point_lookup_.find(id);
      require(it != point_lookup_.end(), ErrorKind::Integrity,
              tag + " references missing point id " + std::to_string(id));
      vis.push_back(static_cast<std::uint32_t>(it->second));
    }
  }

  require(norm.scale > 0.0 && std::isfinite(norm.scale) && norm.offset.allFinite(), ErrorKind::Data,
          "invalid normalisation transform");
  constexpr double tol = 1e-9;
  for (const auto& p : points) {
    const Point3 q = apply_norm(norm, p.position);
    require((q.array() >= -tol).all() && (q.array() <= 1.0 + tol).all(), ErrorKind::Integrity,
            "normalisation does not map point " + std::to_string(p.id) + " into the unit cube");
  }
}

// ---------------------------------------------------------------------------
// Binary bundle format.

inline std::vector<std::uint8_t> serialize_scene_bundle(const SceneBundle& b) {
  io::Writer w;
  w.put_magic(kBundleMagic);
  w.put<std::uint32_t>(b.version);
  w.put<std::uint32_t>(b.embedding_dim);
  w.put<std::uint32_t>(b.descriptor_dim);
  w.put<std::uint64_t>(b.points.size());
  w.put<std::uint64_t>(b.images.size());
  for (const auto& p : b.points) {
    w.put<std::uint64_t>(p.id);
    for (int k = 0; k < 3; ++k) w.put<double>(p.position[k]);
    w.put_span<float>({p.descriptor.data(), static_cast<std::size_t>(p.descriptor.size())});
  }
  for (const auto& img : b.images) {
    w.put<std::uint64_t>(img.id);
    w.put_span<float>({img.embedding.data(), static_cast<std::size_t>(img.embedding.size())});
    w.put<double>(img.pose.rotation.w());
    w.put<double>(img.pose.rotation.x());
    w.put<double>(img.pose.rotation.y());
    w.put<double>(img.pose.rotation.z());
    for (int k = 0; k < 3; ++k) w.put<double>(img.pose.translation[k]);
    w.put<std::uint32_t>(img.intrinsics_id);
    w.put<std::uint64_t>(img.visible_point_ids.size());
    w.put_span<std::uint64_t>(img.visible_point_ids);
  }
  w.put<std::uint64_t>(b.intrinsics.size());
  for (const auto& k : b.intrinsics) {
    w.put<std::uint32_t>(k.id);
    w.put<double>(k.fx);
    w.put<double>(k.fy);
    w.put<double>(k.cx);
    w.put<double>(k.cy);
    w.put<std::uint32_t>(k.width);
    w.put<std::uint32_t>(k.height);
  }
  w.put<double>(b.norm.scale);
  for (int k = 0; k < 3; ++k) w.put<double>(b.norm.offset[k]);
  return w.bytes();
}

inline void save_scene_bundle(const SceneBundle& b, const std::string& path) {
  io::Writer w;
  w.put_span<std::uint8_t>(serialize_scene_bundle(b));
  w.write_file(path);
}

inline SceneBundle parse_scene_bundle(io::Reader r) {
  SceneBundle b;
  r.expect_magic(kBundleMagic);
  b.version = r.get<std::uint32_t>();
  require(b.version == kBundleVersion, ErrorKind::Format,
          "unsupported bundle version " + std::to_string(b.version));
  b.embedding_dim = r.get<std::uint32_t>();
  b.descriptor_dim = r.get<std::uint32_t>();
  require(b.embedding_dim > 0 && b.descriptor_dim > 0, ErrorKind::Format, "zero dimension in bundle header");
  const auto n_points = r.get<std::uint64_t>();
  const auto n_images = r.get<std::uint64_t>();
  r.check_count(n_points, 8 + 24 + 4ull * b.descriptor_dim);
  r.check_count(n_images, 8 + 4ull * b.embedding_dim + 56 + 4 + 8);

  b.points.resize(n_points);
  for (auto& p : b.points) {
    p.id = r.get<std::uint64_t>();
    for (int k = 0; k < 3; ++k) p.position[k] = r.get<double>();
    p.descriptor.resize(b.descriptor_dim);
    r.get_span<float>({p.descriptor.data(), b.descriptor_dim});
  }
  b.images.resize(n_images);
  for (auto& img : b.images) {
    img.id = r.get<std::uint64_t>();
    img.embedding.resize(b.embedding_dim);
    r.get_span<float>({img.embedding.data(), b.embedding_dim});
    const double qw = r.get<double>(), qx = r.get<double>(), qy = r.get<double>(), qz = r.get<double>();
    img.pose.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
    for (int k = 0; k < 3; ++k) img.pose.translation[k] = r.get<double>();
    img.intrinsics_id = r.get<std::uint32_t>();
    const auto n_vis = r.get<std::uint64_t>();
    r.check_count(n_vis, 8);
    img.visible_point_ids.resize(n_vis);
    r.get_span<std::uint64_t>(img.visible_point_ids);
  }
  const auto n_cams = r.get<std::uint64_t>();
  r.check_count(n_cams, 4 + 32 + 8);
  b.intrinsics.resize(n_cams);
  for (auto& k : b.intrinsics) {
    k.id = r.get<std::uint32_t>();
    k.fx = r.get<double>();
    k.fy = r.get<double>();
    k.cx = r.get<double>();
    k.cy = r.get<double>();
    k.width = r.get<std::uint32_t>();
    k.height = r.get<std::uint32_t>();
  }
  b.norm.scale = r.get<double>();
  for (int k = 0; k < 3; ++k) b.norm.offset[k] = r.get<double>();
  require(r.at_end(), ErrorKind::Format, "trailing bytes after bundle");
  b.validate();
  return b;
}

inline SceneBundle load_scene_bundle(const std::string& path) {
  return parse_scene_bundle(io::Reader::from_file(path));
}

// ---------------------------------------------------------------------------
// Plain-text exchange format, one record per line:
//
//   vistr-text 1
//   dims <embedding_dim> <descriptor_dim>
//   camera <id> <fx> <fy> <cx> <cy> <width> <height>
//   point <id> <x> <y> <z> <descriptor values...>
//   image <id> <camera id> <qw> <qx> <qy> <qz> <tx> <ty> <tz> <n> <n point ids...> <embedding values...>
//   embedding <image id> <embedding values...>
//   norm <scale> <ox> <oy> <oz>          (optional; computed when absent)
//
// The pose is world-from-camera: the quaternion rotates camera axes into the
// world and t is the camera centre. An image record may stop after its
// visibility list, in which case a separate embedding record (before or after
// it) must supply the values; this is what an embedding exporter writes.
// Blank lines and lines starting with '#' are ignored. Descriptors are
// L2-normalised on import.

struct TextImportOptions {
  double margin = 0.05;
};

inline SceneBundle parse_text_bundle(std::istream& in, const TextImportOptions& opts = {}) {
  SceneBundle b;
  bool have_header = false, have_dims = false, have_norm = false;
  std::unordered_map<std::uint64_t, Eigen::VectorXf> loose_embeddings;
  std::string line;
  std::size_t line_no = 0;
  auto bad = [&](const std::string& msg) {
    fail(ErrorKind::Format, "line " + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "vistr-text") {
      int v = 0;
      if (!(ls >> v) || v != 1) bad("unsupported text format version");
      have_header = true;
      continue;
    }
    if (!have_header) bad("missing 'vistr-text 1' header");
    if (tag == "dims") {
      if (!(ls >> b.embedding_dim >> b.descriptor_dim)) bad("malformed dims record");
      have_dims = true;
    } else if (tag == "camera") {
      CameraIntrinsics k;
      if (!(ls >> k.id >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height)) bad("malformed camera record");
      b.intrinsics.push_back(k);
    } else if (tag == "point") {
      if (!have_dims) bad("point before dims");
      SfmPoint p;
      if (!(ls >> p.id >> p.position.x() >> p.position.y() >> p.position.z())) bad("malformed point record");
      p.descriptor.resize(b.descriptor_dim);
      for (std::uint32_t k = 0; k < b.descriptor_dim; ++k)
        if (!(ls >> p.descriptor[k])) bad("short descriptor");
      const float n = p.descriptor.norm();
      if (!(n > 0.0f) || !std::isfinite(n)) fail(ErrorKind::Data, "line " + std::to_string(line_no) + ": zero or non-finite descriptor");
      if (std::abs(n - 1.0f) > 1e-6f) p.descriptor /= n;  // already-unit vectors pass through bit-exact
      b.points.push_back(std::move(p));
    } else if (tag == "image") {
      if (!have_dims) bad("image before dims");
      MappingImage img;
      double qw, qx, qy, qz;
      std::uint64_t n_vis = 0;
      if (!(ls >> img.id >> img.intrinsics_id >> qw >> qx >> qy >> qz >> img.pose.translation.x() >>
            img.pose.translation.y() >> img.pose.translation.z() >> n_vis))
        bad("malformed image record");
      img.pose.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
      img.pose.canonicalise();
      img.visible_point_ids.resize(n_vis);
      for (auto& id : img.visible_point_ids)
        if (!(ls >> id)) bad("short visibility list");
      ls >> std::ws;
      if (!ls.eof()) {
        img.embedding.resize(b.embedding_dim);
        for (std::uint32_t k = 0; k < b.embedding_dim; ++k)
          if (!(ls >> img.embedding[k])) bad("short embedding");
      }
      b.images.push_back(std::move(img));
    } else if (tag == "embedding") {
      if (!have_dims) bad("embedding before dims");
      std::uint64_t id = 0;
      if (!(ls >> id)) bad("malformed embedding record");
      Eigen::VectorXf e(b.embedding_dim);
      for (std::uint32_t k = 0; k < b.embedding_dim; ++k)
        if (!(ls >> e[k])) bad("short embedding");
      if (!loose_embeddings.emplace(id, std::move(e)).second)
        bad("duplicate embedding record for image " + std::to_string(id));
    } else if (tag == "norm") {
      if (!(ls >> b.norm.scale >> b.norm.offset.x() >> b.norm.offset.y() >> b.norm.offset.z())) bad("malformed norm record");
      have_norm = true;
    } else {
      bad("unknown record '" + tag + "'");
    }
    std::string extra;
    if (ls >> extra) bad("trailing fields on '" + tag + "' record");
  }
  if (!have_header) fail(ErrorKind::Format, "empty text bundle");
  if (!have_dims) fail(ErrorKind::Format, "missing dims record");
  for (auto& img : b.images) {
    const auto it = loose_embeddings.find(img.id);
    if (it == loose_embeddings.end()) {
      if (img.embedding.size() == 0) fail(ErrorKind::Integrity, "image " + std::to_string(img.id) + " has no embedding");
      continue;
    }
    if (img.embedding.size() != 0) fail(ErrorKind::Integrity, "image " + std::to_string(img.id) + " has two embeddings");
    img.embedding = std::move(it->second);
    loose_embeddings.erase(it);
  }
  if (!loose_embeddings.empty())
    fail(ErrorKind::Integrity, "embedding record for unknown image " + std::to_string(loose_embeddings.begin()->first));
  if (!have_norm) {
    const auto pos = b.positions();
    b.norm = compute_norm_transform(pos, opts.margin);
  }
  b.validate();
  return b;
}

inline SceneBundle import_text_bundle(const std::string& path, const TextImportOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::File, "cannot open: " + path);
  return parse_text_bundle(in, opts);
}

inline void write_text_bundle(const SceneBundle& b, std::ostream& out) {
  out.precision(17);
  out << "vistr-text 1\n";
  out << "dims " << b.embedding_dim << ' ' << b.descriptor_dim << '\n';
  for (const auto& k : b.intrinsics)
    out << "camera " << k.id << ' ' << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' ' << k.width
        << ' ' << k.height << '\n';
  for (const auto& p : b.points) {
    out << "point " << p.id << ' ' << p.position.x() << ' ' << p.position.y() << ' ' << p.position.z();
    out.precision(9);
    for (float v : p.descriptor) out << ' ' << v;
    out.precision(17);
    out << '\n';
  }
  for (const auto& img : b.images) {
    const auto& q = img.pose.rotation;
    out << "image " << img.id << ' ' << img.intrinsics_id << ' ' << q.w() << ' ' << q.x() << ' ' << q.y() << ' '
        << q.z() << ' ' << img.pose.translation.x() << ' ' << img.pose.translation.y() << ' '
        << img.pose.translation.z() << ' ' << img.visible_point_ids.size();
    for (auto id : img.visible_point_ids) out << ' ' << id;
    out.precision(9);
    for (float v : img.embedding) out << ' ' << v;
    out.precision(17);
    out << '\n';
  }
  out << "norm " << b.norm.scale << ' ' << b.norm.offset.x() << ' ' << b.norm.offset.y() << ' '
      << b.norm.offset.z() << '\n';
}

// ---------------------------------------------------------------------------

/// One (image, visible point) incidence per pair, in a seeded uniform
/// shuffle; points are stored in normalised coordinates.
inline std::vector<TrainPair> build_training_pairs(const SceneBundle& b, std::uint64_t seed) {
  std::vector<TrainPair> pairs;
  pairs.reserve(b.total_visibility());
  for (std::size_t i = 0; i < b.images.size(); ++i)
    for (auto pi : b.visible_indices(i))
      pairs.push_back({static_cast<std::uint32_t>(i), pi, apply_norm(b.norm, b.points[pi].position)});
  std::mt19937_64 rng(seed);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  return pairs;
}

}  // namespace vistr
