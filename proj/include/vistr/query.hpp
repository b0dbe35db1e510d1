#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <sstream>
#include <unordered_map>
#include <optional>
#include <string>
#include <vector>

#include "vistr/binary_io.hpp"
#include "vistr/errors.hpp"
#include "vistr/geometry.hpp"
#include "vistr/nn.hpp"
#include "vistr/scene.hpp"

namespace vistr {

struct QueryFeatures {
  std::uint64_t id = 0;
  Embedding embedding;
  std::vector<Pixel> keypoints;
  nn::Mat<float> descriptors;  // D_f x K, unit columns
  std::uint32_t intrinsics_id = 0;
  std::optional<Pose> gt_pose;
  std::optional<std::vector<std::uint64_t>> gt_visible_ids;
};

inline constexpr std::string_view kQueryMagic = "VSTQ";
inline constexpr std::uint32_t kQueryVersion = 1;

struct QuerySet {
  std::uint32_t embedding_dim = 0;
  std::uint32_t descriptor_dim = 0;
  std::vector<QueryFeatures> queries;

  const QueryFeatures& find(std::uint64_t id) const {
    for (const auto& q : queries)
      if (q.id == id) return q;
    fail(ErrorKind::Integrity, "unknown query id " + std::to_string(id));
  }
};

inline void validate_query(const QueryFeatures& q, const QuerySet& set, const CameraIntrinsics* k = nullptr) {
  const std::string tag = "query " + std::to_string(q.id);
  require(q.embedding.size() == set.embedding_dim, ErrorKind::Shape, "embedding dimension mismatch for " + tag);
  require(q.embedding.allFinite(), ErrorKind::Data, "non-finite embedding for " + tag);
  require(q.descriptors.rows() == set.descriptor_dim, ErrorKind::Shape, "descriptor dimension mismatch for " + tag);
  require(static_cast<std::size_t>(q.descriptors.cols()) == q.keypoints.size(), ErrorKind::Shape,
          "keypoint/descriptor count mismatch for " + tag);
  require(q.descriptors.allFinite(), ErrorKind::Data, "non-finite descriptor for " + tag);
  for (const auto& kp : q.keypoints) {
    require(kp.allFinite(), ErrorKind::Data, "non-finite keypoint for " + tag);
    if (k) require(k->contains(kp), ErrorKind::Data, "keypoint outside image bounds for " + tag);
  }
  if (q.gt_pose) require(q.gt_pose->is_valid(), ErrorKind::Data, "invalid ground-truth pose for " + tag);
}

/// Layout: magic "VSTQ", u32 version, u32 embedding dim, u32 descriptor dim,
/// u64 query count; per query: u64 id, D_e x f32 embedding, u32 intrinsics
/// id, u64 keypoint count, per keypoint (f32 u, f32 v, D_f x f32
/// descriptor), u8 flags (bit 0: ground-truth pose follows as 4 x f64
/// quaternion w,x,y,z + 3 x f64 translation; bit 1: ground-truth visible ids
/// follow as u64 count + u64 ids).
inline std::vector<std::uint8_t> serialize_queries(const QuerySet& set) {
  io::Writer w;
  w.put_magic(kQueryMagic);
  w.put<std::uint32_t>(kQueryVersion);
  w.put<std::uint32_t>(set.embedding_dim);
  w.put<std::uint32_t>(set.descriptor_dim);
  w.put<std::uint64_t>(set.queries.size());
  for (const auto& q : set.queries) {
    w.put<std::uint64_t>(q.id);
    w.put_span<float>({q.embedding.data(), static_cast<std::size_t>(q.embedding.size())});
    w.put<std::uint32_t>(q.intrinsics_id);
    w.put<std::uint64_t>(q.keypoints.size());
    for (std::size_t i = 0; i < q.keypoints.size(); ++i) {
      w.put<float>(static_cast<float>(q.keypoints[i].x()));
      w.put<float>(static_cast<float>(q.keypoints[i].y()));
      w.put_span<float>({q.descriptors.col(static_cast<Eigen::Index>(i)).data(), set.descriptor_dim});
    }
    const std::uint8_t flags = (q.gt_pose ? 1 : 0) | (q.gt_visible_ids ? 2 : 0);
    w.put<std::uint8_t>(flags);
    if (q.gt_pose) {
      const auto& r = q.gt_pose->rotation;
      for (double v : {r.w(), r.x(), r.y(), r.z()}) w.put<double>(v);
      for (int k = 0; k < 3; ++k) w.put<double>(q.gt_pose->translation[k]);
    }
    if (q.gt_visible_ids) {
      w.put<std::uint64_t>(q.gt_visible_ids->size());
      w.put_span<std::uint64_t>(*q.gt_visible_ids);
    }
  }
  return w.bytes();
}

inline void save_queries(const QuerySet& set, const std::string& path) {
  io::Writer w;
  w.put_span<std::uint8_t>(serialize_queries(set));
  w.write_file(path);
}

inline QuerySet parse_queries(io::Reader r) {
  QuerySet set;
  r.expect_magic(kQueryMagic);
  const auto version = r.get<std::uint32_t>();
  require(version == kQueryVersion, ErrorKind::Format, "unsupported query file version " + std::to_string(version));
  set.embedding_dim = r.get<std::uint32_t>();
  set.descriptor_dim = r.get<std::uint32_t>();
  require(set.embedding_dim > 0 && set.descriptor_dim > 0, ErrorKind::Format, "zero dimension in query header");
  const auto n = r.get<std::uint64_t>();
  r.check_count(n, 8 + 4ull * set.embedding_dim + 4 + 8 + 1);
  set.queries.resize(n);
  for (auto& q : set.queries) {
    q.id = r.get<std::uint64_t>();
    q.embedding.resize(set.embedding_dim);
    r.get_span<float>({q.embedding.data(), set.embedding_dim});
    q.intrinsics_id = r.get<std::uint32_t>();
    const auto nk = r.get<std::uint64_t>();
    r.check_count(nk, 8 + 4ull * set.descriptor_dim);
    q.keypoints.resize(nk);
    q.descriptors.resize(set.descriptor_dim, static_cast<Eigen::Index>(nk));
    for (std::size_t i = 0; i < nk; ++i) {
      const float u = r.get<float>(), v = r.get<float>();
      q.keypoints[i] = Pixel(u, v);
      r.get_span<float>({q.descriptors.col(static_cast<Eigen::Index>(i)).data(), set.descriptor_dim});
    }
    const auto flags = r.get<std::uint8_t>();
    require((flags & ~3u) == 0, ErrorKind::Format, "unknown query flags");
    if (flags & 1) {
      const double qw = r.get<double>(), qx = r.get<double>(), qy = r.get<double>(), qz = r.get<double>();
      Pose p;
      p.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
      for (int k = 0; k < 3; ++k) p.translation[k] = r.get<double>();
      q.gt_pose = p;
    }
    if (flags & 2) {
      const auto nv = r.get<std::uint64_t>();
      r.check_count(nv, 8);
      std::vector<std::uint64_t> ids(nv);
      r.get_span<std::uint64_t>(ids);
      q.gt_visible_ids = std::move(ids);
    }
    validate_query(q, set);
  }
  require(r.at_end(), ErrorKind::Format, "trailing bytes after query file");
  return set;
}

inline QuerySet load_queries(const std::string& path) { return parse_queries(io::Reader::from_file(path)); }

/// Keypoints are stored as f32; rounds a query's keypoints the same way so
/// in-memory and reloaded queries agree exactly.
inline void quantise_keypoints(QueryFeatures& q) {
  // The volatile store keeps the rounding: GCC 11's SLP vectoriser at -O3
  // drops the double -> float -> double round trip for some elements.
  auto round = [](double x) -> double {
    volatile float f = static_cast<float>(x);
    return f;
  };
  for (auto& kp : q.keypoints) kp = Pixel(round(kp.x()), round(kp.y()));
}

// Plain-text queries, same conventions as the bundle text format:
//
//   vistr-text 1
//   dims <embedding_dim> <descriptor_dim>
//   query <id> <camera id>                      (opens a query)
//   kp <u> <v> <descriptor values...>           (keypoint of the open query)
//   gt <qw> <qx> <qy> <qz> <tx> <ty> <tz>       (optional world-from-camera pose)
//   visible <n> <n point ids...>                (optional)
//   embedding <query id> <embedding values...>  (any position)
//
// Keypoints are rounded to f32 and descriptors L2-normalised on import.
inline QuerySet parse_text_queries(std::istream& in) {
  QuerySet set;
  bool have_header = false, have_dims = false;
  std::unordered_map<std::uint64_t, Embedding> embeddings;
  std::vector<std::vector<float>> cols;  // descriptors of the open query
  std::string line;
  std::size_t line_no = 0;
  auto bad = [&](const std::string& msg) {
    fail(ErrorKind::Format, "line " + std::to_string(line_no) + ": " + msg);
  };
  auto close = [&] {
    if (set.queries.empty()) return;
    auto& q = set.queries.back();
    q.descriptors.resize(set.descriptor_dim, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i)
      for (std::uint32_t k = 0; k < set.descriptor_dim; ++k) q.descriptors(k, static_cast<Eigen::Index>(i)) = cols[i][k];
    cols.clear();
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
    if (tag != "dims" && !have_dims) bad("'" + tag + "' before dims");
    if (tag == "dims") {
      if (!(ls >> set.embedding_dim >> set.descriptor_dim)) bad("malformed dims record");
      if (set.embedding_dim == 0 || set.descriptor_dim == 0) bad("zero dimension");
      have_dims = true;
    } else if (tag == "query") {
      close();
      QueryFeatures q;
      if (!(ls >> q.id >> q.intrinsics_id)) bad("malformed query record");
      set.queries.push_back(std::move(q));
    } else if (tag == "kp" || tag == "gt" || tag == "visible") {
      if (set.queries.empty()) bad("'" + tag + "' outside a query");
      auto& q = set.queries.back();
      if (tag == "kp") {
        float u, v;
        std::vector<float> d(set.descriptor_dim);
        if (!(ls >> u >> v)) bad("malformed kp record");
        for (auto& x : d)
          if (!(ls >> x)) bad("short descriptor");
        double n = 0;
        for (float x : d) n += double(x) * x;
        n = std::sqrt(n);
        if (!(n > 0) || !std::isfinite(n)) fail(ErrorKind::Data, "line " + std::to_string(line_no) + ": zero or non-finite descriptor");
        if (std::abs(n - 1.0) > 1e-6)
          for (auto& x : d) x = static_cast<float>(x / n);
        q.keypoints.emplace_back(u, v);
        cols.push_back(std::move(d));
      } else if (tag == "gt") {
        double qw, qx, qy, qz;
        Pose p;
        if (!(ls >> qw >> qx >> qy >> qz >> p.translation.x() >> p.translation.y() >> p.translation.z()))
          bad("malformed gt record");
        p.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
        p.canonicalise();
        q.gt_pose = p;
      } else {
        std::uint64_t n = 0;
        if (!(ls >> n)) bad("malformed visible record");
        std::vector<std::uint64_t> ids(n);
        for (auto& id : ids)
          if (!(ls >> id)) bad("short visible list");
        q.gt_visible_ids = std::move(ids);
      }
    } else if (tag == "embedding") {
      std::uint64_t id = 0;
      if (!(ls >> id)) bad("malformed embedding record");
      Embedding e(set.embedding_dim);
      for (std::uint32_t k = 0; k < set.embedding_dim; ++k)
        if (!(ls >> e[k])) bad("short embedding");
      if (!embeddings.emplace(id, std::move(e)).second) bad("duplicate embedding for query " + std::to_string(id));
    } else {
      bad("unknown record '" + tag + "'");
    }
    std::string extra;
    if (ls >> extra) bad("trailing fields on '" + tag + "' record");
  }
  close();
  if (!have_header) fail(ErrorKind::Format, "empty text query file");
  if (!have_dims) fail(ErrorKind::Format, "missing dims record");
  for (auto& q : set.queries) {
    const auto it = embeddings.find(q.id);
    require(it != embeddings.end(), ErrorKind::Integrity, "query " + std::to_string(q.id) + " has no embedding");
    q.embedding = std::move(it->second);
    embeddings.erase(it);
    validate_query(q, set);
  }
  require(embeddings.empty(), ErrorKind::Integrity,
          embeddings.empty() ? "" : "embedding record for unknown query " + std::to_string(embeddings.begin()->first));
  return set;
}

inline QuerySet import_text_queries(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::File, "cannot open: " + path);
  return parse_text_queries(in);
}

inline void write_text_queries(const QuerySet& set, std::ostream& out) {
  out.precision(9);
  out << "vistr-text 1\n";
  out << "dims " << set.embedding_dim << ' ' << set.descriptor_dim << '\n';
  for (const auto& q : set.queries) {
    out << "query " << q.id << ' ' << q.intrinsics_id << '\n';
    for (std::size_t i = 0; i < q.keypoints.size(); ++i) {
      out << "kp " << static_cast<float>(q.keypoints[i].x()) << ' ' << static_cast<float>(q.keypoints[i].y());
      for (Eigen::Index k = 0; k < q.descriptors.rows(); ++k) out << ' ' << q.descriptors(k, static_cast<Eigen::Index>(i));
      out << '\n';
    }
    if (q.gt_pose) {
      out.precision(17);
      const auto& r = q.gt_pose->rotation;
      const auto& t = q.gt_pose->translation;
      out << "gt " << r.w() << ' ' << r.x() << ' ' << r.y() << ' ' << r.z() << ' ' << t.x() << ' ' << t.y() << ' '
          << t.z() << '\n';
      out.precision(9);
    }
    if (q.gt_visible_ids) {
      out << "visible " << q.gt_visible_ids->size();
      for (auto id : *q.gt_visible_ids) out << ' ' << id;
      out << '\n';
    }
    out << "embedding " << q.id;
    for (float v : q.embedding) out << ' ' << v;
    out << '\n';
  }
}

}  // namespace vistr
