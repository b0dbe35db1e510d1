#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include "test_support.hpp"
#include "vistr/vistr.hpp"

namespace vistr {
namespace {

SyntheticSceneConfig small_config() {
  SyntheticSceneConfig c;
  c.num_points = 1500;
  c.num_cameras = 60;
  c.query_stride = 6;
  c.embedding_dim = 16;
  c.descriptor_dim = 32;
  c.seed = 11;
  return c;
}

const SyntheticScene& small_scene() {
  static const SyntheticScene s = generate_synthetic_scene(small_config());
  return s;
}

TEST(Synthetic, CountsAndIds) {
  const auto& s = small_scene();
  EXPECT_EQ(s.bundle.points.size(), 1500u);
  EXPECT_EQ(s.bundle.images.size(), 50u);
  EXPECT_EQ(s.queries.queries.size(), 10u);
  for (const auto& q : s.queries.queries) {
    EXPECT_EQ(q.id % 6, 5u);
    EXPECT_TRUE(q.gt_pose && q.gt_visible_ids);
  }
  SceneBundle copy = s.bundle;
  EXPECT_NO_THROW(copy.validate());
}

TEST(Synthetic, SeedDeterminism) {
  const SyntheticScene a = generate_synthetic_scene(small_config());
  EXPECT_EQ(serialize_scene_bundle(a.bundle), serialize_scene_bundle(small_scene().bundle));
  EXPECT_EQ(serialize_queries(a.queries), serialize_queries(small_scene().queries));
  SyntheticSceneConfig other = small_config();
  other.seed = 12;
  EXPECT_NE(serialize_scene_bundle(generate_synthetic_scene(other).bundle), serialize_scene_bundle(a.bundle));
}

TEST(Synthetic, VisibilityIsGeometricallyConsistent) {
  const auto& s = small_scene();
  const auto& k = s.bundle.intrinsics[0];
  for (const auto& img : s.bundle.images) {
    for (auto id : img.visible_point_ids) {
      const Point3& p = s.bundle.points[s.bundle.point_index(id)].position;
      const auto uv = reproject(p, img.pose, k);
      ASSERT_TRUE(uv);
      EXPECT_TRUE(k.contains(*uv));
      EXPECT_LE(img.pose.to_camera(p).z(), 60.0);
    }
  }
  for (const auto& q : s.queries.queries) {
    EXPECT_GE(q.gt_visible_ids->size(), 8u);
    EXPECT_NO_THROW(validate_query(q, s.queries, &k));
  }
}

TEST(Synthetic, NearbyViewsHaveCloserEmbeddings) {
  const auto& imgs = small_scene().bundle.images;
  double near = 0, far = 0;
  for (std::size_t i = 0; i + 1 < imgs.size(); ++i) {
    near += (imgs[i].embedding - imgs[i + 1].embedding).norm();
    far += (imgs[i].embedding - imgs[(i + imgs.size() / 2) % imgs.size()].embedding).norm();
  }
  EXPECT_LT(near, 0.5 * far);
}

TEST(QueryFile, RoundTripIsByteIdentical) {
  const auto& qs = small_scene().queries;
  const auto bytes = serialize_queries(qs);
  const QuerySet back = parse_queries(io::Reader(bytes));
  EXPECT_EQ(serialize_queries(back), bytes);
  EXPECT_EQ(back.queries[3].keypoints, qs.queries[3].keypoints);
  EXPECT_EQ(*back.queries[3].gt_visible_ids, *qs.queries[3].gt_visible_ids);
  auto bad = bytes;
  bad[0] = 'Z';
  EXPECT_THROW(parse_queries(io::Reader(bad)), Error);
  bad = bytes;
  bad.resize(bytes.size() / 2);
  EXPECT_THROW(parse_queries(io::Reader(bad)), Error);
  EXPECT_THROW(qs.find(123456), Error);
}

TEST(QueryFile, TextRoundTripPreservesContent) {
  const auto& qs = small_scene().queries;
  std::stringstream text;
  write_text_queries(qs, text);
  const QuerySet back = parse_text_queries(text);
  ASSERT_EQ(back.queries.size(), qs.queries.size());
  for (std::size_t i = 0; i < qs.queries.size(); ++i) {
    const auto& a = qs.queries[i];
    const auto& b = back.queries[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.keypoints, b.keypoints);
    EXPECT_EQ(a.embedding, b.embedding);
    EXPECT_EQ(a.descriptors, b.descriptors);
    EXPECT_EQ(*a.gt_visible_ids, *b.gt_visible_ids);
    EXPECT_LT(pose_errors(*a.gt_pose, *b.gt_pose).t_err, 1e-12);
  }
  EXPECT_EQ(serialize_queries(back), serialize_queries(qs));
}

TEST(QueryFile, TextImportErrors) {
  auto kind_of = [](const std::string& body) {
    std::istringstream s("vistr-text 1\ndims 2 2\n" + body);
    try {
      parse_text_queries(s);
    } catch (const Error& e) {
      return std::optional<ErrorKind>(e.kind());
    }
    return std::optional<ErrorKind>{};
  };
  EXPECT_EQ(kind_of("kp 1 2 1 0\n"), ErrorKind::Format);
  EXPECT_EQ(kind_of("query 1 0\nkp 1 2 1 0\n"), ErrorKind::Integrity);
  EXPECT_EQ(kind_of("query 1 0\nkp 1 2 0 0\nembedding 1 0 0\n"), ErrorKind::Data);
  EXPECT_EQ(kind_of("query 1 0\nkp 1 2 1 0\nembedding 1 0 0\nembedding 2 0 0\n"), ErrorKind::Integrity);
  std::istringstream ok("vistr-text 1\ndims 2 2\nembedding 1 0.5 0.5\nquery 1 0\nkp 1 2 3 4\nkp 5 6 0 1\n");
  const QuerySet set = parse_text_queries(ok);
  ASSERT_EQ(set.queries[0].keypoints.size(), 2u);
  EXPECT_FLOAT_EQ(set.queries[0].descriptors(0, 0), 0.6f);
  EXPECT_FALSE(set.queries[0].gt_pose);
}

TEST(Metrics, RecallAtThresholdsByHand) {
  std::vector<QueryOutcome> o(4);
  o[0].success = true;
  o[0].error = {0.1, 1.0};
  o[1].success = true;
  o[1].error = {0.4, 4.0};
  o[2].success = true;
  o[2].error = {0.2, 3.0};  // translation fine, rotation too large for the first threshold
  o[3].success = false;
  const auto r = recall_at_thresholds(o, standard_thresholds());
  ASSERT_EQ(r.size(), 3u);
  EXPECT_DOUBLE_EQ(r[0], 0.25);
  EXPECT_DOUBLE_EQ(r[1], 0.75);
  EXPECT_DOUBLE_EQ(r[2], 0.75);
  try {
    recall_at_thresholds({}, standard_thresholds());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UndefinedMetric);
  }
}

TEST(Metrics, RecallIsMonotoneInThresholds) {
  std::mt19937_64 rng(3);
  std::exponential_distribution<double> ex(1.0);
  std::vector<QueryOutcome> o(200);
  for (auto& q : o) {
    q.success = ex(rng) < 2.0;
    q.error = {ex(rng), 5.0 * ex(rng)};
  }
  std::vector<RecallThreshold> th;
  for (double t = 0.1; t < 5; t *= 1.5) th.push_back({t, 10 * t});
  const auto r = recall_at_thresholds(o, th);
  for (std::size_t i = 1; i < r.size(); ++i) EXPECT_GE(r[i], r[i - 1]);
}

TEST(Metrics, FailuresCountAsInfiniteInMedians) {
  std::vector<QueryOutcome> o(3);
  for (std::size_t i = 0; i < 3; ++i) o[i].id = 3 - i;
  o[0].success = true;
  o[0].error = {1.0, 2.0};
  o[1].success = false;
  o[2].success = false;
  const EvalReport r = make_eval_report(o);
  EXPECT_TRUE(std::isinf(r.median_t));
  EXPECT_EQ(r.queries.front().id, 1u);
  EXPECT_EQ(r.successes, 1u);
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0, 10.0}), 2.5);
}

TEST(Metrics, RetrievalMetricsByHand) {
  const std::vector<std::uint64_t> sub{1, 2, 3, 4}, vis{3, 4, 5, 6, 7};
  const RetrievalMetrics m = retrieval_metrics(sub, vis, 20);
  EXPECT_DOUBLE_EQ(m.recall, 0.4);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.reduction, 0.2);
  EXPECT_THROW(retrieval_metrics(sub, {}, 20), Error);
}

TEST(Metrics, TimingTableHasFourStages) {
  std::vector<StageTimings> t(2);
  t[0] = {1000, 2000, 3000, 4000};
  t[1] = {3000, 2000, 1000, 0};
  const TimingReport r = timing_report(t);
  EXPECT_DOUBLE_EQ(r.mean.global_search_us, 2000);
  EXPECT_DOUBLE_EQ(r.total_us, 8000);
  std::ostringstream out;
  print_timing_table(out, r);
  const std::string s = out.str();
  for (const char* col : {"Global Search", "SfM K-D Tree Lookup", "Local Feature Matching", "PnP RANSAC", "Total"})
    EXPECT_NE(s.find(col), std::string::npos);
}

TEST(Storage, CheckpointConstantAndImageDatabaseLinear) {
  const SceneBundle& full = small_scene().bundle;
  SceneBundle half = full;
  half.images.resize(full.images.size() / 2);
  VaeModel<float> m(TrainConfig{}.arch(full.embedding_dim), full.norm);
  m.initialise(0);
  const StorageReport a = storage_report(m, TrainConfig{}, half);
  const StorageReport b = storage_report(m, TrainConfig{}, full);
  EXPECT_EQ(a.checkpoint_bytes, b.checkpoint_bytes);
  SceneBundle none = full;
  none.images.clear();
  const auto base = serialize_image_retrieval_database(none).size();
  const auto per_image = (b.image_retrieval_db_bytes - base) / full.images.size();
  EXPECT_EQ(b.image_retrieval_db_bytes, base + per_image * full.images.size());
  EXPECT_EQ(a.image_retrieval_db_bytes, base + per_image * half.images.size());
}

TEST(Localize, WholeMapSubmapRecoversQueryPose) {
  const auto& s = small_scene();
  const LocalizationMap map(s.bundle);
  VaeModel<float> m(testing::tiny_arch(16, 2), s.bundle.norm);
  m.initialise(0);
  RetrievalConfig rcfg;
  rcfg.samples = 20;
  rcfg.radius = 1e4;  // every map point is retrieved
  rcfg.voxel = 0;
  int localised = 0;
  for (const auto& q : s.queries.queries) {
    const LocalizeOutput out = localize(map, m, q, rcfg, MatchConfig{}, RansacConfig{});
    EXPECT_EQ(out.submap.size(), s.bundle.points.size());
    if (!out.estimate.success) continue;
    const PoseError e = pose_errors(out.estimate.pose, *q.gt_pose);
    localised += e.t_err < 0.5 && e.r_err < 1.0;
    EXPECT_GT(out.estimate.timings.total_us(), 0.0);
  }
  EXPECT_GE(localised, 9);
}

TEST(Localize, EmptySubmapIsReportedNotThrown) {
  const auto& s = small_scene();
  const LocalizationMap map(s.bundle);
  VaeModel<float> m(testing::tiny_arch(16, 2), NormTransform{1.0, Eigen::Vector3d::Constant(-1e6)});
  m.initialise(0);
  RetrievalConfig rcfg;
  rcfg.samples = 10;
  rcfg.radius = 1.0;
  const LocalizeOutput out = localize(map, m, s.queries.queries[0], rcfg, MatchConfig{}, RansacConfig{});
  EXPECT_FALSE(out.estimate.success);
  EXPECT_TRUE(out.submap.empty());
  EXPECT_NE(out.failure_reason.find("empty submap"), std::string::npos);
}

TEST(Localize, EmbeddingMismatchIsShapeError) {
  const auto& s = small_scene();
  const LocalizationMap map(s.bundle);
  VaeModel<float> m(testing::tiny_arch(15, 2), s.bundle.norm);
  m.initialise(0);
  try {
    localize(map, m, s.queries.queries[0], RetrievalConfig{}, MatchConfig{}, RansacConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
}

}  // namespace
}  // namespace vistr
