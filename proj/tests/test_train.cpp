#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>

#include "test_support.hpp"
#include "vistr/checkpoint.hpp"
#include "vistr/synthetic.hpp"
#include "vistr/train.hpp"

namespace vistr {
namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.iterations = 150;
  c.batch_images = 4;
  c.points_per_image = 8;
  c.mc_samples = 2;
  c.hidden_width = 16;
  c.lift_dim = 8;
  c.latent_dim = 2;
  c.kl_warmup_start = 50;
  c.kl_period = 20;
  c.max_lr = 3e-3;
  c.chunk_pairs = 8;
  c.log_every = 10;
  c.seed = 5;
  return c;
}

const SceneBundle& small_scene() {
  static const SceneBundle b = [] {
    SyntheticSceneConfig s;
    s.num_points = 400;
    s.num_cameras = 40;
    s.embedding_dim = 8;
    s.descriptor_dim = 16;
    s.seed = 3;
    return generate_synthetic_scene(s).bundle;
  }();
  return b;
}

TEST(Schedule, LearningRateEndpointsAndPeak) {
  TrainConfig c;
  c.iterations = 1000;
  EXPECT_NEAR(lr_schedule(0, c), 1e-3 / 25.0, 1e-15);
  EXPECT_NEAR(lr_schedule(300, c), 1e-3, 1e-15);
  EXPECT_NEAR(lr_schedule(999, c), 1e-3 / 1e4, 1e-15);
  // Half-way through the warm-up the cosine is at the midpoint.
  EXPECT_NEAR(lr_schedule(150, c), 0.5 * (1e-3 + 1e-3 / 25.0), 1e-15);
  for (std::uint64_t i = 1; i <= 300; ++i) EXPECT_GE(lr_schedule(i, c), lr_schedule(i - 1, c));
  for (std::uint64_t i = 301; i < 1000; ++i) EXPECT_LE(lr_schedule(i, c), lr_schedule(i - 1, c));
}

TEST(Schedule, KlWeightCycle) {
  TrainConfig c;
  c.kl_warmup_start = 100;
  c.kl_period = 40;
  EXPECT_EQ(kl_weight_schedule(0, c), 0.0);
  EXPECT_EQ(kl_weight_schedule(99, c), 0.0);
  EXPECT_EQ(kl_weight_schedule(100, c), 0.0);
  EXPECT_DOUBLE_EQ(kl_weight_schedule(110, c), 0.5);
  EXPECT_EQ(kl_weight_schedule(120, c), 1.0);
  EXPECT_EQ(kl_weight_schedule(139, c), 1.0);
  EXPECT_EQ(kl_weight_schedule(140, c), 0.0);
  EXPECT_DOUBLE_EQ(kl_weight_schedule(145, c), 0.25);
  c.beta_before_warmup = 1.0;
  EXPECT_EQ(kl_weight_schedule(50, c), 1.0);
  for (std::uint64_t i = 0; i < 500; ++i) {
    const double b = kl_weight_schedule(i, c);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
  }
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  Adam<double> adam(3, 0.9, 0.999, 1e-8);
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -4.0, 1e-3};
  adam.step(p, g, 0.01);
  EXPECT_NEAR(p[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(p[1], -2.0 + 0.01, 1e-8);
  EXPECT_NEAR(p[2], 0.5 - 0.01, 1e-7);
}

TEST(Adam, MatchesScalarRecurrenceOnQuadratic) {
  Adam<double> adam(1, 0.9, 0.999, 1e-8);
  std::vector<double> p{3.0};
  double x = 3.0, m = 0, v = 0;
  for (int t = 1; t <= 200; ++t) {
    const std::vector<double> g{2.0 * p[0]};
    adam.step(p, g, 0.05);
    const double gx = 2.0 * x;
    m = 0.9 * m + 0.1 * gx;
    v = 0.999 * v + 0.001 * gx * gx;
    x -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    ASSERT_NEAR(p[0], x, 1e-12);
  }
  EXPECT_LT(std::abs(p[0]), 0.5);
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig c;
  c.kl_period = 1;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.hidden_layers = 2;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.beta_before_warmup = 0.5;
  EXPECT_THROW(c.validate(), Error);
}

TEST(TrainBatch, ShapesAndNormalisedPoints) {
  const SceneBundle& b = small_scene();
  TrainConfig c = tiny_config();
  std::mt19937_64 rng(1);
  const TrainBatch batch = sample_train_batch(b, c, rng);
  EXPECT_EQ(batch.embeddings.rows(), 8);
  EXPECT_EQ(batch.embeddings.cols(), 32);
  EXPECT_EQ(batch.eps.cols(), 64);
  EXPECT_GE(batch.points.minCoeff(), 0.0f);
  EXPECT_LE(batch.points.maxCoeff(), 1.0f);
  // Points of one image share a single augmented embedding.
  for (int i = 0; i < 4; ++i)
    for (int j = 1; j < 8; ++j) EXPECT_EQ(batch.embeddings.col(8 * i), batch.embeddings.col(8 * i + j));
}

TEST(Train, LossDecreasesOnSmallScene) {
  TrainConfig c = tiny_config();
  c.iterations = 400;
  c.kl_warmup_start = 1000;
  const TrainResult r = train(small_scene(), c);
  ASSERT_FALSE(r.diverged) << r.divergence_reason;
  ASSERT_EQ(r.loss_history.size(), 400u);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += r.loss_history[i];
    last += r.loss_history[350 + i];
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(r.log.size(), 40u);
  EXPECT_EQ(r.log.back().iter, 400u);
}

// The layout an embedding exporter writes: image records without embeddings
// plus one 768-value embedding record per image.
TEST(Train, ExporterStyleTextBundleImportsAndTrains) {
  std::mt19937_64 rng(21);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::ostringstream text;
  text.precision(9);
  text << "vistr-text 1\ndims 768 16\ncamera 0 500 500 320 240 640 480\n";
  for (int i = 0; i < 60; ++i) {
    text << "point " << i << ' ' << n(rng) * 10 << ' ' << n(rng) * 10 << ' ' << n(rng) * 10;
    for (int k = 0; k < 16; ++k) text << ' ' << n(rng);
    text << '\n';
  }
  for (int j = 0; j < 5; ++j) {
    text << "image " << 100 + j << " 0 1 0 0 0 " << j << " 0 0 12";
    for (int v = 0; v < 12; ++v) text << ' ' << (j * 11 + v) % 60;
    text << '\n';
  }
  for (int j = 0; j < 5; ++j) {
    text << "embedding " << 100 + j;
    for (int k = 0; k < 768; ++k) text << ' ' << n(rng);
    text << '\n';
  }
  std::istringstream in(text.str());
  const SceneBundle b = parse_text_bundle(in);
  ASSERT_EQ(b.images.size(), 5u);
  EXPECT_EQ(b.images[4].embedding.size(), 768);

  TrainConfig c = tiny_config();
  c.iterations = 100;
  const TrainResult r = train(b, c);
  EXPECT_FALSE(r.diverged);
  EXPECT_EQ(r.loss_history.size(), 100u);
  EXPECT_EQ(r.model.arch().embedding_dim, 768u);
}

TEST(Train, BitReproducibleUnderSeed) {
  const TrainConfig c = tiny_config();
  const TrainResult a = train(small_scene(), c);
  const TrainResult b = train(small_scene(), c);
  EXPECT_EQ(serialize_model(a.model, c), serialize_model(b.model, c));
  EXPECT_EQ(a.loss_history, b.loss_history);
}

TEST(Train, ThreadCountDoesNotChangeResult) {
  TrainConfig c = tiny_config();
  c.iterations = 40;
  const TrainResult a = train(small_scene(), c);
  c.threads = 3;
  const TrainResult b = train(small_scene(), c);
  EXPECT_TRUE(std::equal(a.model.params().begin(), a.model.params().end(), b.model.params().begin()));
}

TEST(Train, NonFiniteLossStopsWithFiniteParameters) {
  SceneBundle b = small_scene();
  b.images[0].embedding.setConstant(3e38f);
  for (auto& img : b.images) img.embedding[0] = 3e38f;
  TrainConfig c = tiny_config();
  c.embedding_noise_var = 0;
  const TrainResult r = train(b, c);
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.divergence_reason.empty());
  for (float v : r.model.params()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  TrainConfig c = tiny_config();
  c.iterations = 20;
  const TrainResult r = train(small_scene(), c);
  const auto bytes = serialize_model(r.model, c);
  const Checkpoint ck = parse_model(io::Reader(bytes));
  EXPECT_EQ(ck.model.arch(), r.model.arch());
  EXPECT_TRUE(std::equal(ck.model.params().begin(), ck.model.params().end(), r.model.params().begin()));
  EXPECT_EQ(ck.model.norm(), small_scene().norm);
  EXPECT_EQ(ck.config.iterations, 20u);
  EXPECT_EQ(ck.config.seed, c.seed);
  EXPECT_EQ(serialize_model(ck.model, ck.config), bytes);

  const Vec<float> e = small_scene().images[3].embedding;
  Mat<float> z(2, 5);
  z.setRandom();
  EXPECT_EQ(decode_many(ck.model, e, z), decode_many(r.model, e, z));
}

TEST(Checkpoint, EmbeddingDimensionMismatchIsShapeError) {
  VaeModel<float> m(testing::tiny_arch(8, 2));
  m.initialise(0);
  const auto path = (std::filesystem::temp_directory_path() / "vistr_test_dim.vstm").string();
  save_model(m, tiny_config(), path);
  EXPECT_NO_THROW(load_model(path, 8));
  try {
    load_model(path, 9);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  VaeModel<float> m(testing::tiny_arch(8, 2));
  m.initialise(0);
  const auto good = serialize_model(m, tiny_config());
  auto truncated = good;
  truncated.resize(good.size() - 3);
  auto trailing = good;
  trailing.push_back(0);
  auto magic = good;
  magic[1] = 'X';
  for (const auto* blob : {&truncated, &trailing, &magic}) {
    try {
      parse_model(io::Reader(*blob));
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Format);
    }
  }
}

TEST(Checkpoint, MissingFileIsFileError) {
  try {
    load_model("/nonexistent/vistr/model.vstm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::File);
  }
}

TEST(Checkpoint, SizeFollowsParameterCount) {
  const VaeArch arch{768, 4, 512, 5, 64, 2};
  VaeModel<float> m(arch);
  const auto bytes = serialize_model(m, TrainConfig{});
  EXPECT_GT(bytes.size(), m.parameter_count() * sizeof(float));
  EXPECT_LT(bytes.size(), m.parameter_count() * sizeof(float) + 4096);
}

}  // namespace
}  // namespace vistr
