#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <random>
#include <vector>

#include "vistr/errors.hpp"
#include "vistr/scene.hpp"
#include "vistr/vae.hpp"

#ifdef VISTR_HAVE_OPENMP
#include <omp.h>
#endif

namespace vistr {

struct TrainConfig {
  std::uint64_t iterations = 100000;
  std::uint32_t batch_images = 128;
  std::uint32_t points_per_image = 50;
  std::uint32_t mc_samples = 50;
  double max_lr = 1e-3;
  double warmup_fraction = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::uint32_t latent_dim = 4;
  std::uint32_t hidden_width = 512;
  std::uint32_t hidden_layers = 5;
  std::uint32_t lift_dim = 64;

  std::uint64_t kl_warmup_start = 20000;
  std::uint64_t kl_period = 2000;
  double beta_before_warmup = 0.0;

  double embedding_noise_var = 1.0;
  double sigma_init = 0.1;
  std::uint64_t seed = 0;

  // Pairs per gradient chunk. Chunking is fixed by this value alone, so the
  // summation order (and result) does not depend on the thread count.
  std::uint32_t chunk_pairs = 512;
  std::uint32_t threads = 1;
  std::uint32_t log_every = 100;

  void validate() const {
    require(iterations > 0 && batch_images > 0 && points_per_image > 0 && mc_samples >= 1, ErrorKind::Config,
            "iteration and batch counts must be positive");
    require(max_lr > 0 && warmup_fraction > 0 && warmup_fraction < 1 && div_factor > 0 && final_div_factor > 0,
            ErrorKind::Config, "invalid learning-rate schedule");
    require(latent_dim >= 1 && hidden_width >= 1 && hidden_layers >= 3 && lift_dim >= 1, ErrorKind::Config,
            "invalid architecture (need >= 3 hidden layers for the residual input)");
    require(kl_period >= 2, ErrorKind::Config, "KL period must be >= 2");
    require(beta_before_warmup == 0.0 || beta_before_warmup == 1.0, ErrorKind::Config,
            "beta_before_warmup must be 0 or 1");
    require(embedding_noise_var >= 0 && sigma_init > 0 && chunk_pairs > 0 && threads > 0 && log_every > 0,
            ErrorKind::Config, "invalid training option");
  }

  VaeArch arch(std::uint32_t embedding_dim) const {
    return {embedding_dim, latent_dim, hidden_width, hidden_layers, lift_dim, 2};
  }
};

/// Cyclical KL weight: constant `beta_before_warmup` until the warm-up
/// start, then in each period a linear 0 -> 1 ramp over the first half and
/// a hold at 1 over the second half.
inline double kl_weight_schedule(std::uint64_t iter, const TrainConfig& cfg) {
  if (iter < cfg.kl_warmup_start) return cfg.beta_before_warmup;
  const std::uint64_t phase = (iter - cfg.kl_warmup_start) % cfg.kl_period;
  const double half = static_cast<double>(cfg.kl_period) / 2.0;
  return std::min(1.0, static_cast<double>(phase) / half);
}

/// Cosine one-cycle: max_lr/div_factor -> max_lr over the warm-up fraction,
/// then max_lr -> max_lr/final_div_factor.
inline double lr_schedule(std::uint64_t iter, const TrainConfig& cfg) {
  const double start = cfg.max_lr / cfg.div_factor;
  const double end = cfg.max_lr / cfg.final_div_factor;
  const double peak = std::floor(cfg.warmup_fraction * static_cast<double>(cfg.iterations));
  const double i = static_cast<double>(iter);
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (i <= peak) return peak > 0 ? cosine(start, cfg.max_lr, i / peak) : cfg.max_lr;
  const double rest = static_cast<double>(cfg.iterations - 1) - peak;
  return rest > 0 ? cosine(cfg.max_lr, end, std::min(1.0, (i - peak) / rest)) : cfg.max_lr;
}

template <typename S>
class Adam {
 public:
  Adam(std::size_t n, double beta1, double beta2, double eps)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<S> params, std::span<const S> grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      m_[i] = static_cast<S>(beta1_ * m_[i] + (1.0 - beta1_) * g);
      v_[i] = static_cast<S>(beta2_ * v_[i] + (1.0 - beta2_) * g * g);
      const double mh = m_[i] / c1, vh = v_[i] / c2;
      params[i] = static_cast<S>(params[i] - lr * mh / (std::sqrt(vh) + eps_));
    }
  }

 private:
  std::vector<S> m_, v_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

struct TrainLogRecord {
  std::uint64_t iter = 0;
  double loss = 0, recon = 0, kl = 0, beta = 0, lr = 0;
};

inline void write_train_log(std::ostream& out, const std::vector<TrainLogRecord>& log) {
  out << "# iter, loss, recon, kl, beta, lr\n";
  out.precision(9);
  for (const auto& r : log)
    out << r.iter << ", " << r.loss << ", " << r.recon << ", " << r.kl << ", " << r.beta << ", " << r.lr << '\n';
}

struct TrainResult {
  VaeModel<float> model;
  std::vector<TrainLogRecord> log;
  std::vector<float> loss_history;  // one entry per completed iteration
  bool diverged = false;
  std::string divergence_reason;
};

struct TrainBatch {
  Mat<float> embeddings;
  Mat<float> points;
  Mat<float> eps;
};

/// Draws one step's batch: images uniformly with replacement, then
/// points_per_image visible points per image (without replacement when the
/// image sees enough points). Each image's embedding gets one Gaussian
/// augmentation draw shared by its points.
inline TrainBatch sample_train_batch(const SceneBundle& bundle, const TrainConfig& cfg, std::mt19937_64& rng) {
  const auto n_pairs = static_cast<Eigen::Index>(cfg.batch_images) * cfg.points_per_image;
  TrainBatch b;
  b.embeddings.resize(bundle.embedding_dim, n_pairs);
  b.points.resize(3, n_pairs);
  b.eps.resize(cfg.latent_dim, n_pairs * cfg.mc_samples);
  std::uniform_int_distribution<std::size_t> pick_image(0, bundle.images.size() - 1);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float noise_sd = static_cast<float>(std::sqrt(cfg.embedding_noise_var));
  std::vector<std::uint32_t> chosen;
  Eigen::Index col = 0;
  for (std::uint32_t i = 0; i < cfg.batch_images; ++i) {
    const std::size_t img = pick_image(rng);
    const auto& vis = bundle.visible_indices(img);
    chosen.clear();
    if (vis.size() >= cfg.points_per_image) {
      std::sample(vis.begin(), vis.end(), std::back_inserter(chosen), cfg.points_per_image, rng);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, vis.size() - 1);
      for (std::uint32_t k = 0; k < cfg.points_per_image; ++k) chosen.push_back(vis[pick(rng)]);
    }
    Vec<float> e = bundle.images[img].embedding;
    if (noise_sd > 0)
      for (auto& v : e) v += noise_sd * normal(rng);
    for (auto pi : chosen) {
      b.embeddings.col(col) = e;
      b.points.col(col) = apply_norm(bundle.norm, bundle.points[pi].position).cast<float>();
      ++col;
    }
  }
  for (auto& v : b.eps.reshaped()) v = normal(rng);
  return b;
}

/// Objective and gradient over fixed-size chunks, reduced in chunk order.
inline ElboResult<float> chunked_elbo(const VaeModel<float>& model, const TrainBatch& batch, const TrainConfig& cfg,
                                      double beta) {
  const auto n = batch.embeddings.cols();
  const auto chunk = static_cast<Eigen::Index>(cfg.chunk_pairs);
  const auto n_chunks = (n + chunk - 1) / chunk;
  const int m = static_cast<int>(cfg.mc_samples);
  std::vector<ElboResult<float>> parts(n_chunks);
  std::vector<std::string> errors(n_chunks);
#ifdef VISTR_HAVE_OPENMP
#pragma omp parallel for schedule(static) num_threads(static_cast<int>(cfg.threads)) if (cfg.threads > 1)
#endif
  for (Eigen::Index c = 0; c < n_chunks; ++c) {
    const auto lo = c * chunk;
    const auto len = std::min(chunk, n - lo);
    try {
      parts[c] = elbo_loss<float>(model, batch.embeddings.middleCols(lo, len), batch.points.middleCols(lo, len),
                                  batch.eps.middleCols(lo * m, len * m), m, beta, true, static_cast<double>(n));
    } catch (const Error& e) {
      errors[c] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) fail(ErrorKind::Divergence, e);
  ElboResult<float> total = std::move(parts[0]);
  for (Eigen::Index c = 1; c < n_chunks; ++c) {
    total.loss += parts[c].loss;
    total.recon += parts[c].recon;
    total.kl += parts[c].kl;
    for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad[i] += parts[c].grad[i];
  }
  return total;
}

using TrainProgress = std::function<void(const TrainLogRecord&)>;

/// Trains a scene model from scratch. Deterministic for a given seed and
/// chunk size. On a non-finite loss training stops and the result holds
/// the parameters from the last logged iteration.
inline TrainResult train(const SceneBundle& bundle, const TrainConfig& cfg, const TrainProgress& progress = {}) {
  cfg.validate();
  require(!bundle.images.empty(), ErrorKind::Integrity, "bundle has no mapping images");
  TrainResult result;
  result.model = VaeModel<float>(cfg.arch(bundle.embedding_dim), bundle.norm);
  auto& model = result.model;
  model.initialise(cfg.seed, cfg.sigma_init);

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Adam<float> adam(model.parameter_count(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  nn::AlignedVector<float> last_good(model.params().begin(), model.params().end());
  result.loss_history.reserve(cfg.iterations);

  TrainLogRecord window;
  std::uint64_t window_count = 0;
  for (std::uint64_t it = 0; it < cfg.iterations; ++it) {
    const double beta = kl_weight_schedule(it, cfg);
    const double lr = lr_schedule(it, cfg);
    const TrainBatch batch = sample_train_batch(bundle, cfg, rng);
    ElboResult<float> r;
    try {
      r = chunked_elbo(model, batch, cfg, beta);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Divergence) throw;
      result.diverged = true;
      result.divergence_reason = "iteration " + std::to_string(it) + ": " + e.what();
      std::copy(last_good.begin(), last_good.end(), model.mutable_params().begin());
      return result;
    }
    adam.step(model.mutable_params(), r.grad, lr);
    result.loss_history.push_back(static_cast<float>(r.loss));

    window.loss += r.loss;
    window.recon += r.recon;
    window.kl += r.kl;
    ++window_count;
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      const double inv = 1.0 / static_cast<double>(window_count);
      TrainLogRecord rec{it + 1, window.loss * inv, window.recon * inv, window.kl * inv, beta, lr};
      result.log.push_back(rec);
      if (progress) progress(rec);
      window = {};
      window_count = 0;
      bool finite = true;
      for (float v : model.params()) finite = finite && std::isfinite(v);
      if (finite) std::copy(model.params().begin(), model.params().end(), last_good.begin());
    }
  }
  return result;
}

}  // namespace vistr
