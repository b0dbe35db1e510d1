#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "vistr/errors.hpp"
#include "vistr/nn.hpp"
#include "vistr/scene.hpp"

namespace vistr {

using nn::Mat;
using nn::Vec;

inline constexpr double kLogVarClamp = 20.0;
inline const double kLog2Pi = std::log(2.0 * std::numbers::pi);

struct VaeArch {
  std::uint32_t embedding_dim = 768;
  std::uint32_t latent_dim = 4;
  std::uint32_t hidden_width = 512;
  std::uint32_t hidden_layers = 5;
  std::uint32_t lift_dim = 64;
  std::uint32_t residual_layer = 2;

  bool operator==(const VaeArch&) const = default;
};

/// Conditional VAE over 3D structure points. The encoder maps
/// (embedding, point) to a diagonal Gaussian posterior; the decoder maps
/// (embedding, latent) to a point in the normalised cube. The output noise
/// covariance is Sigma = L L^T with L lower-triangular, stored as
/// [log L00, log L11, log L22, L10, L20, L21].
template <typename S>
class VaeModel {
 public:
  VaeModel() = default;

  explicit VaeModel(const VaeArch& arch, const NormTransform& norm = {}) : arch_(arch), norm_(norm) {
    require(arch.latent_dim >= 1, ErrorKind::Shape, "latent dimension must be >= 1");
    require(arch.embedding_dim >= 1, ErrorKind::Shape, "embedding dimension must be >= 1");
    nn::MlpSpec enc{arch.embedding_dim, 3, arch.lift_dim, arch.hidden_width, arch.hidden_layers,
                    arch.residual_layer, 2 * arch.latent_dim};
    nn::MlpSpec dec{arch.embedding_dim, arch.latent_dim, arch.lift_dim, arch.hidden_width,
                    arch.hidden_layers, arch.residual_layer, 3};
    encoder_ = nn::Mlp(enc, layout_, "encoder");
    decoder_ = nn::Mlp(dec, layout_, "decoder");
    chol_ = layout_.add("chol_sigma", 6, 1);
    params_.assign(layout_.total(), S(0));
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias,
  /// decoder output bias at the cube centre, Sigma = sigma_init * I.
  void initialise(std::uint64_t seed, double sigma_init = 0.1) {
    std::mt19937_64 rng(seed);
    for (const nn::Mlp* mlp : {&encoder_, &decoder_}) {
      auto tensors = mlp->weight_tensors();
      const auto biases = mlp->bias_tensors();
      tensors.insert(tensors.end(), biases.begin(), biases.end());
      std::sort(tensors.begin(), tensors.end());
      for (auto t : tensors) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::uint32_t>(1, mlp->fan_in(layout_, t))));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : layout_.vec(std::span<S>(params_), t)) v = static_cast<S>(u(rng));
      }
    }
    layout_.vec(std::span<S>(params_), decoder_.head_bias()).setConstant(S(0.5));
    set_sigma_diagonal(sigma_init);
  }

  void set_sigma_diagonal(double variance) {
    require(variance > 0, ErrorKind::Parameter, "covariance diagonal must be positive");
    auto c = layout_.vec(std::span<S>(params_), chol_);
    c.setZero();
    c.head(3).setConstant(static_cast<S>(0.5 * std::log(variance)));
  }

  template <typename A = double>
  Eigen::Matrix<A, 3, 3> chol_factor() const {
    const auto c = layout_.vec(params(), chol_);
    Eigen::Matrix<A, 3, 3> l = Eigen::Matrix<A, 3, 3>::Zero();
    for (int i = 0; i < 3; ++i) l(i, i) = std::exp(static_cast<A>(c[i]));
    l(1, 0) = static_cast<A>(c[3]);
    l(2, 0) = static_cast<A>(c[4]);
    l(2, 1) = static_cast<A>(c[5]);
    return l;
  }

  Eigen::Matrix3d sigma() const {
    const Eigen::Matrix3d l = chol_factor();
    return l * l.transpose();
  }

  template <typename T>
  VaeModel<T> cast() const {
    VaeModel<T> out(arch_, norm_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.mutable_params()[i] = static_cast<T>(params_[i]);
    return out;
  }

  const VaeArch& arch() const { return arch_; }
  const NormTransform& norm() const { return norm_; }
  void set_norm(const NormTransform& n) { norm_ = n; }
  const nn::ParamLayout& layout() const { return layout_; }
  const nn::Mlp& encoder() const { return encoder_; }
  const nn::Mlp& decoder() const { return decoder_; }
  std::size_t chol_tensor() const { return chol_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<const S> params() const { return params_; }
  std::span<S> mutable_params() { return params_; }

  /// Parameters the retrieval stage needs at query time (decoder only).
  std::size_t decoder_parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : layout_.shapes())
      if (s.name.starts_with("decoder.")) n += s.size();
    return n;
  }

 private:
  VaeArch arch_;
  NormTransform norm_;
  nn::ParamLayout layout_;
  nn::Mlp encoder_, decoder_;
  std::size_t chol_ = 0;
  nn::AlignedVector<S> params_;
};

template <typename S>
struct LatentGaussian {
  Vec<S> mean;
  Vec<S> log_var;
};

namespace detail {

// Scalar for loss accumulation: double, or S when S is wider.
template <typename S>
using Wide = decltype(S() + 0.0);

template <typename S>
S clamp_log_var(S v) {
  return std::clamp(v, S(-kLogVarClamp), S(kLogVarClamp));
}

template <typename S>
void check_embedding(const VaeModel<S>& m, Eigen::Index rows) {
  require(rows == m.arch().embedding_dim, ErrorKind::Shape,
          "embedding dimension " + std::to_string(rows) + " does not match model (" +
              std::to_string(m.arch().embedding_dim) + ")");
}

}  // namespace detail

/// Batched encoder: columns of `embeddings` and `points` are pairs.
template <typename S>
LatentGaussian<S> encode(const VaeModel<S>& m, const Vec<S>& embedding, const Point3& y) {
  detail::check_embedding(m, embedding.size());
  nn::MlpCache<S> cache;
  Mat<S> cond = embedding;
  Mat<S> in = y.cast<S>();
  m.encoder().forward(m.layout(), m.params(), cond, in, cache);
  const auto d = m.arch().latent_dim;
  LatentGaussian<S> g;
  g.mean = cache.out.col(0).head(d);
  g.log_var = cache.out.col(0).tail(d).unaryExpr([](S v) { return detail::clamp_log_var(v); });
  return g;
}

template <typename S>
Vec<S> reparameterise(const LatentGaussian<S>& g, const Vec<S>& eps) {
  require(eps.size() == g.mean.size() && g.log_var.size() == g.mean.size(), ErrorKind::Shape,
          "latent dimension mismatch");
  return g.mean + (g.log_var.array() * S(0.5)).exp().matrix().cwiseProduct(eps);
}

template <typename S>
Point3 decode(const VaeModel<S>& m, const Vec<S>& embedding, const Vec<S>& z) {
  detail::check_embedding(m, embedding.size());
  require(z.size() == m.arch().latent_dim, ErrorKind::Shape, "latent dimension mismatch");
  nn::MlpCache<S> cache;
  Mat<S> cond = embedding;
  Mat<S> in = z;
  m.decoder().forward(m.layout(), m.params(), cond, in, cache);
  return cache.out.col(0).template cast<double>();
}

/// Decodes every column of `z` under one shared embedding. Output is in
/// normalised coordinates (3 x N).
template <typename S>
Mat<S> decode_many(const VaeModel<S>& m, const Vec<S>& embedding, const Mat<S>& z) {
  detail::check_embedding(m, embedding.size());
  return m.decoder().forward_shared(m.layout(), m.params(), embedding, z);
}

/// log N(y; y_hat, L L^T), evaluated with two triangular solves.
inline double reconstruction_loglik(const Point3& y, const Point3& y_hat, const Eigen::Matrix3d& chol) {
  for (int i = 0; i < 3; ++i)
    require(chol(i, i) > 0.0, ErrorKind::Parameter, "Cholesky diagonal must be strictly positive");
  const Eigen::Vector3d s = chol.triangularView<Eigen::Lower>().solve(y - y_hat);
  const double log_det = 2.0 * (chol.diagonal().array().log().sum());
  return -0.5 * (3.0 * kLog2Pi + log_det + s.squaredNorm());
}

/// KL(N(mean, diag(exp(log_var))) || N(0, I)).
template <typename S>
double kl_to_standard_normal(const LatentGaussian<S>& g) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < g.mean.size(); ++i) {
    const double mu = g.mean[i], lv = g.log_var[i];
    kl += std::exp(lv) + mu * mu - 1.0 - lv;
  }
  return 0.5 * kl;
}

template <typename S>
struct ElboResult {
  detail::Wide<S> loss = 0;   // recon + beta * kl
  detail::Wide<S> recon = 0;  // mean negative log-likelihood
  detail::Wide<S> kl = 0;     // mean KL
  nn::AlignedVector<S> grad;
};

/// Negative ELBO averaged over the pairs of a batch.
///
/// `embeddings` (D_e x B) and `points` (3 x B, normalised) hold the pairs;
/// `eps` (d x B*M) holds standard-normal draws with column n*M + j used for
/// Monte-Carlo sample j of pair n. Gradients cover every parameter; the
/// covariance factor only receives the reconstruction gradient.
///
/// `normaliser` divides the summed objective (defaults to B); chunked
/// callers pass the full batch size so chunk results add up.
template <typename S>
ElboResult<S> elbo_loss(const VaeModel<S>& m, const Mat<S>& embeddings, const Mat<S>& points, const Mat<S>& eps,
                        int mc_samples, double beta, bool with_grad = true, double normaliser = 0) {
  const auto b = embeddings.cols();
  const int mcs = mc_samples;
  const auto d = static_cast<Eigen::Index>(m.arch().latent_dim);
  require(b > 0, ErrorKind::Shape, "empty batch");
  require(mcs >= 1, ErrorKind::Parameter, "need at least one Monte-Carlo sample");
  require(beta >= 0.0 && beta <= 1.0, ErrorKind::Parameter, "beta must lie in [0, 1]");
  detail::check_embedding(m, embeddings.rows());
  require(points.rows() == 3 && points.cols() == b, ErrorKind::Shape, "points must be 3 x B");
  require(eps.rows() == d && eps.cols() == b * mcs, ErrorKind::Shape, "eps must be d x (B*M)");
  if (normaliser <= 0) normaliser = static_cast<double>(b);

  const auto& layout = m.layout();
  const auto p = m.params();

  nn::MlpCache<S> enc;
  m.encoder().forward(layout, p, embeddings, points, enc);
  Mat<S> mean = enc.out.topRows(d);
  Mat<S> log_var = enc.out.bottomRows(d).unaryExpr([](S v) { return detail::clamp_log_var(v); });
  Mat<S> stddev = (log_var.array() * S(0.5)).exp().matrix();

  const auto bm = b * mcs;
  Mat<S> z(d, bm), cond(embeddings.rows(), bm);
  for (Eigen::Index n = 0; n < b; ++n)
    for (int j = 0; j < mcs; ++j) {
      const auto col = n * mcs + j;
      z.col(col) = mean.col(n) + stddev.col(n).cwiseProduct(eps.col(col));
      cond.col(col) = embeddings.col(n);
    }

  nn::MlpCache<S> dec;
  m.decoder().forward(layout, p, cond, z, dec);

  using A = detail::Wide<S>;
  using A3 = Eigen::Matrix<A, 3, 1>;
  const Eigen::Matrix<A, 3, 3> l = m.template chol_factor<A>();
  const A log_det = A(2) * l.diagonal().array().log().sum();
  const A log_2pi = std::log(A(2) * std::numbers::pi_v<A>);
  const A recon_scale = A(1) / (A(normaliser) * mcs);

  ElboResult<S> r;
  Mat<S> d_yhat(3, bm);
  Eigen::Matrix<A, 3, 3> g_l = Eigen::Matrix<A, 3, 3>::Zero();
  A recon_sum = 0;
  for (Eigen::Index col = 0; col < bm; ++col) {
    const A3 resid = points.col(col / mcs).template cast<A>() - dec.out.col(col).template cast<A>();
    const A3 s = l.template triangularView<Eigen::Lower>().solve(resid);
    recon_sum += A(0.5) * (A(3) * log_2pi + log_det + s.squaredNorm());
    if (with_grad) {
      const A3 w = l.transpose().template triangularView<Eigen::Upper>().solve(s);
      d_yhat.col(col) = (-recon_scale * w).template cast<S>();
      g_l -= w * s.transpose();
    }
  }

  A kl_sum = 0;
  for (Eigen::Index n = 0; n < b; ++n)
    for (Eigen::Index i = 0; i < d; ++i) {
      const A mu = mean(i, n), lv = log_var(i, n);
      kl_sum += A(0.5) * (std::exp(lv) + mu * mu - A(1) - lv);
    }

  r.recon = recon_sum / (A(normaliser) * mcs);
  r.kl = kl_sum / A(normaliser);
  r.loss = r.recon + A(beta) * r.kl;
  if (!std::isfinite(r.recon)) fail(ErrorKind::Divergence, "non-finite reconstruction term");
  if (!std::isfinite(r.kl)) fail(ErrorKind::Divergence, "non-finite KL term");
  if (!with_grad) return r;

  r.grad.assign(layout.total(), S(0));
  std::span<S> grad(r.grad);

  // d/dL of 0.5 * (2 sum log L_ii + |L^-1 r|^2) = diag(1/L_ii) - w s^T; the
  // diagonal is stored as log L_ii.
  {
    auto gc = layout.vec(grad, m.chol_tensor());
    const A count = static_cast<A>(bm);
    for (int i = 0; i < 3; ++i) gc[i] = static_cast<S>(recon_scale * (count + g_l(i, i) * l(i, i)));
    gc[3] = static_cast<S>(recon_scale * g_l(1, 0));
    gc[4] = static_cast<S>(recon_scale * g_l(2, 0));
    gc[5] = static_cast<S>(recon_scale * g_l(2, 1));
  }

  Mat<S> dz;
  m.decoder().backward(layout, p, dec, d_yhat, grad, &dz);

  const S kl_scale = static_cast<S>(beta / normaliser);
  Mat<S> d_enc(2 * d, b);
  for (Eigen::Index n = 0; n < b; ++n)
    for (Eigen::Index i = 0; i < d; ++i) {
      S dmu = 0, dlv = 0;
      for (int j = 0; j < mcs; ++j) {
        const auto col = n * mcs + j;
        dmu += dz(i, col);
        dlv += dz(i, col) * eps(i, col);
      }
      dlv *= S(0.5) * stddev(i, n);
      dmu += kl_scale * mean(i, n);
      dlv += kl_scale * S(0.5) * (std::exp(log_var(i, n)) - S(1));
      const S raw = enc.out(d + i, n);
      if (raw < S(-kLogVarClamp) || raw > S(kLogVarClamp)) dlv = 0;
      d_enc(i, n) = dmu;
      d_enc(d + i, n) = dlv;
    }
  m.encoder().backward(layout, p, enc, d_enc, grad, static_cast<Mat<S>*>(nullptr));
  return r;
}

}  // namespace vistr
