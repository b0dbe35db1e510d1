#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vistr/errors.hpp"

namespace vistr::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Flat parameter and gradient storage. A fixed base alignment keeps Eigen's
// vectorised loops on the same code path every run, so reductions are
// bit-reproducible.
template <typename S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

inline constexpr double kLeakySlope = 0.01;

struct TensorShape {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;

  std::size_t size() const { return std::size_t{rows} * cols; }
  bool operator==(const TensorShape&) const = default;
};

/// Ordered table of named tensors packed into one flat parameter vector.
/// The order is also the on-disk order of checkpoints.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::uint32_t rows, std::uint32_t cols) {
    offsets_.push_back(total_);
    total_ += std::size_t{rows} * cols;
    shapes_.push_back({std::move(name), rows, cols});
    return shapes_.size() - 1;
  }

  const std::vector<TensorShape>& shapes() const { return shapes_; }
  std::size_t offset(std::size_t t) const { return offsets_[t]; }
  std::size_t total() const { return total_; }

  template <typename S>
  Eigen::Map<const Mat<S>> view(std::span<const S> p, std::size_t t) const {
    return {p.data() + offsets_[t], shapes_[t].rows, shapes_[t].cols};
  }
  template <typename S>
  Eigen::Map<Mat<S>> view(std::span<S> p, std::size_t t) const {
    return {p.data() + offsets_[t], shapes_[t].rows, shapes_[t].cols};
  }
  template <typename S>
  Eigen::Map<const Vec<S>> vec(std::span<const S> p, std::size_t t) const {
    return {p.data() + offsets_[t], static_cast<Eigen::Index>(shapes_[t].size())};
  }
  template <typename S>
  Eigen::Map<Vec<S>> vec(std::span<S> p, std::size_t t) const {
    return {p.data() + offsets_[t], static_cast<Eigen::Index>(shapes_[t].size())};
  }

 private:
  std::vector<TensorShape> shapes_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

struct MlpSpec {
  std::uint32_t cond_dim = 0;   // conditioning vector (image embedding)
  std::uint32_t in_dim = 0;     // lifted input (point or latent)
  std::uint32_t lift_dim = 64;
  std::uint32_t width = 512;
  std::uint32_t layers = 5;
  std::uint32_t residual_layer = 2;  // hidden layer receiving the input skip
  std::uint32_t out_dim = 0;

  std::uint32_t concat_dim() const { return cond_dim + lift_dim; }
};

template <typename S>
struct MlpCache {
  Mat<S> input;
  Mat<S> x;  // [cond ; lift(input)]
  std::vector<Mat<S>> pre;
  std::vector<Mat<S>> act;
  Mat<S> out;
};

template <typename Derived>
auto leaky(const Eigen::MatrixBase<Derived>& m) {
  using S = typename Derived::Scalar;
  return m.unaryExpr([](S v) { return v > S(0) ? v : S(kLeakySlope) * v; });
}

template <typename Derived>
auto leaky_grad(const Eigen::MatrixBase<Derived>& pre) {
  using S = typename Derived::Scalar;
  return pre.unaryExpr([](S v) { return v > S(0) ? S(1) : S(kLeakySlope); });
}

/// Conditioned MLP:
///   x    = [cond ; W_lift * input + b_lift]
///   h_k  = LeakyReLU(W_k h_{k-1} + b_k  [+ P x  when k == residual_layer])
///   out  = W_out h_last + b_out
/// with h_{-1} = x. Parameters live in an external flat vector.
class Mlp {
 public:
  Mlp() = default;

  Mlp(const MlpSpec& spec, ParamLayout& layout, const std::string& prefix) : spec_(spec) {
    require(spec.layers >= 1 && spec.width >= 1 && spec.lift_dim >= 1, ErrorKind::Shape, "empty MLP");
    require(spec.residual_layer < spec.layers, ErrorKind::Shape, "residual layer out of range");
    lift_w_ = layout.add(prefix + ".lift.weight", spec.lift_dim, spec.in_dim);
    lift_b_ = layout.add(prefix + ".lift.bias", spec.lift_dim, 1);
    std::uint32_t prev = spec.concat_dim();
    for (std::uint32_t k = 0; k < spec.layers; ++k) {
      hidden_w_.push_back(layout.add(prefix + ".layer" + std::to_string(k) + ".weight", spec.width, prev));
      hidden_b_.push_back(layout.add(prefix + ".layer" + std::to_string(k) + ".bias", spec.width, 1));
      prev = spec.width;
    }
    residual_w_ = layout.add(prefix + ".residual.weight", spec.width, spec.concat_dim());
    head_w_ = layout.add(prefix + ".head.weight", spec.out_dim, spec.width);
    head_b_ = layout.add(prefix + ".head.bias", spec.out_dim, 1);
  }

  const MlpSpec& spec() const { return spec_; }
  std::size_t head_bias() const { return head_b_; }
  std::size_t head_weight() const { return head_w_; }

  std::vector<std::size_t> weight_tensors() const {
    std::vector<std::size_t> t{lift_w_, residual_w_, head_w_};
    t.insert(t.end(), hidden_w_.begin(), hidden_w_.end());
    return t;
  }
  std::vector<std::size_t> bias_tensors() const {
    std::vector<std::size_t> t{lift_b_, head_b_};
    t.insert(t.end(), hidden_b_.begin(), hidden_b_.end());
    return t;
  }
  // Fan-in used for initialisation of tensor t.
  std::uint32_t fan_in(const ParamLayout& layout, std::size_t t) const {
    if (t == lift_b_) return spec_.in_dim;
    if (t == head_b_) return spec_.width;
    for (std::uint32_t k = 0; k < spec_.layers; ++k)
      if (t == hidden_b_[k]) return k == 0 ? spec_.concat_dim() : spec_.width;
    return layout.shapes()[t].cols;
  }

  template <typename S>
  void forward(const ParamLayout& layout, std::span<const S> p, const Mat<S>& cond, const Mat<S>& input,
               MlpCache<S>& c) const {
    check_inputs(cond.rows(), input.rows(), cond.cols(), input.cols());
    const auto n = input.cols();
    c.input = input;
    c.x.resize(spec_.concat_dim(), n);
    c.x.topRows(spec_.cond_dim) = cond;
    c.x.bottomRows(spec_.lift_dim).noalias() = layout.view(p, lift_w_) * input;
    c.x.bottomRows(spec_.lift_dim).colwise() += layout.vec(p, lift_b_);
    c.pre.resize(spec_.layers);
    c.act.resize(spec_.layers);
    for (std::uint32_t k = 0; k < spec_.layers; ++k) {
      const Mat<S>& prev = k == 0 ? c.x : c.act[k - 1];
      c.pre[k].noalias() = layout.view(p, hidden_w_[k]) * prev;
      if (k == spec_.residual_layer) c.pre[k].noalias() += layout.view(p, residual_w_) * c.x;
      c.pre[k].colwise() += layout.vec(p, hidden_b_[k]);
      c.act[k] = leaky(c.pre[k]);
    }
    c.out.noalias() = layout.view(p, head_w_) * c.act.back();
    c.out.colwise() += layout.vec(p, head_b_);
  }

  /// Accumulates parameter gradients into `grad`; writes d(loss)/d(input)
  /// when `d_input` is non-null.
  template <typename S>
  void backward(const ParamLayout& layout, std::span<const S> p, const MlpCache<S>& c, const Mat<S>& d_out,
                std::span<S> grad, Mat<S>* d_input) const {
    layout.view(grad, head_w_).noalias() += d_out * c.act.back().transpose();
    layout.vec(grad, head_b_) += d_out.rowwise().sum();
    Mat<S> dh = layout.view(p, head_w_).transpose() * d_out;
    Mat<S> dx = Mat<S>::Zero(spec_.concat_dim(), d_out.cols());
    for (std::uint32_t kk = spec_.layers; kk-- > 0;) {
      Mat<S> dpre = dh.cwiseProduct(leaky_grad(c.pre[kk]));
      const Mat<S>& prev = kk == 0 ? c.x : c.act[kk - 1];
      layout.view(grad, hidden_w_[kk]).noalias() += dpre * prev.transpose();
      layout.vec(grad, hidden_b_[kk]) += dpre.rowwise().sum();
      if (kk == spec_.residual_layer) {
        layout.view(grad, residual_w_).noalias() += dpre * c.x.transpose();
        dx.noalias() += layout.view(p, residual_w_).transpose() * dpre;
      }
      if (kk == 0)
        dx.noalias() += layout.view(p, hidden_w_[0]).transpose() * dpre;
      else
        dh.noalias() = layout.view(p, hidden_w_[kk]).transpose() * dpre;
    }
    const auto dlift = dx.bottomRows(spec_.lift_dim);
    layout.view(grad, lift_w_).noalias() += dlift * c.input.transpose();
    layout.vec(grad, lift_b_) += dlift.rowwise().sum();
    if (d_input) d_input->noalias() = layout.view(p, lift_w_).transpose() * dlift;
  }

  /// Inference with one conditioning vector shared by every input column;
  /// the conditioning contributions to the first and residual layers are
  /// computed once.
  template <typename S>
  Mat<S> forward_shared(const ParamLayout& layout, std::span<const S> p, const Vec<S>& cond,
                        const Mat<S>& input) const {
    check_inputs(cond.size(), input.rows(), 1, 1);
    const auto cd = spec_.cond_dim;
    const auto ld = spec_.lift_dim;
    Mat<S> lift = layout.view(p, lift_w_) * input;
    lift.colwise() += layout.vec(p, lift_b_);
    const auto w0 = layout.view(p, hidden_w_[0]);
    const auto res = layout.view(p, residual_w_);
    Vec<S> first_bias = w0.leftCols(cd) * cond + layout.vec(p, hidden_b_[0]);
    Vec<S> res_bias = res.leftCols(cd) * cond;
    Mat<S> h;
    for (std::uint32_t k = 0; k < spec_.layers; ++k) {
      Mat<S> pre;
      if (k == 0) {
        pre.noalias() = w0.rightCols(ld) * lift;
        pre.colwise() += first_bias;
      } else {
        pre.noalias() = layout.view(p, hidden_w_[k]) * h;
        pre.colwise() += layout.vec(p, hidden_b_[k]);
      }
      if (k == spec_.residual_layer) {
        pre.noalias() += res.rightCols(ld) * lift;
        pre.colwise() += res_bias;
      }
      h = leaky(pre);
    }
    Mat<S> out = layout.view(p, head_w_) * h;
    out.colwise() += layout.vec(p, head_b_);
    return out;
  }

 private:
  void check_inputs(Eigen::Index cond_rows, Eigen::Index in_rows, Eigen::Index cond_cols,
                    Eigen::Index in_cols) const {
    require(cond_rows == spec_.cond_dim, ErrorKind::Shape,
            "conditioning dimension " + std::to_string(cond_rows) + " != " + std::to_string(spec_.cond_dim));
    require(in_rows == spec_.in_dim, ErrorKind::Shape,
            "input dimension " + std::to_string(in_rows) + " != " + std::to_string(spec_.in_dim));
    require(cond_cols == in_cols, ErrorKind::Shape, "batch size mismatch");
  }

  MlpSpec spec_;
  std::size_t lift_w_ = 0, lift_b_ = 0;
  std::vector<std::size_t> hidden_w_, hidden_b_;
  std::size_t residual_w_ = 0, head_w_ = 0, head_b_ = 0;
};

}  // namespace vistr::nn
