#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "formed/tensor.hpp"

namespace formed {

namespace init {

/// Glorot-normal weight matrix.
template <typename Real>
Tensor<Real> glorot(std::size_t d_in, std::size_t d_out, Rng& rng) {
  double sd = std::sqrt(2.0 / double(d_in + d_out));
  std::vector<Real> w(d_in * d_out);
  for (auto& v : w) v = Real(sd * rng.gaussian());
  return Tensor<Real>(Shape{d_in, d_out}, std::move(w));
}

template <typename Real>
Tensor<Real> gaussian(Shape shape, double sd, Rng& rng) {
  std::vector<Real> w(shape_size(shape));
  for (auto& v : w) v = Real(sd * rng.gaussian());
  return Tensor<Real>(std::move(shape), std::move(w));
}

}  // namespace init

/// Two-layer block with a linear skip path:
///   y = swish(x W_hidden + b_hidden) W_out + b_out + x W_skip
template <typename Real>
struct ResidualBlockWeights {
  Parameter<Real> w_hidden, b_hidden, w_out, b_out, w_skip;

  static ResidualBlockWeights init(std::size_t d_in, std::size_t d_hidden,
                                   std::size_t d_out, Rng& rng) {
    ResidualBlockWeights w;
    w.w_hidden = Parameter<Real>(init::glorot<Real>(d_in, d_hidden, rng));
    w.b_hidden = Parameter<Real>(Tensor<Real>::zeros(Shape{d_hidden}));
    w.w_out = Parameter<Real>(init::glorot<Real>(d_hidden, d_out, rng));
    w.b_out = Parameter<Real>(Tensor<Real>::zeros(Shape{d_out}));
    w.w_skip = Parameter<Real>(init::glorot<Real>(d_in, d_out, rng));
    return w;
  }

  std::size_t d_in() const { return w_hidden.shape()[0]; }
  std::size_t d_out() const { return w_out.shape()[1]; }

  void validate() const {
    if (w_hidden.shape().size() != 2 || w_out.shape().size() != 2 ||
        w_skip.shape().size() != 2)
      throw ShapeError("residual block: weights must be rank-2");
    if (b_hidden.shape() != Shape{w_hidden.shape()[1]} ||
        b_out.shape() != Shape{w_out.shape()[1]} ||
        w_skip.shape()[0] != w_hidden.shape()[0] ||
        w_skip.shape()[1] != w_out.shape()[1] ||
        w_hidden.shape()[1] != w_out.shape()[0])
      throw ShapeError("residual block: inconsistent dimension chain");
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w_hidden", w_hidden);
    f(prefix + ".b_hidden", b_hidden);
    f(prefix + ".w_out", w_out);
    f(prefix + ".b_out", b_out);
    f(prefix + ".w_skip", w_skip);
  }
};

template <typename Real>
Tensor<Real> residual_block(const Tensor<Real>& x,
                            ResidualBlockWeights<Real>& w) {
  w.validate();
  if (x.rank() < 1 || x.shape().back() != w.d_in())
    throw ShapeError("residual_block: input trailing extent != " +
                     std::to_string(w.d_in()));
  Tensor<Real> hidden = swish(linear(x, w.w_hidden.use(), w.b_hidden.use()));
  Tensor<Real> main = linear(hidden, w.w_out.use(), w.b_out.use());
  Tensor<Real> skip = linear_nobias(x, w.w_skip.use());
  return add(main, skip);
}

template <typename Real>
struct LayerNormWeights {
  Parameter<Real> gain, bias;

  static LayerNormWeights init(std::size_t d) {
    LayerNormWeights w;
    w.gain = Parameter<Real>(Tensor<Real>::full(Shape{d}, Real(1)));
    w.bias = Parameter<Real>(Tensor<Real>::zeros(Shape{d}));
    return w;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, LayerNormWeights<Real>& w) {
  return layer_norm(x, w.gain.use(), w.bias.use());
}

/// Bias-free multi-head attention projections, all D x D.
template <typename Real>
struct AttentionWeights {
  Parameter<Real> wq, wk, wv, wo;
  std::size_t heads = 1;

  static AttentionWeights init(std::size_t d, std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0)
      throw ConfigError("attention: model dim " + std::to_string(d) +
                        " not divisible by " + std::to_string(heads) +
                        " heads");
    AttentionWeights w;
    w.wq = Parameter<Real>(init::glorot<Real>(d, d, rng));
    w.wk = Parameter<Real>(init::glorot<Real>(d, d, rng));
    w.wv = Parameter<Real>(init::glorot<Real>(d, d, rng));
    w.wo = Parameter<Real>(init::glorot<Real>(d, d, rng));
    w.heads = heads;
    return w;
  }

  std::size_t dim() const { return wq.shape()[0]; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
  }
};

/// Scaled dot-product attention with an explicit allowed-key matrix
/// ([n_q x n_k] row-major, nonzero = attendable). Head outputs are
/// concatenated and output-projected.
template <typename Real>
Tensor<Real> multi_head_attention_masked(
    const Tensor<Real>& q_in, const Tensor<Real>& k_in,
    const Tensor<Real>& v_in, const std::vector<std::uint8_t>& allowed,
    AttentionWeights<Real>& w) {
  std::size_t d = w.dim(), h = w.heads;
  if (d % h != 0) throw ConfigError("attention: dim not divisible by heads");
  if (q_in.rank() != 2 || k_in.rank() != 2 || v_in.rank() != 2 ||
      q_in.extent(1) != d || k_in.extent(1) != d || v_in.extent(1) != d)
    throw ShapeError("attention: inputs must be rank-2 of width " +
                     std::to_string(d));
  if (k_in.extent(0) != v_in.extent(0))
    throw ShapeError("attention: key/value row counts differ");
  std::size_t dh = d / h;
  Tensor<Real> qp = linear_nobias(q_in, w.wq.use());
  Tensor<Real> kp = linear_nobias(k_in, w.wk.use());
  Tensor<Real> vp = linear_nobias(v_in, w.wv.use());
  Real inv_sqrt = Real(1) / std::sqrt(Real(dh));
  std::vector<Tensor<Real>> ctx;
  ctx.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    Tensor<Real> qh = slice_cols(qp, i * dh, dh);
    Tensor<Real> kh = slice_cols(kp, i * dh, dh);
    Tensor<Real> vh = slice_cols(vp, i * dh, dh);
    Tensor<Real> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    ctx.push_back(masked_attend(scores, vh, allowed));
  }
  return linear_nobias(concat_cols(ctx), w.wo.use());
}

/// Cross attention with one mask bit per key (nonzero = masked out). At least
/// one key must stay attendable.
template <typename Real>
Tensor<Real> multi_head_attention(const Tensor<Real>& q_in,
                                  const Tensor<Real>& k_in,
                                  const Tensor<Real>& v_in,
                                  const std::vector<std::uint8_t>& key_mask,
                                  AttentionWeights<Real>& w) {
  std::size_t nq = q_in.rank() == 2 ? q_in.extent(0) : 0;
  std::size_t nk = k_in.rank() == 2 ? k_in.extent(0) : 0;
  if (key_mask.size() != nk)
    throw ShapeError("attention: key_mask length != key count");
  bool any = false;
  for (std::uint8_t m : key_mask) any = any || !m;
  if (!any) throw Error("no attendable keys");
  std::vector<std::uint8_t> allowed(nq * nk);
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j)
      allowed[i * nk + j] = key_mask[j] ? 0 : 1;
  return multi_head_attention_masked(q_in, k_in, v_in, allowed, w);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Non-trainable parameters
/// are skipped outright, never read, never written.
template <typename Real>
class Adam {
 public:
  Adam(std::vector<Parameter<Real>*> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i]->trainable) continue;
      m_[i].assign(params_[i]->size(), Real(0));
      v_[i].assign(params_[i]->size(), Real(0));
    }
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<Real>& p = *params_[i];
      if (!p.trainable) continue;
      auto& val = p.mutable_values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < val.size(); ++j) {
        Real g = p.grad[j];
        m[j] = Real(cfg_.beta1) * m[j] + Real(1 - cfg_.beta1) * g;
        v[j] = Real(cfg_.beta2) * v[j] + Real(1 - cfg_.beta2) * g * g;
        Real mhat = m[j] / Real(bc1);
        Real vhat = v[j] / Real(bc2);
        val[j] -= Real(cfg_.lr) * mhat / (std::sqrt(vhat) + Real(cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_)
      if (p->trainable) p->zero_grad();
  }

  std::size_t trainable_scalar_count() const {
    std::size_t n = 0;
    for (const auto* p : params_)
      if (p->trainable) n += p->size();
    return n;
  }

  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter<Real>*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<Real>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace formed
