#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "formed/nn.hpp"

namespace formed {

struct BackboneConfig {
  std::size_t patch_size = 32;
  std::size_t model_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t max_patches = 16;
  std::size_t horizon = 32;

  void validate() const {
    if (patch_size == 0 || model_dim == 0 || layers == 0 || heads == 0 ||
        max_patches == 0 || horizon == 0)
      throw ConfigError("backbone config: all fields must be positive");
    if (model_dim % heads != 0)
      throw ConfigError("backbone config: model_dim " +
                        std::to_string(model_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
};

/// One univariate series chopped into non-overlapping patches. Values at
/// masked positions (missing or right-padding) are zeroed; the mask carries
/// the information instead.
template <typename Real>
struct PatchedSeries {
  Tensor<Real> values;                    // L x P
  std::vector<std::uint8_t> mask;         // L x P, 1 = padded/missing
  std::vector<std::uint8_t> patch_padded; // L, 1 = fully padded patch

  std::size_t patches() const { return values.extent(0); }
  std::size_t patch_size() const { return values.extent(1); }
};

/// Patch-level mask reduction: a patch is masked out only when every position
/// in it is, i.e. the row minimum of the position mask.
inline std::vector<std::uint8_t> reduce_patch_mask(
    const std::vector<std::uint8_t>& mask, std::size_t patches,
    std::size_t patch_size) {
  if (mask.size() != patches * patch_size)
    throw ShapeError("reduce_patch_mask: mask size mismatch");
  std::vector<std::uint8_t> reduced(patches, 1);
  for (std::size_t i = 0; i < patches; ++i) {
    std::uint8_t mn = 1;
    for (std::size_t j = 0; j < patch_size; ++j)
      mn = std::min(mn, mask[i * patch_size + j]);
    reduced[i] = mn;
  }
  return reduced;
}

template <typename Real>
PatchedSeries<Real> patchify(const std::vector<Real>& x,
                             const std::vector<std::uint8_t>& m,
                             std::size_t patch_size) {
  if (x.empty()) throw DataError("patchify: empty series");
  if (patch_size == 0) throw ConfigError("patchify: patch size must be >= 1");
  if (m.size() != x.size())
    throw ShapeError("patchify: mask length != series length");
  std::size_t t = x.size();
  std::size_t patches = (t + patch_size - 1) / patch_size;
  std::vector<Real> values(patches * patch_size, Real(0));
  std::vector<std::uint8_t> mask(patches * patch_size, 1);
  for (std::size_t i = 0; i < t; ++i) {
    mask[i] = m[i];
    if (!m[i]) values[i] = x[i];
  }
  PatchedSeries<Real> ps;
  ps.values = Tensor<Real>(Shape{patches, patch_size}, std::move(values));
  ps.mask = std::move(mask);
  ps.patch_padded = reduce_patch_mask(ps.mask, patches, patch_size);
  return ps;
}

/// Fixed sinusoidal positional encoding for position i.
template <typename Real>
std::vector<Real> positional_encoding(std::size_t position, std::size_t dim) {
  std::vector<Real> pe(dim);
  for (std::size_t j = 0; 2 * j < dim; ++j) {
    double angle =
        double(position) / std::pow(10000.0, double(2 * j) / double(dim));
    pe[2 * j] = Real(std::sin(angle));
    if (2 * j + 1 < dim) pe[2 * j + 1] = Real(std::cos(angle));
  }
  return pe;
}

template <typename Real>
Tensor<Real> positional_encoding_table(std::size_t patches, std::size_t dim) {
  std::vector<Real> table(patches * dim);
  for (std::size_t i = 0; i < patches; ++i) {
    auto pe = positional_encoding<Real>(i, dim);
    std::copy(pe.begin(), pe.end(), table.begin() + long(i * dim));
  }
  return Tensor<Real>(Shape{patches, dim}, std::move(table));
}

template <typename Real>
struct EncoderLayerWeights {
  LayerNormWeights<Real> ln1, ln2;
  AttentionWeights<Real> attn;
  Parameter<Real> w_ff1, b_ff1, w_ff2, b_ff2;  // D -> 4D -> D

  static EncoderLayerWeights init(std::size_t d, std::size_t heads, Rng& rng) {
    EncoderLayerWeights w;
    w.ln1 = LayerNormWeights<Real>::init(d);
    w.ln2 = LayerNormWeights<Real>::init(d);
    w.attn = AttentionWeights<Real>::init(d, heads, rng);
    w.w_ff1 = Parameter<Real>(init::glorot<Real>(d, 4 * d, rng));
    w.b_ff1 = Parameter<Real>(Tensor<Real>::zeros(Shape{4 * d}));
    w.w_ff2 = Parameter<Real>(init::glorot<Real>(4 * d, d, rng));
    w.b_ff2 = Parameter<Real>(Tensor<Real>::zeros(Shape{d}));
    return w;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    ln1.visit(prefix + ".ln1", f);
    attn.visit(prefix + ".attn", f);
    ln2.visit(prefix + ".ln2", f);
    f(prefix + ".w_ff1", w_ff1);
    f(prefix + ".b_ff1", b_ff1);
    f(prefix + ".w_ff2", w_ff2);
    f(prefix + ".b_ff2", b_ff2);
  }
};

template <typename Real>
struct BackboneWeights {
  BackboneConfig config;
  ResidualBlockWeights<Real> input_block;    // 2P -> D
  std::vector<EncoderLayerWeights<Real>> layers;
  ResidualBlockWeights<Real> forecast_block; // D -> N

  static BackboneWeights init(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "backbone-init"));
    BackboneWeights w;
    w.config = cfg;
    w.input_block = ResidualBlockWeights<Real>::init(
        2 * cfg.patch_size, cfg.model_dim, cfg.model_dim, rng);
    for (std::size_t i = 0; i < cfg.layers; ++i)
      w.layers.push_back(
          EncoderLayerWeights<Real>::init(cfg.model_dim, cfg.heads, rng));
    w.forecast_block = ResidualBlockWeights<Real>::init(
        cfg.model_dim, cfg.model_dim, cfg.horizon, rng);
    return w;
  }

  void set_trainable(bool on) {
    visit([on](const std::string&, Parameter<Real>& p) { p.trainable = on; });
  }

  template <typename F>
  void visit(F&& f) {
    input_block.visit("backbone.input_block", f);
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].visit("backbone.layer" + std::to_string(i), f);
    forecast_block.visit("backbone.forecast_block", f);
  }
};

/// Patch tokens: each patch row (values then mask bits, 2P wide) through the
/// input residual block.
template <typename Real>
Tensor<Real> embed_patches(const PatchedSeries<Real>& ps,
                           ResidualBlockWeights<Real>& input_block) {
  std::size_t patches = ps.patches(), p = ps.patch_size();
  if (input_block.d_in() != 2 * p)
    throw ShapeError("embed_patches: input block expects dim " +
                     std::to_string(input_block.d_in()) + ", patches give " +
                     std::to_string(2 * p));
  std::vector<Real> rows(patches * 2 * p);
  const auto& vv = ps.values.values();
  for (std::size_t i = 0; i < patches; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      rows[i * 2 * p + j] = vv[i * p + j];
      rows[i * 2 * p + p + j] = Real(ps.mask[i * p + j]);
    }
  }
  Tensor<Real> x(Shape{patches, 2 * p}, std::move(rows));
  return residual_block(x, input_block);
}

template <typename Real>
Tensor<Real> add_positions(const Tensor<Real>& z, std::size_t max_patches) {
  if (z.rank() != 2) throw ShapeError("add_positions: expects rank-2 tokens");
  std::size_t patches = z.extent(0), d = z.extent(1);
  if (patches > max_patches)
    throw ShapeError("add_positions: " + std::to_string(patches) +
                     " patches exceed max_patches " +
                     std::to_string(max_patches));
  return add(z, positional_encoding_table<Real>(patches, d));
}

/// Stacked pre-norm transformer with causal attention. Position i may attend
/// to positions j <= i whose patch is not fully padded.
template <typename Real>
Tensor<Real> encode(const Tensor<Real>& z,
                    const std::vector<std::uint8_t>& patch_padded,
                    std::vector<EncoderLayerWeights<Real>>& layers) {
  if (z.rank() != 2) throw ShapeError("encode: expects rank-2 tokens");
  std::size_t patches = z.extent(0);
  if (patch_padded.size() != patches)
    throw ShapeError("encode: patch mask length mismatch");
  if (patch_padded.empty()) throw DataError("encode: no patches");
  if (patch_padded[0])
    throw DataError("encode: first patch is fully padded, nothing to attend");
  std::vector<std::uint8_t> allowed(patches * patches, 0);
  for (std::size_t i = 0; i < patches; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      allowed[i * patches + j] = patch_padded[j] ? 0 : 1;
  Tensor<Real> h = z;
  for (auto& layer : layers) {
    Tensor<Real> a = layer_norm(h, layer.ln1);
    h = add(h, multi_head_attention_masked(a, a, a, allowed, layer.attn));
    Tensor<Real> f = layer_norm(h, layer.ln2);
    Tensor<Real> ff = linear(swish(linear(f, layer.w_ff1.use(), layer.b_ff1.use())),
                             layer.w_ff2.use(), layer.b_ff2.use());
    h = add(h, ff);
  }
  return h;
}

/// Forecast head: last not-fully-padded token row through the output block.
template <typename Real>
Tensor<Real> forecast(const Tensor<Real>& h,
                      const std::vector<std::uint8_t>& patch_padded,
                      ResidualBlockWeights<Real>& forecast_block) {
  if (h.rank() != 2) throw ShapeError("forecast: expects rank-2 features");
  std::size_t patches = h.extent(0);
  if (patch_padded.size() != patches)
    throw ShapeError("forecast: patch mask length mismatch");
  std::size_t last = patches;
  for (std::size_t i = patches; i > 0; --i)
    if (!patch_padded[i - 1]) {
      last = i - 1;
      break;
    }
  if (last == patches) throw DataError("forecast: no valid patch");
  return residual_block(take_row(h, last), forecast_block);
}

/// Per-channel features from one channel's raw series.
template <typename Real>
Tensor<Real> encode_channel(const std::vector<Real>& x,
                            const std::vector<std::uint8_t>& m,
                            BackboneWeights<Real>& w,
                            std::vector<std::uint8_t>* patch_padded_out =
                                nullptr) {
  PatchedSeries<Real> ps = patchify(x, m, w.config.patch_size);
  Tensor<Real> z = embed_patches(ps, w.input_block);
  z = add_positions(z, w.config.max_patches);
  Tensor<Real> h = encode(z, ps.patch_padded, w.layers);
  if (patch_padded_out) *patch_padded_out = ps.patch_padded;
  return h;
}

/// Channel-major stack of per-channel feature planes plus validity flags
/// (valid = patch not fully padded, so it may act as an attention key).
template <typename Real>
struct Features {
  std::vector<Tensor<Real>> channels;            // C tensors of [L x D]
  std::vector<std::vector<std::uint8_t>> valid;  // C x L, 1 = valid

  std::size_t channel_count() const { return channels.size(); }
  std::size_t patch_count() const {
    return channels.empty() ? 0 : channels[0].extent(0);
  }
};

/// The univariate pipeline applied to each channel independently with shared
/// weights. values/mask are C x T row-major.
template <typename Real>
Features<Real> extract_features(const std::vector<Real>& values,
                                const std::vector<std::uint8_t>& mask,
                                std::size_t channel_count,
                                BackboneWeights<Real>& w) {
  if (channel_count == 0) throw DataError("extract_features: no channels");
  if (values.size() != mask.size() || values.size() % channel_count != 0)
    throw ShapeError("extract_features: values/mask must be C x T");
  std::size_t t = values.size() / channel_count;
  Features<Real> out;
  out.channels.reserve(channel_count);
  out.valid.reserve(channel_count);
  for (std::size_t c = 0; c < channel_count; ++c) {
    std::vector<Real> x(values.begin() + long(c * t),
                        values.begin() + long((c + 1) * t));
    std::vector<std::uint8_t> m(mask.begin() + long(c * t),
                                mask.begin() + long((c + 1) * t));
    std::vector<std::uint8_t> padded;
    Tensor<Real> h = encode_channel(x, m, w, &padded);
    bool any_valid = false;
    std::vector<std::uint8_t> valid(padded.size());
    for (std::size_t i = 0; i < padded.size(); ++i) {
      valid[i] = padded[i] ? 0 : 1;
      any_valid = any_valid || valid[i];
    }
    if (!any_valid)
      throw DataError("extract_features: channel " + std::to_string(c) +
                      " has no valid patches");
    out.channels.push_back(std::move(h));
    out.valid.push_back(std::move(valid));
  }
  return out;
}

/// Desk-scale pretraining: next-horizon forecasting with mean squared error
/// over random context/horizon splits of the corpus. Returns weights with
/// every parameter frozen.
template <typename Real>
BackboneWeights<Real> pretrain_forecasting(
    const std::vector<std::vector<Real>>& corpus, const BackboneConfig& cfg,
    std::size_t epochs, std::uint64_t seed, double lr = 1e-3,
    std::size_t batch_size = 16, double* final_loss = nullptr) {
  cfg.validate();
  if (corpus.empty()) throw DataError("pretrain: empty corpus");
  std::size_t n = cfg.horizon, p = cfg.patch_size;
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].size() < p + n)
      throw DataError("pretrain: series " + std::to_string(i) +
                      " shorter than patch_size + horizon");
  BackboneWeights<Real> w = BackboneWeights<Real>::init(cfg, seed);

  std::vector<Parameter<Real>*> params;
  w.visit([&](const std::string&, Parameter<Real>& prm) {
    params.push_back(&prm);
  });
  AdamConfig acfg;
  acfg.lr = lr;
  Adam<Real> opt(params, acfg);

  double last_loss = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(derive_seed(seed, "pretrain-epoch-" + std::to_string(epoch)));
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::size_t stop = std::min(order.size(), start + batch_size);
      Tape<Real> tape;
      std::vector<Tensor<Real>> losses;
      for (std::size_t bi = start; bi < stop; ++bi) {
        const auto& series = corpus[order[bi]];
        std::size_t max_ctx =
            std::min(series.size() - n, p * cfg.max_patches);
        std::size_t ctx = p + rng.below(max_ctx - p + 1);
        std::vector<Real> x(series.begin(), series.begin() + long(ctx));
        std::vector<Real> target(series.begin() + long(ctx),
                                 series.begin() + long(ctx + n));
        std::vector<std::uint8_t> m(ctx, 0);
        PatchedSeries<Real> ps = patchify(x, m, p);
        Tensor<Real> z = add_positions(embed_patches(ps, w.input_block),
                                       cfg.max_patches);
        Tensor<Real> h = encode(z, ps.patch_padded, w.layers);
        Tensor<Real> pred = forecast(h, ps.patch_padded, w.forecast_block);
        losses.push_back(mean_squared_error(
            pred, Tensor<Real>(Shape{n}, std::move(target))));
      }
      Tensor<Real> loss = mean_scalars(losses);
      last_loss = double(loss.item());
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
  }
  if (final_loss) *final_loss = last_loss;
  w.set_trainable(false);
  return w;
}

/// Held-out forecast MSE of frozen weights on fixed context/target splits.
template <typename Real>
double forecast_mse(const std::vector<std::vector<Real>>& corpus,
                    BackboneWeights<Real>& w, std::uint64_t seed) {
  std::size_t n = w.config.horizon, p = w.config.patch_size;
  Rng rng(derive_seed(seed, "forecast-eval"));
  double total = 0;
  std::size_t count = 0;
  for (const auto& series : corpus) {
    if (series.size() < p + n) continue;
    std::size_t max_ctx = std::min(series.size() - n, p * w.config.max_patches);
    std::size_t ctx = p + rng.below(max_ctx - p + 1);
    std::vector<Real> x(series.begin(), series.begin() + long(ctx));
    std::vector<std::uint8_t> m(ctx, 0);
    PatchedSeries<Real> ps = patchify(x, m, p);
    Tensor<Real> z =
        add_positions(embed_patches(ps, w.input_block), w.config.max_patches);
    Tensor<Real> h = encode(z, ps.patch_padded, w.layers);
    Tensor<Real> pred = forecast(h, ps.patch_padded, w.forecast_block);
    for (std::size_t i = 0; i < n; ++i) {
      double d = double(pred[i]) - double(series[ctx + i]);
      total += d * d;
    }
    count += n;
  }
  if (count == 0) throw DataError("forecast_mse: no usable series");
  return total / double(count);
}

}  // namespace formed
