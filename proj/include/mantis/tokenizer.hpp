#pragma once

// Token generator: one 512-step channel becomes 32 tokens of width 256 by
// fusing conv patch features of the normalized series, conv patch features of
// its differential, and an encoding of raw-scale per-patch statistics.

#include <cmath>
#include <random>

#include "mantis/ops.hpp"
#include "mantis/tensor.hpp"

namespace mantis {

struct TokenizerConfig {
  int input_len = 512;
  int patch_count = 32;
  int token_dim = 256;
  int conv_kernel = 16;
  int conv_stride = 8;
  int conv_pad = 4;
  int stat_scales = 16;  // tanh scales per statistic
  int stat_dim = 64;     // projected statistic features
  bool use_differential = true;
  float norm_eps = 1e-5f;

  int fusion_width() const {
    return token_dim * (use_differential ? 2 : 1) + stat_dim;
  }
};

template <class S>
struct TokenizerParams {
  BasicTensor<S> series_conv_w;  // (token_dim, 1, conv_kernel)
  BasicTensor<S> series_conv_b;  // (token_dim)
  BasicTensor<S> diff_conv_w;    // independent kernels for the differential
  BasicTensor<S> diff_conv_b;
  BasicTensor<S> stat_w;  // (2 * stat_scales, stat_dim)
  BasicTensor<S> stat_b;  // (stat_dim)
  BasicTensor<S> fuse_w;  // (fusion_width, token_dim)
  BasicTensor<S> fuse_b;  // (token_dim)
  BasicTensor<S> fuse_ln_g;
  BasicTensor<S> fuse_ln_b;

  template <class Fn>
  void for_each_param(const TokenizerConfig& cfg, Fn&& fn) {
    fn("tokenizer.series_conv.weight", series_conv_w);
    fn("tokenizer.series_conv.bias", series_conv_b);
    if (cfg.use_differential) {
      fn("tokenizer.diff_conv.weight", diff_conv_w);
      fn("tokenizer.diff_conv.bias", diff_conv_b);
    }
    fn("tokenizer.stat_proj.weight", stat_w);
    fn("tokenizer.stat_proj.bias", stat_b);
    fn("tokenizer.fuse.weight", fuse_w);
    fn("tokenizer.fuse.bias", fuse_b);
    fn("tokenizer.fuse_ln.gamma", fuse_ln_g);
    fn("tokenizer.fuse_ln.beta", fuse_ln_b);
  }
};

template <class S>
TokenizerParams<S> init_tokenizer(const TokenizerConfig& cfg,
                                  std::mt19937& rng) {
  TokenizerParams<S> p;
  const S conv_std =
      static_cast<S>(std::sqrt(2.0 / cfg.conv_kernel));  // single input channel
  p.series_conv_w = BasicTensor<S>::randn(
      {cfg.token_dim, 1, cfg.conv_kernel}, rng, conv_std);
  p.series_conv_b = BasicTensor<S>::zeros({cfg.token_dim});
  p.diff_conv_w = BasicTensor<S>::randn({cfg.token_dim, 1, cfg.conv_kernel},
                                        rng, conv_std);
  p.diff_conv_b = BasicTensor<S>::zeros({cfg.token_dim});
  p.stat_w = BasicTensor<S>::randn({2 * cfg.stat_scales, cfg.stat_dim}, rng,
                                   S(0.02));
  p.stat_b = BasicTensor<S>::zeros({cfg.stat_dim});
  p.fuse_w =
      BasicTensor<S>::randn({cfg.fusion_width(), cfg.token_dim}, rng, S(0.02));
  p.fuse_b = BasicTensor<S>::zeros({cfg.token_dim});
  p.fuse_ln_g = BasicTensor<S>::ones({cfg.token_dim});
  p.fuse_ln_b = BasicTensor<S>::zeros({cfg.token_dim});
  return p;
}

// In-graph per-row z-scoring: (x - mean) / (std + eps), population std.
template <class S>
BasicTensor<S> instance_norm_rows(const BasicTensor<S>& x, S eps) {
  auto centered = sub(x, mean_axis(x, 1, /*keepdim=*/true));
  auto stddev = sqrt(mean_axis(mul(centered, centered), 1, /*keepdim=*/true));
  return div(centered, add(stddev, eps));
}

// In-graph adjacent differences, left-padded with one zero column.
template <class S>
BasicTensor<S> differential_rows(const BasicTensor<S>& x) {
  const int t = x.dim(1);
  auto d = sub(slice(x, 1, 1, t), slice(x, 1, 0, t - 1));
  auto pad = BasicTensor<S>::zeros({x.dim(0), 1});
  return concat<S>({pad, d}, 1);
}

// Conv branch: (N, T) -> conv(1 -> token_dim) -> adaptive mean pooling to
// patch_count segments -> (N, patch_count, token_dim).
template <class S>
BasicTensor<S> conv_patchify(const BasicTensor<S>& x,
                             const BasicTensor<S>& conv_w,
                             const BasicTensor<S>& conv_b,
                             const TokenizerConfig& cfg) {
  if (x.rank() != 2 || x.dim(1) != cfg.input_len)
    throw std::invalid_argument("conv_patchify: expected (N, " +
                                std::to_string(cfg.input_len) + "), got " +
                                shape_str(x.shape()));
  const int n = x.dim(0);
  auto feat = conv1d(reshape(x, {n, 1, cfg.input_len}), conv_w,
                     cfg.conv_stride, cfg.conv_pad);
  feat = add(feat, reshape(conv_b, {cfg.token_dim, 1}));
  feat = adaptive_avg_pool1d(feat, cfg.patch_count);
  return permute(feat, {0, 2, 1});
}

// Raw-scale per-patch mean and population std over patch_count contiguous
// windows: (N, T) -> (N, patch_count, 2).
template <class S>
BasicTensor<S> stat_patches(const BasicTensor<S>& x,
                            const TokenizerConfig& cfg) {
  if (x.rank() != 2 || x.dim(1) % cfg.patch_count != 0)
    throw std::invalid_argument(
        "stat_patches: length " + std::to_string(x.dim(1)) +
        " not divisible into " + std::to_string(cfg.patch_count) + " windows");
  const int n = x.dim(0);
  const int win = x.dim(1) / cfg.patch_count;
  auto windows = reshape(x, {n, cfg.patch_count, win});
  auto mu = mean_axis(windows, 2, /*keepdim=*/true);
  auto centered = sub(windows, mu);
  auto sd = sqrt(mean_axis(mul(centered, centered), 2, /*keepdim=*/true));
  return concat<S>({mu, sd}, 2);
}

// Each statistic v expands to tanh(v / sigma_k) over geometric scales
// sigma_k = 2^(k - 8); the expansion is projected to stat_dim features.
template <class S>
BasicTensor<S> scalar_encode(const BasicTensor<S>& stats,
                             const TokenizerParams<S>& p,
                             const TokenizerConfig& cfg) {
  const int n = stats.dim(0);
  BasicTensor<S> scales({cfg.stat_scales});
  for (int k = 0; k < cfg.stat_scales; ++k)
    scales.data()[k] = static_cast<S>(std::pow(2.0, k - 8));
  auto expanded = tanh(div(reshape(stats, {n, cfg.patch_count, 2, 1}), scales));
  auto flat = reshape(expanded, {n * cfg.patch_count, 2 * cfg.stat_scales});
  auto projected = add(matmul(flat, p.stat_w), p.stat_b);
  return reshape(projected, {n, cfg.patch_count, cfg.stat_dim});
}

// Row-wise concat of the branch features -> linear projector -> layer norm.
template <class S>
BasicTensor<S> fuse_tokens(const std::vector<BasicTensor<S>>& features,
                           const TokenizerParams<S>& p,
                           const TokenizerConfig& cfg) {
  auto cat = concat(features, 2);
  if (cat.dim(2) != cfg.fusion_width())
    throw std::invalid_argument("fuse_tokens: fusion width " +
                                std::to_string(cat.dim(2)) + " != expected " +
                                std::to_string(cfg.fusion_width()));
  const int n = cat.dim(0);
  auto flat = reshape(cat, {n * cfg.patch_count, cfg.fusion_width()});
  auto projected = add(matmul(flat, p.fuse_w), p.fuse_b);
  auto tokens = reshape(projected, {n, cfg.patch_count, cfg.token_dim});
  return layer_norm(tokens, p.fuse_ln_g, p.fuse_ln_b);
}

// Full tokenizer: raw-scale rows (N, input_len) -> (N, patch_count, token_dim).
// Instance scaling happens in-graph; the statistics branch sees raw values.
template <class S>
BasicTensor<S> tokenize(const BasicTensor<S>& raw, const TokenizerParams<S>& p,
                        const TokenizerConfig& cfg) {
  auto stats = scalar_encode(stat_patches(raw, cfg), p, cfg);
  auto normed = instance_norm_rows(raw, static_cast<S>(cfg.norm_eps));
  std::vector<BasicTensor<S>> features;
  features.push_back(conv_patchify(normed, p.series_conv_w, p.series_conv_b, cfg));
  if (cfg.use_differential)
    features.push_back(conv_patchify(differential_rows(normed), p.diff_conv_w,
                                     p.diff_conv_b, cfg));
  features.push_back(stats);
  return fuse_tokens(features, p, cfg);
}

}  // namespace mantis
