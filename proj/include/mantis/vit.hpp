#pragma once

// Transformer encoder over the generated tokens: class token + sinusoidal
// positions, pre-norm blocks with multi-head attention, final layer norm,
// class-token readout.

#include <cmath>
#include <random>

#include "mantis/ops.hpp"
#include "mantis/tensor.hpp"

namespace mantis {

struct VitConfig {
  int token_dim = 256;
  int num_layers = 6;
  int num_heads = 8;
  int mlp_hidden = 2048;
  float dropout_rate = 0.10f;
  float ln_eps = 1e-5f;

  int head_dim() const { return token_dim / num_heads; }
};

template <class S>
struct VitLayerParams {
  BasicTensor<S> ln1_g, ln1_b;
  BasicTensor<S> wq, bq, wk, bk, wv, bv, wo, bo;  // (D, D) and (D)
  BasicTensor<S> ln2_g, ln2_b;
  BasicTensor<S> mlp_w1, mlp_b1;  // (D, hidden)
  BasicTensor<S> mlp_w2, mlp_b2;  // (hidden, D)
};

template <class S>
struct VitParams {
  BasicTensor<S> class_token;  // (1, D)
  std::vector<VitLayerParams<S>> layers;
  BasicTensor<S> final_ln_g, final_ln_b;

  template <class Fn>
  void for_each_param(Fn&& fn) {
    fn("vit.class_token", class_token);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string base = "vit.layer" + std::to_string(i);
      fn(base + ".ln1.gamma", l.ln1_g);
      fn(base + ".ln1.beta", l.ln1_b);
      fn(base + ".attn.wq", l.wq);
      fn(base + ".attn.bq", l.bq);
      fn(base + ".attn.wk", l.wk);
      fn(base + ".attn.bk", l.bk);
      fn(base + ".attn.wv", l.wv);
      fn(base + ".attn.bv", l.bv);
      fn(base + ".attn.wo", l.wo);
      fn(base + ".attn.bo", l.bo);
      fn(base + ".ln2.gamma", l.ln2_g);
      fn(base + ".ln2.beta", l.ln2_b);
      fn(base + ".mlp.w1", l.mlp_w1);
      fn(base + ".mlp.b1", l.mlp_b1);
      fn(base + ".mlp.w2", l.mlp_w2);
      fn(base + ".mlp.b2", l.mlp_b2);
    }
    fn("vit.final_ln.gamma", final_ln_g);
    fn("vit.final_ln.beta", final_ln_b);
  }
};

template <class S>
VitParams<S> init_vit(const VitConfig& cfg, std::mt19937& rng) {
  if (cfg.token_dim % cfg.num_heads != 0)
    throw std::invalid_argument("vit: token_dim must be divisible by num_heads");
  const int d = cfg.token_dim;
  VitParams<S> p;
  p.class_token = BasicTensor<S>::randn({1, d}, rng, S(0.02));
  p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (auto& l : p.layers) {
    l.ln1_g = BasicTensor<S>::ones({d});
    l.ln1_b = BasicTensor<S>::zeros({d});
    l.wq = BasicTensor<S>::randn({d, d}, rng, S(0.02));
    l.bq = BasicTensor<S>::zeros({d});
    l.wk = BasicTensor<S>::randn({d, d}, rng, S(0.02));
    l.bk = BasicTensor<S>::zeros({d});
    l.wv = BasicTensor<S>::randn({d, d}, rng, S(0.02));
    l.bv = BasicTensor<S>::zeros({d});
    l.wo = BasicTensor<S>::randn({d, d}, rng, S(0.02));
    l.bo = BasicTensor<S>::zeros({d});
    l.ln2_g = BasicTensor<S>::ones({d});
    l.ln2_b = BasicTensor<S>::zeros({d});
    l.mlp_w1 = BasicTensor<S>::randn({d, cfg.mlp_hidden}, rng, S(0.02));
    l.mlp_b1 = BasicTensor<S>::zeros({cfg.mlp_hidden});
    l.mlp_w2 = BasicTensor<S>::randn({cfg.mlp_hidden, d}, rng, S(0.02));
    l.mlp_b2 = BasicTensor<S>::zeros({d});
  }
  p.final_ln_g = BasicTensor<S>::ones({d});
  p.final_ln_b = BasicTensor<S>::zeros({d});
  return p;
}

// Classical sinusoidal positional encoding:
// PE[pos, 2i] = sin(pos / 10000^(2i/dim)), PE[pos, 2i+1] = cos(same).
template <class S>
BasicTensor<S> positional_encoding(int seq_len, int dim) {
  if (dim % 2 != 0)
    throw std::invalid_argument("positional_encoding: dim must be even, got " +
                                std::to_string(dim));
  BasicTensor<S> pe({seq_len, dim});
  S* p = pe.data();
  for (int pos = 0; pos < seq_len; ++pos)
    for (int i = 0; i < dim / 2; ++i) {
      const double angle = pos / std::pow(10000.0, (2.0 * i) / dim);
      p[std::size_t(pos) * dim + 2 * i] = static_cast<S>(std::sin(angle));
      p[std::size_t(pos) * dim + 2 * i + 1] = static_cast<S>(std::cos(angle));
    }
  return pe;
}

// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
// `attn_out`, when given, receives the post-softmax attention weights of
// shape (B * heads, T, T).
template <class S>
BasicTensor<S> attention_layer(const BasicTensor<S>& x,
                               const VitLayerParams<S>& l, const VitConfig& cfg,
                               bool train, std::mt19937& rng,
                               BasicTensor<S>* attn_out = nullptr) {
  const int b = x.dim(0), t = x.dim(1), d = x.dim(2);
  const int h = cfg.num_heads, hd = cfg.head_dim();
  const S ln_eps = static_cast<S>(cfg.ln_eps);

  auto xn = layer_norm(x, l.ln1_g, l.ln1_b, ln_eps);
  auto split_heads = [&](const BasicTensor<S>& m) {
    // (B, T, D) -> (B*H, T, head_dim)
    return reshape(permute(reshape(m, {b, t, h, hd}), {0, 2, 1, 3}),
                   {b * h, t, hd});
  };
  auto q = split_heads(linear(xn, l.wq, l.bq));
  auto k = split_heads(linear(xn, l.wk, l.bk));
  auto v = split_heads(linear(xn, l.wv, l.bv));

  auto scores = mul(bmm(q, permute(k, {0, 2, 1})),
                    static_cast<S>(1.0 / std::sqrt(double(hd))));
  auto attn = softmax(scores, -1);
  if (attn_out) *attn_out = attn;
  attn = dropout(attn, cfg.dropout_rate, train, rng);

  auto ctx = bmm(attn, v);  // (B*H, T, hd)
  ctx = reshape(permute(reshape(ctx, {b, h, t, hd}), {0, 2, 1, 3}), {b, t, d});
  auto y = add(x, linear(ctx, l.wo, l.bo));

  auto yn = layer_norm(y, l.ln2_g, l.ln2_b, ln_eps);
  auto hmid = gelu(linear(yn, l.mlp_w1, l.mlp_b1));
  hmid = dropout(hmid, cfg.dropout_rate, train, rng);
  return add(y, linear(hmid, l.mlp_w2, l.mlp_b2));
}

// Tokens (B, P, D) -> embeddings (B, D): prepend class token, add positions
// over all P+1 slots, run the blocks, read the class-token row after a final
// layer norm.
template <class S>
BasicTensor<S> vit_encode(const BasicTensor<S>& tokens, VitParams<S>& p,
                          const VitConfig& cfg, bool train, std::mt19937& rng,
                          const BasicTensor<S>* pos_encoding = nullptr) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.token_dim)
    throw std::invalid_argument("vit_encode: expected (B, P, " +
                                std::to_string(cfg.token_dim) + "), got " +
                                shape_str(tokens.shape()));
  const int b = tokens.dim(0);
  const int seq = tokens.dim(1) + 1;
  auto cls = reshape(expand_leading(p.class_token, b), {b, 1, cfg.token_dim});
  auto x = concat<S>({cls, tokens}, 1);
  BasicTensor<S> pe = pos_encoding ? *pos_encoding
                                   : positional_encoding<S>(seq, cfg.token_dim);
  x = add(x, pe);
  for (auto& layer : p.layers)
    x = attention_layer(x, layer, cfg, train, rng);
  x = layer_norm(x, p.final_ln_g, p.final_ln_b, static_cast<S>(cfg.ln_eps));
  return reshape(slice(x, 1, 0, 1), {b, cfg.token_dim});
}

}  // namespace mantis
