#pragma once

// Full encoder assembly (tokenizer + transformer) plus the two attachable
// outputs: the pre-training projector and the classification head.

#include <random>
#include <string>

#include "mantis/tokenizer.hpp"
#include "mantis/vit.hpp"

namespace mantis {

struct MantisConfig {
  TokenizerConfig tok;
  VitConfig vit;
  int projector_dim = 128;
};

template <class S>
struct MantisModel {
  MantisConfig cfg;
  TokenizerParams<S> tok;
  VitParams<S> vit;
  BasicTensor<S> pos_encoding;  // fixed (patch_count + 1, token_dim)

  // Raw-scale channel rows (N, input_len) -> embeddings (N, token_dim).
  BasicTensor<S> encode(const BasicTensor<S>& raw, bool train,
                        std::mt19937& rng) {
    auto tokens = tokenize(raw, tok, cfg.tok);
    return vit_encode(tokens, vit, cfg.vit, train, rng, &pos_encoding);
  }

  template <class Fn>
  void for_each_param(Fn&& fn) {
    tok.for_each_param(cfg.tok, fn);
    vit.for_each_param(fn);
  }

  std::vector<BasicTensor<S>> parameters() {
    std::vector<BasicTensor<S>> out;
    for_each_param([&](const std::string&, BasicTensor<S>& t) { out.push_back(t); });
    return out;
  }

  void set_requires_grad(bool v) {
    for_each_param([&](const std::string&, BasicTensor<S>& t) {
      t.set_requires_grad(v);
    });
  }
};

template <class S>
MantisModel<S> init_mantis(const MantisConfig& cfg, std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  MantisModel<S> m;
  m.cfg = cfg;
  m.tok = init_tokenizer<S>(cfg.tok, rng);
  m.vit = init_vit<S>(cfg.vit, rng);
  m.pos_encoding =
      positional_encoding<S>(cfg.tok.patch_count + 1, cfg.vit.token_dim);
  return m;
}

// Learnable scalars of the encoder (projector and head excluded).
template <class S>
long count_parameters(MantisModel<S>& model) {
  long n = 0;
  model.for_each_param([&](const std::string&, BasicTensor<S>& t) {
    n += static_cast<long>(t.numel());
  });
  return n;
}

// Pre-training projector: layer norm + linear map to the contrastive space.
template <class S>
struct Projector {
  BasicTensor<S> ln_g, ln_b;
  BasicTensor<S> w, b;  // (token_dim, projector_dim)

  BasicTensor<S> forward(const BasicTensor<S>& emb, S ln_eps = S(1e-5)) {
    return add(matmul(layer_norm(emb, ln_g, ln_b, ln_eps), w), b);
  }

  template <class Fn>
  void for_each_param(Fn&& fn) {
    fn("projector.ln.gamma", ln_g);
    fn("projector.ln.beta", ln_b);
    fn("projector.linear.weight", w);
    fn("projector.linear.bias", b);
  }

  std::vector<BasicTensor<S>> parameters() {
    std::vector<BasicTensor<S>> out;
    for_each_param([&](const std::string&, BasicTensor<S>& t) { out.push_back(t); });
    return out;
  }

  void set_requires_grad(bool v) {
    for_each_param([&](const std::string&, BasicTensor<S>& t) {
      t.set_requires_grad(v);
    });
  }
};

template <class S>
Projector<S> init_projector(int in_dim, int out_dim, std::mt19937& rng) {
  Projector<S> p;
  p.ln_g = BasicTensor<S>::ones({in_dim});
  p.ln_b = BasicTensor<S>::zeros({in_dim});
  p.w = BasicTensor<S>::randn({in_dim, out_dim}, rng, S(0.02));
  p.b = BasicTensor<S>::zeros({out_dim});
  return p;
}

// Classification head over (possibly channel-concatenated) embeddings:
// layer norm + linear to K logits.
template <class S>
struct Head {
  int input_dim = 0;
  int num_classes = 0;
  BasicTensor<S> ln_g, ln_b;
  BasicTensor<S> w, b;  // (input_dim, num_classes)

  BasicTensor<S> forward(const BasicTensor<S>& emb, S ln_eps = S(1e-5)) {
    return add(matmul(layer_norm(emb, ln_g, ln_b, ln_eps), w), b);
  }

  template <class Fn>
  void for_each_param(Fn&& fn) {
    fn("head.ln.gamma", ln_g);
    fn("head.ln.beta", ln_b);
    fn("head.linear.weight", w);
    fn("head.linear.bias", b);
  }

  std::vector<BasicTensor<S>> parameters() {
    std::vector<BasicTensor<S>> out;
    for_each_param([&](const std::string&, BasicTensor<S>& t) { out.push_back(t); });
    return out;
  }

  void set_requires_grad(bool v) {
    for_each_param([&](const std::string&, BasicTensor<S>& t) {
      t.set_requires_grad(v);
    });
  }
};

template <class S>
Head<S> init_head(int input_dim, int num_classes, std::mt19937& rng) {
  Head<S> h;
  h.input_dim = input_dim;
  h.num_classes = num_classes;
  h.ln_g = BasicTensor<S>::ones({input_dim});
  h.ln_b = BasicTensor<S>::zeros({input_dim});
  h.w = BasicTensor<S>::randn({input_dim, num_classes}, rng, S(0.02));
  h.b = BasicTensor<S>::zeros({num_classes});
  return h;
}

using Model = MantisModel<float>;

}  // namespace mantis
