#include "mantis/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mantis/gemm.hpp"
#include "mantis/logging.hpp"
#include "mantis/rng.hpp"

namespace mantis {

Regime regime_from_name(const std::string& name) {
  if (name == "probe") return Regime::probe;
  if (name == "head") return Regime::head;
  if (name == "scratch") return Regime::scratch;
  if (name == "full") return Regime::full;
  throw std::invalid_argument("unknown regime: " + name);
}

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::probe: return "probe";
    case Regime::head: return "head";
    case Regime::scratch: return "scratch";
    case Regime::full: return "full";
  }
  return "?";
}

Tensor lcomb_forward(const Tensor& w, const Tensor& x) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(1) != x.dim(1))
    throw std::invalid_argument("lcomb_forward: incompatible shapes " +
                                shape_str(w.shape()) + " and " +
                                shape_str(x.shape()));
  const int b = x.dim(0), d = x.dim(1), t = x.dim(2);
  const int d_new = w.dim(0);
  auto flat = reshape(permute(x, {1, 0, 2}), {d, b * t});
  auto mixed = matmul(w, flat);  // (d_new, b*t)
  return permute(reshape(mixed, {d_new, b, t}), {1, 0, 2});
}

namespace {

// Stacks the channel rows of the given samples into an (n_rows, T) tensor,
// sample-major with channels contiguous.
Tensor gather_rows(const Dataset& ds, const std::vector<int>& sample_ids) {
  const int d = ds.channels, t = ds.length;
  Tensor x({static_cast<int>(sample_ids.size()) * d, t});
  float* dst = x.data();
  for (int i : sample_ids) {
    const auto& s = ds.samples[std::size_t(i)];
    std::copy(s.values.begin(), s.values.end(), dst);
    dst += std::size_t(d) * t;
  }
  return x;
}

Tensor gather_batch_3d(const Dataset& ds, const std::vector<int>& sample_ids) {
  const int d = ds.channels, t = ds.length;
  Tensor x({static_cast<int>(sample_ids.size()), d, t});
  float* dst = x.data();
  for (int i : sample_ids) {
    const auto& s = ds.samples[std::size_t(i)];
    std::copy(s.values.begin(), s.values.end(), dst);
    dst += std::size_t(d) * t;
  }
  return x;
}

std::vector<int> batch_labels(const Dataset& ds, const std::vector<int>& ids) {
  std::vector<int> y;
  y.reserve(ids.size());
  for (int i : ids) {
    if (!ds.samples[std::size_t(i)].label)
      throw std::invalid_argument("finetune: sample " + std::to_string(i) +
                                  " has no label");
    y.push_back(*ds.samples[std::size_t(i)].label);
  }
  return y;
}

double argmax_accuracy(const float* logits, int n, int k,
                       const std::vector<int>& labels) {
  long correct = 0;
  for (int i = 0; i < n; ++i) {
    const float* row = logits + std::size_t(i) * k;
    int arg = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[arg]) arg = j;
    if (arg == labels[std::size_t(i)]) ++correct;
  }
  return double(correct) / n;
}

}  // namespace

EmbeddingMatrix extract_embeddings(Model& model, const Dataset& ds,
                                   const Adapter* adapter) {
  if (adapter && adapter->d != ds.channels)
    throw std::invalid_argument("extract_embeddings: dataset has " +
                                std::to_string(ds.channels) +
                                " channels, adapter expects " +
                                std::to_string(adapter->d));
  const Dataset* src = &ds;
  Dataset adapted;
  if (adapter) {
    adapted = apply_adapter(*adapter, ds);
    src = &adapted;
  }
  const int d_eff = src->channels;
  const int q = model.cfg.vit.token_dim;
  EmbeddingMatrix em;
  em.n = static_cast<int>(src->size());
  em.dim = d_eff * q;
  em.values.resize(std::size_t(em.n) * em.dim);
  em.labels.resize(static_cast<std::size_t>(em.n));
  for (int i = 0; i < em.n; ++i)
    em.labels[std::size_t(i)] = src->samples[std::size_t(i)].label.value_or(-1);

  std::mt19937 rng(0);  // inference: dropout off, never drawn
  const int chunk = std::max(1, 256 / std::max(1, d_eff));
  for (int begin = 0; begin < em.n; begin += chunk) {
    const int count = std::min(chunk, em.n - begin);
    std::vector<int> ids(static_cast<std::size_t>(count));
    std::iota(ids.begin(), ids.end(), begin);
    Tensor rows = gather_rows(*src, ids);
    Tensor emb = model.encode(rows, /*train=*/false, rng);  // (count*d_eff, q)
    std::copy(emb.data(), emb.data() + emb.numel(),
              em.values.data() + std::size_t(begin) * em.dim);
  }
  return em;
}

LinearProbe linear_probe_fit(const EmbeddingMatrix& em, int num_classes,
                             float l2) {
  const int n = em.n, dim = em.dim, k = num_classes;
  if (k < 2)
    throw std::invalid_argument("linear_probe_fit: need at least 2 classes");
  if (n < k)
    throw std::invalid_argument("linear_probe_fit: fewer samples than classes");
  {
    std::vector<long> counts(static_cast<std::size_t>(k), 0);
    for (int y : em.labels) {
      if (y < 0 || y >= k)
        throw std::invalid_argument("linear_probe_fit: label " +
                                    std::to_string(y) + " outside [0, " +
                                    std::to_string(k) + ")");
      ++counts[std::size_t(y)];
    }
    long nonzero = 0;
    for (long c : counts) nonzero += c > 0 ? 1 : 0;
    if (nonzero < 2)
      throw std::invalid_argument(
          "linear_probe_fit: training set holds a single class");
  }

  std::vector<double> x(em.values.begin(), em.values.end());

  // Lipschitz bound via power iteration on X^T X: L <= 0.5 lmax / n + l2.
  double lmax;
  {
    std::vector<double> v(static_cast<std::size_t>(dim),
                          1.0 / std::sqrt(double(dim)));
    std::vector<double> u(static_cast<std::size_t>(n));
    std::vector<double> w(static_cast<std::size_t>(dim));
    lmax = 1.0;
    for (int it = 0; it < 60; ++it) {
      gemm(false, false, n, 1, dim, 1.0, x.data(), dim, v.data(), 1, 0.0,
           u.data(), 1);
      gemm(true, false, dim, 1, n, 1.0, x.data(), dim, u.data(), 1, 0.0,
           w.data(), 1);
      double norm = 0;
      for (double wi : w) norm += wi * wi;
      norm = std::sqrt(norm);
      if (norm < 1e-30) break;
      lmax = norm;
      for (int j = 0; j < dim; ++j) v[std::size_t(j)] = w[std::size_t(j)] / norm;
    }
  }
  const double step = 1.0 / (0.5 * lmax / n + double(l2) + 1e-12);

  std::vector<double> wgt(std::size_t(k) * dim, 0.0);
  std::vector<double> bias(static_cast<std::size_t>(k), 0.0);
  std::vector<double> logits(std::size_t(n) * k);
  std::vector<double> gw(std::size_t(k) * dim);
  std::vector<double> gb(static_cast<std::size_t>(k));

  for (int iter = 0; iter < 5000; ++iter) {
    gemm(false, true, n, k, dim, 1.0, x.data(), dim, wgt.data(), dim, 0.0,
         logits.data(), k);
    for (int i = 0; i < n; ++i) {
      double* row = logits.data() + std::size_t(i) * k;
      double mx = row[0] + bias[0];
      for (int j = 0; j < k; ++j) {
        row[j] += bias[std::size_t(j)];
        mx = std::max(mx, row[j]);
      }
      double denom = 0;
      for (int j = 0; j < k; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      for (int j = 0; j < k; ++j) row[j] /= denom;  // now probabilities
      row[em.labels[std::size_t(i)]] -= 1.0;        // now (P - Y) residual
    }
    gemm(true, false, k, dim, n, 1.0 / n, logits.data(), k, x.data(), dim, 0.0,
         gw.data(), dim);
    for (std::size_t j = 0; j < wgt.size(); ++j) gw[j] += double(l2) * wgt[j];
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        gb[std::size_t(j)] += logits[std::size_t(i) * k + j] / n;

    double gnorm = 0;
    for (double g : gw) gnorm += g * g;
    for (double g : gb) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    if (gnorm < 1e-4) break;

    for (std::size_t j = 0; j < wgt.size(); ++j) wgt[j] -= step * gw[j];
    for (int j = 0; j < k; ++j) bias[std::size_t(j)] -= step * gb[std::size_t(j)];
  }

  LinearProbe p;
  p.input_dim = dim;
  p.num_classes = k;
  p.w.assign(wgt.begin(), wgt.end());
  p.b.assign(bias.begin(), bias.end());
  return p;
}

std::vector<float> probe_probs(const LinearProbe& p, const float* row) {
  std::vector<double> z(static_cast<std::size_t>(p.num_classes));
  for (int j = 0; j < p.num_classes; ++j) {
    double acc = double(p.b[std::size_t(j)]);
    const float* wr = p.w.data() + std::size_t(j) * p.input_dim;
    for (int i = 0; i < p.input_dim; ++i) acc += double(wr[i]) * double(row[i]);
    z[std::size_t(j)] = acc;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double denom = 0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    denom += v;
  }
  std::vector<float> probs(static_cast<std::size_t>(p.num_classes));
  for (int j = 0; j < p.num_classes; ++j)
    probs[std::size_t(j)] = static_cast<float>(z[std::size_t(j)] / denom);
  return probs;
}

float probe_accuracy(const LinearProbe& p, const EmbeddingMatrix& em) {
  long correct = 0;
  for (int i = 0; i < em.n; ++i) {
    auto probs = probe_probs(p, em.row(i));
    int arg = 0;
    for (int j = 1; j < p.num_classes; ++j)
      if (probs[std::size_t(j)] > probs[std::size_t(arg)]) arg = j;
    if (arg == em.labels[std::size_t(i)]) ++correct;
  }
  return static_cast<float>(double(correct) / em.n);
}

Prediction prediction_from_probs(std::vector<float> probs) {
  Prediction out;
  out.probs = std::move(probs);
  out.label = 0;
  for (int j = 1; j < static_cast<int>(out.probs.size()); ++j)
    if (out.probs[std::size_t(j)] > out.probs[std::size_t(out.label)])
      out.label = j;  // strict: argmax ties resolve to the lowest index
  out.confidence = out.probs[std::size_t(out.label)];
  return out;
}

Prediction predict(Model& model, Head<float>& head, const RawSeries& series,
                   const Adapter* adapter) {
  RawSeries s = adapter ? apply_adapter(*adapter, series) : series;
  Tensor rows({s.channels, s.length}, s.values);
  std::mt19937 rng(0);
  Tensor emb = model.encode(rows, /*train=*/false, rng);
  Tensor flat = reshape(emb, {1, s.channels * model.cfg.vit.token_dim});
  Tensor logits = head.forward(flat);
  // softmax in double for a clean simplex
  std::vector<double> z(logits.data(), logits.data() + logits.numel());
  const double mx = *std::max_element(z.begin(), z.end());
  double denom = 0;
  for (auto& v : z) {
    v = std::exp(v - mx);
    denom += v;
  }
  std::vector<float> probs(z.size());
  for (std::size_t j = 0; j < z.size(); ++j)
    probs[j] = static_cast<float>(z[j] / denom);
  return prediction_from_probs(std::move(probs));
}

std::pair<Dataset, Dataset> train_val_split(const Dataset& ds, float fraction,
                                            std::uint64_t seed) {
  const int n = static_cast<int>(ds.size());
  if (n < 5)
    throw std::invalid_argument("train_val_split: need at least 5 samples");
  if (fraction <= 0.0f || fraction >= 1.0f)
    throw std::invalid_argument("train_val_split: fraction must be in (0, 1)");

  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < n; ++i)
    by_class[ds.samples[std::size_t(i)].label.value_or(-1)].push_back(i);

  bool stratified = true;
  for (const auto& [cls, ids] : by_class)
    if (ids.size() < 2) stratified = false;

  std::vector<int> train_ids, val_ids;
  if (stratified) {
    for (auto& [cls, ids] : by_class) {
      auto rng = make_rng(derive_seed(seed, std::uint64_t(cls + 1), 0x53504c54));
      std::vector<int> shuffled = ids;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      int take = static_cast<int>(std::lround(fraction * double(shuffled.size())));
      take = std::clamp(take, 1, static_cast<int>(shuffled.size()) - 1);
      train_ids.insert(train_ids.end(), shuffled.begin(), shuffled.begin() + take);
      val_ids.insert(val_ids.end(), shuffled.begin() + take, shuffled.end());
    }
  } else {
    log_info("train_val_split: class with a single sample, splitting unstratified");
    std::vector<int> shuffled(static_cast<std::size_t>(n));
    std::iota(shuffled.begin(), shuffled.end(), 0);
    auto rng = make_rng(derive_seed(seed, 0, 0x53504c54));
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    int take = std::clamp(static_cast<int>(std::lround(fraction * double(n))), 1,
                          n - 1);
    train_ids.assign(shuffled.begin(), shuffled.begin() + take);
    val_ids.assign(shuffled.begin() + take, shuffled.end());
  }

  auto build = [&](const std::vector<int>& ids) {
    Dataset out = ds;
    out.samples.clear();
    for (int i : ids) out.samples.push_back(ds.samples[std::size_t(i)]);
    return out;
  };
  return {build(train_ids), build(val_ids)};
}

namespace {

struct EvalStats {
  float loss = 0;
  float acc = 0;
};

EvalStats evaluate_split(Model& model, Head<float>& head, const Dataset& ds,
                         const Tensor* lcomb_w) {
  const int n = static_cast<int>(ds.size());
  const int q = model.cfg.vit.token_dim;
  std::mt19937 rng(0);
  double loss_sum = 0;
  long correct = 0;
  const int chunk = std::max(1, 128 / std::max(1, ds.channels));
  for (int begin = 0; begin < n; begin += chunk) {
    const int count = std::min(chunk, n - begin);
    std::vector<int> ids(static_cast<std::size_t>(count));
    std::iota(ids.begin(), ids.end(), begin);
    Tensor rows;
    int d_eff = ds.channels;
    if (lcomb_w) {
      Tensor x3 = gather_batch_3d(ds, ids);
      Tensor mixed = lcomb_forward(*lcomb_w, x3);
      d_eff = mixed.dim(1);
      rows = reshape(mixed, {count * d_eff, ds.length});
    } else {
      rows = gather_rows(ds, ids);
    }
    Tensor emb = model.encode(rows, /*train=*/false, rng);
    Tensor logits = head.forward(reshape(emb, {count, d_eff * q}));
    auto y = batch_labels(ds, ids);
    loss_sum += double(cross_entropy(logits, y).item()) * count;
    correct += std::lround(
        argmax_accuracy(logits.data(), count, head.num_classes, y) * count);
  }
  return {static_cast<float>(loss_sum / n), static_cast<float>(double(correct) / n)};
}

}  // namespace

FinetuneResult finetune(Model& model, Head<float>& head, const Dataset& train,
                        const Dataset* val, const FinetuneConfig& cfg,
                        Tensor* lcomb_w,
                        const std::function<void(const EpochMetrics&)>& on_epoch) {
  const int n = static_cast<int>(train.size());
  if (n == 0) throw std::invalid_argument("finetune: empty dataset");
  for (const auto& s : train.samples)
    if (!s.label || *s.label < 0 || *s.label >= head.num_classes)
      throw std::invalid_argument("finetune: label outside [0, " +
                                  std::to_string(head.num_classes) + ")");
  if (train.length != model.cfg.tok.input_len)
    throw std::invalid_argument("finetune: series length " +
                                std::to_string(train.length) +
                                " != model input length " +
                                std::to_string(model.cfg.tok.input_len));

  const bool frozen_encoder = cfg.regime == Regime::head;
  const int q = model.cfg.vit.token_dim;

  model.set_requires_grad(!frozen_encoder);
  head.set_requires_grad(true);
  if (lcomb_w) lcomb_w->set_requires_grad(cfg.train_lcomb && !frozen_encoder);

  std::vector<Tensor> params;
  if (!frozen_encoder) {
    params = model.parameters();
    if (lcomb_w && cfg.train_lcomb) params.push_back(*lcomb_w);
  }
  for (auto& p : head.parameters()) params.push_back(p);

  AdamWConfig oc;
  oc.lr = cfg.schedule.base_lr;
  oc.weight_decay = cfg.weight_decay;
  AdamW<float> optimizer(params, oc);

  // Frozen encoder: embeddings are fixed, compute them once (shared with the
  // probe path by construction).
  EmbeddingMatrix cached;
  if (frozen_encoder) {
    cached = extract_embeddings(model, train);
    if (cached.dim != head.input_dim)
      throw std::invalid_argument("finetune: head input dim " +
                                  std::to_string(head.input_dim) +
                                  " != embedding dim " +
                                  std::to_string(cached.dim));
  }
  EmbeddingMatrix cached_val;
  if (frozen_encoder && val) cached_val = extract_embeddings(model, *val);

  FinetuneResult result;
  double best_score = -1.0;
  for (int epoch = 0; epoch < cfg.schedule.total_epochs; ++epoch) {
    optimizer.set_lr(lr_at(cfg.schedule, epoch));
    auto order_rng = make_rng(derive_seed(cfg.seed, std::uint64_t(epoch), 0x46545348));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    auto dropout_rng = make_rng(derive_seed(cfg.seed, std::uint64_t(epoch), 0xd0d0));

    double loss_sum = 0;
    double acc_sum = 0;
    long seen = 0;
    for (int begin = 0; begin < n; begin += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, n - begin);
      std::vector<int> ids(order.begin() + begin, order.begin() + begin + count);
      auto y = batch_labels(train, ids);

      Tape tape;
      float batch_loss;
      double batch_acc;
      {
        TapeScope<float> scope(tape);
        Tensor logits;
        if (frozen_encoder) {
          Tensor emb({count, cached.dim});
          for (int j = 0; j < count; ++j)
            std::copy(cached.row(ids[std::size_t(j)]),
                      cached.row(ids[std::size_t(j)]) + cached.dim,
                      emb.data() + std::size_t(j) * cached.dim);
          logits = head.forward(emb);
        } else {
          Tensor rows;
          int d_eff = train.channels;
          if (lcomb_w && cfg.train_lcomb) {
            Tensor x3 = gather_batch_3d(train, ids);
            Tensor mixed = lcomb_forward(*lcomb_w, x3);
            d_eff = mixed.dim(1);
            rows = reshape(mixed, {count * d_eff, train.length});
          } else {
            rows = gather_rows(train, ids);
          }
          Tensor emb = model.encode(rows, /*train=*/true, dropout_rng);
          logits = head.forward(reshape(emb, {count, d_eff * q}));
        }
        auto loss = cross_entropy(logits, y);
        batch_loss = loss.item();
        batch_acc = argmax_accuracy(logits.data(), count, head.num_classes, y);
        optimizer.zero_grad();
        tape.backward(loss);
      }
      optimizer.step();
      loss_sum += double(batch_loss) * count;
      acc_sum += batch_acc * count;
      seen += count;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = static_cast<float>(loss_sum / double(seen));
    m.train_acc = static_cast<float>(acc_sum / double(seen));
    if (val) {
      m.has_val = true;
      if (frozen_encoder) {
        // head-only eval on cached embeddings
        Tensor emb({cached_val.n, cached_val.dim}, cached_val.values);
        Tensor logits = head.forward(emb);
        m.val_loss = cross_entropy(logits, cached_val.labels).item();
        m.val_acc = static_cast<float>(argmax_accuracy(
            logits.data(), cached_val.n, head.num_classes, cached_val.labels));
      } else {
        auto stats = evaluate_split(model, head, *val,
                                    cfg.train_lcomb ? lcomb_w : nullptr);
        m.val_loss = stats.loss;
        m.val_acc = stats.acc;
      }
    }
    result.epochs.push_back(m);
    result.last_epoch = epoch;
    const double score = val ? double(m.val_acc) : double(m.train_acc);
    if (score > best_score) {
      best_score = score;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(m);
    if (cfg.stop_at_train_acc > 0 && m.train_acc >= cfg.stop_at_train_acc) break;
  }
  return result;
}

std::vector<double> dataset_logits(Model& model, Head<float>& head,
                                   const Dataset& ds, const Adapter* adapter) {
  const Dataset* src = &ds;
  Dataset adapted;
  Tensor lcomb_w;
  if (adapter) {
    if (adapter->kind == AdapterKind::lcomb) {
      lcomb_w = Tensor({adapter->d_new, adapter->d}, adapter->w);
    } else {
      adapted = apply_adapter(*adapter, ds);
      src = &adapted;
    }
  }
  const int n = static_cast<int>(src->size());
  const int q = model.cfg.vit.token_dim;
  std::vector<double> logits(std::size_t(n) * head.num_classes);
  std::mt19937 rng(0);
  const int chunk = std::max(1, 128 / std::max(1, src->channels));
  for (int begin = 0; begin < n; begin += chunk) {
    const int count = std::min(chunk, n - begin);
    std::vector<int> ids(static_cast<std::size_t>(count));
    std::iota(ids.begin(), ids.end(), begin);
    Tensor rows;
    int d_eff = src->channels;
    if (lcomb_w.defined()) {
      Tensor x3 = gather_batch_3d(*src, ids);
      Tensor mixed = lcomb_forward(lcomb_w, x3);
      d_eff = mixed.dim(1);
      rows = reshape(mixed, {count * d_eff, src->length});
    } else {
      rows = gather_rows(*src, ids);
    }
    Tensor emb = model.encode(rows, /*train=*/false, rng);
    Tensor z = head.forward(reshape(emb, {count, d_eff * q}));
    for (std::size_t i = 0; i < z.numel(); ++i)
      logits[std::size_t(begin) * head.num_classes + i] = double(z.data()[i]);
  }
  return logits;
}

std::vector<double> probe_dataset_logits(const LinearProbe& p,
                                         const EmbeddingMatrix& em) {
  std::vector<double> logits(std::size_t(em.n) * p.num_classes);
  for (int i = 0; i < em.n; ++i) {
    const float* row = em.row(i);
    for (int j = 0; j < p.num_classes; ++j) {
      double acc = double(p.b[std::size_t(j)]);
      const float* wr = p.w.data() + std::size_t(j) * p.input_dim;
      for (int d = 0; d < p.input_dim; ++d) acc += double(wr[d]) * double(row[d]);
      logits[std::size_t(i) * p.num_classes + j] = acc;
    }
  }
  return logits;
}

}  // namespace mantis
