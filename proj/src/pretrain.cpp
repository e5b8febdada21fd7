#include "mantis/pretrain.hpp"

#include <cmath>
#include <numeric>

#include "mantis/logging.hpp"
#include "mantis/rng.hpp"

namespace mantis {

std::vector<float> random_crop_resize(std::span<const float> x, float crop,
                                      int start) {
  if (crop < 0.0f || crop >= 1.0f)
    throw std::invalid_argument("random_crop_resize: crop fraction " +
                                std::to_string(crop) + " outside [0, 1)");
  const int len = static_cast<int>(x.size());
  const int window = std::max(2, static_cast<int>(std::lround((1.0 - crop) * len)));
  if (start < 0 || start + window > len)
    throw std::invalid_argument("random_crop_resize: window [" +
                                std::to_string(start) + ", " +
                                std::to_string(start + window) +
                                ") outside series of length " +
                                std::to_string(len));
  return resize_linear_channel(x.data() + start, window, len);
}

std::vector<float> random_crop_resize(std::span<const float> x,
                                      const AugmentConfig& cfg,
                                      std::mt19937& rng) {
  std::uniform_real_distribution<double> crop_dist(cfg.crop_min, cfg.crop_max);
  const float crop = static_cast<float>(crop_dist(rng));
  const int len = static_cast<int>(x.size());
  const int window = std::max(2, static_cast<int>(std::lround((1.0 - crop) * len)));
  std::uniform_int_distribution<int> start_dist(0, len - window);
  return random_crop_resize(x, crop, start_dist(rng));
}

float cosine_sim(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_sim: size mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  const double eps = 1e-8;
  return static_cast<float>(dot / ((std::sqrt(na) + eps) * (std::sqrt(nb) + eps)));
}

Tensor pairwise_similarities(const Tensor& view1, const Tensor& view2) {
  if (view1.rank() != 2 || view1.shape() != view2.shape())
    throw std::invalid_argument("pairwise_similarities: shape mismatch: " +
                                shape_str(view1.shape()) + " vs " +
                                shape_str(view2.shape()));
  return matmul(l2_normalize_rows(view1), transpose(l2_normalize_rows(view2)));
}

Tensor info_nce_loss(const Tensor& sims, float temperature) {
  if (temperature <= 0)
    throw std::invalid_argument("info_nce_loss: temperature must be > 0");
  if (sims.rank() != 2 || sims.dim(0) != sims.dim(1))
    throw std::invalid_argument("info_nce_loss: expected a square matrix, got " +
                                shape_str(sims.shape()));
  std::vector<int> targets(static_cast<std::size_t>(sims.dim(0)));
  std::iota(targets.begin(), targets.end(), 0);
  return cross_entropy(mul(sims, 1.0f / temperature), targets);
}

namespace {

// All (sample, channel) pairs as independent univariate rows.
struct RowRef {
  int sample;
  int channel;
};

std::vector<RowRef> collect_rows(const Dataset& ds) {
  std::vector<RowRef> rows;
  rows.reserve(ds.samples.size() * static_cast<std::size_t>(ds.channels));
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    for (int c = 0; c < ds.samples[i].channels; ++c)
      rows.push_back({static_cast<int>(i), c});
  return rows;
}

}  // namespace

float pretrain_epoch(Model& model, Projector<float>& projector,
                     const Dataset& ds, const PretrainConfig& cfg,
                     AdamW<float>& optimizer, int epoch) {
  if (ds.samples.empty())
    throw std::invalid_argument("pretrain_epoch: empty dataset");
  const int t = model.cfg.tok.input_len;
  if (ds.length != t)
    throw std::invalid_argument("pretrain_epoch: series length " +
                                std::to_string(ds.length) +
                                " != model input length " + std::to_string(t));
  if (cfg.batch_size < 2)
    throw std::invalid_argument("pretrain_epoch: batch size must be >= 2");

  auto rows = collect_rows(ds);
  auto shuffle_rng = make_rng(derive_seed(cfg.seed, std::uint64_t(epoch), 0x53485546));
  std::shuffle(rows.begin(), rows.end(), shuffle_rng);
  auto dropout_rng = make_rng(derive_seed(cfg.seed, std::uint64_t(epoch), 0xd20d20));

  double loss_sum = 0;
  long batches = 0;
  for (std::size_t begin = 0; begin < rows.size(); begin += cfg.batch_size) {
    const int b = static_cast<int>(
        std::min<std::size_t>(cfg.batch_size, rows.size() - begin));
    if (b < 2) {
      log_info("pretrain: skipping degenerate batch of size %d", b);
      continue;
    }
    Tensor x1({b, t}), x2({b, t});
    for (int j = 0; j < b; ++j) {
      const RowRef& r = rows[begin + std::size_t(j)];
      const float* src = ds.samples[std::size_t(r.sample)].channel(r.channel);
      const std::uint64_t row_id =
          std::uint64_t(r.sample) * std::uint64_t(ds.channels) +
          std::uint64_t(r.channel);
      // per-sample, per-view streams: draws do not depend on batch order
      auto rng1 = make_rng(derive_seed(cfg.seed, std::uint64_t(epoch), row_id, 1));
      auto rng2 = make_rng(derive_seed(cfg.seed, std::uint64_t(epoch), row_id, 2));
      auto v1 = random_crop_resize(std::span<const float>(src, std::size_t(t)),
                                   cfg.augment, rng1);
      auto v2 = random_crop_resize(std::span<const float>(src, std::size_t(t)),
                                   cfg.augment, rng2);
      std::copy(v1.begin(), v1.end(), x1.data() + std::size_t(j) * t);
      std::copy(v2.begin(), v2.end(), x2.data() + std::size_t(j) * t);
    }

    Tape tape;
    float loss_value;
    {
      TapeScope<float> scope(tape);
      auto e1 = model.encode(x1, /*train=*/true, dropout_rng);
      auto e2 = model.encode(x2, /*train=*/true, dropout_rng);
      auto sims = pairwise_similarities(projector.forward(e1), projector.forward(e2));
      auto loss = info_nce_loss(sims, cfg.temperature);
      loss_value = loss.item();
      optimizer.zero_grad();
      tape.backward(loss);
    }
    optimizer.step();
    loss_sum += loss_value;
    ++batches;
  }
  return batches ? static_cast<float>(loss_sum / batches) : 0.0f;
}

PretrainResult pretrain_run(Model& model, Projector<float>& projector,
                            const Dataset& ds, const PretrainConfig& cfg,
                            const std::function<void(int, float)>& on_epoch) {
  model.set_requires_grad(true);
  projector.set_requires_grad(true);
  auto params = model.parameters();
  for (auto& p : projector.parameters()) params.push_back(p);
  AdamWConfig oc = cfg.opt;
  oc.lr = cfg.schedule.base_lr;
  AdamW<float> optimizer(params, oc);

  PretrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    optimizer.set_lr(lr_at(cfg.schedule, epoch));
    const float loss = pretrain_epoch(model, projector, ds, cfg, optimizer, epoch);
    result.epoch_losses.push_back(loss);
    if (on_epoch) on_epoch(epoch, loss);
  }
  return result;
}

}  // namespace mantis
