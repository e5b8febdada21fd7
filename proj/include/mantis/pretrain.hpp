#pragma once

// Contrastive pre-training: RandomCropResize views, projector, cosine
// similarity matrix, InfoNCE at fixed temperature, epoch loop.

#include <functional>
#include <span>

#include "mantis/data.hpp"
#include "mantis/model.hpp"
#include "mantis/optim.hpp"

namespace mantis {

struct AugmentConfig {
  float crop_min = 0.0f;
  float crop_max = 0.20f;
};

struct PretrainConfig {
  AugmentConfig augment;
  float temperature = 0.1f;
  int batch_size = 64;  // documented large-scale value: 2048
  int epochs = 100;
  LrSchedule schedule;
  AdamWConfig opt;
  std::uint64_t seed = 0;
};

// Keeps a contiguous window of round((1-crop)*len) steps starting at `start`
// and stretches it back to the original length.
std::vector<float> random_crop_resize(std::span<const float> x, float crop,
                                      int start);

// Draws the crop fraction uniformly from [crop_min, crop_max] and the window
// start uniformly over valid positions.
std::vector<float> random_crop_resize(std::span<const float> x,
                                      const AugmentConfig& cfg,
                                      std::mt19937& rng);

// a.b / ((|a| + eps) (|b| + eps))
float cosine_sim(std::span<const float> a, std::span<const float> b);

// Row-normalized projections -> (b, b) cosine similarity matrix (in-graph).
Tensor pairwise_similarities(const Tensor& view1, const Tensor& view2);

// Mean over rows of cross-entropy of row i / T against target i.
Tensor info_nce_loss(const Tensor& sims, float temperature);

// One pass over the dataset (channels are treated as independent univariate
// rows). Uses the optimizer's current learning rate; batches of size 1 are
// skipped. Returns the mean batch loss.
float pretrain_epoch(Model& model, Projector<float>& projector,
                     const Dataset& ds, const PretrainConfig& cfg,
                     AdamW<float>& optimizer, int epoch);

struct PretrainResult {
  std::vector<float> epoch_losses;
};

PretrainResult pretrain_run(
    Model& model, Projector<float>& projector, const Dataset& ds,
    const PretrainConfig& cfg,
    const std::function<void(int, float)>& on_epoch = {});

}  // namespace mantis
