#pragma once

// Downstream classification: embedding extraction with channel concatenation,
// the linear probe on frozen embeddings, the head/scratch/full fine-tuning
// regimes, and prediction with confidences.

#include <functional>
#include <utility>

#include "mantis/adapters.hpp"
#include "mantis/data.hpp"
#include "mantis/model.hpp"
#include "mantis/optim.hpp"
#include "mantis/probe.hpp"

namespace mantis {

enum class Regime { probe, head, scratch, full };

Regime regime_from_name(const std::string& name);
const char* regime_name(Regime r);

struct FinetuneConfig {
  Regime regime = Regime::full;
  LrSchedule schedule;  // base_lr 2e-4, 100 epochs, 10 warm-up
  int batch_size = 64;  // documented large-scale value: 256
  float weight_decay = 0.05f;
  std::uint64_t seed = 0;
  bool train_lcomb = false;
  // optional early exit once the train accuracy stays at/above this level
  float stop_at_train_acc = -1.0f;
};

struct EpochMetrics {
  int epoch = 0;
  float train_loss = 0, train_acc = 0;
  bool has_val = false;
  float val_loss = 0, val_acc = 0;
};

struct FinetuneResult {
  std::vector<EpochMetrics> epochs;
  int best_epoch = 0;  // by val accuracy when a val set exists, else train
  int last_epoch = 0;
};

struct EmbeddingMatrix {
  int n = 0;
  int dim = 0;  // channels_after_adapter * token_dim
  std::vector<float> values;
  std::vector<int> labels;

  const float* row(int i) const { return values.data() + std::size_t(i) * dim; }
};

// Frozen-encoder embeddings: each channel encoded independently, channel
// blocks concatenated in channel index order.
EmbeddingMatrix extract_embeddings(Model& model, const Dataset& ds,
                                   const Adapter* adapter = nullptr);

// Multinomial logistic regression by full-batch gradient descent with L2
// penalty, run until the gradient norm drops below 1e-4 or 5000 iterations.
LinearProbe linear_probe_fit(const EmbeddingMatrix& em, int num_classes,
                             float l2);

std::vector<float> probe_probs(const LinearProbe& p, const float* row);
float probe_accuracy(const LinearProbe& p, const EmbeddingMatrix& em);

struct Prediction {
  std::vector<float> probs;
  int label = 0;
  float confidence = 0;
};

Prediction prediction_from_probs(std::vector<float> probs);
Prediction predict(Model& model, Head<float>& head, const RawSeries& series,
                   const Adapter* adapter = nullptr);

// Stratified 80/20-style split, deterministic under seed; falls back to an
// unstratified split (with a warning) when some class has a single sample.
std::pair<Dataset, Dataset> train_val_split(const Dataset& ds, float fraction,
                                            std::uint64_t seed);

// Cross-entropy fine-tuning under AdamW with the cosine-warmup schedule.
// regime=head freezes the encoder (embeddings are computed once and the head
// trains on them); scratch/full train everything reachable. For scratch the
// caller passes a freshly initialized model. `lcomb_w`, when given with
// train_lcomb, is a (d_new, d) channel combiner trained along with the rest.
FinetuneResult finetune(Model& model, Head<float>& head, const Dataset& train,
                        const Dataset* val, const FinetuneConfig& cfg,
                        Tensor* lcomb_w = nullptr,
                        const std::function<void(const EpochMetrics&)>& on_epoch = {});

// (B, d, T) -> (B, d_new, T), per-time-step linear channel combination;
// gradients flow into w when it is connected.
Tensor lcomb_forward(const Tensor& w, const Tensor& x);

// Inference logits of a whole dataset, row-major (n, K).
std::vector<double> dataset_logits(Model& model, Head<float>& head,
                                   const Dataset& ds,
                                   const Adapter* adapter = nullptr);
std::vector<double> probe_dataset_logits(const LinearProbe& p,
                                         const EmbeddingMatrix& em);

}  // namespace mantis
