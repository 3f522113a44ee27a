#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mao/encoder.hpp"

namespace mao {

// Multi-object contrastive fine-tuning. Defaults are desk scale; the
// reference recipe is batch 128 with adapter rank 256 (full_scale_mode()).
struct TrainConfig {
  double lr_init = 5e-5;
  double lr_decay = 0.93;
  double decay_every = 1.0;  // steps per decay application
  double lr_floor = 1e-6;
  int batch_size = 16;
  int epochs = 1;
  int max_steps = 0;  // > 0 overrides epochs
  double temperature = 0.07;
  int adapter_rank = 4;  // 0 = full fine-tune
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  static TrainConfig full_scale_mode();
  // Desk stand-in for a pretrained backbone: full fine-tuning at a constant,
  // larger rate. Meant for object-level pairs.
  static TrainConfig backbone_mode();
  void validate() const;
  // max(lr_floor, lr_init * lr_decay^(step / decay_every))
  double learning_rate(int step) const;
};

struct TrainPair {
  ImageGrid query;
  std::vector<ImageGrid> gallery_objects;
  std::string instance_id;
};

struct TrainLogRow {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  WeightStore weights;
  std::vector<TrainLogRow> log;
};

// mean(v_1..v_k) / |mean|. Throws for k = 0 or a zero mean.
Descriptor average_pool_objects(std::span<const Descriptor> descriptors);

// Elementwise generalized mean ((1/k) sum (f_i + o)^p)^(1/p) - o with the
// offset o = max(0, -min f) shifting inputs to be nonnegative; the result is
// L2-normalized. p = +infinity gives the elementwise maximum. Throws for p < 1.
Descriptor gem_pool(std::span<const Descriptor> features, double p);

struct InfoNceResult {
  double loss = 0.0;
  Matrix grad;  // dloss / dsim
};

// Symmetric InfoNCE over a B x B similarity matrix whose diagonal holds the
// positives: average of the row-wise and column-wise softmax cross entropies
// at temperature tau. Throws for B < 2 or tau <= 0.
double info_nce_loss(const Matrix& sim, double tau);
InfoNceResult info_nce_with_gradient(const Matrix& sim, double tau);

using TrainProgress = std::function<void(const TrainLogRow&)>;

// AdamW on the trainable tensors (adapter factors when adapter_rank > 0,
// everything otherwise). Adapters are attached first when the store has none.
// Throws with the step index if the loss becomes non-finite.
TrainResult train_stage_a(const WeightStore& weights, std::span<const TrainPair> dataset,
                          const TrainConfig& config, const TrainProgress& progress = {});

// Mean loss over the first (tail = false) or last `window` logged steps.
double running_loss(std::span<const TrainLogRow> log, std::size_t window, bool tail);

// CSV with header "step,lr,loss".
void write_training_log(const std::filesystem::path& path, std::span<const TrainLogRow> log);

}  // namespace mao
