// SPDX-License-Identifier: Apache-2.0
//
// One-epoch AdamW training over a packed stream.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "fimlab/fim.hpp"
#include "fimlab/model.hpp"

namespace fimlab {

struct TrainConfig {
  double peak_lr = 3e-4;
  double warmup_frac = 0.02;
  double final_lr_frac = 0.1;  // cosine floor as a fraction of peak
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;  // matrices only
  double grad_clip = 1.0;     // global L2 norm, 0 disables
  int batch_sequences = 8;
  // 0: batches of batch_sequences. Otherwise the epoch is cut into exactly
  // total_steps batches whose sizes differ by at most one sequence.
  std::int64_t total_steps = 0;
  std::uint64_t seed = 0;
  Objective objective = Objective::kLtr;
};

// Learning rate used at 0-based step `step`.
double scheduled_lr(const TrainConfig& config, std::int64_t step, std::int64_t total_steps);

struct StepMetrics {
  std::int64_t step = 0;  // 1-based
  std::int64_t tokens_seen = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainOutputs {
  std::filesystem::path metrics_csv;  // empty: no log
  std::filesystem::path last_good;    // written on NaN before rethrowing
  std::string config_hash;
  std::function<void(const StepMetrics&)> on_step;
};

// First sequence of each batch plus a final end marker.
std::vector<std::size_t> batch_bounds(const TrainConfig& config, std::size_t num_sequences);

// Exactly one pass over the stream; asking for more steps than there are
// sequences raises StreamExhausted. The returned checkpoint carries the
// objective tag from the config.
template <typename T>
ModelCheckpoint<T> train(const TrainConfig& config, const PackedBatchStream& stream, const ModelCheckpoint<T>& init,
                         const TrainOutputs& outputs = {});

}  // namespace fimlab
