// SPDX-License-Identifier: Apache-2.0
#include "fimlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"

namespace fimlab {

double scheduled_lr(const TrainConfig& config, std::int64_t step, std::int64_t total_steps) {
  const std::int64_t warmup =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(config.warmup_frac * total_steps)));
  if (step < warmup) return config.peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup));
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return config.peak_lr * (config.final_lr_frac + (1.0 - config.final_lr_frac) * cosine);
}

std::vector<std::size_t> batch_bounds(const TrainConfig& config, std::size_t num_sequences) {
  if (config.batch_sequences < 1) throw Error(ErrorKind::kInvalidConfig, "batch_sequences must be >= 1");
  if (config.total_steps < 0) throw Error(ErrorKind::kInvalidConfig, "total_steps must be >= 0");
  std::vector<std::size_t> bounds;
  if (config.total_steps == 0) {
    const auto b = static_cast<std::size_t>(config.batch_sequences);
    for (std::size_t s = 0; s < num_sequences; s += b) bounds.push_back(s);
  } else {
    const auto steps = static_cast<std::size_t>(config.total_steps);
    if (steps > num_sequences) {
      throw Error(ErrorKind::kStreamExhausted, std::to_string(steps) + " steps requested but the stream holds " +
                                                   std::to_string(num_sequences) + " sequences");
    }
    for (std::size_t s = 0; s < steps; ++s) bounds.push_back(s * num_sequences / steps);
  }
  bounds.push_back(num_sequences);
  return bounds;
}

template <typename T>
ModelCheckpoint<T> train(const TrainConfig& config, const PackedBatchStream& stream, const ModelCheckpoint<T>& init,
                         const TrainOutputs& outputs) {
  if (stream.vocab_size != init.config().vocab_size) {
    throw Error(ErrorKind::kModelMismatch, "stream vocabulary differs from the model's");
  }
  if (stream.seq_len > init.config().max_context) {
    throw Error(ErrorKind::kContextOverflow, "stream sequences exceed the model context");
  }
  const auto bounds = batch_bounds(config, stream.num_sequences());
  const auto total = static_cast<std::int64_t>(bounds.size()) - 1;

  ModelCheckpoint<T> ckpt = init.retagged(config.objective);
  ckpt.meta().seed = config.seed;
  ckpt.meta().config_hash = outputs.config_hash;
  if (total == 0) return ckpt;

  std::ofstream metrics;
  if (!outputs.metrics_csv.empty()) {
    metrics.open(outputs.metrics_csv);
    if (!metrics) throw Error(ErrorKind::kIo, "cannot write " + outputs.metrics_csv.string());
    metrics << "step,tokens_seen,loss,lr,objective,config_hash,tool_version\n";
  }

  ParamVector<T>& params = ckpt.params();
  std::vector<T> m(params.size(), T{0});
  std::vector<T> v(params.size(), T{0});
  std::vector<std::uint8_t> decays(params.size(), 0);
  for (const auto& t : ckpt.layout().tensors()) {
    if (t.is_matrix()) std::fill_n(decays.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 1);
  }

  for (std::int64_t step = 0; step < total; ++step) {
    const std::size_t first = bounds[static_cast<std::size_t>(step)];
    const std::size_t count = bounds[static_cast<std::size_t>(step) + 1] - first;
    const Batch batch = make_batch(stream, first, count);
    const auto tokens = static_cast<std::int64_t>(count) * stream.seq_len;
    const double lr = scheduled_lr(config, step, total);
    if (std::none_of(batch.loss_mask.begin(), batch.loss_mask.end(), [](std::uint8_t m) { return m != 0; })) {
      // A tail batch of padding carries no loss; the step still counts.
      ckpt.meta().tokens_seen += tokens;
      ckpt.meta().steps = step + 1;
      continue;
    }
    LossAndGrads<T> lg;
    try {
      lg = loss_and_grads(ckpt, batch.tokens, batch.segments, batch.loss_mask);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kNaNDetected && !outputs.last_good.empty()) save_checkpoint(ckpt, outputs.last_good);
      if (e.kind() == ErrorKind::kNaNDetected) {
        throw Error(ErrorKind::kNaNDetected, std::string(e.what()) + " at step " + std::to_string(step + 1));
      }
      throw;
    }

    double norm2 = 0.0;
    for (T g : lg.grads) norm2 += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(norm2);
    const double clip = config.grad_clip > 0.0 && norm > config.grad_clip ? config.grad_clip / norm : 1.0;

    const double t = static_cast<double>(step + 1);
    const T b1 = static_cast<T>(config.beta1);
    const T b2 = static_cast<T>(config.beta2);
    const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(config.beta1, t)));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(config.beta2, t)));
    const T step_lr = static_cast<T>(lr);
    const T decay = static_cast<T>(lr * config.weight_decay);
    const T eps = static_cast<T>(config.adam_eps);
    const T scale = static_cast<T>(clip);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const T g = lg.grads[i] * scale;
      m[i] = b1 * m[i] + (T{1} - b1) * g;
      v[i] = b2 * v[i] + (T{1} - b2) * g * g;
      const T update = (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
      if (decays[i]) params[i] -= decay * params[i];
      params[i] -= step_lr * update;
    }

    ckpt.meta().tokens_seen += tokens;
    ckpt.meta().steps = step + 1;
    const StepMetrics sm{step + 1, ckpt.meta().tokens_seen, static_cast<double>(lg.loss), lr};
    if (metrics.is_open()) {
      metrics << sm.step << ',' << sm.tokens_seen << ',' << sm.loss << ',' << sm.lr << ','
              << to_string(config.objective) << ',' << outputs.config_hash << ',' << kToolVersion << '\n';
    }
    if (outputs.on_step) outputs.on_step(sm);
  }
  return ckpt;
}

template ModelCheckpoint<float> train(const TrainConfig&, const PackedBatchStream&, const ModelCheckpoint<float>&,
                                      const TrainOutputs&);
template ModelCheckpoint<double> train(const TrainConfig&, const PackedBatchStream&, const ModelCheckpoint<double>&,
                                       const TrainOutputs&);

}  // namespace fimlab
