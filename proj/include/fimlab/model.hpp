// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-norm decoder-only transformer (RMSNorm, rotary positions,
// grouped-query attention, SwiGLU) with a hand-written backward pass.
//
// A batch is one flat token array plus a per-token segment id. Attention
// never crosses a segment change and rotary positions restart at 0 at every
// segment start, so packed documents and independent sequences are both just
// segments.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fimlab/tokenizer.hpp"

namespace fimlab {

struct ModelConfig {
  int layers = 4;
  int hidden = 128;
  int heads = 4;
  int kv_heads = 2;
  int ffn_hidden = 512;
  int vocab_size = 260;
  int max_context = 512;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  int head_dim() const { return hidden / heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Objective { kLtr, kFim, kBulkOnly };

std::string_view to_string(Objective objective);
Objective objective_from_string(std::string_view s);

struct TrainingMeta {
  std::int64_t tokens_seen = 0;
  std::int64_t steps = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
  bool is_matrix() const { return rows > 1 && cols > 1; }
};

// Flat parameter storage. Every tensor starts on a 64-byte boundary so the
// vectorized kernels see the same alignment on every run.
template <typename T>
using ParamVector = std::vector<T, Eigen::aligned_allocator<T>>;

inline constexpr std::size_t kTensorAlignElems = 16;

// Named views into one flat parameter (or gradient) array.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  std::span<const TensorInfo> tensors() const { return tensors_; }
  const TensorInfo& at(const std::string& name) const;
  std::size_t total() const { return total_; }  // padding included

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
class ModelCheckpoint {
 public:
  ModelCheckpoint(ModelConfig config, Objective objective, TrainingMeta meta = {});

  // Small-normal init; output projections scaled by 1/sqrt(2*layers), norm gains at 1.
  static ModelCheckpoint initialized(const ModelConfig& config, Objective objective, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Objective objective() const { return objective_; }
  const ParamLayout& layout() const { return layout_; }
  TrainingMeta& meta() { return meta_; }
  const TrainingMeta& meta() const { return meta_; }

  ParamVector<T>& params() { return params_; }
  const ParamVector<T>& params() const { return params_; }

  Eigen::Map<Mat<T>> tensor(const std::string& name);
  Eigen::Map<const Mat<T>> tensor(const std::string& name) const;

  // Same weights and config under a different objective tag (used when a
  // training run finishes).
  ModelCheckpoint retagged(Objective objective) const;

  template <typename U>
  ModelCheckpoint<U> cast() const;

 private:
  ModelConfig config_;
  Objective objective_;
  TrainingMeta meta_;
  ParamLayout layout_;
  ParamVector<T> params_;
};

// Attention rows for every (layer, head): weights[layer * heads + head] is an
// N x N matrix, zero outside the causal/segment mask.
template <typename T>
struct AttentionCapture {
  int layers = 0;
  int heads = 0;
  std::vector<Mat<T>> weights;

  const Mat<T>& at(int layer, int head) const { return weights[static_cast<std::size_t>(layer * heads + head)]; }
};

template <typename T>
struct ForwardResult {
  Mat<T> logits;  // N x vocab
  std::optional<AttentionCapture<T>> attention;
};

// Uniform single-segment ids for a standalone sequence.
std::vector<std::int32_t> single_segment(std::size_t n);

template <typename T>
ForwardResult<T> forward(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens,
                         std::span<const std::int32_t> segments, bool capture_attention = false);

template <typename T>
struct LossAndGrads {
  T loss{};
  std::size_t counted = 0;
  ParamVector<T> grads;  // same layout as the parameters
};

// loss_mask[t] != 0 means position t is trained to predict tokens[t + 1].
// The loss is the mean cross-entropy over those positions.
template <typename T>
LossAndGrads<T> loss_and_grads(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens,
                               std::span<const std::int32_t> segments, std::span<const std::uint8_t> loss_mask);

// Loss only; no activations are retained.
template <typename T>
T mean_loss(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens, std::span<const std::int32_t> segments,
            std::span<const std::uint8_t> loss_mask);

enum class DecodeMode { kGreedy, kTopK };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  int k = 40;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// KV-cached single-sequence decoder.
template <typename T>
class DecodeSession {
 public:
  explicit DecodeSession(const ModelCheckpoint<T>& ckpt);

  // Feeds one token and returns the logits for the next position.
  Eigen::Matrix<T, 1, Eigen::Dynamic> step(TokenId token);
  int length() const { return position_; }

 private:
  const ModelCheckpoint<T>& ckpt_;
  int position_ = 0;
  std::vector<Mat<T>> keys_;
  std::vector<Mat<T>> values_;
  Mat<T> rope_cos_;
  Mat<T> rope_sin_;
};

template <typename T>
TokenSeq generate(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> prompt, int count,
                  const DecodeOptions& options = {});

// Softmax of the final-position logits.
template <typename T>
std::vector<double> token_distribution(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> context);

// Row-wise stable softmax of logits scaled by 1/temperature.
template <typename T>
std::vector<double> softmax_row(const T* logits, int n, double temperature = 1.0);

// Self-describing binary: "FIMLABCK", u64 header length, JSON header, raw
// little-endian tensors in layout order.
template <typename T>
void save_checkpoint(const ModelCheckpoint<T>& ckpt, const std::filesystem::path& path);

template <typename T>
ModelCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

std::string checkpoint_dtype(const std::filesystem::path& path);

}  // namespace fimlab
