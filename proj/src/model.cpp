// SPDX-License-Identifier: Apache-2.0
#include "fimlab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"
#include "fimlab/random.hpp"

namespace fimlab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::kInvalidConfig, "model: " + m); };
  if (layers < 1 || hidden < 1 || heads < 1 || kv_heads < 1 || ffn_hidden < 1) fail("dimensions must be positive");
  if (hidden % heads != 0) fail("hidden must be divisible by heads");
  if (heads % kv_heads != 0) fail("heads must be divisible by kv_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (vocab_size < 1 || max_context < 1) fail("vocab_size and max_context must be positive");
  if (!(rope_base > 1.0)) fail("rope_base must be > 1");
}

std::string_view to_string(Objective objective) {
  switch (objective) {
    case Objective::kLtr: return "ltr";
    case Objective::kFim: return "fim";
    case Objective::kBulkOnly: return "bulk_only";
  }
  return "ltr";
}

Objective objective_from_string(std::string_view s) {
  if (s == "ltr") return Objective::kLtr;
  if (s == "fim") return Objective::kFim;
  if (s == "bulk_only") return Objective::kBulkOnly;
  throw Error(ErrorKind::kInvalidConfig, "unknown objective: " + std::string(s));
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const int hd = c.head_dim();
  auto add = [this](std::string name, int rows, int cols) {
    tensors_.push_back({std::move(name), rows, cols, total_});
    total_ += static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    total_ = (total_ + kTensorAlignElems - 1) / kTensorAlignElems * kTensorAlignElems;
  };
  add("tok_embedding", c.vocab_size, c.hidden);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn_norm", 1, c.hidden);
    add(p + "wq", c.hidden, c.heads * hd);
    add(p + "wk", c.hidden, c.kv_heads * hd);
    add(p + "wv", c.hidden, c.kv_heads * hd);
    add(p + "wo", c.heads * hd, c.hidden);
    add(p + "ffn_norm", 1, c.hidden);
    add(p + "w_gate", c.hidden, c.ffn_hidden);
    add(p + "w_up", c.hidden, c.ffn_hidden);
    add(p + "w_down", c.ffn_hidden, c.hidden);
  }
  add("final_norm", 1, c.hidden);
  add("lm_head", c.hidden, c.vocab_size);
}

const TensorInfo& ParamLayout::at(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw Error(ErrorKind::kModelMismatch, "no tensor named " + name);
}

template <typename T>
ModelCheckpoint<T>::ModelCheckpoint(ModelConfig config, Objective objective, TrainingMeta meta)
    : config_(config), objective_(objective), meta_(std::move(meta)), layout_(config_), params_(layout_.total()) {}

template <typename T>
ModelCheckpoint<T> ModelCheckpoint<T>::initialized(const ModelConfig& config, Objective objective,
                                                   std::uint64_t seed) {
  ModelCheckpoint ckpt(config, objective);
  ckpt.meta_.seed = seed;
  Rng rng(mix_seed(seed, 0x696e6974));
  const double out_scale = 1.0 / std::sqrt(2.0 * config.layers);
  for (const auto& t : ckpt.layout_.tensors()) {
    T* p = ckpt.params_.data() + t.offset;
    const bool is_norm = t.name.ends_with("norm");
    const bool is_out = t.name.ends_with(".wo") || t.name.ends_with(".w_down");
    const double std = config.init_std * (is_out ? out_scale : 1.0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      p[i] = is_norm ? T(1) : static_cast<T>(std * standard_normal(rng));
    }
  }
  return ckpt;
}

template <typename T>
Eigen::Map<Mat<T>> ModelCheckpoint<T>::tensor(const std::string& name) {
  const auto& t = layout_.at(name);
  return Eigen::Map<Mat<T>>(params_.data() + t.offset, t.rows, t.cols);
}

template <typename T>
Eigen::Map<const Mat<T>> ModelCheckpoint<T>::tensor(const std::string& name) const {
  const auto& t = layout_.at(name);
  return Eigen::Map<const Mat<T>>(params_.data() + t.offset, t.rows, t.cols);
}

template <typename T>
ModelCheckpoint<T> ModelCheckpoint<T>::retagged(Objective objective) const {
  ModelCheckpoint out(config_, objective, meta_);
  out.params_ = params_;
  return out;
}

template <typename T>
template <typename U>
ModelCheckpoint<U> ModelCheckpoint<T>::cast() const {
  ModelCheckpoint<U> out(config_, objective_, meta_);
  std::transform(params_.begin(), params_.end(), out.params().begin(), [](T v) { return static_cast<U>(v); });
  return out;
}

std::vector<std::int32_t> single_segment(std::size_t n) { return std::vector<std::int32_t>(n, 0); }

namespace {

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct Segment {
  int start = 0;
  int length = 0;
};

std::vector<Segment> split_segments(std::span<const std::int32_t> segments, int max_context) {
  std::vector<Segment> out;
  const int n = static_cast<int>(segments.size());
  int start = 0;
  for (int t = 1; t <= n; ++t) {
    if (t == n || segments[static_cast<std::size_t>(t)] != segments[static_cast<std::size_t>(t - 1)]) {
      if (t - start > max_context) {
        throw Error(ErrorKind::kContextOverflow, "segment of " + std::to_string(t - start) +
                                                     " tokens exceeds max_context " + std::to_string(max_context));
      }
      out.push_back({start, t - start});
      start = t;
    }
  }
  return out;
}

// cos/sin of pos * base^(-2i/hd), rows = positions, cols = hd/2.
template <typename T>
void fill_rope(Mat<T>& cos, Mat<T>& sin, int positions, int head_dim, double base) {
  cos.resize(positions, head_dim / 2);
  sin.resize(positions, head_dim / 2);
  for (int p = 0; p < positions; ++p) {
    for (int i = 0; i < head_dim / 2; ++i) {
      const double freq = std::pow(base, -2.0 * i / head_dim);
      cos(p, i) = static_cast<T>(std::cos(p * freq));
      sin(p, i) = static_cast<T>(std::sin(p * freq));
    }
  }
}

template <typename T>
struct RopeTable {
  Mat<T> cos;
  Mat<T> sin;
  RopeTable(int positions, int head_dim, double base) { fill_rope(cos, sin, positions, head_dim, base); }
};

// Rotates each head_dim chunk of every row by its position; inverse rotates by -angle.
template <typename T, typename Derived>
void apply_rope(Eigen::MatrixBase<Derived>& m, std::span<const int> positions, int head_dim, const Mat<T>& rope_cos,
                const Mat<T>& rope_sin, bool inverse) {
  const int half = head_dim / 2;
  const int chunks = static_cast<int>(m.cols()) / head_dim;
  for (int r = 0; r < m.rows(); ++r) {
    const int pos = positions[static_cast<std::size_t>(r)];
    for (int h = 0; h < chunks; ++h) {
      for (int i = 0; i < half; ++i) {
        const T c = rope_cos(pos, i);
        const T s = inverse ? -rope_sin(pos, i) : rope_sin(pos, i);
        T& a = m(r, h * head_dim + 2 * i);
        T& b = m(r, h * head_dim + 2 * i + 1);
        const T x0 = a;
        const T x1 = b;
        a = x0 * c - x1 * s;
        b = x0 * s + x1 * c;
      }
    }
  }
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
struct LayerCache {
  Mat<T> xhat1;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_rms1;
  Mat<T> h1;
  Mat<T> q, k, v;  // q and k after rotation
  std::vector<Mat<T>> probs;  // [segment * heads + head]
  Mat<T> attn;  // concatenated head outputs, N x heads*hd
  Mat<T> xhat2;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_rms2;
  Mat<T> h2;
  Mat<T> gate, up, act;
};

template <typename T>
class Runner {
 public:
  Runner(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens, std::span<const std::int32_t> segments)
      : ckpt_(ckpt),
        cfg_(ckpt.config()),
        tokens_(tokens),
        segs_(split_segments(segments, ckpt.config().max_context)),
        rope_(std::max(1, longest_segment()), cfg_.head_dim(), cfg_.rope_base) {
    if (tokens.size() != segments.size()) throw Error(ErrorKind::kInvalidConfig, "tokens/segments length mismatch");
    for (TokenId id : tokens) {
      if (id < 0 || id >= cfg_.vocab_size) {
        throw Error(ErrorKind::kModelMismatch, "token id " + std::to_string(id) + " outside model vocabulary");
      }
    }
    positions_.resize(tokens.size());
    for (const auto& s : segs_) {
      for (int i = 0; i < s.length; ++i) positions_[static_cast<std::size_t>(s.start + i)] = i;
    }
  }

  Mat<T> forward(bool keep_cache, std::optional<AttentionCapture<T>>* capture) {
    const int n = static_cast<int>(tokens_.size());
    const int d = cfg_.hidden;
    const int hd = cfg_.head_dim();
    const int heads = cfg_.heads;
    const int group = cfg_.heads / cfg_.kv_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    if (capture) {
      *capture = AttentionCapture<T>{cfg_.layers, heads, {}};
      (*capture)->weights.assign(static_cast<std::size_t>(cfg_.layers * heads), Mat<T>::Zero(n, n));
    }

    const auto emb = ckpt_.tensor("tok_embedding");
    Mat<T> x(n, d);
    for (int t = 0; t < n; ++t) x.row(t) = emb.row(tokens_[static_cast<std::size_t>(t)]);

    if (keep_cache) caches_.assign(static_cast<std::size_t>(cfg_.layers), {});
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerCache<T> local;
      LayerCache<T>& c = keep_cache ? caches_[static_cast<std::size_t>(l)] : local;

      rms_norm(x, ckpt_.tensor(p + "attn_norm"), c.xhat1, c.inv_rms1, c.h1);
      c.q = c.h1 * ckpt_.tensor(p + "wq");
      c.k = c.h1 * ckpt_.tensor(p + "wk");
      c.v = c.h1 * ckpt_.tensor(p + "wv");
      apply_rope(c.q, positions_, hd, rope_.cos, rope_.sin, false);
      apply_rope(c.k, positions_, hd, rope_.cos, rope_.sin, false);

      c.attn.setZero(n, heads * hd);
      c.probs.clear();
      for (const auto& s : segs_) {
        for (int h = 0; h < heads; ++h) {
          const int g = h / group;
          Mat<T> scores = c.q.block(s.start, h * hd, s.length, hd) *
                          c.k.block(s.start, g * hd, s.length, hd).transpose() * scale;
          causal_softmax(scores);
          c.attn.block(s.start, h * hd, s.length, hd).noalias() = scores * c.v.block(s.start, g * hd, s.length, hd);
          if (capture) {
            (*capture)->weights[static_cast<std::size_t>(l * heads + h)].block(s.start, s.start, s.length, s.length) =
                scores;
          }
          if (keep_cache) c.probs.push_back(std::move(scores));
        }
      }
      x.noalias() += c.attn * ckpt_.tensor(p + "wo");

      rms_norm(x, ckpt_.tensor(p + "ffn_norm"), c.xhat2, c.inv_rms2, c.h2);
      c.gate = c.h2 * ckpt_.tensor(p + "w_gate");
      c.up = c.h2 * ckpt_.tensor(p + "w_up");
      c.act = c.gate.unaryExpr([](T a) { return silu(a); }).cwiseProduct(c.up);
      x.noalias() += c.act * ckpt_.tensor(p + "w_down");
    }

    rms_norm(x, ckpt_.tensor("final_norm"), xhat_f_, inv_rms_f_, h_f_);
    return h_f_ * ckpt_.tensor("lm_head");
  }

  // dlogits: N x vocab. Requires forward(keep_cache = true).
  ParamVector<T> backward(const Mat<T>& dlogits) {
    const int n = static_cast<int>(tokens_.size());
    const int hd = cfg_.head_dim();
    const int heads = cfg_.heads;
    const int group = cfg_.heads / cfg_.kv_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const auto& layout = ckpt_.layout();
    ParamVector<T> grads(layout.total(), T(0));
    auto grad = [&](const std::string& name) {
      const auto& t = layout.at(name);
      return Eigen::Map<Mat<T>>(grads.data() + t.offset, t.rows, t.cols);
    };

    grad("lm_head").noalias() += h_f_.transpose() * dlogits;
    Mat<T> dh = dlogits * ckpt_.tensor("lm_head").transpose();
    Mat<T> dx = rms_norm_backward(dh, xhat_f_, inv_rms_f_, ckpt_.tensor("final_norm"), grad("final_norm"));

    for (int l = cfg_.layers - 1; l >= 0; --l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const LayerCache<T>& c = caches_[static_cast<std::size_t>(l)];

      // Feed-forward block.
      grad(p + "w_down").noalias() += c.act.transpose() * dx;
      const Mat<T> dact = dx * ckpt_.tensor(p + "w_down").transpose();
      Mat<T> dgate(c.gate.rows(), c.gate.cols());
      Mat<T> dup(c.up.rows(), c.up.cols());
      for (Eigen::Index i = 0; i < c.gate.size(); ++i) {
        const T a = c.gate.data()[i];
        const T sig = T(1) / (T(1) + std::exp(-a));
        dup.data()[i] = dact.data()[i] * a * sig;
        dgate.data()[i] = dact.data()[i] * c.up.data()[i] * sig * (T(1) + a * (T(1) - sig));
      }
      grad(p + "w_gate").noalias() += c.h2.transpose() * dgate;
      grad(p + "w_up").noalias() += c.h2.transpose() * dup;
      Mat<T> dh2 = dgate * ckpt_.tensor(p + "w_gate").transpose();
      dh2.noalias() += dup * ckpt_.tensor(p + "w_up").transpose();
      dx += rms_norm_backward(dh2, c.xhat2, c.inv_rms2, ckpt_.tensor(p + "ffn_norm"), grad(p + "ffn_norm"));

      // Attention block.
      grad(p + "wo").noalias() += c.attn.transpose() * dx;
      const Mat<T> dattn = dx * ckpt_.tensor(p + "wo").transpose();
      Mat<T> dq = Mat<T>::Zero(n, c.q.cols());
      Mat<T> dk = Mat<T>::Zero(n, c.k.cols());
      Mat<T> dv = Mat<T>::Zero(n, c.v.cols());
      std::size_t block = 0;
      for (const auto& s : segs_) {
        for (int h = 0; h < heads; ++h, ++block) {
          const int g = h / group;
          const Mat<T>& prob = c.probs[block];
          const auto dout = dattn.block(s.start, h * hd, s.length, hd);
          dv.block(s.start, g * hd, s.length, hd).noalias() += prob.transpose() * dout;
          Mat<T> dprob = dout * c.v.block(s.start, g * hd, s.length, hd).transpose();
          // softmax backward: dS = P * (dP - rowsum(dP * P))
          const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = dprob.cwiseProduct(prob).rowwise().sum();
          Mat<T> dscores = prob.cwiseProduct(dprob.colwise() - inner) * scale;
          dq.block(s.start, h * hd, s.length, hd).noalias() += dscores * c.k.block(s.start, g * hd, s.length, hd);
          dk.block(s.start, g * hd, s.length, hd).noalias() +=
              dscores.transpose() * c.q.block(s.start, h * hd, s.length, hd);
        }
      }
      apply_rope(dq, positions_, hd, rope_.cos, rope_.sin, true);
      apply_rope(dk, positions_, hd, rope_.cos, rope_.sin, true);
      grad(p + "wq").noalias() += c.h1.transpose() * dq;
      grad(p + "wk").noalias() += c.h1.transpose() * dk;
      grad(p + "wv").noalias() += c.h1.transpose() * dv;
      Mat<T> dh1 = dq * ckpt_.tensor(p + "wq").transpose();
      dh1.noalias() += dk * ckpt_.tensor(p + "wk").transpose();
      dh1.noalias() += dv * ckpt_.tensor(p + "wv").transpose();
      dx += rms_norm_backward(dh1, c.xhat1, c.inv_rms1, ckpt_.tensor(p + "attn_norm"), grad(p + "attn_norm"));
    }

    auto demb = grad("tok_embedding");
    for (int t = 0; t < n; ++t) demb.row(tokens_[static_cast<std::size_t>(t)]) += dx.row(t);
    return grads;
  }

 private:
  int longest_segment() const {
    int m = 0;
    for (const auto& s : segs_) m = std::max(m, s.length);
    return m;
  }

  template <typename Gain>
  void rms_norm(const Mat<T>& x, const Gain& gain, Mat<T>& xhat, Eigen::Matrix<T, Eigen::Dynamic, 1>& inv_rms,
                Mat<T>& out) const {
    const T eps = static_cast<T>(cfg_.norm_eps);
    inv_rms = ((x.array().square().rowwise().sum() / static_cast<T>(x.cols())) + eps).rsqrt();
    xhat = x.array().colwise() * inv_rms.array();
    out = xhat.array().rowwise() * gain.row(0).array();
  }

  // xhat = x / rms(x); y = gain * xhat. Returns dL/dx and accumulates dL/dgain.
  template <typename Gain, typename GainGrad>
  Mat<T> rms_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Eigen::Matrix<T, Eigen::Dynamic, 1>& inv_rms,
                           const Gain& gain, GainGrad&& dgain) const {
    dgain.row(0) += dy.cwiseProduct(xhat).colwise().sum();
    const Mat<T> dxhat = dy.array().rowwise() * gain.row(0).array();
    const Eigen::Matrix<T, Eigen::Dynamic, 1> proj =
        dxhat.cwiseProduct(xhat).rowwise().sum() / static_cast<T>(xhat.cols());
    const Mat<T> centered = dxhat.array() - (xhat.array().colwise() * proj.array());
    return centered.array().colwise() * inv_rms.array();
  }

  static void causal_softmax(Mat<T>& scores) {
    const Eigen::Index n = scores.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
      auto live = scores.row(i).head(i + 1).array();
      const T mx = live.maxCoeff();
      live = (live - mx).exp();
      live /= live.sum();
      scores.row(i).tail(n - i - 1).setZero();
    }
  }

  const ModelCheckpoint<T>& ckpt_;
  const ModelConfig& cfg_;
  std::span<const TokenId> tokens_;
  std::vector<Segment> segs_;
  std::vector<int> positions_;
  RopeTable<T> rope_;
  std::vector<LayerCache<T>> caches_;
  Mat<T> xhat_f_;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_rms_f_;
  Mat<T> h_f_;
};

// Mean masked cross-entropy and (optionally) its gradient w.r.t. the logits.
template <typename T>
T cross_entropy(const Mat<T>& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> mask,
                std::size_t& counted, Mat<T>* dlogits) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index v = logits.cols();
  counted = 0;
  for (Eigen::Index t = 0; t + 1 < n; ++t) counted += mask[static_cast<std::size_t>(t)] ? 1 : 0;
  if (counted == 0) throw Error(ErrorKind::kEmptyLossMask, "no position carries loss");
  if (dlogits) dlogits->setZero(n, v);
  const T inv_count = T(1) / static_cast<T>(counted);
  T total = 0;
  for (Eigen::Index t = 0; t + 1 < n; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const T mx = logits.row(t).maxCoeff();
    const T lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
    const TokenId target = tokens[static_cast<std::size_t>(t + 1)];
    total += lse - logits(t, target);
    if (dlogits) {
      dlogits->row(t) = ((logits.row(t).array() - lse).exp() * inv_count).matrix();
      (*dlogits)(t, target) -= inv_count;
    }
  }
  const T loss = total * inv_count;
  if (!std::isfinite(static_cast<double>(loss))) throw Error(ErrorKind::kNaNDetected, "non-finite loss");
  return loss;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens,
                         std::span<const std::int32_t> segments, bool capture_attention) {
  Runner<T> runner(ckpt, tokens, segments);
  ForwardResult<T> out;
  out.logits = runner.forward(false, capture_attention ? &out.attention : nullptr);
  return out;
}

template <typename T>
LossAndGrads<T> loss_and_grads(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens,
                               std::span<const std::int32_t> segments, std::span<const std::uint8_t> loss_mask) {
  if (loss_mask.size() != tokens.size()) throw Error(ErrorKind::kInvalidConfig, "loss mask length mismatch");
  Runner<T> runner(ckpt, tokens, segments);
  const Mat<T> logits = runner.forward(true, nullptr);
  LossAndGrads<T> out;
  Mat<T> dlogits;
  out.loss = cross_entropy(logits, tokens, loss_mask, out.counted, &dlogits);
  out.grads = runner.backward(dlogits);
  for (const T g : out.grads) {
    if (!std::isfinite(static_cast<double>(g))) throw Error(ErrorKind::kNaNDetected, "non-finite gradient");
  }
  return out;
}

template <typename T>
T mean_loss(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> tokens, std::span<const std::int32_t> segments,
            std::span<const std::uint8_t> loss_mask) {
  if (loss_mask.size() != tokens.size()) throw Error(ErrorKind::kInvalidConfig, "loss mask length mismatch");
  Runner<T> runner(ckpt, tokens, segments);
  const Mat<T> logits = runner.forward(false, nullptr);
  std::size_t counted = 0;
  return cross_entropy<T>(logits, tokens, loss_mask, counted, nullptr);
}

template <typename T>
std::vector<double> softmax_row(const T* logits, int n, double temperature) {
  std::vector<double> out(static_cast<std::size_t>(n));
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(logits[i]) / temperature);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    sum += out[static_cast<std::size_t>(i)];
  }
  for (auto& p : out) p /= sum;
  return out;
}

template <typename T>
DecodeSession<T>::DecodeSession(const ModelCheckpoint<T>& ckpt)
    : ckpt_(ckpt),
      keys_(static_cast<std::size_t>(ckpt.config().layers)),
      values_(static_cast<std::size_t>(ckpt.config().layers)) {
  const auto& c = ckpt.config();
  for (int l = 0; l < c.layers; ++l) {
    keys_[static_cast<std::size_t>(l)].resize(c.max_context, c.kv_heads * c.head_dim());
    values_[static_cast<std::size_t>(l)].resize(c.max_context, c.kv_heads * c.head_dim());
  }
  fill_rope(rope_cos_, rope_sin_, c.max_context, c.head_dim(), c.rope_base);
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> DecodeSession<T>::step(TokenId token) {
  const auto& c = ckpt_.config();
  if (position_ >= c.max_context) throw Error(ErrorKind::kContextOverflow, "decode past max_context");
  if (token < 0 || token >= c.vocab_size) throw Error(ErrorKind::kModelMismatch, "token outside vocabulary");
  const int hd = c.head_dim();
  const int group = c.heads / c.kv_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const T eps = static_cast<T>(c.norm_eps);
  const int pos = position_;
  const int len = pos + 1;
  const std::array<int, 1> positions{pos};

  auto norm = [&](const RowVec<T>& x, const std::string& gain) {
    const T inv = T(1) / std::sqrt(x.squaredNorm() / static_cast<T>(x.size()) + eps);
    return RowVec<T>((x * inv).cwiseProduct(ckpt_.tensor(gain).row(0)));
  };

  RowVec<T> x = ckpt_.tensor("tok_embedding").row(token);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& kc = keys_[static_cast<std::size_t>(l)];
    auto& vc = values_[static_cast<std::size_t>(l)];
    const RowVec<T> h = norm(x, p + "attn_norm");
    RowVec<T> q = h * ckpt_.tensor(p + "wq");
    RowVec<T> k = h * ckpt_.tensor(p + "wk");
    apply_rope(q, positions, hd, rope_cos_, rope_sin_, false);
    apply_rope(k, positions, hd, rope_cos_, rope_sin_, false);
    kc.row(pos) = k;
    vc.row(pos) = h * ckpt_.tensor(p + "wv");

    RowVec<T> attn(c.heads * hd);
    for (int head = 0; head < c.heads; ++head) {
      const int g = head / group;
      RowVec<T> scores = (kc.block(0, g * hd, len, hd) * q.segment(head * hd, hd).transpose()).transpose() * scale;
      const T mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      attn.segment(head * hd, hd) = scores * vc.block(0, g * hd, len, hd);
    }
    x += attn * ckpt_.tensor(p + "wo");
    const RowVec<T> h2 = norm(x, p + "ffn_norm");
    const RowVec<T> gate = h2 * ckpt_.tensor(p + "w_gate");
    const RowVec<T> up = h2 * ckpt_.tensor(p + "w_up");
    const RowVec<T> act = gate.unaryExpr([](T a) { return silu(a); }).cwiseProduct(up);
    x += act * ckpt_.tensor(p + "w_down");
  }
  ++position_;
  return norm(x, "final_norm") * ckpt_.tensor("lm_head");
}

namespace {

TokenId argmax_lowest(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

}  // namespace

template <typename T>
TokenSeq generate(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> prompt, int count,
                  const DecodeOptions& options) {
  if (count < 0) throw Error(ErrorKind::kInvalidConfig, "negative generation length");
  if (count == 0) return {};
  if (prompt.empty()) throw Error(ErrorKind::kEmptyInput, "generation needs a non-empty prompt");
  if (static_cast<int>(prompt.size()) + count > ckpt.config().max_context) {
    throw Error(ErrorKind::kContextOverflow, "prompt + generation exceeds max_context");
  }
  DecodeSession<T> session(ckpt);
  Eigen::Matrix<T, 1, Eigen::Dynamic> logits;
  for (TokenId t : prompt) logits = session.step(t);

  Rng rng(options.seed);
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const auto probs = softmax_row(logits.data(), static_cast<int>(logits.size()), options.temperature);
    TokenId next = argmax_lowest(probs);
    if (options.mode == DecodeMode::kTopK) {
      std::vector<int> order(probs.size());
      for (std::size_t j = 0; j < order.size(); ++j) order[j] = static_cast<int>(j);
      const auto k = static_cast<std::size_t>(std::clamp(options.k, 1, static_cast<int>(probs.size())));
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](int a, int b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
      double mass = 0.0;
      for (std::size_t j = 0; j < k; ++j) mass += probs[static_cast<std::size_t>(order[j])];
      double u = uniform01(rng) * mass;
      next = static_cast<TokenId>(order[k - 1]);
      for (std::size_t j = 0; j < k; ++j) {
        u -= probs[static_cast<std::size_t>(order[j])];
        if (u < 0.0) {
          next = static_cast<TokenId>(order[j]);
          break;
        }
      }
    }
    out.push_back(next);
    if (i + 1 < count) logits = session.step(next);
  }
  return out;
}

template <typename T>
std::vector<double> token_distribution(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> context) {
  if (context.empty()) throw Error(ErrorKind::kEmptyInput, "empty context");
  const auto segs = single_segment(context.size());
  const auto result = forward(ckpt, context, segs, false);
  const auto last = result.logits.rows() - 1;
  return softmax_row(result.logits.row(last).data(), static_cast<int>(result.logits.cols()));
}

namespace {

constexpr char kMagic[8] = {'F', 'I', 'M', 'L', 'A', 'B', 'C', 'K'};

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},         {"hidden", c.hidden},         {"heads", c.heads},
          {"kv_heads", c.kv_heads},     {"ffn_hidden", c.ffn_hidden}, {"vocab_size", c.vocab_size},
          {"max_context", c.max_context}, {"rope_base", c.rope_base}, {"norm_eps", c.norm_eps},
          {"init_std", c.init_std}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.kv_heads = j.at("kv_heads");
  c.ffn_hidden = j.at("ffn_hidden");
  c.vocab_size = j.at("vocab_size");
  c.max_context = j.at("max_context");
  c.rope_base = j.at("rope_base");
  c.norm_eps = j.at("norm_eps");
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

template <typename T>
constexpr std::string_view dtype_name() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

std::pair<nlohmann::json, std::size_t> read_header(const std::string& bytes, const std::filesystem::path& path) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw Error(ErrorKind::kIo, path.string() + " is not a checkpoint");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (16 + len > bytes.size()) throw Error(ErrorKind::kIo, "truncated checkpoint header");
  return {nlohmann::json::parse(bytes.substr(16, len)), 16 + len};
}

}  // namespace

template <typename T>
void save_checkpoint(const ModelCheckpoint<T>& ckpt, const std::filesystem::path& path) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : ckpt.layout().tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", t.offset}});
  }
  const nlohmann::json header = {
      {"format", "fimlab-checkpoint"},
      {"version", 1},
      {"tool_version", kToolVersion},
      {"dtype", dtype_name<T>()},
      {"objective", to_string(ckpt.objective())},
      {"config", config_to_json(ckpt.config())},
      {"meta",
       {{"tokens_seen", ckpt.meta().tokens_seen},
        {"steps", ckpt.meta().steps},
        {"seed", ckpt.meta().seed},
        {"config_hash", ckpt.meta().config_hash}}},
      {"tensors", tensors},
  };
  const std::string head = header.dump();
  std::string bytes(kMagic, 8);
  const std::uint64_t len = head.size();
  bytes.append(reinterpret_cast<const char*>(&len), 8);
  bytes += head;
  bytes.append(reinterpret_cast<const char*>(ckpt.params().data()), ckpt.params().size() * sizeof(T));
  write_file_atomic(path, bytes);
}

std::string checkpoint_dtype(const std::filesystem::path& path) {
  return read_header(read_file(path), path).first.at("dtype");
}

template <typename T>
ModelCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto [header, data_start] = read_header(bytes, path);
  TrainingMeta meta;
  const auto& m = header.at("meta");
  meta.tokens_seen = m.at("tokens_seen");
  meta.steps = m.at("steps");
  meta.seed = m.at("seed");
  meta.config_hash = m.at("config_hash");
  const std::string dtype = header.at("dtype");
  ModelCheckpoint<T> ckpt(config_from_json(header.at("config")), objective_from_string(header.at("objective").get<std::string>()),
                          meta);
  const std::size_t count = ckpt.params().size();
  const std::size_t width = dtype == "f64" ? 8 : 4;
  if (bytes.size() - data_start != count * width) {
    throw Error(ErrorKind::kModelMismatch, "checkpoint payload does not match its config");
  }
  const char* src = bytes.data() + data_start;
  for (std::size_t i = 0; i < count; ++i) {
    if (width == 8) {
      double v;
      std::memcpy(&v, src + i * 8, 8);
      ckpt.params()[i] = static_cast<T>(v);
    } else {
      float v;
      std::memcpy(&v, src + i * 4, 4);
      ckpt.params()[i] = static_cast<T>(v);
    }
  }
  return ckpt;
}

#define FIMLAB_INSTANTIATE(T)                                                                                     \
  template class ModelCheckpoint<T>;                                                                              \
  template ForwardResult<T> forward(const ModelCheckpoint<T>&, std::span<const TokenId>,                          \
                                    std::span<const std::int32_t>, bool);                                         \
  template LossAndGrads<T> loss_and_grads(const ModelCheckpoint<T>&, std::span<const TokenId>,                    \
                                          std::span<const std::int32_t>, std::span<const std::uint8_t>);          \
  template T mean_loss(const ModelCheckpoint<T>&, std::span<const TokenId>, std::span<const std::int32_t>,        \
                       std::span<const std::uint8_t>);                                                            \
  template class DecodeSession<T>;                                                                                \
  template TokenSeq generate(const ModelCheckpoint<T>&, std::span<const TokenId>, int, const DecodeOptions&);     \
  template std::vector<double> token_distribution(const ModelCheckpoint<T>&, std::span<const TokenId>);           \
  template std::vector<double> softmax_row(const T*, int, double);                                                \
  template void save_checkpoint(const ModelCheckpoint<T>&, const std::filesystem::path&);                         \
  template ModelCheckpoint<T> load_checkpoint(const std::filesystem::path&);

FIMLAB_INSTANTIATE(float)
FIMLAB_INSTANTIATE(double)
#undef FIMLAB_INSTANTIATE

template ModelCheckpoint<double> ModelCheckpoint<float>::cast<double>() const;
template ModelCheckpoint<float> ModelCheckpoint<double>::cast<float>() const;

}  // namespace fimlab
