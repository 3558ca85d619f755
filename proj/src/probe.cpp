// SPDX-License-Identifier: Apache-2.0
#include "fimlab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"
#include "fimlab/random.hpp"

namespace fimlab {

double SparseDist::prob(TokenId id) const {
  for (const auto& [t, p] : entries) {
    if (t == id) return p;
  }
  return 0.0;
}

SparseDist topk_renormalize(std::span<const double> dist, int k) {
  if (k < 1) throw Error(ErrorKind::kInvalidConfig, "k must be >= 1");
  if (dist.empty()) throw Error(ErrorKind::kInvalidDistribution, "empty distribution");
  double total = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw Error(ErrorKind::kInvalidDistribution, "negative or non-finite mass");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw Error(ErrorKind::kInvalidDistribution, "mass does not sum to 1");
  std::vector<TokenId> idx(dist.size());
  std::iota(idx.begin(), idx.end(), TokenId{0});
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), dist.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(), [&](TokenId a, TokenId b) {
    const double pa = dist[static_cast<std::size_t>(a)];
    const double pb = dist[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  double kept = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept += dist[static_cast<std::size_t>(idx[i])];
  SparseDist out;
  out.entries.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const double p = dist[static_cast<std::size_t>(idx[i])];
    out.entries.emplace_back(idx[i], kept > 0.0 ? p / kept : 0.0);
  }
  return out;
}

template <typename T>
SpanProbability span_probability_from_logits(const Mat<T>& logits, std::size_t first_row,
                                             std::span<const TokenId> target, int k, double temperature) {
  if (target.empty()) throw Error(ErrorKind::kEmptyInput, "empty target");
  SpanProbability out;
  out.p_z = 1.0;
  const int vocab = static_cast<int>(logits.cols());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto dist = softmax_row<T>(logits.row(static_cast<Eigen::Index>(first_row + i)).data(), vocab, temperature);
    const double q = topk_renormalize(dist, k).prob(target[i]);
    out.q.push_back(q);
    out.supported.push_back(q > 0.0 ? 1 : 0);
    out.p_z *= q;
  }
  return out;
}

template <typename T>
SpanProbability span_probability(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> context,
                                 std::span<const TokenId> target, int k, double temperature) {
  if (target.empty()) throw Error(ErrorKind::kEmptyInput, "empty target");
  if (context.empty()) throw Error(ErrorKind::kEmptyInput, "span probability needs a non-empty context");
  TokenSeq seq(context.begin(), context.end());
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  const auto fr = forward(ckpt, seq, single_segment(seq.size()));
  return span_probability_from_logits(fr.logits, context.size() - 1, target, k, temperature);
}

bool is_extractable(double p_z, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error(ErrorKind::kInvalidConfig, "threshold must lie in (0, 1]");
  return p_z >= threshold;
}

double per_token_bar(double threshold, int target_len) {
  return std::pow(threshold, 1.0 / static_cast<double>(target_len));
}

double rouge_l(std::span<const TokenId> reference, std::span<const TokenId> candidate) {
  if (reference.empty()) throw Error(ErrorKind::kEmptyInput, "empty reference");
  if (candidate.empty()) return 0.0;
  std::vector<std::size_t> prev(candidate.size() + 1, 0);
  std::vector<std::size_t> cur(candidate.size() + 1, 0);
  for (TokenId r : reference) {
    for (std::size_t j = 1; j <= candidate.size(); ++j) {
      cur[j] = r == candidate[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev.back());
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

namespace {

template <typename T>
std::vector<double> nll_rows(const Mat<T>& logits, std::size_t first_row, std::span<const TokenId> target) {
  std::vector<double> out;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(first_row + i)).template cast<double>();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    out.push_back(lse - row(target[i]));
  }
  return out;
}

double perplexity_of(const std::vector<double>& nll) {
  return std::exp(std::accumulate(nll.begin(), nll.end(), 0.0) / static_cast<double>(nll.size()));
}

}  // namespace

template <typename T>
TeacherForcedNll teacher_forced_nll(const ModelCheckpoint<T>& ckpt, std::span<const TokenId> prompt,
                                    std::span<const TokenId> target) {
  if (target.empty()) throw Error(ErrorKind::kEmptyInput, "empty target");
  if (prompt.empty()) throw Error(ErrorKind::kEmptyInput, "teacher forcing needs a non-empty prompt");
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  const auto fr = forward(ckpt, seq, single_segment(seq.size()));
  TeacherForcedNll out;
  out.nll = nll_rows(fr.logits, prompt.size() - 1, target);
  out.perplexity = perplexity_of(out.nll);
  return out;
}

std::pair<double, double> wilson_interval(std::int64_t successes, std::int64_t trials, double confidence) {
  if (trials < 1) throw Error(ErrorKind::kEmptyInput, "no trials");
  if (successes < 0 || successes > trials) throw Error(ErrorKind::kInvalidConfig, "successes outside [0, trials]");
  if (!(confidence > 0.0 && confidence < 1.0)) throw Error(ErrorKind::kInvalidConfig, "confidence outside (0, 1)");
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + confidence / 2.0);
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z / denom * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
  const double low = successes == 0 ? 0.0 : std::max(0.0, center - half);
  const double high = successes == trials ? 1.0 : std::min(1.0, center + half);
  return {low, high};
}

RateWithCI rate_with_ci(std::int64_t successes, std::int64_t trials, double confidence) {
  RateWithCI r;
  r.successes = successes;
  r.trials = trials;
  if (trials == 0) return r;
  r.rate = static_cast<double>(successes) / static_cast<double>(trials);
  std::tie(r.ci_low, r.ci_high) = wilson_interval(successes, trials, confidence);
  r.ci_low = std::min(r.ci_low, r.rate);
  r.ci_high = std::max(r.ci_high, r.rate);
  return r;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[idx[m]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::kInvalidConfig, "spearman inputs differ in length");
  SpearmanResult out;
  out.n = x.size();
  if (out.n < 3) throw Error(ErrorKind::kEmptyInput, "spearman needs at least 3 pairs");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(out.n);
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(out.n);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < out.n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) {
    out.rho = 0.0;
    out.p_value = 1.0;
    return out;
  }
  out.rho = sxy / std::sqrt(sxx * syy);
  const double dof = static_cast<double>(out.n) - 2.0;
  if (std::abs(out.rho) >= 1.0) {
    out.p_value = 0.0;
    return out;
  }
  const double t = out.rho * std::sqrt(dof / (1.0 - out.rho * out.rho));
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(dof), std::abs(t)));
  return out;
}

template <typename T>
AttentionPartition attention_partition(const AttentionCapture<T>& capture, std::span<const Region> regions,
                                       std::span<const std::size_t> queries) {
  if (queries.empty()) throw Error(ErrorKind::kEmptyInput, "no query positions");
  std::array<double, 4> mass{};
  std::size_t rows = 0;
  for (const auto& w : capture.weights) {
    if (static_cast<std::size_t>(w.cols()) != regions.size()) {
      throw Error(ErrorKind::kInvalidConfig, "region map length differs from the attention size");
    }
    for (std::size_t q : queries) {
      for (std::size_t key = 0; key < regions.size(); ++key) {
        const double a = static_cast<double>(w(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(key)));
        if (a == 0.0 && key > q) continue;
        if (regions[key] == Region::kUnlabeled) {
          throw Error(ErrorKind::kUnlabeledPosition, "key position " + std::to_string(key) + " has no region");
        }
        mass[static_cast<std::size_t>(regions[key])] += a;
      }
      ++rows;
    }
  }
  if (rows == 0) throw Error(ErrorKind::kEmptyInput, "capture holds no attention maps");
  AttentionPartition p;
  p.prefix = mass[0] / static_cast<double>(rows);
  p.suffix = mass[1] / static_cast<double>(rows);
  p.sentinels = mass[2] / static_cast<double>(rows);
  p.previous_target = mass[3] / static_cast<double>(rows);
  return p;
}

std::string_view to_string(ProbeMode v) { return v == ProbeMode::kNativeFim ? "native_fim" : "prefix_only"; }

std::string_view to_string(WindowPolicy v) {
  return v == WindowPolicy::kFirstWindow ? "first_window" : "uniform_disjoint";
}

std::string_view to_string(Distractor v) {
  switch (v) {
    case Distractor::kNone: return "none";
    case Distractor::kPrefix: return "prefix";
    case Distractor::kSuffix: return "suffix";
    case Distractor::kBoth: return "both";
  }
  return "none";
}

ProbeMode probe_mode_from_string(std::string_view s) {
  if (s == "prefix_only") return ProbeMode::kPrefixOnly;
  if (s == "native_fim") return ProbeMode::kNativeFim;
  throw Error(ErrorKind::kInvalidConfig, "unknown probe mode: " + std::string(s));
}

WindowPolicy window_policy_from_string(std::string_view s) {
  if (s == "uniform_disjoint") return WindowPolicy::kUniformDisjoint;
  if (s == "first_window") return WindowPolicy::kFirstWindow;
  throw Error(ErrorKind::kInvalidConfig, "unknown window policy: " + std::string(s));
}

Distractor distractor_from_string(std::string_view s) {
  for (Distractor d : {Distractor::kNone, Distractor::kPrefix, Distractor::kSuffix, Distractor::kBoth}) {
    if (s == to_string(d)) return d;
  }
  throw Error(ErrorKind::kInvalidConfig, "unknown distractor: " + std::string(s));
}

int ProbeSpec::footprint() const {
  if (mode == ProbeMode::kNativeFim) return 2 * context_budget + target_len;
  int span = target_len;
  for (int l : sweep_lens) span = std::max(span, l);
  return context_budget + span;
}

void ProbeSpec::validate() const {
  if (context_budget < 1 && mode == ProbeMode::kPrefixOnly) {
    throw Error(ErrorKind::kInvalidConfig, "prefix probing needs a positive context budget");
  }
  if (context_budget < 0 || target_len < 1) throw Error(ErrorKind::kInvalidConfig, "bad context or target length");
  if (windows_per_excerpt < 1) throw Error(ErrorKind::kInvalidConfig, "windows_per_excerpt must be >= 1");
  if (k < 1 || support_k < 0 || !(temperature > 0.0)) throw Error(ErrorKind::kInvalidConfig, "bad decoding parameters");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error(ErrorKind::kInvalidConfig, "threshold must lie in (0, 1]");
  for (int l : sweep_lens) {
    if (l < 1) throw Error(ErrorKind::kInvalidConfig, "sweep lengths must be positive");
  }
  if (mode == ProbeMode::kNativeFim) {
    if (prefix_lens.empty() || distractors.empty()) throw Error(ErrorKind::kInvalidConfig, "empty native probe grid");
    for (int p : prefix_lens) {
      if (p < 0 || p > context_budget) {
        throw Error(ErrorKind::kInvalidSplit, "prefix length " + std::to_string(p) + " outside [0, budget]");
      }
    }
  }
}

nlohmann::json to_json(const ProbeSpec& s) {
  std::vector<std::string> distractors;
  for (Distractor d : s.distractors) distractors.emplace_back(to_string(d));
  return {{"mode", to_string(s.mode)},
          {"context_budget", s.context_budget},
          {"target_len", s.target_len},
          {"windows_per_excerpt", s.windows_per_excerpt},
          {"window_policy", to_string(s.window_policy)},
          {"prefix_lens", s.prefix_lens},
          {"distractors", distractors},
          {"sweep_lens", s.sweep_lens},
          {"k", s.k},
          {"support_k", s.support_k},
          {"temperature", s.temperature},
          {"threshold", s.threshold},
          {"sampled_generation", s.sampled_generation}};
}

ProbeSpec probe_spec_from_json(const nlohmann::json& j) {
  ProbeSpec s;
  if (j.contains("mode")) s.mode = probe_mode_from_string(j.at("mode").get<std::string>());
  s.context_budget = j.value("context_budget", s.context_budget);
  s.target_len = j.value("target_len", s.target_len);
  s.windows_per_excerpt = j.value("windows_per_excerpt", s.windows_per_excerpt);
  if (j.contains("window_policy")) s.window_policy = window_policy_from_string(j.at("window_policy").get<std::string>());
  s.prefix_lens = j.value("prefix_lens", s.prefix_lens);
  if (j.contains("distractors")) {
    s.distractors.clear();
    for (const auto& d : j.at("distractors")) s.distractors.push_back(distractor_from_string(d.get<std::string>()));
  }
  s.sweep_lens = j.value("sweep_lens", s.sweep_lens);
  s.k = j.value("k", s.k);
  s.support_k = j.value("support_k", s.support_k);
  s.temperature = j.value("temperature", s.temperature);
  s.threshold = j.value("threshold", s.threshold);
  s.sampled_generation = j.value("sampled_generation", s.sampled_generation);
  s.validate();
  return s;
}

std::vector<std::size_t> window_offsets(const std::string& excerpt_id, std::size_t excerpt_len, const ProbeSpec& spec,
                                        std::uint64_t seed) {
  const auto span = static_cast<std::size_t>(spec.footprint());
  if (spec.window_policy == WindowPolicy::kFirstWindow) {
    if (excerpt_len < span) throw Error(ErrorKind::kExcerptTooShort, excerpt_id + " is shorter than one window");
    return {0};
  }
  const auto n = static_cast<std::size_t>(spec.windows_per_excerpt);
  if (excerpt_len < n * span) {
    throw Error(ErrorKind::kExcerptTooShort, excerpt_id + " cannot hold " + std::to_string(n) + " disjoint windows of " +
                                                 std::to_string(span) + " tokens");
  }
  // Sorted draws from [0, slack] spread the unused tokens between windows.
  const std::size_t slack = excerpt_len - n * span;
  Rng rng(mix_seed(seed, hash_string(excerpt_id, hash_string("windows"))));
  std::vector<std::size_t> shifts(n);
  for (auto& s : shifts) s = uniform_index(rng, slack + 1);
  std::sort(shifts.begin(), shifts.end());
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i * span + shifts[i];
  return out;
}

nlohmann::json to_json(const ProbeRecord& r, const RecordProvenance& prov) {
  std::vector<int> supported(r.supported.begin(), r.supported.end());
  return {{"schema_version", kProbeSchemaVersion},
          {"tool_version", kToolVersion},
          {"config_hash", prov.config_hash},
          {"objective", prov.objective},
          {"spec", prov.spec_name},
          {"excerpt_id", r.excerpt_id},
          {"exposure", r.exposure},
          {"window", r.window},
          {"offset", r.offset},
          {"target_at", r.target_at},
          {"mode", to_string(r.mode)},
          {"prefix_len", r.prefix_len},
          {"suffix_len", r.suffix_len},
          {"distractor", to_string(r.distractor)},
          {"distractor_source", r.distractor_source},
          {"target", r.target},
          {"q", r.q},
          {"supported", supported},
          {"p_z", r.p_z},
          {"extractable", r.extractable},
          {"q_sweep", r.q_sweep},
          {"generated", r.generated},
          {"rouge_l", r.rouge_l},
          {"nll", r.nll},
          {"perplexity", r.perplexity},
          {"partition",
           {{"prefix", r.partition.prefix},
            {"suffix", r.partition.suffix},
            {"sentinels", r.partition.sentinels},
            {"previous_target", r.partition.previous_target}}}};
}

ProbeRecord probe_record_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", -1) != kProbeSchemaVersion) {
    throw Error(ErrorKind::kSchemaMismatch, "probe record schema " + std::to_string(j.value("schema_version", -1)) +
                                                ", expected " + std::to_string(kProbeSchemaVersion));
  }
  ProbeRecord r;
  r.excerpt_id = j.at("excerpt_id");
  r.exposure = j.at("exposure");
  r.window = j.at("window");
  r.offset = j.at("offset");
  r.target_at = j.at("target_at");
  r.mode = probe_mode_from_string(j.at("mode").get<std::string>());
  r.prefix_len = j.at("prefix_len");
  r.suffix_len = j.at("suffix_len");
  r.distractor = distractor_from_string(j.at("distractor").get<std::string>());
  r.distractor_source = j.at("distractor_source");
  r.target = j.at("target").get<TokenSeq>();
  r.q = j.at("q").get<std::vector<double>>();
  for (int s : j.at("supported").get<std::vector<int>>()) r.supported.push_back(static_cast<std::uint8_t>(s));
  r.p_z = j.at("p_z");
  r.extractable = j.at("extractable");
  r.q_sweep = j.at("q_sweep").get<std::vector<double>>();
  r.generated = j.at("generated").get<TokenSeq>();
  r.rouge_l = j.at("rouge_l");
  r.nll = j.at("nll").get<std::vector<double>>();
  r.perplexity = j.at("perplexity");
  const auto& p = j.at("partition");
  r.partition = {p.at("prefix"), p.at("suffix"), p.at("sentinels"), p.at("previous_target")};
  return r;
}

namespace {

// Position of token in the descending order used by topk_renormalize.
int rank_of(const std::vector<double>& dist, TokenId token) {
  const double p = dist[static_cast<std::size_t>(token)];
  int rank = 0;
  for (std::size_t j = 0; j < dist.size(); ++j) {
    rank += dist[j] > p || (dist[j] == p && static_cast<TokenId>(j) < token);
  }
  return rank;
}

// Scores one prompt + target: teacher-forced q_i, NLL and attention over
// the target queries, then a separate generation from the prompt.
template <typename T>
void measure(const ModelCheckpoint<T>& ckpt, const TokenSeq& prompt, std::vector<Region> regions,
             std::span<const TokenId> scored, const ProbeSpec& spec, std::uint64_t gen_seed, ProbeRecord& rec) {
  const auto m = static_cast<std::size_t>(spec.target_len);
  TokenSeq seq = prompt;
  seq.insert(seq.end(), scored.begin(), scored.end() - 1);
  regions.resize(seq.size(), Region::kPreviousTarget);
  const auto fr = forward(ckpt, seq, single_segment(seq.size()), true);
  const std::size_t first = prompt.size() - 1;

  const auto sp = span_probability_from_logits(fr.logits, first, scored, spec.k, spec.temperature);
  rec.target.assign(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(m));
  rec.q.assign(sp.q.begin(), sp.q.begin() + static_cast<std::ptrdiff_t>(m));
  rec.supported.assign(sp.supported.begin(), sp.supported.begin() + static_cast<std::ptrdiff_t>(m));
  if (spec.effective_support_k() != spec.k) {
    const int vocab = static_cast<int>(fr.logits.cols());
    for (std::size_t i = 0; i < m; ++i) {
      const auto dist = softmax_row<T>(fr.logits.row(static_cast<Eigen::Index>(first + i)).data(), vocab,
                                       spec.temperature);
      rec.supported[i] = rank_of(dist, scored[i]) < spec.effective_support_k() ? 1 : 0;
    }
  }
  rec.p_z = 1.0;
  for (double q : rec.q) rec.p_z *= q;
  rec.extractable = is_extractable(rec.p_z, spec.threshold);
  if (scored.size() > m) rec.q_sweep = sp.q;
  rec.nll = nll_rows(fr.logits, first, std::span<const TokenId>(rec.target));
  rec.perplexity = perplexity_of(rec.nll);

  std::vector<std::size_t> queries(m);
  std::iota(queries.begin(), queries.end(), first);
  rec.partition = attention_partition(*fr.attention, regions, queries);

  DecodeOptions opts;
  opts.mode = spec.sampled_generation ? DecodeMode::kTopK : DecodeMode::kGreedy;
  opts.k = spec.k;
  opts.temperature = spec.temperature;
  opts.seed = gen_seed;
  rec.generated = generate(ckpt, prompt, static_cast<int>(m), opts);
  rec.rouge_l = rouge_l(rec.target, rec.generated);
}

}  // namespace

template <typename T>
std::vector<ProbeRecord> run_prefix_probe(const ModelCheckpoint<T>& ckpt, std::span<const ProbeTarget> targets,
                                          const ProbeSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.mode != ProbeMode::kPrefixOnly) throw Error(ErrorKind::kInvalidConfig, "spec is not a prefix-only probe");
  const auto c = static_cast<std::size_t>(spec.context_budget);
  const auto scored_len = static_cast<std::size_t>(spec.footprint()) - c;
  if (c + scored_len > static_cast<std::size_t>(ckpt.config().max_context)) {
    throw Error(ErrorKind::kContextOverflow, "probe window exceeds the model context");
  }
  std::vector<ProbeRecord> out;
  for (const auto& t : targets) {
    const Excerpt& e = *t.excerpt;
    const auto offsets = window_offsets(e.excerpt_id, e.tokens.size(), spec, seed);
    for (std::size_t w = 0; w < offsets.size(); ++w) {
      ProbeRecord rec;
      rec.excerpt_id = e.excerpt_id;
      rec.exposure = t.exposure;
      rec.window = static_cast<int>(w);
      rec.offset = offsets[w];
      rec.target_at = offsets[w] + c;
      rec.mode = ProbeMode::kPrefixOnly;
      rec.prefix_len = spec.context_budget;
      const auto begin = e.tokens.begin() + static_cast<std::ptrdiff_t>(offsets[w]);
      const TokenSeq prompt(begin, begin + static_cast<std::ptrdiff_t>(c));
      const std::span<const TokenId> scored(e.tokens.data() + rec.target_at, scored_len);
      measure(ckpt, prompt, std::vector<Region>(c, Region::kPrefix), scored, spec,
              mix_seed(seed, hash_string(e.excerpt_id, w)), rec);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

template <typename T>
std::vector<ProbeRecord> run_native_fim_probe(const ModelCheckpoint<T>& ckpt, std::span<const ProbeTarget> targets,
                                              const ProbeSpec& spec, std::uint64_t seed, const Vocab& vocab) {
  spec.validate();
  if (spec.mode != ProbeMode::kNativeFim) throw Error(ErrorKind::kInvalidConfig, "spec is not a native FIM probe");
  const auto c = static_cast<std::size_t>(spec.context_budget);
  const auto m = static_cast<std::size_t>(spec.target_len);
  if (c + m + 3 > static_cast<std::size_t>(ckpt.config().max_context)) {
    throw Error(ErrorKind::kContextOverflow, "probe window exceeds the model context");
  }

  std::map<int, std::vector<std::size_t>> by_exposure;
  for (std::size_t i = 0; i < targets.size(); ++i) by_exposure[targets[i].exposure].push_back(i);

  std::vector<ProbeRecord> out;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    const Excerpt& e = *targets[ti].excerpt;
    const auto offsets = window_offsets(e.excerpt_id, e.tokens.size(), spec, seed);
    for (std::size_t w = 0; w < offsets.size(); ++w) {
      const std::size_t target_at = offsets[w] + c;
      const std::span<const TokenId> target(e.tokens.data() + target_at, m);

      // Replacement spans for this window: a peer excerpt and a start point,
      // independent of the split so every condition shares them.
      Rng rng(mix_seed(seed, hash_string(e.excerpt_id, hash_string("distractor", w))));
      const Excerpt* peer = nullptr;
      const auto& pool = by_exposure[targets[ti].exposure];
      if (pool.size() > 1) {
        std::size_t pick = pool[uniform_index(rng, pool.size() - 1)];
        if (pick == ti) pick = pool.back();
        peer = targets[pick].excerpt;
      }
      const std::size_t peer_pre = peer ? uniform_index(rng, peer->tokens.size() - c + 1) : 0;
      const std::size_t peer_suf = peer ? uniform_index(rng, peer->tokens.size() - c + 1) : 0;

      for (int p : spec.prefix_lens) {
        const auto pl = static_cast<std::size_t>(p);
        const std::size_t sl = c - pl;
        for (Distractor d : spec.distractors) {
          const bool swap_prefix = d == Distractor::kPrefix || d == Distractor::kBoth;
          const bool swap_suffix = d == Distractor::kSuffix || d == Distractor::kBoth;
          if ((swap_prefix || swap_suffix) && peer == nullptr) {
            throw Error(ErrorKind::kNotEnoughExcerpts, "no other excerpt shares exposure " +
                                                           std::to_string(targets[ti].exposure));
          }
          std::span<const TokenId> prefix(e.tokens.data() + target_at - pl, pl);
          std::span<const TokenId> suffix(e.tokens.data() + target_at + m, sl);
          if (swap_prefix) prefix = std::span<const TokenId>(peer->tokens.data() + peer_pre + (c - pl), pl);
          if (swap_suffix) suffix = std::span<const TokenId>(peer->tokens.data() + peer_suf, sl);

          TokenSeq prompt;
          std::vector<Region> regions;
          prompt.push_back(vocab.fim_prefix());
          regions.push_back(Region::kSentinel);
          prompt.insert(prompt.end(), prefix.begin(), prefix.end());
          regions.insert(regions.end(), pl, Region::kPrefix);
          prompt.push_back(vocab.fim_suffix());
          regions.push_back(Region::kSentinel);
          prompt.insert(prompt.end(), suffix.begin(), suffix.end());
          regions.insert(regions.end(), sl, Region::kSuffix);
          prompt.push_back(vocab.fim_middle());
          regions.push_back(Region::kSentinel);

          ProbeRecord rec;
          rec.excerpt_id = e.excerpt_id;
          rec.exposure = targets[ti].exposure;
          rec.window = static_cast<int>(w);
          rec.offset = offsets[w];
          rec.target_at = target_at;
          rec.mode = ProbeMode::kNativeFim;
          rec.prefix_len = p;
          rec.suffix_len = static_cast<int>(sl);
          rec.distractor = d;
          if (swap_prefix || swap_suffix) rec.distractor_source = peer->excerpt_id;
          measure(ckpt, prompt, std::move(regions), target, spec, mix_seed(seed, hash_string(e.excerpt_id, w)), rec);
          out.push_back(std::move(rec));
        }
      }
    }
  }
  return out;
}

std::vector<std::pair<double, RateWithCI>> survival_curve(std::span<const ProbeRecord> records,
                                                          std::span<const double> thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw Error(ErrorKind::kInvalidConfig, "thresholds must be sorted ascending");
  }
  std::vector<std::pair<double, RateWithCI>> out;
  for (double t : thresholds) {
    std::int64_t hits = 0;
    for (const auto& r : records) hits += t <= 0.0 ? r.p_z > 0.0 : r.p_z >= t;
    out.emplace_back(t, rate_with_ci(hits, static_cast<std::int64_t>(records.size())));
  }
  return out;
}

std::map<std::pair<int, int>, RateWithCI> span_length_sweep(std::span<const ProbeRecord> records,
                                                            std::span<const int> lengths, double threshold) {
  std::map<std::pair<int, int>, std::pair<std::int64_t, std::int64_t>> counts;
  for (const auto& r : records) {
    const auto& q = r.q_sweep.empty() ? r.q : r.q_sweep;
    for (int l : lengths) {
      if (l < 1 || static_cast<std::size_t>(l) > q.size()) {
        throw Error(ErrorKind::kExcerptTooShort, r.excerpt_id + " has no q_i for length " + std::to_string(l));
      }
      double pz = 1.0;
      for (int i = 0; i < l; ++i) pz *= q[static_cast<std::size_t>(i)];
      auto& c = counts[{l, r.exposure}];
      c.first += pz >= threshold;
      c.second += 1;
    }
  }
  std::map<std::pair<int, int>, RateWithCI> out;
  for (const auto& [key, c] : counts) out[key] = rate_with_ci(c.first, c.second);
  return out;
}

RateWithCI support_rate(std::span<const ProbeRecord> records) {
  std::int64_t hits = 0;
  std::int64_t total = 0;
  for (const auto& r : records) {
    for (auto s : r.supported) hits += s;
    total += static_cast<std::int64_t>(r.supported.size());
  }
  if (total == 0) throw Error(ErrorKind::kEmptyInput, "no target tokens to pool");
  return rate_with_ci(hits, total);
}

#define FIMLAB_PROBE_INSTANTIATE(T)                                                                                  \
  template SpanProbability span_probability_from_logits(const Mat<T>&, std::size_t, std::span<const TokenId>, int,  \
                                                        double);                                                     \
  template SpanProbability span_probability(const ModelCheckpoint<T>&, std::span<const TokenId>,                    \
                                            std::span<const TokenId>, int, double);                                  \
  template TeacherForcedNll teacher_forced_nll(const ModelCheckpoint<T>&, std::span<const TokenId>,                 \
                                               std::span<const TokenId>);                                            \
  template AttentionPartition attention_partition(const AttentionCapture<T>&, std::span<const Region>,              \
                                                  std::span<const std::size_t>);                                     \
  template std::vector<ProbeRecord> run_prefix_probe(const ModelCheckpoint<T>&, std::span<const ProbeTarget>,       \
                                                     const ProbeSpec&, std::uint64_t);                               \
  template std::vector<ProbeRecord> run_native_fim_probe(const ModelCheckpoint<T>&, std::span<const ProbeTarget>,   \
                                                         const ProbeSpec&, std::uint64_t, const Vocab&);

FIMLAB_PROBE_INSTANTIATE(float)
FIMLAB_PROBE_INSTANTIATE(double)

}  // namespace fimlab
