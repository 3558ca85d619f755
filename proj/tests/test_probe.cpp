// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "fimlab/error.hpp"
#include "fimlab/probe.hpp"
#include "fimlab/random.hpp"
#include "oracles.hpp"

using namespace fimlab;
using namespace fimlab::oracle;

namespace {

const Vocab kVocab = Vocab::byte_level();

ModelConfig tiny_model() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.kv_heads = 1;
  c.ffn_hidden = 32;
  c.max_context = 128;
  c.init_std = 0.5;
  return c;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kIo;
}

}  // namespace

TEST(TopK, Examples) {
  const std::vector<double> d = {0.4, 0.3, 0.2, 0.1};
  const auto s = topk_renormalize(d, 2);
  EXPECT_NEAR(s.prob(0), 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(s.prob(1), 3.0 / 7.0, 1e-15);
  EXPECT_EQ(s.prob(2), 0.0);
  EXPECT_EQ(s.prob(3), 0.0);
  const auto all = topk_renormalize(d, 10);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(all.prob(i), d[static_cast<std::size_t>(i)], 1e-15);
  const std::vector<double> uniform(20, 0.05);
  const auto u = topk_renormalize(uniform, 10);
  ASSERT_EQ(u.entries.size(), 10u);
  for (int i = 0; i < 10; ++i) {
    EXPECT_EQ(u.entries[static_cast<std::size_t>(i)].first, i);
    EXPECT_NEAR(u.entries[static_cast<std::size_t>(i)].second, 0.1, 1e-15);
  }
  EXPECT_EQ(kind_of([] { topk_renormalize(std::vector<double>{0.5, 0.6}, 1); }), ErrorKind::kInvalidDistribution);
  EXPECT_EQ(kind_of([] { topk_renormalize(std::vector<double>{1.5, -0.5}, 1); }), ErrorKind::kInvalidDistribution);
}

TEST(Threshold, BarsAndInclusiveComparison) {
  EXPECT_NEAR(per_token_bar(0.001, 32), 0.8059, 0.0005);
  EXPECT_NEAR(per_token_bar(0.001, 50), 0.8710, 0.0005);
  EXPECT_TRUE(is_extractable(0.001, 0.001));
  EXPECT_FALSE(is_extractable(std::nextafter(0.001, 0.0), 0.001));
  EXPECT_THROW(is_extractable(0.5, 0.0), Error);
}

TEST(SpanProbability, MatchesStepwiseOracle) {
  const auto ckpt = ModelCheckpoint<double>::initialized(tiny_model(), Objective::kLtr, 3);
  Rng rng(4);
  const TokenSeq context = random_tokens(rng, 12);
  const TokenSeq target = random_tokens(rng, 4);
  for (int k : {260, 40, 3}) {
    for (double temp : {1.0, 0.7}) {
      const auto sp = span_probability(ckpt, context, target, k, temp);
      TokenSeq ctx = context;
      double pz = 1.0;
      for (std::size_t i = 0; i < target.size(); ++i) {
        const auto logits = forward(ckpt, ctx, single_segment(ctx.size())).logits;
        const auto dist = softmax_row(logits.row(logits.rows() - 1).data(), 260, temp);
        const double qi = topk_renormalize(dist, k).prob(target[i]);
        EXPECT_NEAR(sp.q[i], qi, 1e-12);
        EXPECT_EQ(sp.supported[i], qi > 0.0);
        pz *= qi;
        ctx.push_back(target[i]);
      }
      if (pz > 0.0) {
        EXPECT_NEAR(sp.p_z / pz, 1.0, 1e-9) << k;
      } else {
        EXPECT_EQ(sp.p_z, 0.0);
      }
    }
  }
  TokenSeq long_ctx(200, 1);
  EXPECT_EQ(kind_of([&] { span_probability(ckpt, long_ctx, target); }), ErrorKind::kContextOverflow);
}

TEST(RougeL, Examples) {
  EXPECT_DOUBLE_EQ(rouge_l(TokenSeq{1, 2, 3, 4}, TokenSeq{1, 3, 4, 5}), 0.75);
  EXPECT_DOUBLE_EQ(rouge_l(TokenSeq{1, 2, 3}, TokenSeq{1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(rouge_l(TokenSeq{1, 2, 3}, TokenSeq{4, 5}), 0.0);
  EXPECT_DOUBLE_EQ(rouge_l(TokenSeq{1, 2, 3}, TokenSeq{}), 0.0);
  EXPECT_EQ(kind_of([] { rouge_l(TokenSeq{}, TokenSeq{1}); }), ErrorKind::kEmptyInput);
}

TEST(RougeL, MatchesBruteForceLcs) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const TokenSeq ref = random_tokens(rng, 1 + uniform_index(rng, 10), 4);
    const TokenSeq cand = random_tokens(rng, 1 + uniform_index(rng, 10), 4);
    const double lcs = static_cast<double>(brute_force_lcs(ref, cand));
    double expected = 0.0;
    if (lcs > 0) {
      const double p = lcs / static_cast<double>(cand.size());
      const double r = lcs / static_cast<double>(ref.size());
      expected = 2 * p * r / (p + r);
    }
    ASSERT_EQ(rouge_l(ref, cand), expected);
  }
}

TEST(TeacherForcedNll, OracleAndUniform) {
  auto ckpt = ModelCheckpoint<double>::initialized(tiny_model(), Objective::kLtr, 6);
  Rng rng(7);
  const TokenSeq prompt = random_tokens(rng, 10);
  const TokenSeq target = random_tokens(rng, 5);
  const auto r = teacher_forced_nll(ckpt, prompt, target);
  TokenSeq all = prompt;
  all.insert(all.end(), target.begin(), target.end());
  const auto logits = forward(ckpt, all, single_segment(all.size())).logits;
  double sum = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto row = logits.row(static_cast<Eigen::Index>(prompt.size() + i - 1));
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    const double nll = lse - row(target[i]);
    EXPECT_NEAR(r.nll[i], nll, 1e-6);
    sum += nll;
  }
  EXPECT_NEAR(r.perplexity, std::exp(sum / 5.0), 1e-6);
  EXPECT_GE(r.perplexity, 1.0);
  ckpt.tensor("lm_head").setZero();
  EXPECT_NEAR(teacher_forced_nll(ckpt, prompt, target).perplexity, 260.0, 1e-9);
}

TEST(Wilson, BoundariesAndScoreTestInversion) {
  EXPECT_EQ(wilson_interval(0, 50).first, 0.0);
  EXPECT_EQ(wilson_interval(50, 50).second, 1.0);
  for (auto [x, n] : std::vector<std::pair<int, int>>{{10, 100}, {1, 600}, {37, 41}, {300, 600}}) {
    const auto w = wilson_interval(x, n);
    const auto o = score_test_inversion(x, n);
    EXPECT_NEAR(w.first, o.first, 1e-6) << x << "/" << n;
    EXPECT_NEAR(w.second, o.second, 1e-6) << x << "/" << n;
  }
  EXPECT_EQ(kind_of([] { wilson_interval(0, 0); }), ErrorKind::kEmptyInput);
  EXPECT_THROW(wilson_interval(5, 4), Error);
  const auto r = rate_with_ci(3, 17);
  EXPECT_LE(r.ci_low, r.rate);
  EXPECT_LE(r.rate, r.ci_high);
  EXPECT_DOUBLE_EQ(r.rate, 3.0 / 17.0);
}

TEST(Spearman, MatchesReferenceValues) {
  const std::vector<double> x = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const std::vector<double> y = {2, 1, 4, 3, 7, 8, 6, 5, 10, 9};
  const auto a = spearman(x, y);
  EXPECT_NEAR(a.rho, 0.8545454545454544, 1e-12);
  EXPECT_NEAR(a.p_value, 0.0016368033159867143, 1e-9);
  const std::vector<double> x2 = {1, 1, 4, 4, 16, 16, 64, 64};
  const std::vector<double> y2 = {0.1, 0.05, 0.2, 0.2, 0.3, 0.25, 0.9, 0.4};
  const auto b = spearman(x2, y2);
  EXPECT_NEAR(b.rho, 0.981761387347632, 1e-12);
  EXPECT_NEAR(b.p_value, 1.4960829595757642e-05, 1e-10);
  EXPECT_EQ(b.n, 8u);
}

TEST(AttentionPartition, UniformRowsSplitByRegionSize) {
  const int n = 10;
  AttentionCapture<double> cap;
  cap.layers = 1;
  cap.heads = 1;
  Mat<double> w = Mat<double>::Zero(n, n);
  for (int q = 0; q < n; ++q) w.row(q).head(q + 1).setConstant(1.0 / (q + 1));
  cap.weights.push_back(w);
  std::vector<Region> regions(n, Region::kPrefix);
  regions[0] = Region::kSentinel;
  regions[5] = Region::kSentinel;
  for (int i = 6; i < n; ++i) regions[static_cast<std::size_t>(i)] = Region::kPreviousTarget;
  regions[1] = Region::kSuffix;
  regions[2] = Region::kSuffix;

  const std::vector<std::size_t> first = {5};
  const auto p0 = attention_partition(cap, regions, first);
  EXPECT_EQ(p0.previous_target, 0.0);
  EXPECT_NEAR(p0.prefix, 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(p0.suffix, 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(p0.sentinels, 2.0 / 6.0, 1e-15);

  const std::vector<std::size_t> queries = {5, 6, 7, 8, 9};
  const auto p = attention_partition(cap, regions, queries);
  double prev = 0.0;
  for (std::size_t q : queries) prev += static_cast<double>(q - 5) / static_cast<double>(q + 1);
  EXPECT_NEAR(p.previous_target, prev / 5.0, 1e-15);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);

  regions[3] = Region::kUnlabeled;
  EXPECT_EQ(kind_of([&] { attention_partition(cap, regions, queries); }), ErrorKind::kUnlabeledPosition);
}

TEST(WindowOffsets, DisjointDeterministic) {
  ProbeSpec spec;
  spec.windows_per_excerpt = 5;
  for (int s = 0; s < 50; ++s) {
    const std::string id = "ex-" + std::to_string(s);
    const auto w = window_offsets(id, 1000, spec, 9);
    ASSERT_EQ(w.size(), 5u);
    EXPECT_EQ(w, window_offsets(id, 1000, spec, 9));
    for (std::size_t i = 1; i < w.size(); ++i) EXPECT_GE(w[i], w[i - 1] + 132);
    EXPECT_LE(w.back() + 132, 1000u);
  }
  EXPECT_EQ(kind_of([&] { window_offsets("x", 600, spec, 9); }), ErrorKind::kExcerptTooShort);
  spec.window_policy = WindowPolicy::kFirstWindow;
  EXPECT_EQ(window_offsets("x", 600, spec, 9), std::vector<std::size_t>{0});
}

namespace {

struct ProbeFixture {
  std::vector<Excerpt> excerpts;
  std::vector<ProbeTarget> targets;

  ProbeFixture() {
    Rng rng(31);
    for (int i = 0; i < 6; ++i) {
      Excerpt e;
      e.excerpt_id = "x" + std::to_string(i);
      e.tokens = random_tokens(rng, 128);
      excerpts.push_back(e);
    }
    for (std::size_t i = 0; i < excerpts.size(); ++i) targets.push_back({&excerpts[i], i < 3 ? 1 : 64});
  }
};

}  // namespace

TEST(PrefixProbe, RecordInvariantsAndMatchedWindows) {
  const ProbeFixture f;
  ProbeSpec spec;
  spec.context_budget = 20;
  spec.target_len = 8;
  spec.windows_per_excerpt = 3;
  spec.sweep_lens = {4, 12};
  spec.k = 260;
  const auto a = ModelCheckpoint<double>::initialized(tiny_model(), Objective::kLtr, 1);
  const auto b = ModelCheckpoint<double>::initialized(tiny_model(), Objective::kFim, 2);
  const auto ra = run_prefix_probe(a, f.targets, spec, 77);
  const auto rb = run_prefix_probe(b, f.targets, spec, 77);
  ASSERT_EQ(ra.size(), 18u);
  ASSERT_EQ(rb.size(), 18u);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const auto& r = ra[i];
    EXPECT_EQ(r.offset, rb[i].offset);
    EXPECT_EQ(r.target, rb[i].target);
    EXPECT_EQ(r.target_at, r.offset + 20);
    const auto& src = f.excerpts[static_cast<std::size_t>(std::stoi(r.excerpt_id.substr(1)))].tokens;
    EXPECT_EQ(r.target, TokenSeq(src.begin() + static_cast<long>(r.target_at), src.begin() + static_cast<long>(r.target_at) + 8));
    ASSERT_EQ(r.q.size(), 8u);
    ASSERT_EQ(r.q_sweep.size(), 12u);
    const double prod = std::accumulate(r.q.begin(), r.q.end(), 1.0, std::multiplies<>());
    EXPECT_NEAR(r.p_z / prod, 1.0, 1e-9);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(r.q_sweep[j], r.q[j], 1e-12);
    EXPECT_NEAR(r.partition.sum(), 1.0, 1e-6);
    EXPECT_EQ(r.partition.suffix, 0.0);
    EXPECT_EQ(r.partition.sentinels, 0.0);
    EXPECT_EQ(r.generated.size(), 8u);
    EXPECT_EQ(r.rouge_l, rouge_l(r.target, r.generated));
    EXPECT_EQ(r.nll.size(), 8u);
    EXPECT_EQ(r.extractable, r.p_z >= spec.threshold);
  }
  // Windows are disjoint over context + the longest sweep span.
  for (std::size_t i = 1; i < ra.size(); ++i) {
    if (ra[i].excerpt_id == ra[i - 1].excerpt_id) EXPECT_GE(ra[i].offset, ra[i - 1].offset + 32);
  }

  const std::vector<int> lengths = {2, 4, 8, 12};
  const auto sweep = span_length_sweep(ra, lengths, 1e-6);
  for (int e : {1, 64}) {
    for (std::size_t li = 0; li < lengths.size(); ++li) {
      std::int64_t hits = 0;
      for (const auto& r : ra) {
        if (r.exposure != e) continue;
        double pz = 1.0;
        for (int j = 0; j < lengths[li]; ++j) pz *= r.q_sweep[static_cast<std::size_t>(j)];
        hits += pz >= 1e-6;
      }
      EXPECT_EQ(sweep.at({lengths[li], e}).successes, hits);
      EXPECT_EQ(sweep.at({lengths[li], e}).trials, 9);
      if (li > 0) EXPECT_LE(sweep.at({lengths[li], e}).successes, sweep.at({lengths[li - 1], e}).successes);
    }
  }
  const std::vector<int> too_long = {13};
  EXPECT_EQ(kind_of([&] { span_length_sweep(ra, too_long, 1e-3); }), ErrorKind::kExcerptTooShort);
}

TEST(PrefixProbe, SupportFlagsUseTheirOwnCandidateSet) {
  const ProbeFixture f;
  ProbeSpec spec;
  spec.context_budget = 20;
  spec.target_len = 8;
  spec.windows_per_excerpt = 2;
  spec.k = 260;
  const auto ck = ModelCheckpoint<double>::initialized(tiny_model(), Objective::kLtr, 5);
  const auto full = run_prefix_probe(ck, f.targets, spec, 3);
  for (const auto& r : full) {
    for (auto s : r.supported) EXPECT_EQ(s, 1);
  }
  for (int sk : {1, 3}) {
    spec.support_k = sk;
    const auto recs = run_prefix_probe(ck, f.targets, spec, 3);
    ASSERT_EQ(recs.size(), full.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& r = recs[i];
      EXPECT_EQ(r.q, full[i].q);
      EXPECT_EQ(r.p_z, full[i].p_z);
      const auto& src = f.excerpts[static_cast<std::size_t>(std::stoi(r.excerpt_id.substr(1)))].tokens;
      const TokenSeq seq(src.begin() + static_cast<long>(r.offset), src.begin() + static_cast<long>(r.target_at) + 7);
      const auto fr = forward(ck, seq, single_segment(seq.size()));
      for (std::size_t j = 0; j < 8; ++j) {
        const auto p = softmax_row(fr.logits.row(static_cast<Eigen::Index>(19 + j)).data(), 260);
        const auto t = static_cast<std::size_t>(r.target[j]);
        int above = 0;
        for (std::size_t v = 0; v < p.size(); ++v) above += p[v] > p[t] || (p[v] == p[t] && v < t);
        EXPECT_EQ(r.supported[j], above < sk ? 1 : 0);
      }
    }
  }
}

TEST(NativeProbe, GridDistractorsAndSentinels) {
  const ProbeFixture f;
  ProbeSpec spec;
  spec.mode = ProbeMode::kNativeFim;
  spec.context_budget = 20;
  spec.target_len = 8;
  spec.windows_per_excerpt = 2;
  spec.prefix_lens = {0, 5, 10, 15, 20};
  spec.distractors = {Distractor::kNone, Distractor::kPrefix, Distractor::kSuffix, Distractor::kBoth};
  const auto ckpt = ModelCheckpoint<double>::initialized(tiny_model(), Objective::kFim, 5);
  const auto recs = run_native_fim_probe(ckpt, f.targets, spec, 11, kVocab);
  ASSERT_EQ(recs.size(), 6u * 2u * 5u * 4u);
  std::map<std::pair<std::string, int>, TokenSeq> target_of;
  std::map<std::pair<std::string, int>, std::set<int>> splits;
  for (const auto& r : recs) {
    EXPECT_EQ(r.prefix_len + r.suffix_len, 20);
    EXPECT_NEAR(r.partition.sum(), 1.0, 1e-6);
    EXPECT_GT(r.partition.sentinels, 0.0);
    const auto key = std::make_pair(r.excerpt_id, r.window);
    auto [it, fresh] = target_of.emplace(key, r.target);
    if (!fresh) EXPECT_EQ(it->second, r.target);
    splits[key].insert(r.prefix_len);
    if (r.distractor == Distractor::kNone) {
      EXPECT_TRUE(r.distractor_source.empty());
    } else {
      EXPECT_NE(r.distractor_source, r.excerpt_id);
      const int i = std::stoi(r.distractor_source.substr(1));
      EXPECT_EQ(i < 3 ? 1 : 64, r.exposure);
    }
    if (r.suffix_len == 0) EXPECT_EQ(r.partition.suffix, 0.0);
  }
  for (const auto& [key, s] : splits) EXPECT_EQ(s.size(), 5u);
  const auto again = run_native_fim_probe(ckpt, f.targets, spec, 11, kVocab);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(recs[i].distractor_source, again[i].distractor_source);
    EXPECT_EQ(recs[i].p_z, again[i].p_z);
  }
  spec.prefix_lens = {30};
  EXPECT_EQ(kind_of([&] { run_native_fim_probe(ckpt, f.targets, spec, 11, kVocab); }), ErrorKind::kInvalidSplit);
}

TEST(Survival, MatchesCountingOracle) {
  Rng rng(41);
  std::vector<ProbeRecord> recs(100);
  for (auto& r : recs) r.p_z = uniform01(rng) < 0.2 ? 0.0 : std::pow(10.0, -6.0 * uniform01(rng));
  const double max_pz = std::max_element(recs.begin(), recs.end(), [](auto& a, auto& b) { return a.p_z < b.p_z; })->p_z;
  const std::vector<double> ts = {0.0, 1e-6, 1e-4, 1e-3, 0.01, 0.1, std::nextafter(max_pz, 2.0)};
  const auto curve = survival_curve(recs, ts);
  double prev = 2.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    std::int64_t count = 0;
    for (const auto& r : recs) count += ts[i] == 0.0 ? r.p_z > 0.0 : r.p_z >= ts[i];
    EXPECT_EQ(curve[i].second.successes, count);
    EXPECT_LE(curve[i].second.rate, prev);
    prev = curve[i].second.rate;
  }
  EXPECT_EQ(curve.back().second.successes, 0);
  const std::vector<double> unsorted = {0.1, 0.01};
  EXPECT_THROW(survival_curve(recs, unsorted), Error);
}

TEST(SupportRate, PooledAndBoundary) {
  std::vector<ProbeRecord> recs(3);
  for (auto& r : recs) r.supported = {1, 1, 1, 1};
  const auto all = support_rate(recs);
  EXPECT_EQ(all.rate, 1.0);
  EXPECT_EQ(all.ci_high, 1.0);
  recs[1].supported = {0, 1, 0, 1};
  EXPECT_EQ(support_rate(recs).successes, 10);
  EXPECT_EQ(kind_of([] { support_rate(std::vector<ProbeRecord>{}); }), ErrorKind::kEmptyInput);
}

TEST(ProbeRecord, JsonRoundTripAndSchema) {
  ProbeRecord r;
  r.excerpt_id = "abc";
  r.exposure = 16;
  r.window = 2;
  r.offset = 40;
  r.target_at = 140;
  r.mode = ProbeMode::kNativeFim;
  r.prefix_len = 25;
  r.suffix_len = 75;
  r.distractor = Distractor::kSuffix;
  r.distractor_source = "def";
  r.target = {1, 2, 3};
  r.q = {0.5, 0.25, 0.125};
  r.supported = {1, 1, 1};
  r.p_z = 0.015625;
  r.generated = {1, 2, 4};
  r.rouge_l = 2.0 / 3.0;
  r.nll = {0.1, 0.2, 0.3};
  r.perplexity = 1.2;
  r.partition = {0.25, 0.25, 0.25, 0.25};
  auto j = to_json(r, {"hash", "fim", "native"});
  EXPECT_EQ(j.at("schema_version"), kProbeSchemaVersion);
  EXPECT_EQ(j.at("config_hash"), "hash");
  const auto back = probe_record_from_json(j);
  EXPECT_EQ(back.excerpt_id, r.excerpt_id);
  EXPECT_EQ(back.distractor, Distractor::kSuffix);
  EXPECT_EQ(back.q, r.q);
  EXPECT_EQ(back.p_z, r.p_z);
  EXPECT_EQ(back.partition.suffix, 0.25);
  j["schema_version"] = kProbeSchemaVersion + 1;
  EXPECT_EQ(kind_of([&] { probe_record_from_json(j); }), ErrorKind::kSchemaMismatch);
}

TEST(ProbeSpec, JsonAndFootprint) {
  ProbeSpec s;
  s.sweep_lens = {20, 30, 40, 50};
  EXPECT_EQ(s.footprint(), 150);
  s.mode = ProbeMode::kNativeFim;
  EXPECT_EQ(s.footprint(), 232);
  s.distractors = {Distractor::kBoth};
  const auto back = probe_spec_from_json(to_json(s));
  EXPECT_EQ(back.mode, ProbeMode::kNativeFim);
  EXPECT_EQ(back.distractors, s.distractors);
  EXPECT_EQ(back.prefix_lens, s.prefix_lens);
}
