// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "fimlab/error.hpp"
#include "fimlab/experiment.hpp"
#include "fimlab/io.hpp"

namespace fimlab {

namespace fs = std::filesystem;

namespace {

struct Loaded {
  ProbeRecord r;
  std::string objective;
  std::string spec;
};

std::string num(double v) {
  if (v == 0.0) return "0";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string rate_cells(const RateWithCI& r) {
  return std::to_string(r.trials) + "," + std::to_string(r.successes) + "," + num(r.rate) + "," + num(r.ci_low) + "," +
         num(r.ci_high);
}

// Accumulates per-group statistics over records.
struct Group {
  std::int64_t records = 0;
  std::int64_t extractable = 0;
  std::int64_t high_overlap = 0;
  std::int64_t supported = 0;
  std::int64_t tokens = 0;
  double p_z = 0.0;
  double rouge = 0.0;
  double nll = 0.0;
  double perplexity = 0.0;
  double offset = 0.0;
  AttentionPartition attn;

  void add(const ProbeRecord& r) {
    ++records;
    extractable += r.extractable;
    high_overlap += r.rouge_l >= 0.5;
    for (auto s : r.supported) supported += s;
    tokens += static_cast<std::int64_t>(r.supported.size());
    p_z += r.p_z;
    rouge += r.rouge_l;
    double n = 0.0;
    for (double x : r.nll) n += x;
    nll += r.nll.empty() ? 0.0 : n / static_cast<double>(r.nll.size());
    perplexity += r.perplexity;
    offset += static_cast<double>(r.offset);
    attn.prefix += r.partition.prefix;
    attn.suffix += r.partition.suffix;
    attn.sentinels += r.partition.sentinels;
    attn.previous_target += r.partition.previous_target;
  }
  double mean(double total) const { return records == 0 ? 0.0 : total / static_cast<double>(records); }
  RateWithCI extraction() const { return rate_with_ci(extractable, records); }
  RateWithCI support() const { return rate_with_ci(supported, tokens); }
  std::string attention_cells() const {
    return num(mean(attn.prefix)) + "," + num(mean(attn.suffix)) + "," + num(mean(attn.sentinels)) + "," +
           num(mean(attn.previous_target));
  }
};

class Table {
 public:
  Table(std::string header, std::string provenance) : provenance_(std::move(provenance)) {
    text_ = header + ",config_hash,tool_version\n";
  }
  void row(const std::string& cells) { text_ += cells + "," + provenance_ + "\n"; }
  void write(const fs::path& path, std::vector<fs::path>& written) const {
    write_file_atomic(path, text_);
    written.push_back(path);
  }

 private:
  std::string provenance_;
  std::string text_;
};

std::vector<double> default_thresholds() {
  std::vector<double> t = {0.0};
  for (int k = 16; k >= 0; --k) t.push_back(std::pow(10.0, -k / 2.0));
  t[1 + 16 - 6] = 1e-3;  // exact 0.001 rather than 10^-3.0 rounding
  return t;
}

}  // namespace

std::vector<fs::path> cmd_analyze(const std::vector<fs::path>& paths, const fs::path& out_dir,
                                  const AnalyzeOptions& options) {
  std::vector<Loaded> all;
  std::set<std::string> hashes;
  for (const auto& p : paths) {
    std::ifstream in(p);
    if (!in) throw Error(ErrorKind::kIo, "cannot read " + p.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      Loaded l{probe_record_from_json(j), j.value("objective", ""), j.value("spec", "")};
      hashes.insert(j.value("config_hash", ""));
      all.push_back(std::move(l));
    }
  }
  if (hashes.size() > 1 && !options.force) {
    throw Error(ErrorKind::kSchemaMismatch, "records come from " + std::to_string(hashes.size()) +
                                                " different configs; pass --force to mix them");
  }
  const std::string hash = hashes.empty() ? "" : hashes.size() == 1 ? *hashes.begin() : "mixed";
  const std::string prov = hash + "," + std::string(kToolVersion);
  fs::create_directories(out_dir);
  std::vector<fs::path> written;

  // Figure 1: extraction by bucket.
  {
    std::map<std::tuple<std::string, std::string, int>, Group> g;
    for (const auto& l : all) {
      if (l.r.mode == ProbeMode::kPrefixOnly) g[{l.objective, l.spec, l.r.exposure}].add(l.r);
    }
    Table t("objective,spec,exposure,windows,extractable,rate,ci_low,ci_high,high_overlap_rate,mean_rouge_l,"
            "support_tokens,supported,support,support_ci_low,support_ci_high,mean_p_z,mean_perplexity",
            prov);
    for (const auto& [k, v] : g) {
      const auto e = v.extraction();
      t.row(csv_field(std::get<0>(k)) + "," + csv_field(std::get<1>(k)) + "," + std::to_string(std::get<2>(k)) + "," +
            rate_cells(e) + "," + num(v.mean(static_cast<double>(v.high_overlap))) + "," + num(v.mean(v.rouge)) + "," +
            rate_cells(v.support()) + "," + num(v.mean(v.p_z)) + "," + num(v.mean(v.perplexity)));
    }
    t.write(out_dir / "bucket_rates.csv", written);
  }

  // Figure 2: survival over thresholds.
  {
    const auto thresholds = options.thresholds.empty() ? default_thresholds() : options.thresholds;
    std::map<std::pair<std::string, std::string>, std::vector<ProbeRecord>> g;
    for (const auto& l : all) {
      if (l.r.mode == ProbeMode::kPrefixOnly) g[{l.objective, l.spec}].push_back(l.r);
    }
    Table t("objective,spec,threshold,windows,surviving,rate,ci_low,ci_high", prov);
    for (const auto& [k, rs] : g) {
      for (const auto& [th, rate] : survival_curve(rs, thresholds)) {
        t.row(csv_field(k.first) + "," + csv_field(k.second) + "," + num(th) + "," + rate_cells(rate));
      }
    }
    t.write(out_dir / "survival.csv", written);
  }

  // Figure 3: extraction against target length.
  {
    std::map<std::pair<std::string, std::string>, std::vector<ProbeRecord>> g;
    for (const auto& l : all) {
      if (!l.r.q_sweep.empty()) g[{l.objective, l.spec}].push_back(l.r);
    }
    Table t("objective,spec,length,exposure,windows,extractable,rate,ci_low,ci_high", prov);
    for (const auto& [k, rs] : g) {
      std::vector<int> lengths;
      for (int len : options.span_lengths) {
        if (std::all_of(rs.begin(), rs.end(), [&](const ProbeRecord& r) {
              return static_cast<std::size_t>(len) <= r.q_sweep.size();
            })) {
          lengths.push_back(len);
        }
      }
      for (const auto& [le, rate] : span_length_sweep(rs, lengths, options.threshold)) {
        t.row(csv_field(k.first) + "," + csv_field(k.second) + "," + std::to_string(le.first) + "," +
              std::to_string(le.second) + "," + rate_cells(rate));
      }
    }
    t.write(out_dir / "span_length.csv", written);
  }

  // Figure 4 and the geometry heatmaps: native probing across splits.
  {
    std::map<std::tuple<std::string, std::string, int, int, int>, Group> g;
    for (const auto& l : all) {
      if (l.r.mode == ProbeMode::kNativeFim && l.r.distractor == Distractor::kNone) {
        g[{l.objective, l.spec, l.r.exposure, l.r.prefix_len, l.r.suffix_len}].add(l.r);
      }
    }
    Table t("objective,spec,exposure,prefix_len,suffix_len,support_tokens,supported,support,support_ci_low,"
            "support_ci_high,windows,extractable,rate,ci_low,ci_high,mean_nll,mean_perplexity,mean_rouge_l",
            prov);
    for (const auto& [k, v] : g) {
      t.row(csv_field(std::get<0>(k)) + "," + csv_field(std::get<1>(k)) + "," + std::to_string(std::get<2>(k)) + "," +
            std::to_string(std::get<3>(k)) + "," + std::to_string(std::get<4>(k)) + "," + rate_cells(v.support()) +
            "," + rate_cells(v.extraction()) + "," + num(v.mean(v.nll)) + "," + num(v.mean(v.perplexity)) + "," +
            num(v.mean(v.rouge)));
    }
    t.write(out_dir / "support_geometry.csv", written);
  }

  // Figure 5: attention stacks.
  {
    std::map<std::tuple<std::string, std::string, std::string, int, int, std::string, int>, Group> g;
    for (const auto& l : all) {
      g[{l.objective, l.spec, std::string(to_string(l.r.mode)), l.r.prefix_len, l.r.suffix_len,
         std::string(to_string(l.r.distractor)), l.r.exposure}]
          .add(l.r);
    }
    Table t("objective,spec,mode,prefix_len,suffix_len,distractor,exposure,records,prefix,suffix,sentinels,"
            "previous_target",
            prov);
    for (const auto& [k, v] : g) {
      t.row(csv_field(std::get<0>(k)) + "," + csv_field(std::get<1>(k)) + "," + std::get<2>(k) + "," +
            std::to_string(std::get<3>(k)) + "," + std::to_string(std::get<4>(k)) + "," + std::get<5>(k) + "," +
            std::to_string(std::get<6>(k)) + "," + std::to_string(v.records) + "," + v.attention_cells());
    }
    t.write(out_dir / "attention_stack.csv", written);
  }

  // Figure 6: distractor conditions.
  {
    std::map<std::tuple<std::string, std::string, int, int, int, std::string>, Group> g;
    for (const auto& l : all) {
      if (l.r.mode != ProbeMode::kNativeFim) continue;
      g[{l.objective, l.spec, l.r.exposure, l.r.prefix_len, l.r.suffix_len, std::string(to_string(l.r.distractor))}]
          .add(l.r);
    }
    Table t("objective,spec,exposure,prefix_len,suffix_len,distractor,support_tokens,supported,support,"
            "support_ci_low,support_ci_high,windows,extractable,rate,ci_low,ci_high,mean_nll",
            prov);
    for (const auto& [k, v] : g) {
      t.row(csv_field(std::get<0>(k)) + "," + csv_field(std::get<1>(k)) + "," + std::to_string(std::get<2>(k)) + "," +
            std::to_string(std::get<3>(k)) + "," + std::to_string(std::get<4>(k)) + "," + std::get<5>(k) + "," +
            rate_cells(v.support()) + "," + rate_cells(v.extraction()) + "," + num(v.mean(v.nll)));
    }
    t.write(out_dir / "distractor.csv", written);
  }

  // Window position within the excerpt.
  {
    std::map<std::tuple<std::string, std::string, int, int>, Group> g;
    for (const auto& l : all) {
      if (l.r.mode == ProbeMode::kPrefixOnly) g[{l.objective, l.spec, l.r.exposure, l.r.window}].add(l.r);
    }
    Table t("objective,spec,exposure,window,mean_offset,windows,extractable,rate,ci_low,ci_high,mean_rouge_l", prov);
    for (const auto& [k, v] : g) {
      t.row(csv_field(std::get<0>(k)) + "," + csv_field(std::get<1>(k)) + "," + std::to_string(std::get<2>(k)) + "," +
            std::to_string(std::get<3>(k)) + "," + num(v.mean(v.offset)) + "," + rate_cells(v.extraction()) + "," +
            num(v.mean(v.rouge)));
    }
    t.write(out_dir / "window_position.csv", written);
  }

  // Table 1: pooled attention allocation.
  {
    std::map<std::tuple<std::string, std::string, std::string>, Group> g;
    for (const auto& l : all) {
      if (l.r.distractor == Distractor::kNone) g[{l.objective, l.spec, std::string(to_string(l.r.mode))}].add(l.r);
    }
    Table t("objective,spec,mode,records,prefix,suffix,sentinels,previous_target", prov);
    for (const auto& [k, v] : g) {
      t.row(csv_field(std::get<0>(k)) + "," + csv_field(std::get<1>(k)) + "," + std::get<2>(k) + "," +
            std::to_string(v.records) + "," + v.attention_cells());
    }
    t.write(out_dir / "attention_partition.csv", written);
  }

  // Exposure against mean p_z per excerpt.
  {
    std::map<std::pair<std::string, std::string>, std::map<std::string, std::pair<int, std::vector<double>>>> g;
    for (const auto& l : all) {
      if (l.r.mode != ProbeMode::kPrefixOnly) continue;
      auto& e = g[{l.objective, l.spec}][l.r.excerpt_id];
      e.first = l.r.exposure;
      e.second.push_back(l.r.p_z);
    }
    Table t("objective,spec,excerpts,spearman_rho,p_value", prov);
    for (const auto& [k, per] : g) {
      std::vector<double> x;
      std::vector<double> y;
      for (const auto& [id, e] : per) {
        x.push_back(e.first);
        double s = 0.0;
        for (double p : e.second) s += p;
        y.push_back(s / static_cast<double>(e.second.size()));
      }
      if (x.size() < 3) continue;
      const auto sr = spearman(x, y);
      t.row(csv_field(k.first) + "," + csv_field(k.second) + "," + std::to_string(sr.n) + "," + num(sr.rho) + "," +
            num(sr.p_value));
    }
    t.write(out_dir / "memorization_trend.csv", written);
  }

  // Per-token dumps for windows extractable by both objectives or only one.
  {
    const Vocab vocab = Vocab::byte_level();
    std::map<std::tuple<std::string, std::string, int>, std::map<std::string, const ProbeRecord*>> joined;
    for (const auto& l : all) {
      if (l.r.mode == ProbeMode::kPrefixOnly) joined[{l.spec, l.r.excerpt_id, l.r.window}][l.objective] = &l.r;
    }
    nlohmann::json dump = {{"config_hash", hash}, {"tool_version", kToolVersion}};
    std::map<std::string, nlohmann::json> buckets = {
        {"both", nlohmann::json::array()}, {"fim_only", nlohmann::json::array()}, {"ltr_only", nlohmann::json::array()}};
    for (const auto& [key, by_obj] : joined) {
      const auto ltr = by_obj.find("ltr");
      const auto fim = by_obj.find("fim");
      if (ltr == by_obj.end() || fim == by_obj.end()) continue;
      const bool a = ltr->second->extractable;
      const bool b = fim->second->extractable;
      const char* cat = a && b ? "both" : b ? "fim_only" : a ? "ltr_only" : nullptr;
      if (cat == nullptr || buckets[cat].size() >= 5) continue;
      nlohmann::json tokens = nlohmann::json::array();
      for (std::size_t i = 0; i < ltr->second->target.size(); ++i) {
        tokens.push_back({{"token", vocab.token_text(ltr->second->target[i])},
                          {"q_ltr", ltr->second->q[i]},
                          {"q_fim", fim->second->q[i]}});
      }
      buckets[cat].push_back({{"spec", std::get<0>(key)},
                              {"excerpt_id", std::get<1>(key)},
                              {"window", std::get<2>(key)},
                              {"exposure", ltr->second->exposure},
                              {"p_z_ltr", ltr->second->p_z},
                              {"p_z_fim", fim->second->p_z},
                              {"tokens", tokens}});
    }
    for (auto& [k, v] : buckets) dump[k] = v;
    const fs::path p = out_dir / "qualitative.json";
    write_file_atomic(p, dump.dump(1) + "\n");
    written.push_back(p);
  }
  return written;
}

}  // namespace fimlab
