// SPDX-License-Identifier: Apache-2.0
#include "fimlab/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"
#include "fimlab/random.hpp"

namespace fimlab {

Vocab Vocab::byte_level() { return Vocab{}; }

TokenId Vocab::special(SpecialRole role) const {
  switch (role) {
    case SpecialRole::kFimPrefix: return kByteCount + 0;
    case SpecialRole::kFimMiddle: return kByteCount + 1;
    case SpecialRole::kFimSuffix: return kByteCount + 2;
    case SpecialRole::kEos: return kByteCount + 3;
  }
  return kByteCount + 3;
}

std::string Vocab::token_text(TokenId id) const {
  if (id == fim_prefix()) return "<fim_prefix>";
  if (id == fim_middle()) return "<fim_middle>";
  if (id == fim_suffix()) return "<fim_suffix>";
  if (id == eos()) return "<eos>";
  if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
  char buf[8];
  std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned>(id & 0xff));
  return buf;
}

TokenSeq encode(std::string_view text, const Vocab& /*vocab*/) {
  TokenSeq out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string decode(std::span<const TokenId> seq, const Vocab& vocab) {
  std::string out;
  out.reserve(seq.size());
  for (TokenId id : seq) {
    if (id < 0 || id >= Vocab::kByteCount) {
      if (vocab.is_special(id)) {
        throw Error(ErrorKind::kSpecialTokenInText, "special id " + std::to_string(id) + " in text");
      }
      throw Error(ErrorKind::kInvalidConfig, "token id out of range: " + std::to_string(id));
    }
    out.push_back(static_cast<char>(id));
  }
  return out;
}

std::string_view to_string(DocSource source) {
  return source == DocSource::kCanary ? "canary" : "bulk";
}

DocSource doc_source_from_string(std::string_view s) {
  if (s == "canary") return DocSource::kCanary;
  if (s == "bulk") return DocSource::kBulk;
  throw Error(ErrorKind::kInvalidConfig, "unknown document source: " + std::string(s));
}

namespace {

// Order-2 character model: for each preceding byte pair, the cumulative
// (temperature-adjusted) weights of the following byte.
class MarkovSampler {
 public:
  MarkovSampler(std::string_view text, double temperature) : text_(text) {
    std::vector<std::array<double, 256>> counts(65536);
    std::vector<bool> seen(65536, false);
    for (std::size_t i = 2; i < text.size(); ++i) {
      const auto key = context_key(text[i - 2], text[i - 1]);
      counts[key][static_cast<unsigned char>(text[i])] += 1.0;
      seen[key] = true;
    }
    for (std::size_t key = 0; key < counts.size(); ++key) {
      if (!seen[key]) continue;
      Row row;
      double acc = 0.0;
      for (int c = 0; c < 256; ++c) {
        if (counts[key][c] == 0.0) continue;
        acc += std::pow(counts[key][c], 1.0 / temperature);
        row.symbols.push_back(static_cast<char>(c));
        row.cumulative.push_back(acc);
      }
      rows_.emplace(static_cast<std::uint16_t>(key), std::move(row));
    }
  }

  // Returns a context to restart from after an unseen pair.
  std::pair<char, char> restart(Rng& rng) const {
    const std::size_t i = uniform_index(rng, text_.size() - 2);
    return {text_[i], text_[i + 1]};
  }

  char next(char a, char b, Rng& rng) const {
    auto it = rows_.find(context_key(a, b));
    if (it == rows_.end()) {
      auto [ra, rb] = restart(rng);
      it = rows_.find(context_key(ra, rb));
    }
    const Row& row = it->second;
    const double u = uniform01(rng) * row.cumulative.back();
    const auto pos = std::upper_bound(row.cumulative.begin(), row.cumulative.end(), u);
    const auto idx = std::min<std::size_t>(pos - row.cumulative.begin(), row.symbols.size() - 1);
    return row.symbols[idx];
  }

 private:
  struct Row {
    std::vector<char> symbols;
    std::vector<double> cumulative;
  };

  static std::uint16_t context_key(char a, char b) {
    return static_cast<std::uint16_t>((static_cast<unsigned char>(a) << 8) | static_cast<unsigned char>(b));
  }

  std::string_view text_;
  std::unordered_map<std::uint16_t, Row> rows_;
};

std::string sample_document(const MarkovSampler& sampler, const CorpusGenConfig& config, Rng& rng) {
  const auto span = static_cast<std::uint64_t>(config.max_len - config.min_len + 1);
  const auto len = static_cast<std::size_t>(config.min_len) + uniform_index(rng, span);
  std::string text;
  text.reserve(len);
  auto [a, b] = sampler.restart(rng);
  while (text.size() < len) {
    if (config.noise_rate > 0.0 && bernoulli(rng, config.noise_rate)) {
      const auto noise_span = static_cast<std::uint64_t>(config.noise_max - config.noise_min + 1);
      const auto n = static_cast<std::size_t>(config.noise_min) + uniform_index(rng, noise_span);
      for (std::size_t k = 0; k < n && text.size() < len; ++k) {
        text.push_back(static_cast<char>(32 + uniform_index(rng, 95)));
      }
      std::tie(a, b) = sampler.restart(rng);
      continue;
    }
    const char c = sampler.next(a, b, rng);
    text.push_back(c);
    a = b;
    b = c;
  }
  return text;
}

}  // namespace

std::vector<RawDocument> generate_bulk_corpus(const CorpusGenConfig& config) {
  if (config.num_docs < 0) throw Error(ErrorKind::kInvalidConfig, "num_docs < 0");
  if (config.min_len < 1 || config.max_len < config.min_len) {
    throw Error(ErrorKind::kInvalidConfig, "empty document length range");
  }
  if (config.noise_rate > 0.0 && (config.noise_min < 1 || config.noise_max < config.noise_min)) {
    throw Error(ErrorKind::kInvalidConfig, "empty noise length range");
  }
  if (!(config.temperature > 0.0)) throw Error(ErrorKind::kInvalidConfig, "temperature must be > 0");

  std::vector<RawDocument> docs;
  if (config.num_docs == 0) return docs;
  const MarkovSampler sampler(packaged_seed_text(), config.temperature);
  Rng rng(mix_seed(config.seed, hash_string(config.id_prefix)));
  std::unordered_set<std::string> seen;
  docs.reserve(static_cast<std::size_t>(config.num_docs));
  int attempts = 0;
  while (static_cast<int>(docs.size()) < config.num_docs) {
    std::string text = sample_document(sampler, config, rng);
    if (!seen.insert(text).second) {
      if (++attempts > 1000 * (config.num_docs + 1)) {
        throw Error(ErrorKind::kInvalidConfig, "cannot produce distinct documents with this length range");
      }
      continue;
    }
    char id[32];
    std::snprintf(id, sizeof id, "%06zu", docs.size());
    docs.push_back({config.id_prefix + "-" + id, std::move(text), config.source});
  }
  return docs;
}

std::vector<RawDocument> generate_canary_corpus(CorpusGenConfig config) {
  config.source = DocSource::kCanary;
  if (config.id_prefix == "bulk") config.id_prefix = "canary";
  return generate_bulk_corpus(config);
}

std::vector<Excerpt> slice_windows(const RawDocument& doc, const Vocab& vocab, int window) {
  if (window < 1) throw Error(ErrorKind::kInvalidConfig, "window must be >= 1");
  const TokenSeq tokens = encode(doc.text, vocab);
  const std::size_t w = static_cast<std::size_t>(window);
  std::vector<Excerpt> out;
  for (std::size_t i = 0; (i + 1) * w <= tokens.size(); ++i) {
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "::window_%04zu", i);
    Excerpt e;
    e.excerpt_id = doc.doc_id + suffix;
    e.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(i * w),
                    tokens.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    e.source_doc = doc.doc_id;
    e.window_index = static_cast<int>(i);
    out.push_back(std::move(e));
  }
  return out;
}

namespace {

std::string apply_range(std::string text, const std::optional<CharRange>& range) {
  if (!range) return text;
  const std::size_t begin = std::min(range->begin, text.size());
  const std::size_t end = std::clamp(range->end, begin, text.size());
  return text.substr(begin, end - begin);
}

}  // namespace

std::vector<RawDocument> ingest_documents(const std::filesystem::path& path, DocSource source,
                                          std::optional<CharRange> range) {
  namespace fs = std::filesystem;
  std::vector<RawDocument> docs;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      docs.push_back({f.stem().string(), apply_range(read_file(f), range), source});
    }
    return docs;
  }

  const std::string content = read_file(path);
  const std::string stem = path.stem().string();
  std::string current;
  std::size_t pos = 0;
  auto flush = [&] {
    char id[32];
    std::snprintf(id, sizeof id, "-%04zu", docs.size());
    if (!current.empty() && current.back() == '\n') current.pop_back();
    docs.push_back({stem + id, apply_range(std::move(current), range), source});
    current.clear();
  };
  while (pos <= content.size()) {
    std::size_t nl = content.find('\n', pos);
    const bool last = nl == std::string::npos;
    if (last) nl = content.size();
    std::string_view line(content.data() + pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line == "---DOC---") {
      flush();
    } else {
      current.append(content, pos, nl - pos);
      if (!last) current.push_back('\n');
    }
    if (last) break;
    pos = nl + 1;
  }
  if (!current.empty() || docs.empty()) flush();
  return docs;
}

void write_corpus_manifest(std::span<const RawDocument> docs, const std::filesystem::path& path) {
  std::string out;
  for (const auto& d : docs) {
    nlohmann::json j = {{"doc_id", d.doc_id}, {"source", to_string(d.source)}, {"byte_length", d.text.size()}};
    out += j.dump();
    out.push_back('\n');
  }
  write_file_atomic(path, out);
}

}  // namespace fimlab
