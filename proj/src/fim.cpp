// SPDX-License-Identifier: Apache-2.0
#include "fimlab/fim.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "fimlab/error.hpp"
#include "fimlab/io.hpp"

namespace fimlab {

TokenSeq FimDocument::original() const {
  TokenSeq out;
  out.reserve(prefix.size() + middle.size() + suffix.size());
  out.insert(out.end(), prefix.begin(), prefix.end());
  out.insert(out.end(), middle.begin(), middle.end());
  out.insert(out.end(), suffix.begin(), suffix.end());
  return out;
}

FimDocument fim_split_at(std::span<const TokenId> doc, std::size_t i, std::size_t j, std::string original_id) {
  if (i > j || j > doc.size()) throw Error(ErrorKind::kInvalidSplit, "split points must satisfy i <= j <= len");
  FimDocument out;
  out.prefix.assign(doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(i));
  out.middle.assign(doc.begin() + static_cast<std::ptrdiff_t>(i), doc.begin() + static_cast<std::ptrdiff_t>(j));
  out.suffix.assign(doc.begin() + static_cast<std::ptrdiff_t>(j), doc.end());
  out.split_begin = i;
  out.split_end = j;
  out.original_id = std::move(original_id);
  return out;
}

FimDocument fim_split(std::span<const TokenId> doc, Rng& rng, std::string original_id) {
  if (doc.empty()) throw Error(ErrorKind::kEmptyDocument, "cannot split an empty document");
  const std::uint64_t n = doc.size();
  std::uint64_t u = uniform_index(rng, (n + 1) * (n + 2) / 2);
  // Pairs are enumerated with i ascending; for a given i there are n - i + 1 choices of j.
  std::uint64_t i = 0;
  while (u >= n - i + 1) {
    u -= n - i + 1;
    ++i;
  }
  return fim_split_at(doc, i, i + u, std::move(original_id));
}

namespace {

void require_sentinels(const Vocab& vocab) {
  for (TokenId id : {vocab.fim_prefix(), vocab.fim_middle(), vocab.fim_suffix(), vocab.eos()}) {
    if (!vocab.is_special(id)) throw Error(ErrorKind::kMissingSentinel, "vocabulary lacks FIM sentinels");
  }
}

}  // namespace

TokenSeq render_fim(const FimDocument& doc, const Vocab& vocab) {
  require_sentinels(vocab);
  TokenSeq out;
  out.reserve(doc.prefix.size() + doc.middle.size() + doc.suffix.size() + 4);
  out.push_back(vocab.fim_prefix());
  out.insert(out.end(), doc.prefix.begin(), doc.prefix.end());
  out.push_back(vocab.fim_suffix());
  out.insert(out.end(), doc.suffix.begin(), doc.suffix.end());
  out.push_back(vocab.fim_middle());
  out.insert(out.end(), doc.middle.begin(), doc.middle.end());
  out.push_back(vocab.eos());
  return out;
}

TokenSeq render_ltr(std::span<const TokenId> doc, const Vocab& vocab) {
  TokenSeq out(doc.begin(), doc.end());
  out.push_back(vocab.eos());
  return out;
}

TokenSeq de_fim(std::span<const TokenId> seq, const Vocab& vocab) {
  auto malformed = [](const std::string& m) { return Error(ErrorKind::kMalformedFim, m); };
  if (seq.size() < 4 || seq.front() != vocab.fim_prefix() || seq.back() != vocab.eos()) {
    throw malformed("expected <fim_prefix> ... <eos>");
  }
  std::size_t suffix_at = 0;
  std::size_t middle_at = 0;
  for (std::size_t t = 1; t + 1 < seq.size(); ++t) {
    const TokenId id = seq[t];
    if (!vocab.is_special(id)) continue;
    if (id == vocab.fim_suffix() && suffix_at == 0 && middle_at == 0) {
      suffix_at = t;
    } else if (id == vocab.fim_middle() && suffix_at != 0 && middle_at == 0) {
      middle_at = t;
    } else {
      throw malformed("unexpected special token at position " + std::to_string(t));
    }
  }
  if (suffix_at == 0 || middle_at == 0) throw malformed("missing <fim_suffix> or <fim_middle>");
  TokenSeq out;
  out.reserve(seq.size() - 4);
  out.insert(out.end(), seq.begin() + 1, seq.begin() + static_cast<std::ptrdiff_t>(suffix_at));
  out.insert(out.end(), seq.begin() + static_cast<std::ptrdiff_t>(middle_at) + 1, seq.end() - 1);
  out.insert(out.end(), seq.begin() + static_cast<std::ptrdiff_t>(suffix_at) + 1,
             seq.begin() + static_cast<std::ptrdiff_t>(middle_at));
  return out;
}

std::size_t PackedBatchStream::content_tokens(const Vocab& vocab) const {
  std::size_t n = 0;
  for (const auto& occ : occurrences) {
    for (std::size_t t = occ.offset; t < occ.offset + occ.length; ++t) n += vocab.is_special(tokens[t]) ? 0 : 1;
  }
  return n;
}

Batch make_batch(const PackedBatchStream& stream, std::size_t first_sequence, std::size_t count) {
  const std::size_t len = static_cast<std::size_t>(stream.seq_len);
  if (first_sequence + count > stream.num_sequences()) {
    throw Error(ErrorKind::kStreamExhausted, "batch past the end of the stream");
  }
  const std::size_t begin = first_sequence * len;
  const std::size_t n = count * len;
  Batch batch;
  batch.tokens = std::span<const TokenId>(stream.tokens).subspan(begin, n);
  batch.loss_mask = std::span<const std::uint8_t>(stream.loss_mask).subspan(begin, n);
  batch.segments.resize(n);
  std::int32_t seg = -1;
  for (std::size_t t = 0; t < n; ++t) {
    if (t % len == 0 || stream.boundary[begin + t]) ++seg;
    batch.segments[t] = seg;
  }
  return batch;
}

PackedBatchStream build_training_stream(std::span<const StreamSource> sources, const FimMixture& mixture, int seq_len,
                                        std::uint64_t seed, const Vocab& vocab) {
  auto valid_rate = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!valid_rate(mixture.bulk_fim_rate) || !valid_rate(mixture.canary_fim_rate)) {
    throw Error(ErrorKind::kInvalidRate, "FIM rates must lie in [0, 1]");
  }
  if (seq_len < 2) throw Error(ErrorKind::kInvalidConfig, "seq_len must be >= 2");

  // Placement list: one entry per exposure, ordered by source id so the
  // shuffle depends only on the multiset of sources.
  std::vector<std::size_t> by_id(sources.size());
  std::iota(by_id.begin(), by_id.end(), std::size_t{0});
  std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) { return sources[a].id < sources[b].id; });
  std::vector<std::size_t> placements;
  for (std::size_t s : by_id) {
    if (sources[s].exposure < 0) throw Error(ErrorKind::kInvalidConfig, "negative exposure for " + sources[s].id);
    for (int e = 0; e < sources[s].exposure; ++e) placements.push_back(s);
  }
  Rng order_rng(mix_seed(seed, hash_string("order")));
  shuffle_in_place(placements.begin(), placements.end(), order_rng);

  Rng format_rng(mix_seed(seed, hash_string("format")));
  PackedBatchStream stream;
  stream.seq_len = seq_len;
  stream.vocab_size = vocab.size();
  for (std::size_t s : placements) {
    const StreamSource& src = sources[s];
    const double rate = src.canary ? mixture.canary_fim_rate : mixture.bulk_fim_rate;
    DocOccurrence occ;
    occ.doc_id = src.id;
    occ.canary = src.canary;
    occ.offset = stream.tokens.size();
    TokenSeq rendered;
    if (rate > 0.0 && bernoulli(format_rng, rate) && !src.tokens->empty()) {
      const FimDocument f = fim_split(*src.tokens, format_rng, src.id);
      occ.fim = true;
      occ.split_begin = f.split_begin;
      occ.split_end = f.split_end;
      rendered = render_fim(f, vocab);
    } else {
      rendered = render_ltr(*src.tokens, vocab);
    }
    occ.length = rendered.size();
    stream.tokens.insert(stream.tokens.end(), rendered.begin(), rendered.end());
    stream.boundary.push_back(1);
    stream.boundary.insert(stream.boundary.end(), rendered.size() - 1, 0);
    stream.occurrences.push_back(std::move(occ));
  }

  const std::size_t len = static_cast<std::size_t>(seq_len);
  const std::size_t used = stream.tokens.size();
  const std::size_t padded = (used + len - 1) / len * len;
  if (padded > used) {
    stream.tokens.resize(padded, vocab.eos());
    stream.boundary.resize(padded, 0);
    stream.boundary[used] = 1;
  }
  stream.loss_mask.assign(padded, 0);
  for (std::size_t t = 0; t + 1 < used; ++t) {
    const bool same_sequence = (t + 1) % len != 0;
    stream.loss_mask[t] = same_sequence && !stream.boundary[t + 1] ? 1 : 0;
  }
  return stream;
}

std::map<std::string, int> count_occurrences(const PackedBatchStream& stream, std::span<const StreamSource> sources,
                                             const Vocab& vocab) {
  auto key = [](std::span<const TokenId> t) {
    return std::string(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(TokenId));
  };
  std::unordered_map<std::string, std::string> by_content;
  for (const auto& s : sources) by_content.emplace(key(*s.tokens), s.id);

  std::map<std::string, int> counts;
  std::size_t used = 0;
  for (const auto& occ : stream.occurrences) used = std::max(used, occ.offset + occ.length);
  std::size_t start = 0;
  for (std::size_t t = 1; t <= used; ++t) {
    if (t < used && !stream.boundary[t]) continue;
    std::span<const TokenId> doc(stream.tokens.data() + start, t - start);
    TokenSeq content;
    if (!doc.empty() && doc.front() == vocab.fim_prefix()) {
      content = de_fim(doc, vocab);
    } else if (!doc.empty() && doc.back() == vocab.eos()) {
      content.assign(doc.begin(), doc.end() - 1);
    }
    auto it = by_content.find(key(content));
    if (it != by_content.end()) ++counts[it->second];
    start = t;
  }
  return counts;
}

namespace {

constexpr char kShardMagic[8] = {'F', 'I', 'M', 'L', 'A', 'B', 'S', 'H'};

}  // namespace

void write_stream_shard(const PackedBatchStream& stream, const std::filesystem::path& path,
                        const std::string& config_hash) {
  const nlohmann::json header = {{"format", "fimlab-stream"},
                                 {"version", 1},
                                 {"tool_version", kToolVersion},
                                 {"seq_len", stream.seq_len},
                                 {"vocab_size", stream.vocab_size},
                                 {"count", stream.num_sequences()},
                                 {"config_hash", config_hash}};
  const std::string head = header.dump();
  std::string bytes(kShardMagic, 8);
  const std::uint64_t len = head.size();
  bytes.append(reinterpret_cast<const char*>(&len), 8);
  bytes += head;
  bytes.append(reinterpret_cast<const char*>(stream.tokens.data()), stream.tokens.size() * sizeof(TokenId));
  bytes.append(reinterpret_cast<const char*>(stream.boundary.data()), stream.boundary.size());
  bytes.append(reinterpret_cast<const char*>(stream.loss_mask.data()), stream.loss_mask.size());
  write_file_atomic(path, bytes);
}

PackedBatchStream read_stream_shard(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kShardMagic, 8) != 0) {
    throw Error(ErrorKind::kIo, path.string() + " is not a stream shard");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  const auto header = nlohmann::json::parse(bytes.substr(16, len));
  PackedBatchStream stream;
  stream.seq_len = header.at("seq_len");
  stream.vocab_size = header.at("vocab_size");
  const std::size_t n = header.at("count").get<std::size_t>() * static_cast<std::size_t>(stream.seq_len);
  std::size_t pos = 16 + len;
  if (bytes.size() != pos + n * (sizeof(TokenId) + 2)) throw Error(ErrorKind::kIo, "truncated stream shard");
  stream.tokens.resize(n);
  std::memcpy(stream.tokens.data(), bytes.data() + pos, n * sizeof(TokenId));
  pos += n * sizeof(TokenId);
  stream.boundary.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  pos += n;
  stream.loss_mask.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                          bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return stream;
}

void write_stream_index(const PackedBatchStream& stream, const std::filesystem::path& path,
                        const std::string& shard_name) {
  nlohmann::json index = nlohmann::json::object();
  for (const auto& occ : stream.occurrences) {
    if (!occ.canary) continue;
    index[occ.doc_id].push_back({shard_name, occ.offset});
  }
  write_file_atomic(path, index.dump(1));
}

}  // namespace fimlab
