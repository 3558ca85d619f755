// SPDX-License-Identifier: Apache-2.0
#include "fimlab/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>
#include <sstream>

#include "fimlab/error.hpp"

namespace fimlab {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kSpecialTokenInText: return "SpecialTokenInText";
    case ErrorKind::kInvalidConfig: return "InvalidConfig";
    case ErrorKind::kModelMismatch: return "ModelMismatch";
    case ErrorKind::kTooShort: return "TooShort";
    case ErrorKind::kEmptyInput: return "EmptyInput";
    case ErrorKind::kNotEnoughExcerpts: return "NotEnoughExcerpts";
    case ErrorKind::kEmptyDocument: return "EmptyDocument";
    case ErrorKind::kMissingSentinel: return "MissingSentinel";
    case ErrorKind::kMalformedFim: return "MalformedFim";
    case ErrorKind::kInvalidRate: return "InvalidRate";
    case ErrorKind::kContextOverflow: return "ContextOverflow";
    case ErrorKind::kNaNDetected: return "NaNDetected";
    case ErrorKind::kEmptyLossMask: return "EmptyLossMask";
    case ErrorKind::kStreamExhausted: return "StreamExhausted";
    case ErrorKind::kInvalidDistribution: return "InvalidDistribution";
    case ErrorKind::kExcerptTooShort: return "ExcerptTooShort";
    case ErrorKind::kInvalidSplit: return "InvalidSplit";
    case ErrorKind::kUnlabeledPosition: return "UnlabeledPosition";
    case ErrorKind::kSchemaMismatch: return "SchemaMismatch";
    case ErrorKind::kIo: return "Io";
  }
  return "Unknown";
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kIo, "cannot open " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest.data(), &len) != 1) {
    throw Error(ErrorKind::kIo, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace fimlab
