#pragma once

// Byte-level helpers shared by snapshots and fingerprints. Backed by OpenSSL.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "epgfn/common.hpp"

namespace epgfn::codec {

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return {};
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.empty()) return {};
  if (text.size() % 4 != 0) throw Error(Errc::truncated_payload, "base64 length not a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw Error(Errc::truncated_payload, "invalid base64 payload");
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

inline std::vector<std::uint8_t> doubles_to_le(std::span<const double> xs) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  std::vector<std::uint8_t> out(xs.size() * sizeof(double));
  if (!xs.empty()) std::memcpy(out.data(), xs.data(), out.size());
  return out;
}

inline std::vector<double> le_to_doubles(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % sizeof(double) != 0) throw Error(Errc::truncated_payload, "parameter payload not a multiple of 8 bytes");
  std::vector<double> out(bytes.size() / sizeof(double));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline std::string sha256_hex(std::string_view data, std::size_t hex_chars = 64) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len && out.size() < hex_chars; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  out.resize(std::min(out.size(), hex_chars));
  return out;
}

}  // namespace epgfn::codec
