#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sslseg {

/// Hex-encoded SHA-256 digest (OpenSSL-backed).
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_hex(const std::string& text);

}  // namespace sslseg
