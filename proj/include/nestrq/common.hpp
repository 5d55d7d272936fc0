#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nestrq {

// Error taxonomy. The CLI maps these onto exit codes:
//   IoError -> 1, ConfigError/InputError/UsageError/ShapeError -> 2,
//   DegenerateDataError -> 3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};
struct InputError : Error {
  explicit InputError(const std::string& msg) : Error("input: " + msg) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error("usage: " + msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};
struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error("domain: " + msg) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};
// Batch carried no valid loss terms; the caller decides whether to skip or abort.
struct DegenerateDataError : Error {
  explicit DegenerateDataError(const std::string& msg) : Error("degenerate: " + msg) {}
};

// FNV-1a, 64 bit. Used for config digests and artifact fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace nestrq
