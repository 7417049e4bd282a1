// Shared scalar types, error taxonomy, and byte digests.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace clab {

// Byte-level vocabulary; ids are kept wide so bad input is detectable.
using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A precondition on values or shapes was violated.
struct InvalidInputError : Error {
  using Error::Error;
};

// Input is structurally valid but degenerate for the operation (zero vector, ...).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Sequence or buffer exceeds a configured capacity.
struct CapacityError : Error {
  using Error::Error;
};

// On-disk artifact is corrupt or malformed.
struct FormatError : Error {
  using Error::Error;
};

struct UnsupportedVersionError : FormatError {
  using FormatError::FormatError;
};

// A generator cannot satisfy its output contract (e.g. not enough distinct values).
struct GenerationError : Error {
  using Error::Error;
};

// Training produced a non-finite value; diagnostics were emitted before the throw.
struct NumericError : Error {
  using Error::Error;
};

// A statistic is undefined on this input; report and abstain rather than fabricate.
struct DegenerateStatisticError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) {
    throw InvalidInputError(msg);
  }
}

template <typename Real>
bool all_finite(std::span<const Real> xs) {
  for (Real x : xs) {
    if (!std::isfinite(static_cast<double>(x))) {
      return false;
    }
  }
  return true;
}

// FNV-1a, used for corpus digests and output-determinism checks.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::string digest_tokens(std::span<const TokenId> toks) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(toks.size());
  for (TokenId t : toks) {
    bytes.push_back(static_cast<std::uint8_t>(t & 0xff));
  }
  return hex64(fnv1a64(bytes));
}

}  // namespace clab
