#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mset {

using Vec = std::vector<double>;

/// Error raised by every module. The kind maps onto CLI exit codes.
class Error : public std::runtime_error {
 public:
  enum class Kind { Input = 2, Config = 3, Precondition = 4, Numeric = 5, Io = 6, Integrity = 7 };

  Error(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Deterministic generator used everywhere randomness is needed.
using Rng = std::mt19937_64;

/// Child seed derived from a root seed and a stage label (splitmix64 over FNV-1a).
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

std::uint64_t fnv1a64(std::string_view bytes);

/// Uniform double in [0, 1) built from the top 53 bits, identical on every stdlib.
double uniform01(Rng& rng);

/// Uniform integer in [0, n). n must be > 0.
std::size_t uniform_index(Rng& rng, std::size_t n);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);

/// Lowercase, trim and collapse internal whitespace runs to one space.
std::string normalize_query(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);
std::string sha256_hex(std::string_view bytes);

}  // namespace mset
