#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stm {

// Thrown for malformed user input (config files, recipe files, CLI flags).
// The CLI maps this to exit code 2; every other exception maps to 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// FNV-1a, used for config hashes and audit-log prompt hashes.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v);

// Deterministic RNG (xoshiro256++ seeded via splitmix64). The standard
// distributions are implementation-defined, so every draw the pipeline
// depends on goes through this class to keep artifacts byte-reproducible
// across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Unbiased integer in [0, bound), bound >= 1.
  std::uint64_t below(std::uint64_t bound);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform();

  // Box-Muller; one draw per call, second value cached.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      std::size_t j = static_cast<std::size_t>(below(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // Derive an independent stream, e.g. per expert or per sweep worker.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t state_[4];
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// Runs fn(0..n-1) on `workers` threads. Callers are responsible for writing
// results into disjoint slots; the schedule is not part of any contract.
void parallel_for(std::size_t n, int workers,
                  const std::function<void(std::size_t)>& fn);

}  // namespace stm
