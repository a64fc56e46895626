#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lego {

// Error hierarchy. The class name (minus namespace) is the stable error
// name surfaced by the CLI and referenced in tests.
struct Error : std::runtime_error {
  Error(std::string name, const std::string& what)
      : std::runtime_error(name + ": " + what), name(std::move(name)) {}
  std::string name;
};

#define LEGO_ERROR(Name)                                   \
  struct Name : Error {                                    \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

LEGO_ERROR(EmptyText);
LEGO_ERROR(DirectionTooSmall);
LEGO_ERROR(VocabTooSmall);
LEGO_ERROR(UnknownLanguageTag);
LEGO_ERROR(LengthMismatch);
LEGO_ERROR(ShapeMismatch);
LEGO_ERROR(NonScalarLoss);
LEGO_ERROR(MissingGrad);
LEGO_ERROR(VocabMismatch);
LEGO_ERROR(DimMismatch);
LEGO_ERROR(FlowDataMismatch);
LEGO_ERROR(CorruptCheckpoint);
LEGO_ERROR(VersionMismatch);
LEGO_ERROR(DigestMismatch);
LEGO_ERROR(MissingBranch);
LEGO_ERROR(ConfigError);

#undef LEGO_ERROR

// FNV-1a, used for content hashes, parameter-set hashes and seed derivation.
// Not a crypto hash; collisions are acceptable for integrity checking here.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), h);
}

// Deterministic RNG helpers. std::shuffle / std::uniform_int_distribution are
// implementation-defined, so anything that must be reproducible bit-for-bit
// goes through these.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Unbiased integer in [0, n) via rejection sampling.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  float normal() {
    // Box-Muller on fixed-width uniforms.
    double u1 = (gen_() >> 11) * 0x1.0p-53 + 1e-300;
    double u2 = (gen_() >> 11) * 0x1.0p-53;
    return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                              std::cos(6.283185307179586 * u2));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// Derives a child seed from a parent seed and a label, so independent
// pipeline stages draw from independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& label) {
  std::uint64_t h = fnv1a(label);
  return fnv1a(&seed, sizeof(seed), h);
}

}  // namespace lego
