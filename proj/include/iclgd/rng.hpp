#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "iclgd/matrix.hpp"

namespace iclgd {

// xoshiro256** seeded through splitmix64. Normal deviates use the polar
// Box-Muller method on 53-bit uniforms, so the stream depends only on the
// seed and on IEEE double arithmetic.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  double normal();

  // Independent generator for a named sub-stream. Does not advance *this.
  SeededRng derive(std::string_view stream) const;
  SeededRng derive(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Matrix sample_gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean, double std);

// Permutation of {0..n-1}; position i of the reordered sequence holds
// original element perm[i].
struct Ordering {
  std::vector<std::size_t> perm;

  static Ordering identity(std::size_t n);
  static Ordering reversed(std::size_t n);

  std::size_t size() const { return perm.size(); }
  bool is_valid() const;
  Ordering inverse() const;

  bool operator==(const Ordering&) const = default;
};

// Ordering 0 is the identity; the remaining m-1 are distinct non-identity
// permutations drawn without replacement.
std::vector<Ordering> random_orderings(std::size_t n, std::size_t m, SeededRng& rng);

}  // namespace iclgd
