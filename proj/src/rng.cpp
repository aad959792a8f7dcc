#include "iclgd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

namespace iclgd {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

// FNV-1a, used only to turn stream names into integers.
std::uint64_t hash_name(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// n! when it fits comfortably, otherwise nullopt.
std::optional<std::uint64_t> factorial(std::size_t n) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (f > (std::uint64_t{1} << 62) / i) return std::nullopt;
    f *= i;
  }
  return f;
}

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) s = splitmix64(x);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t SeededRng::uniform_index(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: n must be positive");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

SeededRng SeededRng::derive(std::string_view stream) const { return derive(hash_name(stream)); }

SeededRng SeededRng::derive(std::uint64_t stream) const {
  std::uint64_t x = seed_ ^ rotl(stream, 17) ^ 0x5851f42d4c957f2dULL;
  splitmix64(x);
  return SeededRng(splitmix64(x) ^ stream);
}

Matrix sample_gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean, double std) {
  if (!(std >= 0.0)) throw std::invalid_argument("sample_gaussian: std must be non-negative");
  Matrix out(rows, cols);
  for (double& v : out.values()) v = mean + std * rng.normal();
  return out;
}

Ordering Ordering::identity(std::size_t n) {
  Ordering o;
  o.perm.resize(n);
  std::iota(o.perm.begin(), o.perm.end(), std::size_t{0});
  return o;
}

Ordering Ordering::reversed(std::size_t n) {
  Ordering o = identity(n);
  std::reverse(o.perm.begin(), o.perm.end());
  return o;
}

bool Ordering::is_valid() const {
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) return false;
    seen[p] = true;
  }
  return true;
}

Ordering Ordering::inverse() const {
  Ordering inv;
  inv.perm.resize(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv.perm[perm[i]] = i;
  return inv;
}

std::vector<Ordering> random_orderings(std::size_t n, std::size_t m, SeededRng& rng) {
  if (n == 0 || m == 0) throw std::invalid_argument("random_orderings: n and m must be >= 1");
  const auto total = factorial(n);
  if (total && m > *total) {
    throw std::invalid_argument("random_orderings: requested " + std::to_string(m) +
                                " orderings but only " + std::to_string(*total) + " exist for n=" +
                                std::to_string(n));
  }

  std::vector<Ordering> out{Ordering::identity(n)};
  if (m == 1) return out;

  if (total && *total <= 40320 && m * 2 > *total) {
    // Dense request: enumerate, shuffle the non-identity permutations, take a prefix.
    std::vector<Ordering> rest;
    Ordering cur = Ordering::identity(n);
    while (std::next_permutation(cur.perm.begin(), cur.perm.end())) rest.push_back(cur);
    for (std::size_t i = rest.size(); i > 1; --i) {
      std::swap(rest[i - 1], rest[rng.uniform_index(i)]);
    }
    out.insert(out.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(m - 1));
    return out;
  }

  std::set<std::vector<std::size_t>> seen{out.front().perm};
  while (out.size() < m) {
    Ordering o = Ordering::identity(n);
    for (std::size_t i = n; i > 1; --i) std::swap(o.perm[i - 1], o.perm[rng.uniform_index(i)]);
    if (seen.insert(o.perm).second) out.push_back(std::move(o));
  }
  return out;
}

}  // namespace iclgd
