#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace dcs {

/// SplitMix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x);

/// Counter-based random generator.
///
/// The n-th 64-bit draw (n = 0, 1, ...) of a generator with seed s is
/// `splitmix64(s + (n + 1) * 0x9E3779B97F4A7C15)`, so the whole state is the
/// pair (seed, counter) and any implementation can reproduce a stream.
/// Derived quantities use only integer arithmetic and IEEE double operations:
///
///   uniform()      = (draw >> 11) * 2^-53                 in [0, 1)
///   uniform_open() = ((draw >> 11) + 0.5) * 2^-53         in (0, 1)
///   below(n)       = draw % n, rejecting draws < (2^64 - n) % n
///   normal()       = sqrt(-2 ln u1) * cos(2 pi u2), u1 = uniform_open(),
///                    u2 = uniform(); two draws per sample, no caching
///   fork(k)        = Rng(splitmix64(seed ^ splitmix64(k + 1)))
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();
  double uniform();
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);

  Rng fork(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  /// Fisher-Yates, walking from the back.
  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  /// Uniformly random permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace dcs
