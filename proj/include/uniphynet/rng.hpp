#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace uniphynet {

// Counter-based splittable random stream.
//
// A stream is a (key, counter) pair; the n-th draw is a SplitMix64 finalizer
// applied to key + n * gamma. split() derives a child key by hashing, so
// children never share state with the parent and the same split path always
// yields the same sequence regardless of how many draws happened elsewhere.
// Satisfies UniformRandomBitGenerator, so it plugs into <random> distributions.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed = 0);

  RngStream split(std::uint64_t index) const;
  RngStream split(std::string_view name) const;

  result_type operator()();

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal(double mean = 0.0, double stddev = 1.0);
  std::uint64_t below(std::uint64_t n);   // [0, n)

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_name(std::string_view name);

}  // namespace uniphynet
