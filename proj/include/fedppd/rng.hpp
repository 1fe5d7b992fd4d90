#ifndef FEDPPD_RNG_HPP
#define FEDPPD_RNG_HPP

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <vector>

namespace fedppd {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Stream purposes. Every random draw in a run comes from a stream keyed by
// (top-level seed, purpose, a, b) so results never depend on scheduling.
enum class Stream : std::uint64_t {
  data = 1,
  partition = 2,
  init = 3,
  client = 4,
  server = 5,
  eval = 6,
  acquire = 7,
  pools = 8,
};

// Counter-based generator: the n-th output is splitmix64(key + n * gamma).
// Satisfies UniformRandomBitGenerator so it plugs into <random> distributions.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t key = 0) : key_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    ++counter_;
    return splitmix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  // Child stream keyed by this stream's key and the given tags; does not
  // advance this stream.
  Rng split(std::initializer_list<std::uint64_t> tags) const {
    std::uint64_t k = splitmix64(key_ ^ 0xD1B54A32D192ED03ULL);
    for (std::uint64_t t : tags) k = splitmix64(k ^ splitmix64(t + 0x632BE59BD9B4E019ULL));
    return Rng(k);
  }

  static Rng stream(std::uint64_t seed, Stream purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
    return Rng(seed).split({static_cast<std::uint64_t>(purpose), a, b});
  }

  double normal() { return normal_(*this); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(*this); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(*this); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(*this); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(*this); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), *this);
  }

  std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace fedppd

#endif  // FEDPPD_RNG_HPP
