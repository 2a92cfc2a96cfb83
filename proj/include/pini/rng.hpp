#pragma once

#include <cstdint>
#include <vector>

namespace pini {

// Deterministic random stream (splitmix64 state advance, Box-Muller normals).
// Substreams obtained through derive(tag) do not consume parent state, so the
// noise drawn for one injection site is reproducible regardless of which other
// sites are active.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : state_(mix(seed ^ 0x6a09e667f3bcc908ull)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  double normal();
  std::vector<double> normal_vec(std::size_t n);

  RandomStream derive(std::uint64_t tag) const {
    return RandomStream(mix(state_ ^ mix(tag + 0x9e3779b97f4a7c15ull)));
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

}  // namespace pini
