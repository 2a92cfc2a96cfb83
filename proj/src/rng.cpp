#include "pini/rng.hpp"

#include <cmath>

namespace pini {

double RandomStream::normal() {
  // Box-Muller without spare caching: the draw count per sample is fixed,
  // which keeps derived call sites reproducible under reordering.
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

std::vector<double> RandomStream::normal_vec(std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = normal();
  return out;
}

}  // namespace pini
