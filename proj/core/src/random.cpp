// SPDX-License-Identifier: Apache-2.0
#include "biva/random.hpp"

#include <cmath>
#include <sstream>

namespace biva {

RandomSource::RandomSource(uint64_t seed) : seed_(seed), gen_(seed) {}

double RandomSource::uniform() {
  // 53-bit mantissa in [0,1)
  return (gen_() >> 11) * 0x1.0p-53;
}

double RandomSource::normal() {
  // Box-Muller, no caching of the second deviate: call sequence stays in
  // lockstep with the uniform stream.
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int64_t RandomSource::uniform_int(int64_t n) {
  // Rejection sampling for an unbiased draw.
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - (UINT64_MAX % un);
  uint64_t v;
  do {
    v = gen_();
  } while (v >= limit);
  return static_cast<int64_t>(v % un);
}

bool RandomSource::bernoulli(double p) { return uniform() < p; }

RandomSource RandomSource::fork(uint64_t salt) {
  // splitmix64 of (seed, salt, fresh draw) for stream separation
  uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ULL * (salt + 1)) ^ gen_();
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return RandomSource(x);
}

void RandomSource::shuffle(std::vector<int64_t>& idx) {
  for (int64_t i = static_cast<int64_t>(idx.size()) - 1; i > 0; --i) {
    int64_t j = uniform_int(i + 1);
    std::swap(idx[i], idx[j]);
  }
}

std::string RandomSource::serialize_state() const {
  std::ostringstream os;
  os << seed_ << " " << gen_;
  return os.str();
}

void RandomSource::restore_state(const std::string& s) {
  std::istringstream is(s);
  is >> seed_ >> gen_;
  if (!is) throw DataError("RandomSource: corrupt serialized state");
}

}  // namespace biva
