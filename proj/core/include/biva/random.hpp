// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "biva/tensor.hpp"

namespace biva {

/// Deterministic random stream: identical seed + identical call sequence
/// gives identical draws. The normal transform is implemented in-house so
/// draws do not depend on the standard library's distribution internals.
/// Not safe to share across concurrent callers; fork() child streams instead.
class RandomSource {
 public:
  explicit RandomSource(uint64_t seed = 0);

  uint64_t seed() const { return seed_; }

  double uniform();                      // [0, 1)
  double normal();                       // standard normal (Box-Muller)
  int64_t uniform_int(int64_t n);        // [0, n)
  bool bernoulli(double p);

  template <typename T>
  void fill_normal(Tensor<T>& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<T>(normal());
  }

  template <typename T>
  void fill_uniform(Tensor<T>& t, double lo = 0.0, double hi = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] = static_cast<T>(lo + (hi - lo) * uniform());
  }

  /// Deterministically derive an independent stream (e.g. per worker).
  RandomSource fork(uint64_t salt);

  /// Fisher-Yates shuffle of an index vector.
  void shuffle(std::vector<int64_t>& idx);

  std::string serialize_state() const;
  void restore_state(const std::string& s);

 private:
  uint64_t seed_ = 0;
  std::mt19937_64 gen_;
};

}  // namespace biva
