// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "biva/random.hpp"
#include "biva/tensor.hpp"

using namespace biva;

TEST_CASE("tensor basic shape and storage") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  t.fill(2.0f);
  CHECK(t.sum() == doctest::Approx(12.0f));

  auto r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  r[0] = 7.0f;
  CHECK(t[0] == 7.0f);  // shared storage

  auto c = t.clone();
  c[0] = 1.0f;
  CHECK(t[0] == 7.0f);

  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("random source determinism and stream independence") {
  RandomSource a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());

  RandomSource c(42), d(43);
  bool all_equal = true;
  for (int i = 0; i < 10; ++i)
    if (c.normal() != d.normal()) all_equal = false;
  CHECK_FALSE(all_equal);
}

TEST_CASE("random source state round-trip") {
  RandomSource a(7);
  for (int i = 0; i < 17; ++i) a.normal();
  auto s = a.serialize_state();
  RandomSource b(0);
  b.restore_state(s);
  for (int i = 0; i < 50; ++i) CHECK(a.normal() == b.normal());
}

TEST_CASE("normal moments") {
  RandomSource rng(1);
  const int n = 200000;
  double m = 0, m2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    m += v;
    m2 += v * v;
  }
  m /= n;
  m2 /= n;
  CHECK(std::abs(m) < 0.01);
  CHECK(std::abs(m2 - 1.0) < 0.02);
}
