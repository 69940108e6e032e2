// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "biva/autodiff.hpp"
#include "biva/nn.hpp"
#include "testutil.hpp"

using namespace biva;

namespace {

// Builds a scalar loss from a fixed op pipeline touching most kernels.
double pipeline_loss(ParamStore<double>& ps, const Tensor<double>& x,
                     bool with_grad) {
  Tape<double> tp;
  auto xin = tp.constant(x);
  auto w1 = tp.param(ps.at("w1"));
  auto b1 = tp.param(ps.at("b1"));
  auto h = ag::linear(tp, xin, w1, b1);
  h = ag::elu(tp, h);
  auto g = tp.param(ps.at("g"));
  auto wn = ag::weight_norm(tp, tp.param(ps.at("v")), g);
  h = ag::linear(tp, h, wn, NodeP<double>{});
  auto a = ag::sigmoid(tp, ag::slice_dim1(tp, h, 0, 2));
  auto b = ag::softplus(tp, ag::slice_dim1(tp, h, 2, 2));
  auto joined = ag::concat_dim1(tp, {a, b});
  auto sq = ag::square(tp, joined);
  auto lse = ag::logsumexp_lastdim(tp, sq);
  auto tanhpart = ag::tanh(tp, ag::sum_per_sample(tp, ag::mul(tp, h, h)));
  auto total = ag::add(tp, lse, tanhpart);
  total = ag::add(tp, total, ag::exp(tp, ag::scale(tp, lse, -0.3)));
  total = ag::add(tp, total,
                  ag::log(tp, ag::add_scalar(tp, ag::square(tp, lse), 1.0)));
  total = ag::add(
      tp, total,
      ag::sqrt(tp, ag::add_scalar(tp, ag::sum_per_sample(tp, sq), 0.5)));
  total = ag::add(tp, total, ag::sin(tp, lse));
  auto loss = ag::mean_all(tp, total);
  if (with_grad) tp.backward(loss);
  return loss->value[0];
}

}  // namespace

TEST_CASE("finite differences across the op pipeline") {
  RandomSource rng(3);
  ParamStore<double> ps;
  auto& w1 = ps.create("w1", {4, 3});
  auto& b1 = ps.create("b1", {4});
  auto& v = ps.create("v", {4, 4});
  auto& g = ps.create("g", {4});
  rng.fill_normal(w1.value);
  rng.fill_normal(b1.value);
  rng.fill_normal(v.value);
  g.value.fill(1.1);

  Tensor<double> x({5, 3});
  rng.fill_normal(x);

  auto loss = [&] { return pipeline_loss(ps, x, false); };
  auto grads = [&] {
    ps.zero_grad();
    pipeline_loss(ps, x, true);
  };
  CHECK(test::finite_difference_check(ps, loss, grads) < 1e-6);
}

TEST_CASE("conv2d matches finite differences, stride 1 and 2") {
  for (int stride : {1, 2}) {
    RandomSource rng(9 + stride);
    ParamStore<double> ps;
    auto& w = ps.create("w", {3, 2, 3, 3});
    auto& b = ps.create("b", {3});
    rng.fill_normal(w.value);
    rng.fill_normal(b.value);
    Tensor<double> x({2, 2, 5, 5});
    rng.fill_normal(x);

    auto run = [&](bool grad) {
      Tape<double> tp;
      auto h = ag::conv2d(tp, tp.constant(x), tp.param(ps.at("w")),
                          tp.param(ps.at("b")), stride);
      h = ag::elu(tp, h);
      h = ag::resize_nearest(tp, h, 5, 5);
      auto loss = ag::mean_all(tp, ag::square(tp, h));
      if (grad) tp.backward(loss);
      return loss->value[0];
    };
    auto loss = [&] { return run(false); };
    auto grads = [&] {
      ps.zero_grad();
      run(true);
    };
    CHECK(test::finite_difference_check(ps, loss, grads) < 1e-6);
  }
}

TEST_CASE("softmax, gather, logsumexp_dim1, tile, where, div, clamp") {
  RandomSource rng(17);
  ParamStore<double> ps;
  auto& w = ps.create("w", {6, 4});
  rng.fill_normal(w.value);
  Tensor<double> x({3, 4});
  rng.fill_normal(x);
  std::vector<int64_t> idx = {0, 2, 1};

  Tensor<double> mask({3, 2});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = i % 2 ? 1.0 : 0.0;

  auto run = [&](bool grad) {
    Tape<double> tp;
    auto h = ag::linear(tp, tp.constant(x), tp.param(ps.at("w")),
                        NodeP<double>{});
    auto sm = ag::softmax(tp, h);
    auto picked = ag::gather_rows(tp, ag::log(tp, sm), idx);
    auto h3 = ag::reshape(tp, h, {3, 3, 2});
    auto l1 = ag::logsumexp_dim1(tp, h3);
    auto tiled = ag::tile_dim1(tp, ag::reshape(tp, picked, {3, 1, 1}), 4);
    auto wh = ag::where_mask(tp, mask, l1, ag::scale(tp, l1, 0.5));
    auto dv = ag::div(tp, wh, ag::add_scalar(tp, ag::square(tp, l1), 1.0));
    auto cl = ag::clamp_min(tp, dv, 0.05);
    auto parts = ag::sum_all(
        tp, ag::add_n(tp, {ag::sum_per_sample(tp, cl),
                           ag::sum_per_sample(tp, tiled), picked}));
    auto loss = ag::scale(tp, parts, 0.1);
    if (grad) tp.backward(loss);
    return loss->value[0];
  };
  auto loss = [&] { return run(false); };
  auto grads = [&] {
    ps.zero_grad();
    run(true);
  };
  CHECK(test::finite_difference_check(ps, loss, grads) < 1e-6);
}

TEST_CASE("parameter reuse accumulates once per use site") {
  ParamStore<double> ps;
  auto& w = ps.create("w", {1, 1});
  w.value[0] = 3.0;
  Tape<double> tp;
  auto wn = tp.param(w);
  auto y = ag::mul(tp, wn, wn);  // y = w^2, dy/dw = 2w = 6
  ps.zero_grad();
  tp.backward(ag::sum_all(tp, y));
  CHECK(w.grad[0] == doctest::Approx(6.0));
}

TEST_CASE("dropout scales and masks") {
  RandomSource rng(5);
  Tape<float> tp;
  Tensor<float> x({1000});
  x.fill(1.0f);
  Ctx<float> ctx{&tp, &rng, true, false};
  auto xn = tp.constant(x.reshaped({1, 1000}));
  auto d = ag::dropout(tp, xn, 0.5, rng, true);
  double mean = d->value.sum() / 1000.0;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.15));
  int zeros = 0;
  for (int i = 0; i < 1000; ++i)
    if (d->value[i] == 0.0f) zeros++;
  CHECK(zeros > 350);
  CHECK(zeros < 650);
}

TEST_CASE("weight-norm data-dependent init standardises outputs") {
  RandomSource rng(11);
  ParamStore<float> ps;
  DenseLayer<float> layer(ps, "l", 16, 8, true, rng);
  Tensor<float> x({64, 16});
  rng.fill_normal(x);
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = x[i] * 3.0f + 1.0f;

  Tape<float> tp;
  Ctx<float> ctx{&tp, &rng, false, true};
  auto out = layer(ctx, tp.constant(x));
  const int64_t B = 64, O = 8;
  for (int64_t o = 0; o < O; ++o) {
    double m = 0, m2 = 0;
    for (int64_t i = 0; i < B; ++i) {
      double v = out->value[i * O + o];
      m += v;
      m2 += v * v;
    }
    m /= B;
    CHECK(std::abs(m) < 1e-4);
    CHECK(m2 / B - m * m == doctest::Approx(1.0).epsilon(1e-3));
  }
}
