#include <doctest.h>

#include "sfpn/ops.hpp"
#include "test_util.hpp"

using namespace sfpn;
using namespace sfpn::ag;
using testutil::gradient_error;
using testutil::random_tensor;

namespace {

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor probe(Tape& tape, const Tensor& y, const Tensor& w) { return sum(tape, mul(tape, y, w)); }

}  // namespace

TEST_CASE("elementwise primitives pass finite differences") {
  Rng rng(1);
  Tensor a = random_tensor(rng, {2, 3});
  Tensor b = random_tensor(rng, {2, 3});
  Tensor w = random_tensor(rng, {2, 3}, -1, 1, false);
  Tensor s = random_tensor(rng, {1});
  CHECK(gradient_error(a, [&](Tape& t) { return probe(t, add(t, a, b), w); }) < 1e-4);
  CHECK(gradient_error(b, [&](Tape& t) { return probe(t, sub(t, a, b), w); }) < 1e-4);
  CHECK(gradient_error(a, [&](Tape& t) { return probe(t, mul(t, a, b), w); }) < 1e-4);
  CHECK(gradient_error(b, [&](Tape& t) { return probe(t, mul(t, a, b), w); }) < 1e-4);
  CHECK(gradient_error(a, [&](Tape& t) { return probe(t, scale(t, a, -2.5), w); }) < 1e-4);
  CHECK(gradient_error(a, [&](Tape& t) { return probe(t, add_scalar(t, a, 0.7), w); }) < 1e-4);
  CHECK(gradient_error(a, [&](Tape& t) { return probe(t, one_minus(t, a), w); }) < 1e-4);
  CHECK(gradient_error(a, [&](Tape& t) { return probe(t, mul_scalar(t, a, s), w); }) < 1e-4);
  CHECK(gradient_error(s, [&](Tape& t) { return probe(t, mul_scalar(t, a, s), w); }) < 1e-4);
}

TEST_CASE("layout primitives pass finite differences") {
  Rng rng(2);
  Tensor x = random_tensor(rng, {4, 2, 3, 3});
  Tensor y = random_tensor(rng, {4, 1, 3, 3});
  Tensor w_slice = random_tensor(rng, {2, 2, 3, 3}, -1, 1, false);
  Tensor w_cat = random_tensor(rng, {8, 2, 3, 3}, -1, 1, false);
  Tensor w_ch = random_tensor(rng, {4, 3, 3, 3}, -1, 1, false);
  Tensor w_up = random_tensor(rng, {4, 2, 6, 6}, -1, 1, false);
  CHECK(gradient_error(x, [&](Tape& t) { return probe(t, slice_batch(t, x, 1, 2), w_slice); }) < 1e-4);
  CHECK(gradient_error(x, [&](Tape& t) { return probe(t, concat_batch(t, {x, x}), w_cat); }) < 1e-4);
  CHECK(gradient_error(y, [&](Tape& t) { return probe(t, concat_channels(t, x, y), w_ch); }) < 1e-4);
  CHECK(gradient_error(x, [&](Tape& t) { return probe(t, upsample_nearest_x2(t, x), w_up); }) < 1e-4);
}

TEST_CASE("conv2d passes finite differences for k=1,3 and stride 1,2") {
  Rng rng(3);
  for (int k : {1, 3}) {
    for (int stride : {1, 2}) {
      const int pad = k / 2;
      Tensor x = random_tensor(rng, {2, 3, 5, 5});
      Tensor w = random_tensor(rng, {4, 3, k, k});
      const int ho = (5 + 2 * pad - k) / stride + 1;
      Tensor g = random_tensor(rng, {2, 4, ho, ho}, -1, 1, false);
      CAPTURE(k);
      CAPTURE(stride);
      CHECK(gradient_error(x, [&](Tape& t) { return probe(t, conv2d(t, x, w, stride, pad), g); }) < 1e-4);
      CHECK(gradient_error(w, [&](Tape& t) { return probe(t, conv2d(t, x, w, stride, pad), g); }) < 1e-4);
    }
  }
}

TEST_CASE("conv2d matches a direct loop") {
  Rng rng(4);
  Tensor x = random_tensor(rng, {2, 2, 4, 5}, -1, 1, false);
  Tensor w = random_tensor(rng, {3, 2, 3, 3}, -1, 1, false);
  Tape tape(false);
  Tensor y = conv2d(tape, x, w, 2, 1);
  REQUIRE(y.shape() == Shape{2, 3, 2, 3});
  for (int n = 0; n < 2; ++n) {
    for (int co = 0; co < 3; ++co) {
      for (int oy = 0; oy < 2; ++oy) {
        for (int ox = 0; ox < 3; ++ox) {
          double acc = 0.0;
          for (int ci = 0; ci < 2; ++ci) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 4 || ix < 0 || ix >= 5) continue;
                acc += x.data()[((n * 2 + ci) * 4 + iy) * 5 + ix] * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
              }
            }
          }
          CHECK(y.data()[((n * 3 + co) * 2 + oy) * 3 + ox] == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("bias and batch norm pass finite differences") {
  Rng rng(5);
  Tensor x = random_tensor(rng, {3, 2, 3, 3});
  Tensor bias = random_tensor(rng, {2});
  Tensor gamma = random_tensor(rng, {2}, 0.5, 1.5);
  Tensor beta = random_tensor(rng, {2});
  Tensor g = random_tensor(rng, {3, 2, 3, 3}, -1, 1, false);
  CHECK(gradient_error(bias, [&](Tape& t) { return probe(t, add_channel_bias(t, x, bias), g); }) < 1e-4);
  auto bn = [&](Tape& t) {
    BatchNormState st(2);
    return probe(t, batch_norm(t, x, gamma, beta, st, true), g);
  };
  CHECK(gradient_error(x, bn) < 1e-4);
  CHECK(gradient_error(gamma, bn) < 1e-4);
  CHECK(gradient_error(beta, bn) < 1e-4);
}

TEST_CASE("batch norm running statistics and eval mode") {
  Tensor x({2, 1, 1, 2}, {1.0, 2.0, 3.0, 6.0});
  Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
  BatchNormState st(1);
  Tape tape(false);
  CHECK_THROWS_AS(batch_norm(tape, x, gamma, beta, st, false), std::logic_error);
  Tensor y = batch_norm(tape, x, gamma, beta, st, true);
  // mean 3, biased var 3.5, unbiased 14/3
  CHECK(st.running_mean[0] == doctest::Approx(0.3));
  CHECK(st.running_var[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  double mean = 0.0;
  for (double v : y.data()) mean += v;
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("folded conv equals conv followed by eval batch norm") {
  Rng rng(6);
  Tensor x = random_tensor(rng, {2, 3, 4, 4}, -1, 1, false);
  Tensor w = random_tensor(rng, {5, 3, 3, 3}, -1, 1, false);
  Tensor gamma = random_tensor(rng, {5}, 0.5, 1.5, false);
  Tensor beta = random_tensor(rng, {5}, -1, 1, false);
  BatchNormState st(5);
  Tape tape(false);
  batch_norm(tape, conv2d(tape, random_tensor(rng, {4, 3, 4, 4}, -1, 1, false), w, 1, 1), gamma, beta, st, true);
  Tensor ref = batch_norm(tape, conv2d(tape, x, w, 1, 1), gamma, beta, st, false);
  FoldedConv f = fold_bn_into_conv(w, gamma, beta, st);
  Tensor got = add_channel_bias(tape, conv2d(tape, x, f.weight, 1, 1), f.bias);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(got.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-10));
}

TEST_CASE("surrogate spike op: hard forward, Dspike-derivative backward") {
  auto spec = SurrogateSpec::with_temperature(3.0);
  Tensor v({4}, {-0.6, -0.1, 0.0, 0.3}, true);
  Tape tape;
  Tensor y = heaviside_with_surrogate(tape, v, spec, SpikeMode::Hard);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 1.0);
  CHECK(y.data()[3] == 1.0);
  tape.backward(sum(tape, y));
  CHECK(v.grad()[0] == 0.0);  // normalized membrane -0.1 lies outside [0, 1]
  CHECK(v.grad()[1] == doctest::Approx(dspike_derivative(0.4, spec)));
  CHECK(v.grad()[3] == doctest::Approx(dspike_derivative(0.8, spec)));
}

TEST_CASE("soft-mode spike op passes finite differences inside the window") {
  Rng rng(7);
  auto spec = SurrogateSpec::with_temperature(3.0);
  Tensor v = random_tensor(rng, {10}, -0.45, 0.45);
  Tensor g = random_tensor(rng, {10}, -1, 1, false);
  CHECK(gradient_error(v, [&](Tape& t) { return probe(t, heaviside_with_surrogate(t, v, spec, SpikeMode::Soft), g); }) <
        1e-4);
}

TEST_CASE("gradients accumulate over every consumer") {
  Tensor x({1}, {2.0}, true);
  Tape tape;
  Tensor y = add(tape, mul(tape, x, x), x);  // x^2 + x
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(5.0));
  CHECK(tape.size() == 0);
}

TEST_CASE("shape errors and non-finite detection") {
  Tape tape;
  CHECK_THROWS_AS(add(tape, Tensor({2}), Tensor({3})), ShapeError);
  CHECK_THROWS_AS(conv2d(tape, Tensor({1, 2, 3, 3}), Tensor({1, 3, 3, 3}), 1, 1), ShapeError);
  tape.set_check_finite(true);
  Tensor a = Tensor::full({1}, 1e308);
  CHECK_THROWS_AS(scale(tape, a, 10.0), NonFiniteError);
}

TEST_CASE("non-recording tape records nothing") {
  Tensor x({3}, {1, 2, 3}, true);
  Tape tape(false);
  Tensor y = scale(tape, x, 2.0);
  CHECK(tape.size() == 0);
  CHECK_FALSE(y.requires_grad());
}
