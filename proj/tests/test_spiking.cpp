#include <doctest.h>

#include <cmath>

#include "sfpn/spiking.hpp"
#include "test_util.hpp"

using namespace sfpn;
using ag::Tape;
using ag::Tensor;

TEST_CASE("Dspike is pinned at the interval ends") {
  for (double b : {0.5, 1.0, 3.0, 10.0}) {
    auto s = SurrogateSpec::with_temperature(b);
    CHECK(std::abs(dspike(0.0, s)) < 1e-12);
    CHECK(std::abs(dspike(1.0, s) - 1.0) < 1e-12);
    CHECK(dspike(0.5, s) == doctest::Approx(0.5));
  }
}

TEST_CASE("Dspike derivative matches central differences") {
  for (double b : {1.0, 3.0, 10.0}) {
    auto s = SurrogateSpec::with_temperature(b);
    const double h = 1e-5;
    for (int i = 0; i <= 100; ++i) {
      const double u = i / 100.0;
      const double fd = (dspike(u + h, s) - dspike(u - h, s)) / (2 * h);
      CHECK(std::abs(dspike_derivative(u, s) - fd) < 1e-6);
    }
  }
}

TEST_CASE("Dspike rejects a non-positive temperature") {
  CHECK_THROWS_AS(SurrogateSpec::with_temperature(0.0), std::invalid_argument);
  SurrogateSpec bad;
  bad.temperature = -1.0;
  CHECK_THROWS_AS(dspike(0.5, bad), std::invalid_argument);
}

TEST_CASE("surrogate gradient vanishes far from the threshold") {
  auto s = SurrogateSpec::with_temperature(3.0);
  CHECK(spike_backward(5.0, s) == 0.0);
  CHECK(spike_backward(-5.0, s) == 0.0);
  CHECK(spike_backward(0.0, s) == doctest::Approx(dspike_derivative(0.5, s)));
}

TEST_CASE("LIF follows the leaky reset recurrence") {
  Rng rng(1);
  LifParams p{0.2, 0.3};
  auto s = SurrogateSpec::with_temperature(3.0);
  NeuronState st;
  Tape tape(false);
  double u_ref = 0.0, y_ref = 0.0;
  for (int t = 0; t < 40; ++t) {
    const double in = rng.uniform(-0.2, 0.6);
    Tensor y = lif_step(tape, st, Tensor::full({1}, in), p, s);
    u_ref = (t == 0 ? 0.0 : p.tau * u_ref * (1.0 - y_ref)) + in;
    y_ref = u_ref >= p.u_th ? 1.0 : 0.0;
    CHECK(st.u[0] == doctest::Approx(u_ref).epsilon(1e-14));
    CHECK(y[0] == y_ref);
  }
}

TEST_CASE("binary neuron (tau = 0) is memoryless") {
  LifParams p{0.0, 0.3};
  auto s = SurrogateSpec::with_temperature(3.0);
  NeuronState st;
  Tape tape(false);
  lif_step(tape, st, Tensor::full({1}, 0.2), p, s);
  Tensor y = lif_step(tape, st, Tensor::full({1}, 0.2), p, s);
  CHECK(y[0] == 0.0);
  CHECK(st.u[0] == doctest::Approx(0.2));
}

TEST_CASE("LIF parameter validation") {
  CHECK_THROWS(LifParams{1.5, 0.3}.validate());
  CHECK_THROWS(LifParams{0.2, 0.0}.validate());
  AlifParams a;
  a.tau_a = 0.5;
  CHECK_THROWS(a.validate());
}

TEST_CASE("ALIF increment matches its unrolled sum and stays within bounds") {
  Rng rng(2);
  AlifParams p;
  auto s = SurrogateSpec::with_temperature(3.0);
  Tensor tau_a = Tensor::scalar(p.tau_a), beta = Tensor::scalar(p.beta);
  const auto [lo, hi] = alif_threshold_bounds(p);
  const int n = 8;
  NeuronState st;
  Tape tape(false);
  std::vector<std::vector<double>> spikes;
  for (int t = 0; t < 50; ++t) {
    Tensor in({n});
    for (double& v : in.data()) v = rng.uniform(-0.3, 0.9);
    Tensor y = alif_step(tape, st, in, p.base, tau_a, beta, s);
    for (int i = 0; i < n; ++i) {
      double a = 0.0;
      for (int k = 0; k < t; ++k) a += std::pow(p.tau_a, t - 1 - k) * spikes[k][i];
      CHECK(std::abs(st.a[i] - a) < 1e-10);
    }
    Tensor th = adaptive_threshold(st, p.base, p.beta);
    for (double v : th.data()) {
      CHECK(v >= lo);
      CHECK(v <= hi + 1e-12);
    }
    spikes.emplace_back(y.data().begin(), y.data().end());
  }
}

TEST_CASE("constant firing drives the threshold to its upper bound") {
  AlifParams p;  // u_th 0.3, beta 0.07, tau_a 0.3
  auto s = SurrogateSpec::with_temperature(3.0);
  Tensor tau_a = Tensor::scalar(p.tau_a), beta = Tensor::scalar(p.beta);
  NeuronState st;
  Tape tape(false);
  for (int t = 0; t < 60; ++t) alif_step(tape, st, Tensor::full({1}, 10.0), p.base, tau_a, beta, s);
  CHECK(std::abs(adaptive_threshold(st, p.base, p.beta)[0] - 0.4) < 1e-6);
  CHECK(alif_threshold_bounds(p).second == doctest::Approx(0.4));
  AlifParams bad = p;
  bad.tau_a = 1.0;
  CHECK_THROWS_AS(alif_threshold_bounds(bad), std::domain_error);
}

TEST_CASE("gradients reach tau_a through the adaptation state") {
  Rng rng(3);
  AlifParams p;
  auto s = SurrogateSpec::with_temperature(3.0);
  Tensor tau_a = Tensor::scalar(p.tau_a, true), beta = Tensor::scalar(p.beta, true);
  Tensor w = testutil::random_tensor(rng, {6}, 0.2, 0.5);
  auto loss = [&](Tape& tape) {
    NeuronState st;
    Tensor total = Tensor::scalar(0.0);
    for (int t = 0; t < 4; ++t) {
      Tensor y = alif_step(tape, st, w, p.base, tau_a, beta, s, SpikeMode::Soft);
      total = ag::add(tape, total, ag::sum(tape, y));
    }
    return total;
  };
  CHECK(testutil::gradient_error(tau_a, loss, 1e-6) < 1e-4);
  CHECK(testutil::gradient_error(beta, loss, 1e-6) < 1e-4);
  CHECK(testutil::gradient_error(w, loss, 1e-6) < 1e-4);
}
