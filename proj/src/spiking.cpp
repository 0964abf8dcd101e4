#include "sfpn/spiking.hpp"

#include <string>

namespace sfpn {

using ag::Tape;
using ag::Tensor;

void LifParams::validate() const {
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("LIF tau must lie in [0, 1], got " + std::to_string(tau));
  if (!(u_th > 0.0)) throw std::invalid_argument("LIF threshold must be positive");
}

void AlifParams::validate() const {
  base.validate();
  if (beta < 0.0) throw std::invalid_argument("ALIF beta must be >= 0");
  if (!(tau_a_lo > 0.0 && tau_a_lo <= tau_a_hi && tau_a_hi < 1.0)) {
    throw std::invalid_argument("ALIF tau_a box must satisfy 0 < lo <= hi < 1");
  }
  if (tau_a < tau_a_lo || tau_a > tau_a_hi) throw std::invalid_argument("ALIF tau_a outside its box");
}

std::pair<double, double> alif_threshold_bounds(const AlifParams& params) {
  if (params.tau_a >= 1.0) throw std::domain_error("tau_a >= 1: the threshold increment diverges");
  return {params.base.u_th, params.base.u_th + params.beta / (1.0 - params.tau_a)};
}

namespace {

// Membrane update shared by LIF and ALIF.
Tensor integrate(Tape& tape, NeuronState& state, const Tensor& current, double tau) {
  if (!state.started()) return current;
  if (state.u.shape() != current.shape()) {
    throw ag::ShapeError("neuron state " + ag::to_string(state.u.shape()) + " vs input " +
                         ag::to_string(current.shape()));
  }
  if (tau == 0.0) return current;
  Tensor kept = ag::mul(tape, state.u, ag::one_minus(tape, state.y_prev));
  return ag::add(tape, ag::scale(tape, kept, tau), current);
}

}  // namespace

Tensor lif_step(Tape& tape, NeuronState& state, const Tensor& current, const LifParams& params,
                const SurrogateSpec& surrogate, SpikeMode mode) {
  Tensor u = integrate(tape, state, current, params.tau);
  Tensor y = ag::heaviside_with_surrogate(tape, ag::add_scalar(tape, u, -params.u_th), surrogate, mode);
  state.u = u;
  state.y_prev = y;
  return y;
}

Tensor alif_step(Tape& tape, NeuronState& state, const Tensor& current, const LifParams& base, const Tensor& tau_a,
                 const Tensor& beta, const SurrogateSpec& surrogate, SpikeMode mode) {
  Tensor a;
  if (state.started()) {
    a = ag::add(tape, ag::mul_scalar(tape, state.a, tau_a), state.y_prev);
  } else {
    a = Tensor::zeros(current.shape());
  }
  Tensor u = integrate(tape, state, current, base.tau);
  // v = u - (u_th + beta * a)
  Tensor v = ag::sub(tape, ag::add_scalar(tape, u, -base.u_th), ag::mul_scalar(tape, a, beta));
  Tensor y = ag::heaviside_with_surrogate(tape, v, surrogate, mode);
  state.u = u;
  state.y_prev = y;
  state.a = a;
  return y;
}

Tensor adaptive_threshold(const NeuronState& state, const LifParams& base, double beta) {
  Tensor out(state.a.shape());
  auto a = state.a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = base.u_th + beta * a[i];
  return out;
}

}  // namespace sfpn
