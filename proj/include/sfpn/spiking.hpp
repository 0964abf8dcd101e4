#pragma once

#include <stdexcept>
#include <utility>

#include "sfpn/ops.hpp"
#include "sfpn/surrogate.hpp"
#include "sfpn/tensor.hpp"

namespace sfpn {

struct LifParams {
  double tau = 0.2;  // membrane decay in [0, 1]; 0 is the binary neuron
  double u_th = 0.3;

  void validate() const;
};

struct AlifParams {
  LifParams base;
  double beta = 0.07;
  double tau_a = 0.3;
  double tau_a_lo = 0.2;
  double tau_a_hi = 0.4;

  void validate() const;
};

/// Adaptive threshold range [u_th, u_th + beta / (1 - tau_a)].
std::pair<double, double> alif_threshold_bounds(const AlifParams& params);

/// Per-layer neuron state; tensors are undefined until the first step.
struct NeuronState {
  ag::Tensor u;       // membrane potential
  ag::Tensor y_prev;  // last spikes, {0,1} in hard mode
  ag::Tensor a;       // threshold increment (adaptive neurons only)

  bool started() const { return u.defined(); }
  void reset() { *this = NeuronState{}; }
};

/// u <- tau * u_prev * (1 - y_prev) + I;  y <- H(u - u_th).
ag::Tensor lif_step(ag::Tape& tape, NeuronState& state, const ag::Tensor& current, const LifParams& params,
                    const SurrogateSpec& surrogate, SpikeMode mode = SpikeMode::Hard);

/// a <- tau_a * a_prev + y_prev;  A_th <- u_th + beta * a; membrane update as
/// lif_step; y <- H(u - A_th). tau_a and beta are one-element tensors so
/// they can be trained.
ag::Tensor alif_step(ag::Tape& tape, NeuronState& state, const ag::Tensor& current, const LifParams& base,
                     const ag::Tensor& tau_a, const ag::Tensor& beta, const SurrogateSpec& surrogate,
                     SpikeMode mode = SpikeMode::Hard);

/// Adaptive threshold of the last alif_step (u_th + beta * a).
ag::Tensor adaptive_threshold(const NeuronState& state, const LifParams& base, double beta);

}  // namespace sfpn
