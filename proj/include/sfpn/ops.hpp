#pragma once

#include <utility>
#include <vector>

#include "sfpn/surrogate.hpp"
#include "sfpn/tensor.hpp"

// Differentiable kernels. Every op takes the tape it records onto; when the
// tape is not recording (or no input requires grad) nothing is recorded.
namespace sfpn::ag {

// ---- elementwise -----------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor add_scalar(Tape& tape, const Tensor& x, double offset);
/// x * s where s is a one-element tensor (e.g. a trainable time constant).
Tensor mul_scalar(Tape& tape, const Tensor& x, const Tensor& s);
/// 1 - x.
Tensor one_minus(Tape& tape, const Tensor& x);
/// Sum of all elements, shape {1}.
Tensor sum(Tape& tape, const Tensor& x);

// ---- layout -----------------------------------------------------------------

/// Rows [start, start + count) along dimension 0.
Tensor slice_batch(Tape& tape, const Tensor& x, int start, int count);
/// Concatenation along dimension 0.
Tensor concat_batch(Tape& tape, const std::vector<Tensor>& parts);
/// [N,Ca,H,W] ++ [N,Cb,H,W] -> [N,Ca+Cb,H,W]; a zero-channel operand is allowed.
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
/// Nearest-neighbour x2 upsampling of [N,C,H,W].
Tensor upsample_nearest_x2(Tape& tape, const Tensor& x);

// ---- convolution / normalization -------------------------------------------

/// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k], k in {1,3}.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, int stride, int padding);
/// Adds a per-channel bias [C] to [N,C,H,W].
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool initialized = false;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(int channels) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Train mode normalizes with batch statistics over (N,H,W) and updates the
/// running statistics; eval mode uses the running statistics and throws if
/// no train step has populated them.
Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool train);

struct FoldedConv {
  Tensor weight;
  Tensor bias;
};

/// Folds eval-mode BN into the preceding bias-free convolution.
FoldedConv fold_bn_into_conv(const Tensor& weight, const Tensor& gamma, const Tensor& beta,
                             const BatchNormState& state);

// ---- spiking ------------------------------------------------------------------

/// y = H(v) with H(0) = 1 in hard mode, Dspike(clamp(v + 0.5)) in soft mode.
/// Backward always uses the Dspike derivative at the normalized membrane.
Tensor heaviside_with_surrogate(Tape& tape, const Tensor& v, const SurrogateSpec& spec,
                                SpikeMode mode = SpikeMode::Hard);

}  // namespace sfpn::ag
