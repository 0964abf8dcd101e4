#pragma once

#include <cmath>
#include <stdexcept>

namespace sfpn {

/// Dspike surrogate a*tanh(b*(u - c)) + d on [0, 1]. The symmetric
/// parameterization c = d = 0.5, a = 1 / (2 tanh(b/2)) is the one that pins
/// Dspike(0) = 0 and Dspike(1) = 1.
struct SurrogateSpec {
  double temperature = 3.0;  // b
  double a_coef = 0.0;
  double c_center = 0.5;
  double d_offset = 0.5;

  static SurrogateSpec with_temperature(double b) {
    if (!(b > 0.0)) throw std::invalid_argument("Dspike temperature must be positive");
    SurrogateSpec s;
    s.temperature = b;
    s.a_coef = 1.0 / (2.0 * std::tanh(b / 2.0));
    return s;
  }
};

/// Closed form of Dspike. The function is only meaningful on [0, 1]; callers
/// clamp (see spike_forward) so the smooth extension is usable at the ends.
inline double dspike(double u, const SurrogateSpec& s) {
  if (!(s.temperature > 0.0)) throw std::invalid_argument("Dspike temperature must be positive");
  return s.a_coef * std::tanh(s.temperature * (u - s.c_center)) + s.d_offset;
}

/// d/du Dspike on the closed interval [0, 1].
inline double dspike_derivative(double u, const SurrogateSpec& s) {
  double th = std::tanh(s.temperature * (u - s.c_center));
  return s.a_coef * s.temperature * (1.0 - th * th);
}

/// Maps a threshold-relative membrane value v = u - threshold into the
/// surrogate's domain; the threshold sits at the center 0.5.
inline double normalize_membrane(double v) { return v + 0.5; }

enum class SpikeMode {
  Hard,  // Heaviside forward, surrogate backward
  Soft,  // Dspike forward; for checking the engine against finite differences
};

/// Spike value for a threshold-relative membrane v. H(0) = 1.
inline double spike_forward(double v, const SurrogateSpec& s, SpikeMode mode) {
  if (mode == SpikeMode::Hard) return v >= 0.0 ? 1.0 : 0.0;
  double u = normalize_membrane(v);
  return u <= 0.0 ? 0.0 : u >= 1.0 ? 1.0 : dspike(u, s);
}

/// Backward factor of the spike with respect to v: Dspike' inside the unit
/// window around the threshold, 0 outside (the clamp is flat there).
inline double spike_backward(double v, const SurrogateSpec& s) {
  double u = normalize_membrane(v);
  if (u < 0.0 || u > 1.0) return 0.0;
  return dspike_derivative(u, s);
}

}  // namespace sfpn
