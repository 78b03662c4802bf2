#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "lop/core/common.hpp"

namespace lop {

enum class ActivationFn { Relu, Tanh, Gelu, Identity, Prelu };

inline std::string to_string(ActivationFn fn) {
  switch (fn) {
    case ActivationFn::Relu: return "relu";
    case ActivationFn::Tanh: return "tanh";
    case ActivationFn::Gelu: return "gelu";
    case ActivationFn::Identity: return "identity";
    case ActivationFn::Prelu: return "prelu";
  }
  return "?";
}

inline ActivationFn activation_from_string(const std::string& s) {
  if (s == "relu") return ActivationFn::Relu;
  if (s == "tanh") return ActivationFn::Tanh;
  if (s == "gelu") return ActivationFn::Gelu;
  if (s == "identity" || s == "linear") return ActivationFn::Identity;
  if (s == "prelu") return ActivationFn::Prelu;
  throw ValidationError("unknown activation '" + s + "'");
}

/// True when the activation has a derivative jump at the origin.
inline bool has_kink(ActivationFn fn) {
  return fn == ActivationFn::Relu || fn == ActivationFn::Prelu;
}

/// phi(u). `slope` is only read by prelu.
template <typename T>
T activate(ActivationFn fn, T u, T slope = T(0)) {
  using std::erf;
  using std::tanh;
  switch (fn) {
    case ActivationFn::Relu: return u > T(0) ? u : T(0);
    case ActivationFn::Tanh: return tanh(u);
    case ActivationFn::Gelu: return T(0.5) * u * (T(1) + erf(u / std::sqrt(T(2))));
    case ActivationFn::Identity: return u;
    case ActivationFn::Prelu: return u > T(0) ? u : slope * u;
  }
  return u;
}

/// phi'(u). ReLU uses phi'(0) = 0, so a unit sitting exactly at the kink
/// passes no gradient.
template <typename T>
T activate_derivative(ActivationFn fn, T u, T slope = T(0)) {
  using std::exp;
  using std::erf;
  using std::tanh;
  switch (fn) {
    case ActivationFn::Relu: return u > T(0) ? T(1) : T(0);
    case ActivationFn::Tanh: {
      T t = tanh(u);
      return T(1) - t * t;
    }
    case ActivationFn::Gelu: {
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      return T(0.5) * (T(1) + erf(u / std::sqrt(T(2)))) + u * inv_sqrt_2pi * exp(-u * u / T(2));
    }
    case ActivationFn::Identity: return T(1);
    case ActivationFn::Prelu: return u > T(0) ? T(1) : slope;
  }
  return T(1);
}

/// Scalar activation phi_{a,b}(z) = phi(a z + b) with fixed gain and shift.
struct ScalarActivation {
  ActivationFn fn = ActivationFn::Relu;
  double gain = 1.0;
  double shift = 0.0;
  double slope = 0.25;  // prelu negative-side slope

  double operator()(double z) const { return activate(fn, gain * z + shift, slope); }
  /// Derivative of phi itself evaluated at a z + b (no chain factor).
  double derivative_at(double z) const { return activate_derivative(fn, gain * z + shift, slope); }
  bool is_linear() const {
    return fn == ActivationFn::Identity || (fn == ActivationFn::Prelu && slope == 1.0);
  }
};

}  // namespace lop
