#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"

namespace lop {

struct FrozenLayer {
  std::size_t module = 0;  // the activation module
  std::string name;
  std::vector<int> units;
  int width = 0;
  double fraction = 0.0;
};

/// Units whose activation derivative stayed within deriv_tol of zero on every
/// sample of a reference batch. Gradients of their incoming parameters are
/// exactly zero on that batch whenever the derivative is exactly zero.
struct FrozenSet {
  std::vector<FrozenLayer> layers;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.units.size();
    return n;
  }

  bool contains(std::size_t module, int unit) const {
    for (const auto& l : layers)
      if (l.module == module) return std::find(l.units.begin(), l.units.end(), unit) != l.units.end();
    return false;
  }
};

/// Largest |d h / d z| per unit over the batch, for activation module `i`:
/// the gain times phi'(gain z + shift).
inline std::vector<double> max_activation_derivative(const Network& net, const BatchActivations& acts, std::size_t i) {
  const auto& m = net.modules().at(i);
  if (m.kind != ModuleKind::Activation) throw ValidationError("not an activation module", m.name);
  const Matrix& z = acts.post.at(static_cast<std::size_t>(m.inputs[0]));
  std::vector<double> worst(static_cast<std::size_t>(z.cols()), 0.0);
  for (Eigen::Index s = 0; s < z.rows(); ++s)
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      const double slope = m.fn == ActivationFn::Prelu ? m.params[0](j, 0) : 0.0;
      const double d = std::abs(m.gain * activate_derivative(m.fn, m.gain * z(s, j) + m.shift, slope));
      auto& w = worst[static_cast<std::size_t>(j)];
      w = std::max(w, d);
    }
  return worst;
}

/// deriv_tol = 0 selects exact zeros, which is what a relu unit produces.
inline FrozenSet detect_frozen(const Network& net, const BatchActivations& acts, double deriv_tol = 0.0) {
  FrozenSet set;
  for (std::size_t i = 0; i < net.modules().size(); ++i) {
    const auto& m = net.modules()[i];
    if (m.kind != ModuleKind::Activation) continue;
    FrozenLayer l;
    l.module = i;
    l.name = m.name;
    const auto d = max_activation_derivative(net, acts, i);
    l.width = static_cast<int>(d.size());
    for (std::size_t j = 0; j < d.size(); ++j)
      if (d[j] <= deriv_tol) l.units.push_back(static_cast<int>(j));
    l.fraction = d.empty() ? 0.0 : static_cast<double>(l.units.size()) / static_cast<double>(d.size());
    set.layers.push_back(std::move(l));
  }
  return set;
}

/// One parameter entry: module, parameter, row-major flat index.
struct ParameterEntry {
  std::size_t module = 0;
  std::size_t param = 0;
  Eigen::Index index = 0;
};

/// Parameters feeding the pre-activation of frozen units: the weight row and
/// bias of a linear producer, the filter and bias of a conv channel whose
/// every position is frozen, or the affine entries of a normalizer.
inline std::vector<ParameterEntry> incoming_parameters(const Network& net, const FrozenSet& frozen) {
  std::vector<ParameterEntry> out;
  for (const auto& l : frozen.layers) {
    const int slot = net.modules()[l.module].inputs[0];
    if (slot == 0) continue;
    const auto pi = static_cast<std::size_t>(slot - 1);
    const auto& p = net.modules()[pi];
    auto rows = [&](int r) {
      for (std::size_t k = 0; k < p.params.size(); ++k)
        for (Eigen::Index c = 0; c < p.params[k].cols(); ++c) out.push_back({pi, k, r * p.params[k].cols() + c});
    };
    const int sp = p.out_shape.spatial();
    switch (p.kind) {
      case ModuleKind::Linear:
      case ModuleKind::LayerNorm:
        for (int u : l.units) rows(u);
        break;
      case ModuleKind::Conv2d:
      case ModuleKind::BatchNorm:
        for (int ch = 0; ch < p.out_shape.channels; ++ch) {
          int n = 0;
          for (int u : l.units) n += u / sp == ch;
          if (n == sp) rows(ch);
        }
        break;
      default: break;
    }
  }
  return out;
}

inline Json frozen_to_json(const FrozenSet& f) {
  Json layers = Json::array();
  for (const auto& l : f.layers)
    layers.push_back(Json{{"module", l.name}, {"units", l.units}, {"width", l.width}, {"fraction", l.fraction}});
  return Json{{"layers", layers}};
}

}  // namespace lop
