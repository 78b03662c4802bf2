#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lop/core/common.hpp"
#include "lop/core/json.hpp"

namespace lop {

/// Linear-threshold-unit regression target over m bits plus a bias bit.
/// Bits are 0/1 and the bias bit is fixed at 1 (index m). Fixed once built.
struct LtuTarget {
  int m = 0;
  int f = 0;
  double beta = 0.0;
  Matrix weights;  // width x (m + 1), entries +-1
  Vector thresholds;
  Vector out_weights;  // +-1
  double out_bias = 0.0;

  int width() const { return static_cast<int>(weights.rows()); }

  /// Hidden LTU pattern of one input.
  Vector hidden(const Vector& x) const {
    const Vector z = weights * x - thresholds;
    return z.unaryExpr([](double v) { return ltu(v); });
  }

  double operator()(const Vector& x) const { return out_weights.dot(hidden(x)) + out_bias; }

  static double ltu(double z) { return z >= 0.0 ? 1.0 : 0.0; }
};

/// S_i = #{j < m : w_ij < 0} - 0.5 * w_{i,m}; theta_i = m * beta - S_i.
inline double ltu_threshold(const Vector& w, int m, double beta) {
  double s = 0.0;
  for (int j = 0; j < m; ++j) s += w(j) < 0.0 ? 1.0 : 0.0;
  s -= 0.5 * w(m);
  return static_cast<double>(m) * beta - s;
}

inline LtuTarget build_ltu_target(int m, int f, double beta, int width, std::uint64_t seed) {
  if (m < 1) throw ValidationError("m must be positive", "benchmark.m");
  if (f < 0 || f > m) throw ValidationError("f must be in [0, m]", "benchmark.f");
  if (!(beta > 0.0 && beta < 1.0)) throw ValidationError("beta must be in (0, 1)", "benchmark.beta");
  if (width < 1) throw ValidationError("target width must be positive", "benchmark.target_width");
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  LtuTarget t;
  t.m = m;
  t.f = f;
  t.beta = beta;
  t.weights.resize(width, m + 1);
  t.thresholds.resize(width);
  for (int i = 0; i < width; ++i) {
    for (int j = 0; j <= m; ++j) t.weights(i, j) = coin(rng) ? 1.0 : -1.0;
    t.thresholds(i) = ltu_threshold(t.weights.row(i).transpose(), m, beta);
  }
  t.out_weights.resize(width);
  for (int i = 0; i < width; ++i) t.out_weights(i) = coin(rng) ? 1.0 : -1.0;
  return t;
}

/// Input stream whose first f bits drift: they hold still for `period`
/// samples and then one of them, chosen uniformly, inverts. The other m - f
/// bits are fresh coin flips every sample.
class BitflipStream {
 public:
  BitflipStream(const LtuTarget& target, long period, std::uint64_t seed)
      : target_(&target), period_(period), rng_(seed), flipping_(static_cast<std::size_t>(target.f)) {
    if (period < 1) throw ValidationError("flip period must be positive", "benchmark.T");
    for (auto& b : flipping_) b = coin(rng_) ? 1 : 0;
  }

  long step() const { return step_; }
  const std::vector<int>& flipping_bits() const { return flipping_; }

  /// Sample number step() + 1. A flip happens before every sample whose index
  /// (counting from 0) is a positive multiple of the period.
  std::pair<Vector, double> next() {
    if (step_ > 0 && step_ % period_ == 0 && !flipping_.empty()) {
      const auto k = std::uniform_int_distribution<std::size_t>(0, flipping_.size() - 1)(rng_);
      flipping_[k] ^= 1;
    }
    ++step_;
    const int m = target_->m;
    Vector x(m + 1);
    for (int j = 0; j < m; ++j)
      x(j) = j < target_->f ? static_cast<double>(flipping_[static_cast<std::size_t>(j)]) : (coin(rng_) ? 1.0 : 0.0);
    x(m) = 1.0;
    return {x, (*target_)(x)};
  }

  /// Next `n` samples as a batch (rows are samples).
  std::pair<Matrix, Matrix> batch(int n) {
    Matrix x(n, target_->m + 1), y(n, 1);
    for (int i = 0; i < n; ++i) {
      auto [xi, yi] = next();
      x.row(i) = xi.transpose();
      y(i, 0) = yi;
    }
    return {x, y};
  }

 private:
  static bool coin(Rng& rng) { return std::bernoulli_distribution(0.5)(rng); }

  const LtuTarget* target_;
  long period_;
  Rng rng_;
  std::vector<int> flipping_;
  long step_ = 0;
};

struct BitflipConfig {
  int m = 20;
  int f = 15;
  double beta = 0.7;
  long period = 10000;
  int target_width = 100;
};

inline BitflipConfig bitflip_from_json(const Json& j, const std::string& where = "benchmark") {
  BitflipConfig c;
  try {
    c.m = j.value("m", c.m);
    c.f = j.value("f", c.f);
    c.beta = j.value("beta", c.beta);
    c.period = j.value("T", c.period);
    c.target_width = j.value("target_width", c.target_width);
  } catch (const Json::exception& e) {
    throw ValidationError(e.what(), where);
  }
  if (c.m < 1) throw ValidationError("m must be positive", where + ".m");
  if (c.f < 0 || c.f > c.m) throw ValidationError("f must be in [0, m]", where + ".f");
  if (!(c.beta > 0.0 && c.beta < 1.0)) throw ValidationError("beta must be in (0, 1)", where + ".beta");
  if (c.period < 1) throw ValidationError("T must be positive", where + ".T");
  if (c.target_width < 1) throw ValidationError("target_width must be positive", where + ".target_width");
  return c;
}

inline Json bitflip_to_json(const BitflipConfig& c) {
  return Json{{"kind", "bitflip"}, {"m", c.m}, {"f", c.f}, {"beta", c.beta}, {"T", c.period}, {"target_width", c.target_width}};
}

}  // namespace lop
