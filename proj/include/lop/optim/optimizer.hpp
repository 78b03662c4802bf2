#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lop/core/json.hpp"
#include "lop/core/network.hpp"
#include "lop/manifolds/cloning.hpp"

namespace lop {

enum class OptimizerKind { Sgd, Momentum, RmsProp, Adam, NoisySgd };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Momentum: return "momentum";
    case OptimizerKind::RmsProp: return "rmsprop";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::NoisySgd: return "noisy-sgd";
  }
  return "?";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "momentum") return OptimizerKind::Momentum;
  if (s == "rmsprop") return OptimizerKind::RmsProp;
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "noisy-sgd" || s == "noisy_sgd") return OptimizerKind::NoisySgd;
  throw ValidationError("unknown optimizer '" + s + "'", "optimizer.kind");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double rms_decay = 0.99;
  double sigma0 = 0.01;       // noisy-sgd: sigma_t = sigma0 * lambda^t
  double noise_decay = 0.999;  // lambda
  double weight_decay = 0.0;  // decoupled: theta -= lr * wd * theta after the gradient step
  bool tie_clones = false;
  std::uint64_t seed = 0;
};

/// First-order optimizer over every parameter of one network. Buffers mirror
/// the parameter matrices; `first` is the momentum / Adam first moment and
/// `second` the RMSProp / Adam second moment.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const Network& net) : cfg_(cfg), rng_(cfg.seed) {
    if (!(cfg.lr >= 0.0)) throw ValidationError("learning rate must be non-negative", "optimizer.lr");
    if (cfg.weight_decay < 0.0) throw ValidationError("weight decay must be non-negative", "optimizer.weight_decay");
    for (const auto& m : net.modules()) {
      first_.emplace_back();
      second_.emplace_back();
      for (const auto& p : m.params) {
        first_.back().push_back(Matrix::Zero(p.rows(), p.cols()));
        second_.back().push_back(Matrix::Zero(p.rows(), p.cols()));
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  /// Noise scale of the next noisy-sgd step.
  double sigma() const { return cfg_.sigma0 * std::pow(cfg_.noise_decay, static_cast<double>(t_)); }

  std::vector<std::vector<Matrix>>& first() { return first_; }
  std::vector<std::vector<Matrix>>& second() { return second_; }

  void step(Network& net, const Gradients& grads) {
    check(net, grads);
    double noise_scale = 0.0;
    if (cfg_.kind == OptimizerKind::NoisySgd) {
      double g2 = 0.0;
      for (const auto& mg : grads)
        for (const auto& g : mg) g2 += g.squaredNorm();
      noise_scale = sigma() * std::sqrt(g2);
    }
    ++t_;
    const double lr = cfg_.lr;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto& m = net.module(i);
      for (std::size_t p = 0; p < grads[i].size(); ++p) {
        Matrix& theta = m.params[p];
        const Matrix& g = grads[i][p];
        Matrix& b1 = first_[i][p];
        Matrix& b2 = second_[i][p];
        for (Eigen::Index k = 0; k < theta.size(); ++k) {
          const double gk = g.data()[k];
          double& th = theta.data()[k];
          switch (cfg_.kind) {
            case OptimizerKind::Sgd: th -= lr * gk; break;
            case OptimizerKind::NoisySgd: {
              const double eps = noise_scale > 0.0 ? gaussian(rng_, 0.0, noise_scale) : 0.0;
              th -= lr * (gk + eps);
              break;
            }
            case OptimizerKind::Momentum: {
              double& buf = b1.data()[k];
              buf = cfg_.momentum * buf + gk;
              th -= lr * buf;
              break;
            }
            case OptimizerKind::RmsProp: {
              double& v = b2.data()[k];
              v = cfg_.rms_decay * v + (1.0 - cfg_.rms_decay) * gk * gk;
              th -= lr * gk / (std::sqrt(v) + cfg_.eps);
              break;
            }
            case OptimizerKind::Adam: {
              double& mm = b1.data()[k];
              double& v = b2.data()[k];
              mm = cfg_.beta1 * mm + (1.0 - cfg_.beta1) * gk;
              v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gk * gk;
              th -= lr * (mm / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
              break;
            }
          }
          if (cfg_.weight_decay > 0.0) th -= lr * cfg_.weight_decay * th;
        }
      }
    }
    if (!groups_.empty()) average_buffers();
  }

  /// Makes every buffer block-constant over the clone blocks of `profile` and
  /// keeps it so after each step.
  void tie(const CloningProfile& profile) {
    if (profile.base.modules().size() != first_.size()) throw ValidationError("profile does not match optimizer state", "tie_clones");
    groups_.assign(first_.size(), {});
    for (std::size_t i = 0; i < first_.size(); ++i)
      for (std::size_t p = 0; p < first_[i].size(); ++p) {
        auto g = parameter_groups(profile, i, static_cast<int>(p), first_[i][p].cols());
        std::size_t covered = 0;
        for (const auto& b : g) covered += b.size();
        if (covered != static_cast<std::size_t>(first_[i][p].size())) {
          throw ValidationError("profile blocks do not cover the parameter", "tie_clones");
        }
        groups_[i].push_back(std::move(g));
      }
    average_buffers();
  }

  /// Zeroes the buffer entries of one row of a parameter (a recycled unit).
  void reset_row(std::size_t module, std::size_t param, Eigen::Index row) {
    first_.at(module).at(param).row(row).setZero();
    second_.at(module).at(param).row(row).setZero();
  }

  void reset_col(std::size_t module, std::size_t param, Eigen::Index col) {
    first_.at(module).at(param).col(col).setZero();
    second_.at(module).at(param).col(col).setZero();
  }

 private:
  void check(const Network& net, const Gradients& grads) const {
    if (grads.size() != net.modules().size() || grads.size() != first_.size()) {
      throw ValidationError("gradient list does not match the network", "optimizer");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].size() != net.modules()[i].params.size()) throw ValidationError("gradient count mismatch", net.modules()[i].name);
      for (std::size_t p = 0; p < grads[i].size(); ++p) {
        const Matrix& g = grads[i][p];
        const Matrix& th = net.modules()[i].params[p];
        if (g.rows() != th.rows() || g.cols() != th.cols()) throw ValidationError("gradient shape mismatch", net.parameter_name(i, p));
        if (!g.allFinite()) throw Error("non-finite gradient", net.parameter_name(i, p));
      }
    }
  }

  static void average(Matrix& buf, const std::vector<Block>& groups) {
    for (const Block& g : groups) {
      const double first = buf.data()[g[0]];
      bool equal = true;
      double s = 0.0;
      for (int e : g) {
        s += buf.data()[e];
        equal = equal && buf.data()[e] == first;
      }
      if (equal) continue;  // averaging identical values can still round
      const double mean = s / static_cast<double>(g.size());
      for (int e : g) buf.data()[e] = mean;
    }
  }

  void average_buffers() {
    for (std::size_t i = 0; i < groups_.size(); ++i)
      for (std::size_t p = 0; p < groups_[i].size(); ++p) {
        average(first_[i][p], groups_[i][p]);
        average(second_[i][p], groups_[i][p]);
      }
  }

  OptimizerConfig cfg_;
  Rng rng_;
  long t_ = 0;
  std::vector<std::vector<Matrix>> first_;
  std::vector<std::vector<Matrix>> second_;
  std::vector<std::vector<std::vector<Block>>> groups_;
};

inline void tie_clone_state(Optimizer& opt, const CloningProfile& profile) { opt.tie(profile); }

inline Json optimizer_to_json(const OptimizerConfig& c) {
  return Json{{"kind", to_string(c.kind)},     {"lr", c.lr},
              {"momentum", c.momentum},        {"beta1", c.beta1},
              {"beta2", c.beta2},              {"eps", c.eps},
              {"rms_decay", c.rms_decay},      {"sigma0", c.sigma0},
              {"lambda", c.noise_decay},       {"weight_decay", c.weight_decay},
              {"tie_clones", c.tie_clones},    {"seed", c.seed}};
}

/// Missing keys keep their defaults; unknown keys are left to the caller.
inline OptimizerConfig optimizer_from_json(const Json& j, const std::string& where = "optimizer") {
  OptimizerConfig c;
  try {
    if (j.contains("kind")) c.kind = optimizer_from_string(j.at("kind").get<std::string>());
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.rms_decay = j.value("rms_decay", c.rms_decay);
    c.sigma0 = j.value("sigma0", c.sigma0);
    c.noise_decay = j.value("lambda", c.noise_decay);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.tie_clones = j.value("tie_clones", c.tie_clones);
    c.seed = j.value("seed", c.seed);
  } catch (const Json::exception& e) {
    throw ValidationError(e.what(), where);
  }
  if (!(c.lr >= 0.0)) throw ValidationError("learning rate must be non-negative", where + ".lr");
  if (c.sigma0 < 0.0) throw ValidationError("sigma0 must be non-negative", where + ".sigma0");
  if (!(c.noise_decay > 0.0 && c.noise_decay <= 1.0)) throw ValidationError("lambda must be in (0, 1]", where + ".lambda");
  if (c.weight_decay < 0.0) throw ValidationError("weight decay must be non-negative", where + ".weight_decay");
  return c;
}

}  // namespace lop
