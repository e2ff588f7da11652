#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mrc/common.hpp"
#include "mrc/layers.hpp"

namespace mrc {

/// Gradient-descent optimizers over a ParameterStore. State accumulators are
/// kept in double and keyed by parameter name so checkpoints restore exactly.
template <typename T>
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual std::string name() const = 0;

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParameterStore<T>& params) {
    for (auto& [name, p] : params.items()) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      update(name, p);
    }
    ++step_count_;
  }

  void zero_grad(ParameterStore<T>& params) { params.zero_grads(); }

  /// Named state buffers for checkpointing (includes the step counter).
  std::map<std::string, std::vector<double>> state() const {
    auto out = slots_;
    out[name() + ".step"] = {static_cast<double>(step_count_)};
    return out;
  }

  void load_state(const std::map<std::string, std::vector<double>>& state) {
    slots_ = state;
    auto it = slots_.find(name() + ".step");
    if (it != slots_.end()) {
      step_count_ = static_cast<long>(it->second.at(0));
      slots_.erase(it);
    }
  }

  long step_count() const { return step_count_; }

 protected:
  explicit Optimizer(double lr) : lr_(lr) {}

  virtual void update(const std::string& name, TensorT<T>& p) = 0;

  std::vector<double>& slot(const std::string& key, size_t n) {
    auto& s = slots_[key];
    if (s.size() != n) s.assign(n, 0.0);
    return s;
  }

  double lr_;
  long step_count_ = 0;
  std::map<std::string, std::vector<double>> slots_;
};

template <typename T>
class Sgd : public Optimizer<T> {
 public:
  explicit Sgd(double lr) : Optimizer<T>(lr) {}
  std::string name() const override { return "sgd"; }

 protected:
  void update(const std::string&, TensorT<T>& p) override {
    auto& v = p.value();
    const auto& g = p.grad();
    for (size_t i = 0; i < v.size(); ++i)
      v[i] = static_cast<T>(v[i] - this->lr_ * static_cast<double>(g[i]));
  }
};

template <typename T>
class Adam : public Optimizer<T> {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : Optimizer<T>(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  std::string name() const override { return "adam"; }

 protected:
  void update(const std::string& pname, TensorT<T>& p) override {
    auto& v = p.value();
    const auto& g = p.grad();
    auto& m = this->slot("adam.m." + pname, v.size());
    auto& s = this->slot("adam.v." + pname, v.size());
    double t = static_cast<double>(this->step_count_ + 1);
    double bc1 = 1.0 - std::pow(beta1_, t);
    double bc2 = 1.0 - std::pow(beta2_, t);
    for (size_t i = 0; i < v.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      s[i] = beta2_ * s[i] + (1.0 - beta2_) * gi * gi;
      double update = this->lr_ * (m[i] / bc1) / (std::sqrt(s[i] / bc2) + eps_);
      v[i] = static_cast<T>(v[i] - update);
    }
  }

 private:
  double beta1_, beta2_, eps_;
};

template <typename T>
class Adadelta : public Optimizer<T> {
 public:
  explicit Adadelta(double lr = 1.0, double rho = 0.95, double eps = 1e-6)
      : Optimizer<T>(lr), rho_(rho), eps_(eps) {}
  std::string name() const override { return "adadelta"; }

 protected:
  void update(const std::string& pname, TensorT<T>& p) override {
    auto& v = p.value();
    const auto& g = p.grad();
    auto& eg2 = this->slot("adadelta.eg2." + pname, v.size());
    auto& edx2 = this->slot("adadelta.edx2." + pname, v.size());
    for (size_t i = 0; i < v.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      eg2[i] = rho_ * eg2[i] + (1.0 - rho_) * gi * gi;
      double dx = -std::sqrt(edx2[i] + eps_) / std::sqrt(eg2[i] + eps_) * gi;
      edx2[i] = rho_ * edx2[i] + (1.0 - rho_) * dx * dx;
      v[i] = static_cast<T>(v[i] + this->lr_ * dx);
    }
  }

 private:
  double rho_, eps_;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const std::string& name, double lr) {
  if (name == "adam") return std::make_unique<Adam<T>>(lr);
  if (name == "sgd") return std::make_unique<Sgd<T>>(lr);
  if (name == "adadelta") return std::make_unique<Adadelta<T>>(lr);
  throw ConfigError("unknown optimizer: " + name);
}

/// Scale all gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
template <typename T>
double clip_global_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, p] : params.items()) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double factor = max_norm / norm;
    for (auto& [name, p] : params.items()) {
      if (!p.has_grad()) continue;
      for (auto& g : p.grad()) g = static_cast<T>(g * factor);
    }
  }
  return norm;
}

}  // namespace mrc
