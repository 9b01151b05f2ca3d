#include "unidet/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace unidet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

double lr_at(std::size_t epoch, std::size_t epochs, double base_lr, double power) {
  if (epochs == 0) fail("lr_at: epochs must be positive");
  if (epoch > epochs) {
    fail("lr_at: epoch " + std::to_string(epoch) + " beyond " + std::to_string(epochs));
  }
  if (base_lr <= 0.0) fail("lr_at: base_lr must be positive");
  if (power < 0.0) fail("lr_at: power must be non-negative");
  const double remaining =
      1.0 - static_cast<double>(epoch) / static_cast<double>(epochs);
  return base_lr * std::pow(remaining, power);
}

void AdamW::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr,
                 double weight_decay) {
  if (lr < 0.0) fail("AdamW: negative learning rate");
  if (weight_decay < 0.0) fail("AdamW: negative weight decay");
  steps += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (const auto& [name, tensor] : params) {
    Tensor t = tensor;
    const std::size_t n = t.numel();
    auto& m = first_moment[name];
    auto& v = second_moment[name];
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    if (m.size() != n || v.size() != n) {
      fail("AdamW: parameter '" + name + "' changed size between steps");
    }
    const bool has_grad = t.has_grad();
    const std::vector<double>& g = t.grad();
    double* p = t.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
      v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * p[i]);
    }
  }
}

void zero_grads(const std::vector<std::pair<std::string, Tensor>>& params) {
  for (const auto& [name, tensor] : params) {
    Tensor t = tensor;
    t.zero_grad();
  }
}

}  // namespace unidet
