#include "unidet/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <doctest.h>

#include "unidet/tensor.hpp"

using namespace unidet;

namespace {

std::vector<std::pair<std::string, Tensor>> single_param(
    const std::vector<double>& values) {
  Tensor t = Tensor::from({values.size()}, values, true);
  return {{"p", t}};
}

void set_grad(Tensor t, const std::vector<double>& grad) {
  const Tensor loss = make_op(
      "test_grad", {1}, {0.0}, {t},
      [t, grad](const std::vector<double>& upstream) mutable {
        double* dst = t.grad_buffer();
        for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += upstream[0] * grad[i];
      });
  backward(loss);
}

}  // namespace

TEST_CASE("optim: schedule endpoints and shape") {
  CHECK(lr_at(0, 1024, 1e-4, 0.9) == 1e-4);
  CHECK(lr_at(1024, 1024, 1e-4, 0.9) == 0.0);
  CHECK(lr_at(512, 1024, 1e-4, 0.9) == doctest::Approx(1e-4 * std::pow(0.5, 0.9)));
  CHECK(lr_at(7, 10, 0.5, 0.0) == 0.5);

  double prev = lr_at(0, 100, 1e-3, 0.9);
  for (std::size_t epoch = 1; epoch <= 100; ++epoch) {
    const double cur = lr_at(epoch, 100, 1e-3, 0.9);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("optim: schedule rejects bad arguments") {
  CHECK_THROWS_AS(lr_at(0, 0, 1e-4, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(11, 10, 1e-4, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(0, 10, 0.0, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(0, 10, -1e-4, 0.9), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(0, 10, 1e-4, -0.1), std::invalid_argument);
}

TEST_CASE("optim: zero gradients and zero decay leave parameters unchanged") {
  auto params = single_param({1.5, -2.0, 0.25});
  AdamW opt;
  for (int i = 0; i < 5; ++i) opt.step(params, 1e-2, 0.0);
  const Tensor t = params[0].second;
  CHECK(t.data()[0] == 1.5);
  CHECK(t.data()[1] == -2.0);
  CHECK(t.data()[2] == 0.25);
  CHECK(opt.steps == 5);
}

TEST_CASE("optim: zero gradients with decay shrink by exactly 1 - lr * wd") {
  auto params = single_param({2.0, -4.0});
  AdamW opt;
  opt.step(params, 0.1, 0.05);
  const double factor = 1.0 - 0.1 * 0.05;
  const Tensor t = params[0].second;
  CHECK(t.data()[0] == 2.0 * factor);
  CHECK(t.data()[1] == -4.0 * factor);
  opt.step(params, 0.1, 0.05);
  CHECK(t.data()[0] == 2.0 * factor - 0.1 * 0.05 * (2.0 * factor));
}

TEST_CASE("optim: first step matches the closed form") {
  // With fresh moments the bias corrections cancel the decay factors, so one
  // step moves each weight by -lr * g / (|g| + eps).
  auto params = single_param({1.0, -1.0, 3.0});
  set_grad(params[0].second, {0.5, -2.0, 0.0});
  AdamW opt;
  opt.step(params, 1e-3, 0.0);
  const Tensor t = params[0].second;
  CHECK(t.data()[0] == doctest::Approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK(t.data()[1] == doctest::Approx(-1.0 + 1e-3 * 2.0 / (2.0 + 1e-8)).epsilon(1e-12));
  CHECK(t.data()[2] == 3.0);
}

TEST_CASE("optim: constant gradient keeps moving the same direction") {
  auto params = single_param({0.0});
  AdamW opt;
  double prev = 0.0;
  for (int i = 0; i < 10; ++i) {
    zero_grads(params);
    set_grad(params[0].second, {1.0});
    opt.step(params, 1e-2, 0.0);
    CHECK(params[0].second.data()[0] < prev);
    prev = params[0].second.data()[0];
  }
}

TEST_CASE("optim: two optimizers replay identically") {
  auto run = [] {
    auto params = single_param({0.3, -0.7});
    AdamW opt;
    for (int i = 0; i < 20; ++i) {
      zero_grads(params);
      set_grad(params[0].second, {0.1 * i, -0.05 * i});
      opt.step(params, 5e-3, 0.01);
    }
    return std::vector<double>{params[0].second.data()[0],
                               params[0].second.data()[1]};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a[0] == b[0]);
  CHECK(a[1] == b[1]);
}

TEST_CASE("optim: size change under a reused name is rejected") {
  auto params = single_param({1.0, 2.0});
  AdamW opt;
  opt.step(params, 1e-3, 0.0);
  auto resized = single_param({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(opt.step(resized, 1e-3, 0.0), std::invalid_argument);
}

TEST_CASE("optim: negative hyperparameters are rejected") {
  auto params = single_param({1.0});
  AdamW opt;
  CHECK_THROWS_AS(opt.step(params, -1e-3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(opt.step(params, 1e-3, -0.1), std::invalid_argument);
}

TEST_CASE("optim: zero_grads clears accumulated gradients") {
  auto params = single_param({1.0, 2.0});
  set_grad(params[0].second, {3.0, 4.0});
  CHECK(params[0].second.has_grad());
  CHECK(params[0].second.grad()[0] == 3.0);
  zero_grads(params);
  const Tensor t = params[0].second;
  if (t.has_grad()) {
    CHECK(t.grad()[0] == 0.0);
    CHECK(t.grad()[1] == 0.0);
  }
}
