#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "unidet/tensor.hpp"

namespace unidet {

// base_lr * (1 - epoch/epochs)^power; non-increasing in epoch for power > 0,
// exactly base_lr at epoch 0 and 0 at the final epoch.
double lr_at(std::size_t epoch, std::size_t epochs, double base_lr, double power);

// Adam with decoupled weight decay. Moment buffers are keyed by parameter
// name, so each step must receive the same named set; parameters without an
// accumulated gradient are treated as having a zero one.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t steps = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;

  void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr,
            double weight_decay);
};

void zero_grads(const std::vector<std::pair<std::string, Tensor>>& params);

}  // namespace unidet
