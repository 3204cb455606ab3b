#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ltu/tensor.hpp"

namespace ltu {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed set of parameter tensors. Moment buffers
// are allocated zeroed at construction and match the parameter shapes; the
// step counter increases by exactly 1 per step().
class AdamState {
 public:
  AdamState(std::vector<Tensor> params, AdamConfig cfg);

  // One update from the gradients currently on the parameters. A missing
  // gradient buffer counts as a zero gradient. Zeroes all gradients after
  // applying the update. lr_scale multiplies the base learning rate
  // (warmup/schedules live in the trainer).
  void step(double lr_scale = 1.0);

  std::uint64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }
  std::span<const Tensor> params() const { return params_; }
  std::span<const double> first_moment(std::size_t param_idx) const;
  std::span<const double> second_moment(std::size_t param_idx) const;

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamConfig cfg_;
  std::uint64_t step_count_ = 0;
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm. Tensors without a gradient buffer contribute 0.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace ltu
