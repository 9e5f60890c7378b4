#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace penet {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic = 0;
  double numeric = 0;
  std::size_t checked = 0;
};

/// Rewrites the analytic gradients before comparison (negative controls).
using GradientOverride = std::function<void(NamedTensors& grads)>;

/// Compares autograd gradients of `loss` with central differences
/// (f(θ+eps) − f(θ−eps)) / 2eps for every scalar of every parameter.
/// Relative error is |a − n| / max(|a|, |n|, 1e-6). Parameters are
/// perturbed in place and restored. Throws InvalidState on a non-finite loss.
GradCheckResult grad_check(const std::function<torch::Tensor()>& loss, const NamedTensors& params, double eps,
                           const GradientOverride& override_grads = {});

/// Named parameters of a module, for grad_check.
NamedTensors named_params(torch::nn::Module& m, const std::string& prefix = "");

}  // namespace penet
