#include "penet/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "penet/errors.hpp"

namespace penet {
namespace {

double evaluate(const std::function<torch::Tensor()>& loss) {
  torch::NoGradGuard guard;
  const double v = loss().item<double>();
  if (!std::isfinite(v)) throw InvalidState("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<torch::Tensor()>& loss, const NamedTensors& params, double eps,
                           const GradientOverride& override_grads) {
  if (!(eps > 0)) throw InvalidArgument("grad_check: eps must be positive");
  for (const auto& [name, p] : params) {
    if (p.grad().defined()) p.mutable_grad().zero_();
  }
  auto l = loss();
  if (!std::isfinite(l.item<double>())) throw InvalidState("grad_check: non-finite loss");
  std::vector<torch::Tensor> inputs;
  for (const auto& [name, p] : params) inputs.push_back(p);
  auto grads = torch::autograd::grad({l}, inputs, {}, false, false, true);
  NamedTensors analytic;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = grads[i].defined() ? grads[i].detach().clone() : torch::zeros_like(params[i].second);
    analytic.emplace_back(params[i].first, g);
  }
  if (override_grads) override_grads(analytic);

  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second;
    auto flat = p.detach().view({-1});
    auto g = analytic[i].second.to(torch::kFloat64).contiguous().view({-1});
    for (int64_t j = 0; j < flat.numel(); ++j) {
      double orig;
      {
        torch::NoGradGuard guard;
        orig = flat[j].item<double>();
        flat[j].fill_(orig + eps);
      }
      const double up = evaluate(loss);
      {
        torch::NoGradGuard guard;
        flat[j].fill_(orig - eps);
      }
      const double down = evaluate(loss);
      {
        torch::NoGradGuard guard;
        flat[j].fill_(orig);
      }
      const double numeric = (up - down) / (2 * eps);
      const double a = g[j].item<double>();
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      ++r.checked;
      if (r.worst_index < 0 || rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_param = params[i].first;
        r.worst_index = j;
        r.analytic = a;
        r.numeric = numeric;
      }
    }
  }
  return r;
}

NamedTensors named_params(torch::nn::Module& m, const std::string& prefix) {
  NamedTensors out;
  for (auto& p : m.named_parameters(true)) out.emplace_back(prefix + p.key(), p.value());
  return out;
}

}  // namespace penet
