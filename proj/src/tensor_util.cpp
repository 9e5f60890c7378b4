#include "penet/tensor_util.hpp"

#include <cmath>

#include "penet/errors.hpp"

namespace penet {

const char* source_name(FeatureSource s) {
  return s == FeatureSource::Intrinsic ? "intrinsic" : "diffusion";
}

torch::Tensor cloud_features(const PointCloud& pc) {
  auto feats = pc.features();
  return torch::from_blob(feats.data(), {static_cast<int64_t>(pc.size()), kPointFeatureDim},
                          torch::kFloat32)
      .clone();
}

torch::Tensor cloud_points(const PointCloud& pc) {
  auto t = torch::empty({static_cast<int64_t>(pc.size()), 3}, torch::kFloat32);
  auto a = t.accessor<float, 2>();
  for (std::size_t i = 0; i < pc.size(); ++i)
    for (int k = 0; k < 3; ++k) a[static_cast<int64_t>(i)][k] = pc.points[i][static_cast<std::size_t>(k)];
  return t;
}

void fill_normal(torch::Tensor& t, double std, Rng& rng) {
  torch::NoGradGuard guard;
  std::normal_distribution<double> g(0.0, std);
  auto flat = torch::empty({t.numel()}, torch::kFloat64);
  auto a = flat.accessor<double, 1>();
  for (int64_t i = 0; i < t.numel(); ++i) a[i] = g(rng);
  t.copy_(flat.view(t.sizes()));
}

void fill_uniform(torch::Tensor& t, double bound, Rng& rng) {
  torch::NoGradGuard guard;
  std::uniform_real_distribution<double> u(-bound, bound);
  auto flat = torch::empty({t.numel()}, torch::kFloat64);
  auto a = flat.accessor<double, 1>();
  for (int64_t i = 0; i < t.numel(); ++i) a[i] = u(rng);
  t.copy_(flat.view(t.sizes()));
}

void init_module(torch::nn::Module& m, uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417));
  torch::NoGradGuard guard;
  for (auto& p : m.named_parameters(true)) {
    auto t = p.value();
    if (t.dim() >= 2) {
      const double fan_in = static_cast<double>(t.size(1));
      fill_uniform(t, std::sqrt(3.0 / fan_in), rng);
    } else {
      t.zero_();
    }
  }
}

void require_finite(const torch::Tensor& t, const std::string& what) {
  if (!torch::isfinite(t).all().item<bool>()) throw InvalidArgument(what + " has non-finite entries");
}

std::pair<torch::Tensor, torch::Tensor> channel_stats(const std::vector<torch::Tensor>& maps) {
  if (maps.empty()) throw InvalidArgument("channel_stats: no feature maps");
  auto all = torch::cat(maps, 0).to(torch::kFloat64);
  auto mean = all.mean(0);
  auto std = all.std(0, false).clamp_min(1e-6);
  return {mean.to(maps.front().scalar_type()), std.to(maps.front().scalar_type())};
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters(true)) out.push_back(p.detach().clone());
  return out;
}

}  // namespace penet
