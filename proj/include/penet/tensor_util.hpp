#pragma once

#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "penet/point_cloud.hpp"
#include "penet/rng.hpp"

namespace penet {

enum class FeatureSource { Intrinsic, Diffusion };

const char* source_name(FeatureSource s);

/// Per-point feature matrix plus the coordinates it was computed on.
struct FeatureMap {
  torch::Tensor features;  // n×D
  FeatureSource source = FeatureSource::Intrinsic;
  std::vector<Vec3f> coords;

  int64_t rows() const { return features.size(0); }
  int64_t dim() const { return features.size(1); }
};

/// n×9 float tensor of a cloud's per-point features.
torch::Tensor cloud_features(const PointCloud& pc);
/// n×3 float tensor of raw coordinates.
torch::Tensor cloud_points(const PointCloud& pc);

/// Fills `t` in place from N(0, std²) using `rng` (independent of torch's global generator).
void fill_normal(torch::Tensor& t, double std, Rng& rng);
void fill_uniform(torch::Tensor& t, double bound, Rng& rng);

/// Re-initializes every Linear-style weight (dim 2) with a fan-in scaled
/// uniform draw and zeros every bias (dim 1).
void init_module(torch::nn::Module& m, uint64_t seed);

/// Throws InvalidArgument naming `what` if `t` holds NaN or Inf.
void require_finite(const torch::Tensor& t, const std::string& what);

/// Per-channel mean and standard deviation (floored at 1e-6) over the rows
/// of every matrix in `maps`.
std::pair<torch::Tensor, torch::Tensor> channel_stats(const std::vector<torch::Tensor>& maps);

/// Deep copy of all parameters, detached.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& m);

}  // namespace penet
