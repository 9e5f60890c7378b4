#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

#include "penet/point_cloud.hpp"

namespace penet {

/// Greedy farthest point sampling. The first pick is the point farthest from
/// the centroid; each later pick maximizes the distance to the picked set.
/// Ties go to the lowest index. Throws InvalidArgument unless 1 <= s <= n.
std::vector<int64_t> fps(std::span<const Vec3f> coords, std::size_t s);

/// Single prototype of the masked points: FPS seeds in coordinate space,
/// nearest-seed assignment (ties to the earlier seed), per-cluster feature
/// means, then the unweighted mean of the non-empty cluster means.
torch::Tensor inverted_cluster(const torch::Tensor& features, std::span<const Vec3f> coords,
                               std::span<const uint8_t> mask, std::size_t seeds);

/// Read-only view of one support shot.
struct ShotView {
  torch::Tensor features;  // n×D
  std::span<const Vec3f> coords;
  std::span<const uint8_t> mask;
};

struct ProtoGenResult {
  std::vector<torch::Tensor> foreground;  // C rows of 1×D
  torch::Tensor background;               // 1×D
};

/// Foreground prototype per class (uniform mean over its shots) and one
/// background prototype (uniform mean over the per-shot background
/// prototypes). `shots[c]` lists class c's shots.
ProtoGenResult proto_gen(const std::vector<std::vector<ShotView>>& shots, std::size_t seeds);

enum class PrototypeSource { Intrinsic, Diffusion, Fused };

/// (C+1)×D prototype matrix: episode classes in order, background last.
struct PrototypeSet {
  torch::Tensor rows;
  PrototypeSource source = PrototypeSource::Intrinsic;

  int64_t num_classes() const { return rows.size(0) - 1; }
};

PrototypeSet assemble(const std::vector<torch::Tensor>& foreground, const torch::Tensor& background,
                      PrototypeSource source);

}  // namespace penet
