#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace penet {

using Vec3f = std::array<float, 3>;

inline constexpr int kPointFeatureDim = 9;
inline constexpr int32_t kClutterLabel = -1;

/// Labeled point cloud. Per-point features are xyz ⊕ rgb ⊕ normalized xyz.
struct PointCloud {
  std::vector<Vec3f> points;
  std::vector<Vec3f> colors;       // in [0, 1]
  std::vector<Vec3f> norm_coords;  // in [0, 1], relative to the bounding box
  std::vector<int32_t> labels;     // -1 = clutter

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }

  void reserve(std::size_t n);
  void push_back(const Vec3f& p, const Vec3f& c, int32_t label);

  /// Flattened n×9 row-major feature matrix.
  std::vector<float> features() const;

  /// Throws InvalidArgument if array lengths disagree or invariants fail.
  void validate(int num_classes) const;

  bool operator==(const PointCloud&) const = default;
};

/// Recomputes norm_coords from the cloud's own axis-aligned bounding box.
/// Degenerate axes map to 0.
void normalize_coords(PointCloud& pc);

/// Gathers the given rows into a new cloud (indices may repeat).
PointCloud gather(const PointCloud& pc, std::span<const std::size_t> idx);

/// Distinct non-negative labels in ascending order.
std::vector<int32_t> label_inventory(const PointCloud& pc);

}  // namespace penet
