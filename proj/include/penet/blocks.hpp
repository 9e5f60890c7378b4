#pragma once

#include <cstdint>
#include <vector>

#include "penet/point_cloud.hpp"

namespace penet {

struct BlockCell {
  int ix = 0;
  int iy = 0;
  std::size_t count = 0;
};

/// Non-empty axis-aligned xy cells of side `block_size`, row-major order.
std::vector<BlockCell> block_cells(const PointCloud& scene, double block_size);

/// Extracts `n_points` points from one cell. Every cell point is used once
/// when the cell is under-populated and the remainder is drawn with
/// replacement; otherwise a random subset is drawn without replacement.
/// Coordinates become block-local in xy; norm_coords are recomputed.
PointCloud extract_block(const PointCloud& scene, const BlockCell& cell, double block_size,
                         std::size_t n_points, uint64_t seed);

/// Picks a random non-empty cell and extracts it. Throws InvalidArgument on
/// an empty scene.
PointCloud sample_block(const PointCloud& scene, double block_size, std::size_t n_points,
                        uint64_t seed);

struct AugmentParams {
  double scale_min = 0.8;
  double scale_max = 1.2;
  double max_shift = 0.1;
  double max_rotation = 6.283185307179586;  // about the vertical axis
  double jitter_sigma = 0.01;
};

/// One concrete draw of the augmentation parameters.
struct AugmentDraw {
  double scale = 1.0;
  std::array<double, 3> shift{0, 0, 0};
  double rotation = 0.0;
  double jitter_sigma = 0.0;
};

AugmentDraw draw_augmentation(const AugmentParams& params, uint64_t seed);

/// Rotates about the xy centroid, scales, shifts and jitters the coordinates.
/// Colors, norm_coords and labels are left untouched.
PointCloud apply_augmentation(const PointCloud& pc, const AugmentDraw& draw, uint64_t seed);

PointCloud augment(const PointCloud& pc, uint64_t seed, const AugmentParams& params = {});

}  // namespace penet
