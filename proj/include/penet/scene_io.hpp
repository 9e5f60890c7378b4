#pragma once

#include <filesystem>
#include <iosfwd>

#include "penet/point_cloud.hpp"

namespace penet {

// PCS1 layout, little-endian:
//   "PCS1" | u32 n | u32 d (=9) | f32[n*d] features | i32[n] labels

void write_scene(const PointCloud& pc, std::ostream& out);
void write_scene(const PointCloud& pc, const std::filesystem::path& path);

/// Throws FormatError naming "magic", "n", "d", "features" or "labels".
PointCloud read_scene(std::istream& in);
PointCloud read_scene(const std::filesystem::path& path);

}  // namespace penet
