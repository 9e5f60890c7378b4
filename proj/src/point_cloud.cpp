#include "penet/point_cloud.hpp"

#include <algorithm>
#include <limits>
#include <set>
#include <string>

#include "penet/errors.hpp"

namespace penet {

void PointCloud::reserve(std::size_t n) {
  points.reserve(n);
  colors.reserve(n);
  norm_coords.reserve(n);
  labels.reserve(n);
}

void PointCloud::push_back(const Vec3f& p, const Vec3f& c, int32_t label) {
  points.push_back(p);
  colors.push_back(c);
  norm_coords.push_back({0.f, 0.f, 0.f});
  labels.push_back(label);
}

std::vector<float> PointCloud::features() const {
  std::vector<float> out;
  out.reserve(size() * kPointFeatureDim);
  for (std::size_t i = 0; i < size(); ++i) {
    out.insert(out.end(), points[i].begin(), points[i].end());
    out.insert(out.end(), colors[i].begin(), colors[i].end());
    out.insert(out.end(), norm_coords[i].begin(), norm_coords[i].end());
  }
  return out;
}

void PointCloud::validate(int num_classes) const {
  const auto n = points.size();
  if (colors.size() != n || norm_coords.size() != n || labels.size() != n) {
    throw InvalidArgument("point cloud arrays have inconsistent lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (float v : norm_coords[i]) {
      if (!(v >= 0.f && v <= 1.f)) {
        throw InvalidArgument("norm_coords outside [0,1] at point " + std::to_string(i));
      }
    }
    if (labels[i] < kClutterLabel || labels[i] >= num_classes) {
      throw InvalidArgument("label " + std::to_string(labels[i]) + " out of range at point " +
                            std::to_string(i));
    }
  }
}

void normalize_coords(PointCloud& pc) {
  if (pc.empty()) return;
  Vec3f lo{std::numeric_limits<float>::max(), std::numeric_limits<float>::max(),
           std::numeric_limits<float>::max()};
  Vec3f hi{std::numeric_limits<float>::lowest(), std::numeric_limits<float>::lowest(),
           std::numeric_limits<float>::lowest()};
  for (const auto& p : pc.points) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  pc.norm_coords.resize(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      const double range = static_cast<double>(hi[a]) - lo[a];
      float v = range > 0 ? static_cast<float>((pc.points[i][a] - static_cast<double>(lo[a])) / range)
                          : 0.f;
      pc.norm_coords[i][a] = std::clamp(v, 0.f, 1.f);
    }
  }
}

PointCloud gather(const PointCloud& pc, std::span<const std::size_t> idx) {
  PointCloud out;
  out.reserve(idx.size());
  for (auto i : idx) {
    out.points.push_back(pc.points.at(i));
    out.colors.push_back(pc.colors.at(i));
    out.norm_coords.push_back(pc.norm_coords.at(i));
    out.labels.push_back(pc.labels.at(i));
  }
  return out;
}

std::vector<int32_t> label_inventory(const PointCloud& pc) {
  std::set<int32_t> s;
  for (auto l : pc.labels)
    if (l >= 0) s.insert(l);
  return {s.begin(), s.end()};
}

}  // namespace penet
