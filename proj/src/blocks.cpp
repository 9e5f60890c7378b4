#include "penet/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "penet/errors.hpp"
#include "penet/rng.hpp"

namespace penet {
namespace {

struct Grid {
  double x0, y0;
  int nx, ny;
};

Grid make_grid(const PointCloud& scene, double block_size) {
  double x0 = std::numeric_limits<double>::max(), y0 = x0;
  double x1 = std::numeric_limits<double>::lowest(), y1 = x1;
  for (const auto& p : scene.points) {
    x0 = std::min<double>(x0, p[0]);
    y0 = std::min<double>(y0, p[1]);
    x1 = std::max<double>(x1, p[0]);
    y1 = std::max<double>(y1, p[1]);
  }
  const int nx = std::max(1, static_cast<int>(std::ceil((x1 - x0) / block_size - 1e-9)));
  const int ny = std::max(1, static_cast<int>(std::ceil((y1 - y0) / block_size - 1e-9)));
  return {x0, y0, nx, ny};
}

std::pair<int, int> cell_of(const Grid& g, const Vec3f& p, double block_size) {
  const int ix = std::clamp(static_cast<int>((p[0] - g.x0) / block_size), 0, g.nx - 1);
  const int iy = std::clamp(static_cast<int>((p[1] - g.y0) / block_size), 0, g.ny - 1);
  return {ix, iy};
}

}  // namespace

std::vector<BlockCell> block_cells(const PointCloud& scene, double block_size) {
  if (block_size <= 0) throw InvalidArgument("block_size must be positive");
  if (scene.empty()) return {};
  const Grid g = make_grid(scene, block_size);
  std::map<std::pair<int, int>, std::size_t> counts;
  for (const auto& p : scene.points) {
    auto [ix, iy] = cell_of(g, p, block_size);
    ++counts[{iy, ix}];
  }
  std::vector<BlockCell> out;
  for (const auto& [k, c] : counts) out.push_back({k.second, k.first, c});
  return out;
}

PointCloud extract_block(const PointCloud& scene, const BlockCell& cell, double block_size,
                         std::size_t n_points, uint64_t seed) {
  if (scene.empty()) throw InvalidArgument("cannot sample a block from an empty scene");
  if (n_points == 0) throw InvalidArgument("n_points must be positive");
  const Grid g = make_grid(scene, block_size);
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < scene.size(); ++i) {
    auto [ix, iy] = cell_of(g, scene.points[i], block_size);
    if (ix == cell.ix && iy == cell.iy) members.push_back(i);
  }
  if (members.empty()) throw InvalidArgument("requested block is empty");

  Rng rng(derive_seed(seed, 1));
  std::vector<std::size_t> chosen;
  if (members.size() >= n_points) {
    std::shuffle(members.begin(), members.end(), rng);
    chosen.assign(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_points));
  } else {
    chosen = members;
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    while (chosen.size() < n_points) chosen.push_back(members[pick(rng)]);
    std::shuffle(chosen.begin(), chosen.end(), rng);
  }
  PointCloud out = gather(scene, chosen);
  const double ox = g.x0 + cell.ix * block_size, oy = g.y0 + cell.iy * block_size;
  for (auto& p : out.points) {
    p[0] = static_cast<float>(p[0] - ox);
    p[1] = static_cast<float>(p[1] - oy);
  }
  normalize_coords(out);
  return out;
}

PointCloud sample_block(const PointCloud& scene, double block_size, std::size_t n_points,
                        uint64_t seed) {
  if (scene.empty()) throw InvalidArgument("cannot sample a block from an empty scene");
  const auto cells = block_cells(scene, block_size);
  Rng rng(derive_seed(seed, 0));
  const auto& cell = cells[std::uniform_int_distribution<std::size_t>(0, cells.size() - 1)(rng)];
  return extract_block(scene, cell, block_size, n_points, seed);
}

AugmentDraw draw_augmentation(const AugmentParams& params, uint64_t seed) {
  Rng rng(derive_seed(seed, 2));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  AugmentDraw d;
  d.scale = params.scale_min + (params.scale_max - params.scale_min) * u01(rng);
  for (auto& s : d.shift) s = params.max_shift * (2 * u01(rng) - 1);
  d.rotation = params.max_rotation * u01(rng);
  d.jitter_sigma = params.jitter_sigma;
  return d;
}

PointCloud apply_augmentation(const PointCloud& pc, const AugmentDraw& draw, uint64_t seed) {
  PointCloud out = pc;
  if (pc.empty()) return out;
  double cx = 0, cy = 0;
  for (const auto& p : pc.points) {
    cx += p[0];
    cy += p[1];
  }
  cx /= static_cast<double>(pc.size());
  cy /= static_cast<double>(pc.size());
  const double c = std::cos(draw.rotation), s = std::sin(draw.rotation);
  Rng rng(derive_seed(seed, 3));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& p : out.points) {
    const double x = p[0] - cx, y = p[1] - cy;
    double q[3] = {(c * x - s * y) * draw.scale + cx, (s * x + c * y) * draw.scale + cy,
                   p[2] * draw.scale};
    for (int a = 0; a < 3; ++a) {
      q[a] += draw.shift[a];
      if (draw.jitter_sigma > 0) q[a] += draw.jitter_sigma * gauss(rng);
      p[a] = static_cast<float>(q[a]);
    }
  }
  return out;
}

PointCloud augment(const PointCloud& pc, uint64_t seed, const AugmentParams& params) {
  if (pc.empty()) throw InvalidArgument("cannot augment an empty cloud");
  return apply_augmentation(pc, draw_augmentation(params, seed), seed);
}

}  // namespace penet
