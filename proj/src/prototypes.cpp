#include "penet/prototypes.hpp"

#include <limits>
#include <string>

#include "penet/errors.hpp"

namespace penet {
namespace {

double sq_dist(const Vec3f& a, const Vec3f& b) {
  double s = 0;
  for (int k = 0; k < 3; ++k) {
    const double d = static_cast<double>(a[k]) - b[k];
    s += d * d;
  }
  return s;
}

}  // namespace

std::vector<int64_t> fps(std::span<const Vec3f> coords, std::size_t s) {
  const std::size_t n = coords.size();
  if (s < 1 || s > n) {
    throw InvalidArgument("fps: need 1 <= s <= n (s=" + std::to_string(s) +
                          ", n=" + std::to_string(n) + ")");
  }
  // Distance to the centroid scaled by n, |n·p − Σp|, so exact ties stay exact.
  double sum[3] = {0, 0, 0};
  for (const auto& p : coords)
    for (int k = 0; k < 3; ++k) sum[k] += p[k];
  const auto nd = static_cast<double>(n);
  std::vector<int64_t> picked;
  picked.reserve(s);
  std::size_t first = 0;
  double best = -1;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0;
    for (int k = 0; k < 3; ++k) {
      const double t = nd * coords[i][k] - sum[k];
      d += t * t;
    }
    if (d > best) {
      best = d;
      first = i;
    }
  }
  picked.push_back(static_cast<int64_t>(first));
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  taken[first] = true;
  std::size_t last = first;
  while (picked.size() < s) {
    std::size_t arg = n;
    double far = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      mind[i] = std::min(mind[i], sq_dist(coords[i], coords[last]));
      if (mind[i] > far) {
        far = mind[i];
        arg = i;
      }
    }
    taken[arg] = true;
    picked.push_back(static_cast<int64_t>(arg));
    last = arg;
  }
  return picked;
}

torch::Tensor inverted_cluster(const torch::Tensor& features, std::span<const Vec3f> coords,
                               std::span<const uint8_t> mask, std::size_t seeds) {
  if (static_cast<std::size_t>(features.size(0)) != coords.size() || coords.size() != mask.size()) {
    throw InvalidArgument("inverted_cluster: features, coords and mask lengths differ");
  }
  std::vector<int64_t> idx;
  std::vector<Vec3f> sub;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      idx.push_back(static_cast<int64_t>(i));
      sub.push_back(coords[i]);
    }
  }
  if (idx.empty()) throw InvalidArgument("inverted_cluster: mask selects no points");
  const auto seed_idx = fps(sub, std::min(seeds, sub.size()));

  std::vector<int64_t> assign(sub.size());
  for (std::size_t i = 0; i < sub.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < seed_idx.size(); ++r) {
      const double d = sq_dist(sub[i], sub[static_cast<std::size_t>(seed_idx[r])]);
      if (d < best) {
        best = d;
        assign[i] = static_cast<int64_t>(r);
      }
    }
  }
  const auto k = static_cast<int64_t>(seed_idx.size());
  auto selected = features.index_select(0, torch::tensor(idx, torch::kInt64));
  auto assign_t = torch::tensor(assign, torch::kInt64);
  auto sums = torch::zeros({k, features.size(1)}, features.options()).index_add(0, assign_t, selected);
  auto counts = torch::zeros({k}, features.options())
                    .index_add(0, assign_t, torch::ones({static_cast<int64_t>(sub.size())}, features.options()));
  auto nonempty = counts > 0;
  auto means = sums.index({nonempty}) / counts.index({nonempty}).unsqueeze(1);
  return means.mean(0, /*keepdim=*/true);
}

ProtoGenResult proto_gen(const std::vector<std::vector<ShotView>>& shots, std::size_t seeds) {
  ProtoGenResult out;
  std::vector<torch::Tensor> backgrounds;
  for (std::size_t c = 0; c < shots.size(); ++c) {
    if (shots[c].empty()) throw InvalidArgument("proto_gen: class " + std::to_string(c) + " has no shots");
    std::vector<torch::Tensor> per_shot;
    for (const auto& shot : shots[c]) {
      bool any_fg = false, any_bg = false;
      for (auto m : shot.mask) (m ? any_fg : any_bg) = true;
      if (!any_fg) {
        throw InvalidArgument("proto_gen: class " + std::to_string(c) + " has a shot with zero support points");
      }
      per_shot.push_back(inverted_cluster(shot.features, shot.coords, shot.mask, seeds));
      if (any_bg) {
        std::vector<uint8_t> inv(shot.mask.size());
        for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = shot.mask[i] ? 0 : 1;
        backgrounds.push_back(inverted_cluster(shot.features, shot.coords, inv, seeds));
      }
    }
    out.foreground.push_back(torch::cat(per_shot, 0).mean(0, true));
  }
  if (backgrounds.empty()) throw InvalidArgument("proto_gen: background has zero support points");
  out.background = torch::cat(backgrounds, 0).mean(0, true);
  return out;
}

PrototypeSet assemble(const std::vector<torch::Tensor>& foreground, const torch::Tensor& background,
                      PrototypeSource source) {
  const auto d = background.size(-1);
  std::vector<torch::Tensor> rows;
  for (std::size_t c = 0; c < foreground.size(); ++c) {
    if (foreground[c].size(-1) != d) {
      throw InvalidArgument("assemble: prototype " + std::to_string(c) + " has width " +
                            std::to_string(foreground[c].size(-1)) + ", expected " + std::to_string(d));
    }
    rows.push_back(foreground[c].reshape({1, d}));
  }
  rows.push_back(background.reshape({1, d}));
  return {torch::cat(rows, 0), source};
}

}  // namespace penet
