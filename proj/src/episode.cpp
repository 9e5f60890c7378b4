#include "penet/episode.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>

#include "penet/errors.hpp"
#include "penet/rng.hpp"
#include "penet/scene_io.hpp"

namespace penet {

BlockBank::BlockBank(const SceneManifest& manifest, std::vector<int> classes, BlockBankOptions opts)
    : classes_(std::move(classes)), opts_(opts) {
  std::sort(classes_.begin(), classes_.end());
  const std::set<int> wanted(classes_.begin(), classes_.end());
  int region = 0;
  for (std::size_t s = 0; s < manifest.scenes.size(); ++s) {
    const PointCloud scene = read_scene(manifest.scene_path(s));
    const auto cells = block_cells(scene, opts_.block_size);
    for (std::size_t c = 0; c < cells.size(); ++c, ++region) {
      for (int copy = 0; copy < opts_.copies_per_cell; ++copy) {
        const uint64_t seed = derive_seed(opts_.seed, (s << 20) ^ (c << 8) ^ copy);
        PointCloud block =
            extract_block(scene, cells[c], opts_.block_size, opts_.points_per_block, seed);
        if (opts_.augment) block = augment(block, derive_seed(seed, 7), opts_.augmentation);
        std::map<int, std::size_t> counts;
        for (auto l : block.labels)
          if (wanted.count(l)) ++counts[l];
        std::vector<int> present;
        for (const auto& [cls, n] : counts)
          if (n >= opts_.min_class_points) present.push_back(cls);
        blocks_.push_back(std::move(block));
        present_.push_back(std::move(present));
        region_.push_back(region);
      }
    }
  }
}

Episode sample_episode(const BlockBank& bank, int n_way, int k_shot, uint64_t seed) {
  if (n_way < 1 || k_shot < 1) throw InvalidArgument("n_way and k_shot must be >= 1");
  if (static_cast<int>(bank.classes().size()) < n_way) {
    throw EpisodeSamplingError(-1, "split has " + std::to_string(bank.classes().size()) +
                                       " classes, fewer than n_way=" + std::to_string(n_way));
  }
  Rng rng(derive_seed(seed, 11));

  std::vector<std::size_t> query_candidates;
  for (std::size_t i = 0; i < bank.size(); ++i)
    if (static_cast<int>(bank.classes_in(i).size()) >= n_way) query_candidates.push_back(i);
  if (query_candidates.empty()) {
    throw EpisodeSamplingError(-1, "no block contains " + std::to_string(n_way) +
                                       " classes of the split");
  }
  const std::size_t q =
      query_candidates[std::uniform_int_distribution<std::size_t>(0, query_candidates.size() - 1)(rng)];

  std::vector<int> classes = bank.classes_in(q);
  std::shuffle(classes.begin(), classes.end(), rng);
  classes.resize(static_cast<std::size_t>(n_way));

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.class_map = classes;
  ep.query = bank.block(q);
  ep.query_block_id = static_cast<int>(q);

  std::set<int> used_regions{bank.region(q)};
  ep.support.resize(static_cast<std::size_t>(n_way));
  for (int n = 0; n < n_way; ++n) {
    const int cls = classes[static_cast<std::size_t>(n)];
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < bank.size(); ++i) {
      const auto& present = bank.classes_in(i);
      if (used_regions.count(bank.region(i)) == 0 &&
          std::binary_search(present.begin(), present.end(), cls)) {
        candidates.push_back(i);
      }
    }
    // Several copies of one region may qualify; keep one per region.
    std::shuffle(candidates.begin(), candidates.end(), rng);
    std::vector<std::size_t> picks;
    std::set<int> regions;
    for (auto i : candidates) {
      if (regions.insert(bank.region(i)).second) picks.push_back(i);
      if (static_cast<int>(picks.size()) == k_shot) break;
    }
    if (static_cast<int>(picks.size()) < k_shot) {
      throw EpisodeSamplingError(cls, "class " + std::to_string(cls) + " has only " +
                                          std::to_string(picks.size()) +
                                          " support blocks available, need " +
                                          std::to_string(k_shot));
    }
    for (auto i : picks) {
      used_regions.insert(bank.region(i));
      SupportShot shot;
      shot.cloud = bank.block(i);
      shot.block_id = static_cast<int>(i);
      shot.mask.resize(shot.cloud.size());
      for (std::size_t p = 0; p < shot.cloud.size(); ++p) shot.mask[p] = shot.cloud.labels[p] == cls;
      ep.support[static_cast<std::size_t>(n)].push_back(std::move(shot));
    }
  }

  ep.query_labels.resize(ep.query.size());
  for (std::size_t p = 0; p < ep.query.size(); ++p) {
    const auto it = std::find(classes.begin(), classes.end(), ep.query.labels[p]);
    ep.query_labels[p] = it == classes.end() ? n_way : static_cast<int32_t>(it - classes.begin());
  }
  return ep;
}

Episode sample_episode(const SceneManifest& manifest, Fold test_fold, SplitRole role, int n_way,
                       int k_shot, uint64_t seed, const BlockBankOptions& opts) {
  BlockBank bank(manifest, manifest.role_classes(test_fold, role), opts);
  return sample_episode(bank, n_way, k_shot, seed);
}

}  // namespace penet
