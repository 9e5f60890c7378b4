#pragma once

#include <cstdint>
#include <vector>

#include "penet/blocks.hpp"
#include "penet/manifest.hpp"
#include "penet/point_cloud.hpp"

namespace penet {

struct SupportShot {
  PointCloud cloud;
  std::vector<uint8_t> mask;  // 1 = point belongs to the shot's class
  int block_id = -1;
};

/// One N-way K-shot task. Episode class n maps to global class class_map[n];
/// query label n_way is background.
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  std::vector<std::vector<SupportShot>> support;  // [n_way][k_shot]
  PointCloud query;
  std::vector<int32_t> query_labels;
  std::vector<int> class_map;
  int query_block_id = -1;
};

struct BlockBankOptions {
  double block_size = 1.0;
  std::size_t points_per_block = 512;
  std::size_t min_class_points = 10;  // points needed for a class to count as present
  int copies_per_cell = 1;            // independent draws of the same region
  bool augment = false;
  AugmentParams augmentation;
  uint64_t seed = 0;
};

/// Pre-extracted blocks of every scene, annotated with the classes of one
/// split role that they contain.
class BlockBank {
 public:
  BlockBank(const SceneManifest& manifest, std::vector<int> classes, BlockBankOptions opts);

  std::size_t size() const noexcept { return blocks_.size(); }
  const PointCloud& block(std::size_t i) const { return blocks_.at(i); }
  /// Role classes present in block i, ascending.
  const std::vector<int>& classes_in(std::size_t i) const { return present_.at(i); }
  /// Scene region id; copies of one cell share it.
  int region(std::size_t i) const { return region_.at(i); }
  const std::vector<int>& classes() const noexcept { return classes_; }
  const BlockBankOptions& options() const noexcept { return opts_; }

 private:
  std::vector<int> classes_;
  BlockBankOptions opts_;
  std::vector<PointCloud> blocks_;
  std::vector<std::vector<int>> present_;
  std::vector<int> region_;
};

/// Deterministic in `seed`. Throws EpisodeSamplingError naming the deficient
/// class (or -1 when the split itself is too small).
Episode sample_episode(const BlockBank& bank, int n_way, int k_shot, uint64_t seed);

Episode sample_episode(const SceneManifest& manifest, Fold test_fold, SplitRole role, int n_way,
                       int k_shot, uint64_t seed, const BlockBankOptions& opts = {});

}  // namespace penet
