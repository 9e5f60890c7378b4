#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "penet/point_cloud.hpp"

namespace penet {

/// Cross-validation fold. A fold names the *test* classes; the other fold trains.
enum class Fold { S0, S1 };

Fold parse_fold(const std::string& s);
const char* fold_name(Fold f);

struct ClassSplit {
  std::vector<int> train_classes;
  std::vector<int> test_classes;

  bool disjoint() const;
};

enum class SplitRole { Train, Test };

struct SceneEntry {
  std::string file;  // relative to the manifest directory
  std::vector<int> classes;
  std::size_t num_points = 0;
};

struct SceneManifest {
  static constexpr int kVersion = 1;
  static constexpr const char* kFileName = "manifest.json";

  std::filesystem::path root;  // directory holding manifest.json and the scenes
  uint64_t seed = 0;
  int num_classes = 0;
  double diversity = 0.0;
  double room_size = 1.0;
  std::vector<int> fold0;
  std::vector<int> fold1;
  std::vector<SceneEntry> scenes;

  ClassSplit split(Fold test_fold) const;
  std::vector<int> role_classes(Fold test_fold, SplitRole role) const;
  std::filesystem::path scene_path(std::size_t i) const { return root / scenes.at(i).file; }

  /// Accepts the directory or the manifest file itself.
  static SceneManifest load(const std::filesystem::path& path);
  void save() const;

  /// Checks split disjointness and, if `deep`, that every scene parses and
  /// its stored labels match the recorded class inventory.
  void validate(bool deep) const;
};

struct DatasetOptions {
  std::filesystem::path out_dir;
  int scenes = 200;
  int classes = 12;
  double diversity = 0.3;
  uint64_t seed = 0;
  double room_size = 1.0;
  std::size_t min_points = 4096;
};

/// Writes PCS1 scenes and manifest.json into `out_dir`.
SceneManifest generate_dataset(const DatasetOptions& opts);

}  // namespace penet
