#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "penet/manifest.hpp"
#include "penet/pam.hpp"

namespace penet {

/// Ablation rows: which of (diffusion stream, PAM, calibration loss) are on.
/// The intrinsic stream is always active.
enum class Variant { A, B, C, D, E, F };

Variant parse_variant(const std::string& s);
const char* variant_name(Variant v);

struct ModuleSet {
  bool il = true;
  bool dl = true;
  bool pam = true;
  bool pcm = true;

  nlohmann::json to_json() const;
};

ModuleSet modules_for(Variant v);

struct RunConfig {
  std::filesystem::path data;
  Fold split = Fold::S0;  // test fold
  int n_way = 2;
  int k_shot = 1;
  int train_episodes = 2000;
  int test_episodes = 300;
  std::vector<uint64_t> seeds{0, 1, 2};
  uint64_t eval_seed = 1000;  // base seed of the test episodes, shared by all training seeds

  double lr = 1e-3;
  double decay = 0.5;
  int decay_interval = 500;

  PamConfig pam;
  double lambda = 1.0;
  double temperature = 1.0;
  int proto_seeds = 5;
  double infer_mask_ratio = 0.0;

  std::size_t points_per_block = 512;
  double block_size = 1.0;
  std::size_t min_class_points = 10;
  int train_copies = 1;
  bool train_augment = true;

  std::filesystem::path intrinsic_checkpoint;
  std::filesystem::path diffusion_checkpoint;
  std::filesystem::path out = "results";
  Variant variant = Variant::F;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys throw FormatError naming the key.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Throws InvalidArgument for bad values and a missing data directory;
  /// FormatError for missing checkpoints the active modules need.
  void validate() const;
  /// SHA-256 of the canonical JSON form.
  std::string digest() const;
};

/// lr · decay^⌊step / decay_interval⌋.
double lr_at(const RunConfig& cfg, long step);

}  // namespace penet
