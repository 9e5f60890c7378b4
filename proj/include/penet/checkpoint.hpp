#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace penet {

/// Named-array container used for learner and PAM checkpoints.
///
/// Layout (little-endian):
///   "PNCK" | u32 version | u32 manifest_len | manifest JSON
///   u32 count | count × { u32 name_len | name | u8 dtype | u32 ndim | i64 dims[ndim] | data }
/// dtype: 0 = f32, 1 = f64, 2 = i64.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> arrays;

  void add(std::string name, const torch::Tensor& t);
  bool has(const std::string& name) const;
  const torch::Tensor& get(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  /// Stores every named parameter and buffer of `m` under `prefix`.
  void add_module(const torch::nn::Module& m, const std::string& prefix = "");
  /// Copies stored arrays into `m`'s parameters; throws FormatError on a
  /// missing name or shape mismatch.
  void load_module(torch::nn::Module& m, const std::string& prefix = "") const;
};

}  // namespace penet
