#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "penet/point_cloud.hpp"

namespace penet {

/// rowsoftmax((F_query W_q)ᵀ (F_support W_k) / scale), a D×D channel map.
/// Both feature maps must have the same point count; resample_support first.
torch::Tensor channel_attention(const torch::Tensor& f_query, const torch::Tensor& f_support,
                                const torch::Tensor& w_q, const torch::Tensor& w_k, double scale);

/// FPS indices that bring `coords` down to `n` rows. Fewer rows than `n`
/// are repeated cyclically; equal counts return the identity.
std::vector<int64_t> resample_indices(std::span<const Vec3f> coords, std::size_t n);

/// One attention block: projections W_q, W_k, W_v (D×D) and a two-layer MLP
/// whose final layer starts at zero.
class AlignBlockImpl : public torch::nn::Module {
 public:
  explicit AlignBlockImpl(int dim);

  torch::Tensor mlp(const torch::Tensor& x);

  torch::Tensor w_q, w_k, w_v;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(AlignBlock);

/// Test injection points for a single block.
struct BlockHooks {
  std::optional<torch::Tensor> attention;                   // replaces the computed map
  std::function<torch::Tensor(const torch::Tensor&)> mlp;   // replaces the block MLP
};

/// P + MLP((Attn · (P W_v)ᵀ)ᵀ) with Attn from the (query, support) features.
torch::Tensor align_prototypes(const torch::Tensor& prototypes, const torch::Tensor& f_query,
                               const torch::Tensor& f_support, AlignBlock& block,
                               const BlockHooks& hooks = {});

/// Updates intrinsic prototypes from diffusion-feature attention.
inline torch::Tensor pull_block(const torch::Tensor& p_i, const torch::Tensor& f_qd,
                                const torch::Tensor& f_sd, AlignBlock& block,
                                const BlockHooks& hooks = {}) {
  return align_prototypes(p_i, f_qd, f_sd, block, hooks);
}

/// Updates diffusion prototypes from intrinsic-feature attention.
inline torch::Tensor push_block(const torch::Tensor& p_d, const torch::Tensor& f_qi,
                                const torch::Tensor& f_si, AlignBlock& block,
                                const BlockHooks& hooks = {}) {
  return align_prototypes(p_d, f_qi, f_si, block, hooks);
}

enum class PamVariant { PushPull, PushOnly, PullOnly };

PamVariant parse_pam_variant(const std::string& s);
const char* pam_variant_name(PamVariant v);

struct PamConfig {
  int dim = 64;
  int iterations = 2;
  PamVariant variant = PamVariant::PushPull;
  bool share_weights = false;
  double qk_init = 0.02;  // uniform bound of the W_q / W_k initialization

  nlohmann::json to_json() const;
  static PamConfig from_json(const nlohmann::json& j);
};

/// Support features are expected already resampled to the query point count.
struct StreamFeatures {
  torch::Tensor f_qi, f_si;  // intrinsic query / support
  torch::Tensor f_qd, f_sd;  // diffusion query / support
};

/// M stacked (pull, push) iterations.
class PrototypeAssimilationImpl : public torch::nn::Module {
 public:
  explicit PrototypeAssimilationImpl(PamConfig cfg);

  /// Returns (P̂_i, P̂_d).
  std::pair<torch::Tensor, torch::Tensor> assimilate(const torch::Tensor& p_i, const torch::Tensor& p_d,
                                                     const StreamFeatures& f);
  /// Single-stream form used when the diffusion stream is disabled: pull
  /// blocks driven by intrinsic features update P_i alone.
  torch::Tensor assimilate_intrinsic(const torch::Tensor& p_i, const torch::Tensor& f_qi,
                                     const torch::Tensor& f_si);

  /// Block used at iteration m (the same block for every m when weights are shared).
  AlignBlock& pull(int m);
  AlignBlock& push(int m);
  bool has_pull() const noexcept { return !pull_.empty(); }
  bool has_push() const noexcept { return !push_.empty(); }
  const PamConfig& config() const noexcept { return cfg_; }

 private:
  PamConfig cfg_;
  std::vector<AlignBlock> pull_, push_;
};
TORCH_MODULE(PrototypeAssimilation);

PrototypeAssimilation make_pam(const PamConfig& cfg, uint64_t seed);

/// Elementwise sum. Throws InvalidArgument on a shape mismatch.
torch::Tensor fuse(const torch::Tensor& a, const torch::Tensor& b);

void save_pam(PrototypeAssimilation& pam, const std::filesystem::path& path,
              const nlohmann::json& extra = {});
PrototypeAssimilation load_pam(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

}  // namespace penet
