#pragma once

#include <functional>
#include <span>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "penet/episode.hpp"
#include "penet/manifest.hpp"
#include "penet/point_cloud.hpp"
#include "penet/tensor_util.hpp"

namespace penet {

/// DDPM forward-process coefficients, zero-based timesteps.
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product of alpha
};

/// Linear beta ramp from beta_start to beta_end over T steps.
DiffusionSchedule make_schedule(int T, double beta_start, double beta_end);

/// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule);

/// Point patches: FPS centers and their k nearest points.
struct PatchSet {
  torch::Tensor centers;   // G×3
  torch::Tensor groups;    // G×k int64 point indices
  torch::Tensor relative;  // G×k×3 center-relative coordinates
  std::vector<int64_t> visible;
  std::vector<int64_t> masked;

  int64_t num_patches() const { return centers.size(0); }
};

/// coords: n×3. Throws InvalidArgument if G > n or k >= n.
PatchSet patchify(const torch::Tensor& coords, int G, int k);

/// Masks round-half-up(rho·G) patches chosen uniformly at random; both
/// index lists are ascending.
PatchSet mask_patches(PatchSet ps, double rho, uint64_t seed);

/// Sinusoidal embedding of integer timesteps, width `dim`.
torch::Tensor timestep_embedding(int t, int dim, torch::TensorOptions opts = {});

struct DiffusionConfig {
  int dim = 64;
  int point_embed = 32;
  int heads = 4;
  int layers = 2;
  int ffn = 128;
  int cond_dim = 64;
  int time_dim = 64;
  int denoiser_hidden = 128;
  int denoiser_layers = 4;
  int groups = 64;
  int group_size = 32;
  double mask_ratio = 0.8;
  int timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  nlohmann::json to_json() const;
  static DiffusionConfig from_json(const nlohmann::json& j);
};

/// Pre-norm transformer encoder layer (multi-head self-attention + GELU MLP).
class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int dim, int heads, int ffn);
  torch::Tensor forward(const torch::Tensor& x);
  /// Zeroes both residual branches' output projections so the layer is the identity.
  void identity_init();

 private:
  int heads_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, out_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(EncoderLayer);

/// Conditional encoder plus point-wise noise predictor.
class DiffusionLearnerImpl : public torch::nn::Module {
 public:
  explicit DiffusionLearnerImpl(DiffusionConfig cfg);

  /// psi: two-layer MLP on raw center coordinates, m×3 -> m×dim.
  torch::Tensor pos_embed(const torch::Tensor& centers);
  /// meanpool ⊕ maxpool of a per-point linear embedding for the given patches.
  torch::Tensor patch_descriptors(const PatchSet& ps, const std::vector<int64_t>& idx);
  /// Projected Concat(descriptor, psi(center)) tokens, before the transformer.
  torch::Tensor embed_tokens(const PatchSet& ps, const std::vector<int64_t>& idx);
  torch::Tensor encode_tokens(const torch::Tensor& tokens);
  /// Visible-patch features, rows in ps.visible order. Throws InvalidState with no visible patch.
  torch::Tensor dl_encode(const PatchSet& ps);
  /// MLP(meanpool(F_d) ⊕ meanpool(psi(masked centers))); the second term is
  /// zero when nothing is masked.
  torch::Tensor aggregate_condition(const torch::Tensor& encoded, const torch::Tensor& masked_centers);
  /// Predicted noise for z_t (n×3).
  torch::Tensor denoise(const torch::Tensor& z_t, int t, const torch::Tensor& condition);

  void identity_init_encoder();
  torch::Tensor standardize(const torch::Tensor& f) const { return (f - out_mean_) / out_std_; }
  void set_output_stats(const torch::Tensor& mean, const torch::Tensor& std);
  std::vector<EncoderLayer>& encoder_layers() { return encoder_; }
  std::vector<torch::nn::Linear>& denoiser_layers() { return denoiser_; }
  torch::nn::Linear& pos_fc1() { return pos1_; }
  torch::nn::Linear& pos_fc2() { return pos2_; }
  const DiffusionConfig& config() const noexcept { return cfg_; }

 private:
  DiffusionConfig cfg_;
  torch::nn::Linear point_embed_{nullptr};
  torch::nn::Linear pos1_{nullptr}, pos2_{nullptr};
  torch::nn::Linear input_proj_{nullptr};
  std::vector<EncoderLayer> encoder_;
  torch::nn::Linear cond1_{nullptr}, cond2_{nullptr};
  std::vector<torch::nn::Linear> denoiser_;
  torch::Tensor out_mean_, out_std_;
};
TORCH_MODULE(DiffusionLearner);

DiffusionLearner make_diffusion_learner(const DiffusionConfig& cfg, uint64_t seed);

/// Block coordinates centered on their centroid and scaled to unit max radius.
torch::Tensor diffusion_coords(const PointCloud& pc);

/// Test hook replacing the learned noise predictor: (z_t, t, c, true eps) -> prediction.
using NoisePredictor =
    std::function<torch::Tensor(const torch::Tensor&, int, const torch::Tensor&, const torch::Tensor&)>;

/// Masked conditioning, uniform t, Gaussian eps, mean squared noise error
/// over points and coordinates. Deterministic in `seed`.
torch::Tensor diffusion_loss(const torch::Tensor& x0, const DiffusionSchedule& schedule,
                             DiffusionLearner& model, uint64_t seed,
                             const NoisePredictor& predictor_override = {});

struct DLTrainOptions {
  int epochs = 10;
  double lr = 1e-3;
  int batch_blocks = 8;
  uint64_t seed = 0;
};

struct DLTrainResult {
  DiffusionLearner model{nullptr};
  DiffusionSchedule schedule;
  std::vector<double> loss_curve;  // mean loss per epoch
};

DLTrainResult pretrain_dl(std::span<const PointCloud> blocks, const DiffusionConfig& cfg,
                          const DLTrainOptions& opts);
DLTrainResult pretrain_dl(const SceneManifest& manifest, Fold test_fold, const DiffusionConfig& cfg,
                          const DLTrainOptions& opts, const BlockBankOptions& blocks = {});

/// Point-level generalizable features: patch features propagated to member
/// points (nearest containing center; nearest center for uncovered points),
/// standardized with the output statistics recorded after pre-training.
/// `mask_ratio` > 0 encodes a masked subset only, for experimentation.
FeatureMap dl_features(const PointCloud& pc, DiffusionLearner& model, double mask_ratio = 0.0,
                       uint64_t seed = 0);

void save_diffusion(DiffusionLearner& model, const DiffusionSchedule& schedule,
                    const std::filesystem::path& path, const nlohmann::json& extra = {});
DiffusionLearner load_diffusion(const std::filesystem::path& path, DiffusionSchedule* schedule = nullptr);

}  // namespace penet
