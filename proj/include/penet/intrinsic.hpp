#pragma once

#include <span>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "penet/episode.hpp"
#include "penet/manifest.hpp"
#include "penet/point_cloud.hpp"
#include "penet/tensor_util.hpp"

namespace penet {

/// k nearest neighbors of every point (Euclidean, self excluded, ties to the
/// lower index), returned as an n×k int64 tensor. Throws InvalidArgument if k >= n.
torch::Tensor knn_graph(std::span<const Vec3f> points, int k);

/// One edge convolution: max over neighbors j of
/// leaky_relu(W·[x_i, x_j − x_i] + b). `layer` maps 2d → d′.
torch::Tensor edgeconv_layer(const torch::Tensor& features, const torch::Tensor& neighbors,
                             torch::nn::Linear& layer, double negative_slope);

struct IntrinsicConfig {
  int in_dim = kPointFeatureDim;
  std::vector<int> widths{32, 64, 64};
  int embed_dim = 64;
  int k = 16;
  double negative_slope = 0.2;
  int head_classes = 2;  // pre-training head; train classes + "other"
  bool dynamic_graph = false;
  /// > 0: the head scores scale·cos(embedding, class weight) instead of an affine map.
  double cosine_head_scale = 0.0;

  nlohmann::json to_json() const;
  static IntrinsicConfig from_json(const nlohmann::json& j);
};

/// Compact edge-convolution backbone: stacked edge convs, concatenated and
/// projected to `embed_dim`, plus a per-point classification head that only
/// pre-training uses.
class IntrinsicLearnerImpl : public torch::nn::Module {
 public:
  explicit IntrinsicLearnerImpl(IntrinsicConfig cfg);

  /// features: n×in_dim, neighbors: n×k from knn_graph on the coordinates.
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& neighbors);
  torch::Tensor classify(const torch::Tensor& embedding);
  /// (f − mean) / std with the frozen per-channel output statistics.
  torch::Tensor standardize(const torch::Tensor& f) const { return (f - out_mean_) / out_std_; }
  void set_output_stats(const torch::Tensor& mean, const torch::Tensor& std);

  const IntrinsicConfig& config() const noexcept { return cfg_; }
  std::vector<torch::nn::Linear>& edge_layers() { return edges_; }
  torch::nn::Linear& projection() { return projection_; }

 private:
  IntrinsicConfig cfg_;
  std::vector<torch::nn::Linear> edges_;
  torch::nn::Linear projection_{nullptr};
  torch::nn::Linear head_{nullptr};
  torch::Tensor out_mean_, out_std_;
};
TORCH_MODULE(IntrinsicLearner);

IntrinsicLearner make_intrinsic_learner(const IntrinsicConfig& cfg, uint64_t seed);

/// n×D intrinsic features of a cloud, standardized with the output
/// statistics recorded after pre-training. Inference only; no randomness.
FeatureMap il_forward(const PointCloud& pc, IntrinsicLearner& model);

struct ILTrainOptions {
  int epochs = 8;
  double lr = 1e-3;
  int batch_blocks = 4;
  bool augment = true;
  uint64_t seed = 0;
};

struct ILTrainResult {
  IntrinsicLearner model{nullptr};
  std::vector<double> loss_curve;      // mean loss per epoch
  std::vector<double> accuracy_curve;  // point accuracy per epoch
};

/// Per-point cross-entropy over `train_classes` (other labels map to one
/// extra "other" class). Throws TrainingError on a non-finite loss.
ILTrainResult pretrain_il(std::span<const PointCloud> blocks, const std::vector<int>& train_classes,
                          IntrinsicConfig cfg, const ILTrainOptions& opts);

/// Trains on blocks of every manifest scene, supervising the train classes of `test_fold`.
ILTrainResult pretrain_il(const SceneManifest& manifest, Fold test_fold, IntrinsicConfig cfg,
                          const ILTrainOptions& opts, const BlockBankOptions& blocks = {});

/// Point accuracy of the head on `blocks` under the same label mapping.
double il_accuracy(IntrinsicLearner& model, std::span<const PointCloud> blocks,
                   const std::vector<int>& train_classes);

void save_intrinsic(IntrinsicLearner& model, const std::filesystem::path& path,
                    const nlohmann::json& extra = {});
IntrinsicLearner load_intrinsic(const std::filesystem::path& path);

}  // namespace penet
