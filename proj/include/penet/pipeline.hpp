#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "penet/config.hpp"
#include "penet/diffusion.hpp"
#include "penet/episode.hpp"
#include "penet/intrinsic.hpp"
#include "penet/pam.hpp"

namespace penet {

/// The frozen feature extractors plus digests of the files they came from.
struct Learners {
  IntrinsicLearner il{nullptr};
  DiffusionLearner dl{nullptr};  // null when the diffusion stream is unused
  std::string il_digest;
  std::string dl_digest;

  static Learners load(const RunConfig& cfg, bool need_dl);
};

/// Lazily computed per-block features of one bank. Counters record how many
/// blocks each learner actually processed.
class FeatureCache {
 public:
  FeatureCache(const BlockBank& bank, Learners& learners, double infer_mask_ratio = 0.0);

  const torch::Tensor& intrinsic(std::size_t block);
  const torch::Tensor& diffusion(std::size_t block);

  /// Blocks actually run through each learner.
  long intrinsic_calls() const noexcept { return il_calls_; }
  long diffusion_calls() const noexcept { return dl_calls_; }
  /// Feature lookups, cached or not.
  long intrinsic_requests() const noexcept { return il_requests_; }
  long diffusion_requests() const noexcept { return dl_requests_; }
  const BlockBank& bank() const noexcept { return bank_; }

 private:
  const BlockBank& bank_;
  Learners& learners_;
  double mask_ratio_;
  std::vector<std::optional<torch::Tensor>> il_, dl_;
  long il_calls_ = 0;
  long dl_calls_ = 0;
  long il_requests_ = 0;
  long dl_requests_ = 0;
};

/// Everything one forward pass needs, all without gradient history.
struct EpisodeInputs {
  int n_way = 0;
  torch::Tensor p_i;             // (C+1)×D intrinsic prototypes
  torch::Tensor p_d;             // (C+1)×D diffusion prototypes, undefined without the DL stream
  StreamFeatures streams;        // support rows resampled to the query count
  torch::Tensor support_all;     // every support point's intrinsic row
  torch::Tensor support_labels;  // int64; shot class where masked, background elsewhere
  torch::Tensor query_labels;    // int64
};

EpisodeInputs prepare_episode(const Episode& ep, FeatureCache& cache, const ModuleSet& modules, int proto_seeds);

/// Pure-tensor variant used by tests: per-shot feature maps already computed.
struct ShotFeatures {
  torch::Tensor intrinsic;
  torch::Tensor diffusion;  // may be undefined
};
EpisodeInputs prepare_episode(const Episode& ep, const std::vector<std::vector<ShotFeatures>>& shots,
                              const ShotFeatures& query, const ModuleSet& modules, int proto_seeds);

struct PipelineOutput {
  torch::Tensor prototypes;  // fused (C+1)×D
  torch::Tensor probs;       // query n×(C+1)
  torch::Tensor seg;
  torch::Tensor cal;
  torch::Tensor total;
};

/// Prototype refinement, fusion and losses for the active modules. `pam`
/// may be null when the module set has no PAM.
PipelineOutput run_pipeline(const EpisodeInputs& in, PrototypeAssimilation* pam, const ModuleSet& modules,
                            double lambda, double temperature);

}  // namespace penet
