#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace penet {

/// Row-wise softmax over cos(F_x, P^l) / temperature. Throws InvalidArgument
/// naming the first zero-norm feature or prototype row.
torch::Tensor cosine_probs(const torch::Tensor& features, const torch::Tensor& prototypes,
                           double temperature = 1.0);

/// Mean negative log-probability of the labelled class. Labels must lie in
/// [0, probs.size(1)).
torch::Tensor nll_from_probs(const torch::Tensor& probs, const torch::Tensor& labels);

/// Support-mask reconstruction loss of the fused prototypes, computed on
/// intrinsic support features.
torch::Tensor calib_loss(const torch::Tensor& f_si, const torch::Tensor& prototypes,
                         const torch::Tensor& labels, double temperature = 1.0);

struct SegPrediction {
  torch::Tensor probs;          // n×(C+1)
  std::vector<int32_t> labels;  // row argmax, ties to the lower index
};

SegPrediction seg_predict(const torch::Tensor& f_qi, const torch::Tensor& prototypes, double temperature = 1.0);

torch::Tensor seg_loss(const torch::Tensor& probs, const torch::Tensor& labels);

struct LossRecord {
  double seg_loss = 0;
  double cal_loss = 0;
  double total = 0;
  double lambda = 1;
};

/// total = seg + lambda·cal. Throws InvalidArgument for negative lambda.
LossRecord total_loss(double seg, double cal, double lambda = 1.0);
torch::Tensor total_loss(const torch::Tensor& seg, const torch::Tensor& cal, double lambda = 1.0);

/// Argmax with ties to the lower index.
std::vector<int32_t> row_argmax(const torch::Tensor& scores);

}  // namespace penet
