#include "penet/losses.hpp"

#include <string>

#include "penet/errors.hpp"

namespace penet {
namespace {

void require_nonzero_rows(const torch::Tensor& norms, const char* what) {
  auto zero = (norms == 0).nonzero();
  if (zero.size(0) > 0) {
    throw InvalidArgument(std::string("cosine_probs: zero-norm ") + what + " row " +
                          std::to_string(zero[0][0].item<int64_t>()));
  }
}

void check_labels(const torch::Tensor& labels, int64_t rows, int64_t classes) {
  if (labels.dim() != 1 || labels.size(0) != rows) {
    throw InvalidArgument("label count " + std::to_string(labels.numel()) + " does not match " +
                          std::to_string(rows) + " rows");
  }
  if (rows == 0) return;
  const auto lo = labels.min().item<int64_t>(), hi = labels.max().item<int64_t>();
  if (lo < 0 || hi >= classes) {
    throw InvalidArgument("invalid label " + std::to_string(lo < 0 ? lo : hi) + " outside [0, " +
                          std::to_string(classes) + ")");
  }
}

}  // namespace

torch::Tensor cosine_probs(const torch::Tensor& features, const torch::Tensor& prototypes, double temperature) {
  if (features.dim() != 2 || prototypes.dim() != 2 || features.size(1) != prototypes.size(1)) {
    throw InvalidArgument("cosine_probs: features and prototypes must share their width");
  }
  if (!(temperature > 0)) throw InvalidArgument("cosine_probs: temperature must be positive");
  auto fn = features.norm(2, 1, true);
  auto pn = prototypes.norm(2, 1, true);
  require_nonzero_rows(fn, "feature");
  require_nonzero_rows(pn, "prototype");
  auto cos = (features / fn).mm((prototypes / pn).t());
  return torch::softmax(cos / temperature, 1);
}

torch::Tensor nll_from_probs(const torch::Tensor& probs, const torch::Tensor& labels) {
  check_labels(labels, probs.size(0), probs.size(1));
  auto picked = probs.gather(1, labels.to(torch::kInt64).unsqueeze(1)).squeeze(1);
  return -torch::log(picked).mean();
}

torch::Tensor calib_loss(const torch::Tensor& f_si, const torch::Tensor& prototypes, const torch::Tensor& labels,
                         double temperature) {
  return nll_from_probs(cosine_probs(f_si, prototypes, temperature), labels);
}

std::vector<int32_t> row_argmax(const torch::Tensor& scores) {
  auto s = scores.detach().to(torch::kFloat64).contiguous();
  auto a = s.accessor<double, 2>();
  std::vector<int32_t> out(static_cast<std::size_t>(s.size(0)));
  for (int64_t i = 0; i < s.size(0); ++i) {
    int32_t best = 0;
    for (int64_t j = 1; j < s.size(1); ++j)
      if (a[i][j] > a[i][best]) best = static_cast<int32_t>(j);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

SegPrediction seg_predict(const torch::Tensor& f_qi, const torch::Tensor& prototypes, double temperature) {
  SegPrediction p;
  p.probs = cosine_probs(f_qi, prototypes, temperature);
  p.labels = row_argmax(p.probs);
  return p;
}

torch::Tensor seg_loss(const torch::Tensor& probs, const torch::Tensor& labels) {
  return nll_from_probs(probs, labels);
}

LossRecord total_loss(double seg, double cal, double lambda) {
  if (!(lambda >= 0)) throw InvalidArgument("total_loss: lambda must be >= 0");
  return {seg, cal, seg + lambda * cal, lambda};
}

torch::Tensor total_loss(const torch::Tensor& seg, const torch::Tensor& cal, double lambda) {
  if (!(lambda >= 0)) throw InvalidArgument("total_loss: lambda must be >= 0");
  return seg + lambda * cal;
}

}  // namespace penet
