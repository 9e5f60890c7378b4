#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace penet {

/// Square count matrix, rows = ground truth, columns = prediction. The last
/// class is background.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes);

  void add(int truth, int pred, int64_t count = 1);
  void add(std::span<const int32_t> truth, std::span<const int32_t> pred);
  int64_t at(int truth, int pred) const;
  int classes() const noexcept { return classes_; }
  int64_t total() const;

 private:
  int classes_;
  std::vector<int64_t> counts_;
};

struct IoUResult {
  std::vector<std::optional<double>> per_class;  // foreground classes; nullopt = zero union
  double mean = 0;
};

/// IoU_c = TP/(TP+FP+FN) per foreground class; the mean skips zero-union
/// classes. Throws InvalidState on an all-zero matrix or when no foreground
/// class has a non-zero union.
IoUResult miou(const ConfusionMatrix& cm);

}  // namespace penet
