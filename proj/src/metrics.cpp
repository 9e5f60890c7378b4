#include "penet/metrics.hpp"

#include <string>

#include "penet/errors.hpp"

namespace penet {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
  if (classes < 2) throw InvalidArgument("confusion matrix needs at least one class plus background");
  counts_.assign(static_cast<std::size_t>(classes) * static_cast<std::size_t>(classes), 0);
}

void ConfusionMatrix::add(int truth, int pred, int64_t count) {
  if (truth < 0 || truth >= classes_ || pred < 0 || pred >= classes_) {
    throw InvalidArgument("confusion entry (" + std::to_string(truth) + ", " + std::to_string(pred) +
                          ") out of range");
  }
  if (count < 0) throw InvalidArgument("confusion counts must be non-negative");
  counts_[static_cast<std::size_t>(truth * classes_ + pred)] += count;
}

void ConfusionMatrix::add(std::span<const int32_t> truth, std::span<const int32_t> pred) {
  if (truth.size() != pred.size()) throw InvalidArgument("truth and prediction lengths differ");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], pred[i]);
}

int64_t ConfusionMatrix::at(int truth, int pred) const {
  return counts_.at(static_cast<std::size_t>(truth * classes_ + pred));
}

int64_t ConfusionMatrix::total() const {
  int64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

IoUResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InvalidState("miou: confusion matrix is all zero");
  const int n = cm.classes();
  IoUResult r;
  double sum = 0;
  int defined = 0;
  for (int c = 0; c + 1 < n; ++c) {
    int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const int64_t uni = tp + fp + fn;
    if (uni == 0) {
      r.per_class.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_class.push_back(iou);
    sum += iou;
    ++defined;
  }
  if (defined == 0) throw InvalidState("miou: no foreground class has a non-zero union");
  r.mean = sum / defined;
  return r;
}

}  // namespace penet
