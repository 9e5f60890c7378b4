#include "penet/intrinsic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "penet/blocks.hpp"
#include "penet/checkpoint.hpp"
#include "penet/errors.hpp"
#include "penet/rng.hpp"

namespace penet {

torch::Tensor knn_graph(std::span<const Vec3f> points, int k) {
  const auto n = static_cast<int64_t>(points.size());
  if (k < 1 || k >= n) {
    throw InvalidArgument("knn_graph: need 1 <= k < n (k=" + std::to_string(k) +
                          ", n=" + std::to_string(n) + ")");
  }
  auto out = torch::empty({n, k}, torch::kInt64);
  auto acc = out.accessor<int64_t, 2>();
  std::vector<std::pair<double, int64_t>> cand(static_cast<std::size_t>(n - 1));
  for (int64_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    const auto& pi = points[static_cast<std::size_t>(i)];
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const auto& pj = points[static_cast<std::size_t>(j)];
      double d = 0;
      for (int a = 0; a < 3; ++a) {
        const double t = static_cast<double>(pi[a]) - pj[a];
        d += t * t;
      }
      cand[c++] = {d, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int r = 0; r < k; ++r) acc[i][r] = cand[static_cast<std::size_t>(r)].second;
  }
  return out;
}

torch::Tensor edgeconv_layer(const torch::Tensor& features, const torch::Tensor& neighbors,
                             torch::nn::Linear& layer, double negative_slope) {
  const auto n = features.size(0), d = features.size(1), k = neighbors.size(1);
  if (neighbors.size(0) != n) throw InvalidArgument("edgeconv_layer: neighbor rows != feature rows");
  if (layer->weight.size(1) != 2 * d) throw InvalidArgument("edgeconv_layer: weight expects a different input width");
  auto xj = features.index_select(0, neighbors.reshape({-1})).view({n, k, d});
  auto xi = features.unsqueeze(1).expand({n, k, d});
  auto edge = torch::cat({xi, xj - xi}, 2);
  auto h = torch::leaky_relu(layer->forward(edge), negative_slope);
  return std::get<0>(h.max(1));
}

nlohmann::json IntrinsicConfig::to_json() const {
  return {{"in_dim", in_dim},         {"widths", widths},
          {"embed_dim", embed_dim},   {"k", k},
          {"negative_slope", negative_slope}, {"head_classes", head_classes},
          {"dynamic_graph", dynamic_graph}, {"cosine_head_scale", cosine_head_scale}};
}

IntrinsicConfig IntrinsicConfig::from_json(const nlohmann::json& j) {
  IntrinsicConfig c;
  c.in_dim = j.at("in_dim");
  c.widths = j.at("widths").get<std::vector<int>>();
  c.embed_dim = j.at("embed_dim");
  c.k = j.at("k");
  c.negative_slope = j.at("negative_slope");
  c.head_classes = j.at("head_classes");
  c.dynamic_graph = j.at("dynamic_graph");
  c.cosine_head_scale = j.value("cosine_head_scale", 0.0);
  return c;
}

IntrinsicLearnerImpl::IntrinsicLearnerImpl(IntrinsicConfig cfg) : cfg_(std::move(cfg)) {
  int in = cfg_.in_dim, total = 0;
  for (std::size_t l = 0; l < cfg_.widths.size(); ++l) {
    edges_.push_back(register_module("edge" + std::to_string(l),
                                     torch::nn::Linear(2 * in, cfg_.widths[l])));
    in = cfg_.widths[l];
    total += cfg_.widths[l];
  }
  projection_ = register_module("projection", torch::nn::Linear(total, cfg_.embed_dim));
  head_ = register_module("head", torch::nn::Linear(cfg_.embed_dim, cfg_.head_classes));
  out_mean_ = register_buffer("out_mean", torch::zeros({cfg_.embed_dim}));
  out_std_ = register_buffer("out_std", torch::ones({cfg_.embed_dim}));
}

void IntrinsicLearnerImpl::set_output_stats(const torch::Tensor& mean, const torch::Tensor& std) {
  torch::NoGradGuard guard;
  out_mean_.copy_(mean);
  out_std_.copy_(std);
}

torch::Tensor IntrinsicLearnerImpl::forward(const torch::Tensor& features,
                                            const torch::Tensor& neighbors) {
  std::vector<torch::Tensor> outs;
  torch::Tensor h = features;
  torch::Tensor nbr = neighbors;
  for (std::size_t l = 0; l < edges_.size(); ++l) {
    if (l > 0 && cfg_.dynamic_graph) {
      auto dist = torch::cdist(h, h);
      dist.fill_diagonal_(std::numeric_limits<float>::infinity());
      nbr = std::get<1>(dist.topk(neighbors.size(1), 1, /*largest=*/false));
    }
    h = edgeconv_layer(h, nbr, edges_[l], cfg_.negative_slope);
    outs.push_back(h);
  }
  return projection_->forward(torch::cat(outs, 1));
}

torch::Tensor IntrinsicLearnerImpl::classify(const torch::Tensor& embedding) {
  if (cfg_.cosine_head_scale > 0) {
    auto e = torch::nn::functional::normalize(embedding, torch::nn::functional::NormalizeFuncOptions().dim(1));
    auto w = torch::nn::functional::normalize(head_->weight, torch::nn::functional::NormalizeFuncOptions().dim(1));
    return cfg_.cosine_head_scale * e.mm(w.t());
  }
  return head_->forward(torch::leaky_relu(embedding, cfg_.negative_slope));
}

IntrinsicLearner make_intrinsic_learner(const IntrinsicConfig& cfg, uint64_t seed) {
  IntrinsicLearner m(cfg);
  init_module(*m, seed);
  return m;
}

FeatureMap il_forward(const PointCloud& pc, IntrinsicLearner& model) {
  torch::NoGradGuard guard;
  const int k = model->config().k;
  if (static_cast<int>(pc.size()) < k + 1) {
    throw InvalidArgument("il_forward: cloud has fewer than k+1 points");
  }
  auto nbr = knn_graph(pc.points, k);
  FeatureMap fm;
  fm.features = model->standardize(model->forward(cloud_features(pc), nbr));
  fm.source = FeatureSource::Intrinsic;
  fm.coords = pc.points;
  return fm;
}

namespace {

torch::Tensor map_labels(const PointCloud& pc, const std::vector<int>& train_classes) {
  std::vector<int64_t> y(pc.size());
  const auto other = static_cast<int64_t>(train_classes.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    auto it = std::find(train_classes.begin(), train_classes.end(), pc.labels[i]);
    y[i] = it == train_classes.end() ? other : static_cast<int64_t>(it - train_classes.begin());
  }
  return torch::tensor(y, torch::kInt64);
}

}  // namespace

ILTrainResult pretrain_il(std::span<const PointCloud> blocks, const std::vector<int>& train_classes,
                          IntrinsicConfig cfg, const ILTrainOptions& opts) {
  if (train_classes.size() < 2) throw InvalidArgument("pretrain_il: split needs >= 2 classes");
  if (blocks.empty()) throw InvalidArgument("pretrain_il: no training blocks");
  cfg.head_classes = static_cast<int>(train_classes.size()) + 1;
  ILTrainResult result;
  result.model = make_intrinsic_learner(cfg, opts.seed);
  auto& model = result.model;
  torch::optim::Adam optim(model->parameters(), torch::optim::AdamOptions(opts.lr));

  std::vector<torch::Tensor> labels;
  for (const auto& b : blocks) labels.push_back(map_labels(b, train_classes));

  Rng rng(derive_seed(opts.seed, 21));
  std::vector<std::size_t> order(blocks.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0, correct = 0, total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch_blocks)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(opts.batch_blocks));
      optim.zero_grad();
      torch::Tensor batch_loss = torch::zeros({}, torch::kFloat32);
      for (std::size_t b = start; b < stop; ++b) {
        const auto i = order[b];
        const PointCloud cloud =
            opts.augment ? augment(blocks[i], derive_seed(opts.seed, (static_cast<uint64_t>(epoch) << 32) ^ i))
                         : blocks[i];
        auto nbr = knn_graph(cloud.points, cfg.k);
        auto logits = model->classify(model->forward(cloud_features(cloud), nbr));
        auto loss = torch::nn::functional::cross_entropy(logits, labels[i]);
        batch_loss = batch_loss + loss / static_cast<double>(stop - start);
        correct += logits.argmax(1).eq(labels[i]).sum().item<double>();
        total += static_cast<double>(cloud.size());
      }
      const double value = batch_loss.item<double>();
      if (!std::isfinite(value)) throw TrainingError(step, "pretrain_il: non-finite loss");
      batch_loss.backward();
      optim.step();
      loss_sum += value * static_cast<double>(stop - start);
      ++step;
    }
    result.loss_curve.push_back(loss_sum / static_cast<double>(order.size()));
    result.accuracy_curve.push_back(correct / total);
  }
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> outputs;
  for (const auto& b : blocks) outputs.push_back(model->forward(cloud_features(b), knn_graph(b.points, cfg.k)));
  auto [mean, std] = channel_stats(outputs);
  model->set_output_stats(mean, std);
  return result;
}

ILTrainResult pretrain_il(const SceneManifest& manifest, Fold test_fold, IntrinsicConfig cfg,
                          const ILTrainOptions& opts, const BlockBankOptions& block_opts) {
  const auto train_classes = manifest.role_classes(test_fold, SplitRole::Train);
  BlockBank bank(manifest, train_classes, block_opts);
  std::vector<PointCloud> blocks;
  for (std::size_t i = 0; i < bank.size(); ++i) blocks.push_back(bank.block(i));
  return pretrain_il(blocks, train_classes, std::move(cfg), opts);
}

double il_accuracy(IntrinsicLearner& model, std::span<const PointCloud> blocks,
                   const std::vector<int>& train_classes) {
  torch::NoGradGuard guard;
  double correct = 0, total = 0;
  for (const auto& b : blocks) {
    auto logits = model->classify(model->forward(cloud_features(b), knn_graph(b.points, model->config().k)));
    correct += logits.argmax(1).eq(map_labels(b, train_classes)).sum().item<double>();
    total += static_cast<double>(b.size());
  }
  return total > 0 ? correct / total : 0.0;
}

void save_intrinsic(IntrinsicLearner& model, const std::filesystem::path& path,
                    const nlohmann::json& extra) {
  Checkpoint ck;
  ck.manifest = {{"kind", "intrinsic"}, {"config", model->config().to_json()}, {"extra", extra}};
  ck.add_module(*model);
  ck.save(path);
}

IntrinsicLearner load_intrinsic(const std::filesystem::path& path) {
  const auto ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "intrinsic") {
    throw FormatError("kind", path.string() + " is not an intrinsic-learner checkpoint");
  }
  IntrinsicLearner m(IntrinsicConfig::from_json(ck.manifest.at("config")));
  ck.load_module(*m);
  return m;
}

}  // namespace penet
