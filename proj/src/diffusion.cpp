#include "penet/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "penet/checkpoint.hpp"
#include "penet/errors.hpp"
#include "penet/prototypes.hpp"
#include "penet/rng.hpp"

namespace penet {

DiffusionSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw InvalidArgument("make_schedule: T must be >= 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
    throw InvalidArgument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule) {
  if (t < 0 || t >= schedule.T) {
    throw InvalidArgument("q_sample: timestep " + std::to_string(t) + " outside [0, " +
                          std::to_string(schedule.T) + ")");
  }
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

PatchSet patchify(const torch::Tensor& coords, int G, int k) {
  const auto n = coords.size(0);
  if (G < 1 || G > n) throw InvalidArgument("patchify: need 1 <= G <= n");
  if (k < 1 || k > n || (k == n && n > 1)) throw InvalidArgument("patchify: need 1 <= k < n");
  auto cpu = coords.detach().to(torch::kFloat64).contiguous();
  auto acc = cpu.accessor<double, 2>();
  std::vector<Vec3f> pts(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    pts[static_cast<std::size_t>(i)] = {static_cast<float>(acc[i][0]), static_cast<float>(acc[i][1]),
                                        static_cast<float>(acc[i][2])};
  const auto centers = fps(pts, static_cast<std::size_t>(G));

  auto groups = torch::empty({G, k}, torch::kInt64);
  auto gacc = groups.accessor<int64_t, 2>();
  std::vector<std::pair<double, int64_t>> cand(static_cast<std::size_t>(n));
  for (int g = 0; g < G; ++g) {
    const auto c = centers[static_cast<std::size_t>(g)];
    for (int64_t j = 0; j < n; ++j) {
      double d = 0;
      for (int a = 0; a < 3; ++a) {
        const double t = acc[j][a] - acc[c][a];
        d += t * t;
      }
      cand[static_cast<std::size_t>(j)] = {d, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
    for (int r = 0; r < k; ++r) gacc[g][r] = cand[static_cast<std::size_t>(r)].second;
  }
  PatchSet ps;
  auto center_idx = torch::tensor(centers, torch::kInt64);
  ps.centers = coords.index_select(0, center_idx);
  ps.groups = groups;
  ps.relative = coords.index_select(0, groups.reshape({-1})).view({G, k, coords.size(1)}) -
                ps.centers.unsqueeze(1);
  ps.visible.resize(static_cast<std::size_t>(G));
  std::iota(ps.visible.begin(), ps.visible.end(), 0);
  return ps;
}

PatchSet mask_patches(PatchSet ps, double rho, uint64_t seed) {
  if (!(rho >= 0 && rho < 1)) throw InvalidArgument("mask_patches: need 0 <= rho < 1");
  const auto G = ps.num_patches();
  const auto count = static_cast<int64_t>(std::floor(rho * static_cast<double>(G) + 0.5));
  std::vector<int64_t> order(static_cast<std::size_t>(G));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 31));
  std::shuffle(order.begin(), order.end(), rng);
  ps.masked.assign(order.begin(), order.begin() + count);
  ps.visible.assign(order.begin() + count, order.end());
  std::sort(ps.masked.begin(), ps.masked.end());
  std::sort(ps.visible.begin(), ps.visible.end());
  return ps;
}

torch::Tensor timestep_embedding(int t, int dim, torch::TensorOptions opts) {
  const int half = dim / 2;
  auto out = torch::zeros({dim}, torch::kFloat64);
  auto a = out.accessor<double, 1>();
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    a[i] = std::sin(t * freq);
    a[i + half] = std::cos(t * freq);
  }
  return out.to(c10::typeMetaToScalarType(opts.dtype()));
}

nlohmann::json DiffusionConfig::to_json() const {
  return {{"dim", dim},
          {"point_embed", point_embed},
          {"heads", heads},
          {"layers", layers},
          {"ffn", ffn},
          {"cond_dim", cond_dim},
          {"time_dim", time_dim},
          {"denoiser_hidden", denoiser_hidden},
          {"denoiser_layers", denoiser_layers},
          {"groups", groups},
          {"group_size", group_size},
          {"mask_ratio", mask_ratio},
          {"timesteps", timesteps},
          {"beta_start", beta_start},
          {"beta_end", beta_end}};
}

DiffusionConfig DiffusionConfig::from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  c.dim = j.at("dim");
  c.point_embed = j.at("point_embed");
  c.heads = j.at("heads");
  c.layers = j.at("layers");
  c.ffn = j.at("ffn");
  c.cond_dim = j.at("cond_dim");
  c.time_dim = j.at("time_dim");
  c.denoiser_hidden = j.at("denoiser_hidden");
  c.denoiser_layers = j.at("denoiser_layers");
  c.groups = j.at("groups");
  c.group_size = j.at("group_size");
  c.mask_ratio = j.at("mask_ratio");
  c.timesteps = j.at("timesteps");
  c.beta_start = j.at("beta_start");
  c.beta_end = j.at("beta_end");
  return c;
}

EncoderLayerImpl::EncoderLayerImpl(int dim, int heads, int ffn) : heads_(heads) {
  if (dim % heads != 0) throw InvalidArgument("encoder width must be divisible by the head count");
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  out_ = register_module("out", torch::nn::Linear(dim, dim));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1_ = register_module("fc1", torch::nn::Linear(dim, ffn));
  fc2_ = register_module("fc2", torch::nn::Linear(ffn, dim));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& x) {
  const auto m = x.size(0), d = x.size(1), dh = d / heads_;
  auto qkv = qkv_->forward(norm1_->forward(x)).view({m, 3, heads_, dh}).permute({1, 2, 0, 3});
  auto q = qkv[0], k = qkv[1], v = qkv[2];  // heads×m×dh
  auto attn = torch::softmax(q.matmul(k.transpose(1, 2)) / std::sqrt(static_cast<double>(dh)), -1);
  auto mixed = attn.matmul(v).permute({1, 0, 2}).reshape({m, d});
  auto h = x + out_->forward(mixed);
  return h + fc2_->forward(torch::gelu(fc1_->forward(norm2_->forward(h))));
}

void EncoderLayerImpl::identity_init() {
  torch::NoGradGuard guard;
  out_->weight.zero_();
  out_->bias.zero_();
  fc2_->weight.zero_();
  fc2_->bias.zero_();
}

DiffusionLearnerImpl::DiffusionLearnerImpl(DiffusionConfig cfg) : cfg_(cfg) {
  point_embed_ = register_module("point_embed", torch::nn::Linear(3, cfg_.point_embed));
  pos1_ = register_module("pos1", torch::nn::Linear(3, cfg_.dim));
  pos2_ = register_module("pos2", torch::nn::Linear(cfg_.dim, cfg_.dim));
  input_proj_ = register_module("input_proj", torch::nn::Linear(2 * cfg_.point_embed + cfg_.dim, cfg_.dim));
  for (int l = 0; l < cfg_.layers; ++l) {
    encoder_.push_back(register_module("encoder" + std::to_string(l),
                                       EncoderLayer(cfg_.dim, cfg_.heads, cfg_.ffn)));
  }
  cond1_ = register_module("cond1", torch::nn::Linear(2 * cfg_.dim, cfg_.dim));
  cond2_ = register_module("cond2", torch::nn::Linear(cfg_.dim, cfg_.cond_dim));
  int in = 3 + cfg_.time_dim + cfg_.cond_dim;
  for (int l = 0; l < cfg_.denoiser_layers; ++l) {
    const int out = l + 1 == cfg_.denoiser_layers ? 3 : cfg_.denoiser_hidden;
    denoiser_.push_back(register_module("denoiser" + std::to_string(l), torch::nn::Linear(in, out)));
    in = out;
  }
  out_mean_ = register_buffer("out_mean", torch::zeros({cfg_.dim}));
  out_std_ = register_buffer("out_std", torch::ones({cfg_.dim}));
}

void DiffusionLearnerImpl::set_output_stats(const torch::Tensor& mean, const torch::Tensor& std) {
  torch::NoGradGuard guard;
  out_mean_.copy_(mean);
  out_std_.copy_(std);
}

torch::Tensor DiffusionLearnerImpl::pos_embed(const torch::Tensor& centers) {
  return pos2_->forward(torch::relu(pos1_->forward(centers)));
}

torch::Tensor DiffusionLearnerImpl::patch_descriptors(const PatchSet& ps, const std::vector<int64_t>& idx) {
  auto rel = ps.relative.index_select(0, torch::tensor(idx, torch::kInt64));
  auto e = point_embed_->forward(rel);  // m×k×pe
  return torch::cat({e.mean(1), std::get<0>(e.max(1))}, 1);
}

torch::Tensor DiffusionLearnerImpl::embed_tokens(const PatchSet& ps, const std::vector<int64_t>& idx) {
  auto centers = ps.centers.index_select(0, torch::tensor(idx, torch::kInt64));
  return input_proj_->forward(torch::cat({patch_descriptors(ps, idx), pos_embed(centers)}, 1));
}

torch::Tensor DiffusionLearnerImpl::encode_tokens(const torch::Tensor& tokens) {
  torch::Tensor h = tokens;
  for (auto& layer : encoder_) h = layer->forward(h);
  return h;
}

torch::Tensor DiffusionLearnerImpl::dl_encode(const PatchSet& ps) {
  if (ps.visible.empty()) throw InvalidState("dl_encode: no visible patches");
  return encode_tokens(embed_tokens(ps, ps.visible));
}

torch::Tensor DiffusionLearnerImpl::aggregate_condition(const torch::Tensor& encoded,
                                                        const torch::Tensor& masked_centers) {
  if (encoded.size(0) == 0) throw InvalidArgument("aggregate_condition: no encoded patches");
  auto pooled = encoded.mean(0);
  auto masked = masked_centers.size(0) > 0 ? pos_embed(masked_centers).mean(0)
                                           : torch::zeros({cfg_.dim}, encoded.options());
  return cond2_->forward(torch::relu(cond1_->forward(torch::cat({pooled, masked}, 0))));
}

torch::Tensor DiffusionLearnerImpl::denoise(const torch::Tensor& z_t, int t, const torch::Tensor& condition) {
  const auto n = z_t.size(0);
  auto temb = timestep_embedding(t, cfg_.time_dim, z_t.options()).unsqueeze(0).expand({n, cfg_.time_dim});
  auto h = torch::cat({z_t, temb, condition.reshape({1, -1}).expand({n, condition.numel()})}, 1);
  for (std::size_t l = 0; l < denoiser_.size(); ++l) {
    h = denoiser_[l]->forward(h);
    if (l + 1 < denoiser_.size()) h = torch::silu(h);
  }
  return h;
}

void DiffusionLearnerImpl::identity_init_encoder() {
  for (auto& layer : encoder_) layer->identity_init();
}

DiffusionLearner make_diffusion_learner(const DiffusionConfig& cfg, uint64_t seed) {
  DiffusionLearner m(cfg);
  init_module(*m, seed);
  torch::NoGradGuard guard;
  for (auto& p : m->named_parameters(true)) {
    // LayerNorm gains start at one.
    if (p.key().find("norm") != std::string::npos && p.key().ends_with("weight")) p.value().fill_(1.0);
  }
  return m;
}

torch::Tensor diffusion_coords(const PointCloud& pc) {
  auto x = cloud_points(pc);
  if (pc.empty()) return x;
  x = x - x.mean(0, true);
  const double r = x.norm(2, 1).max().item<double>();
  return r > 0 ? x / r : x;
}

namespace {

std::pair<int, int> patch_shape(const DiffusionConfig& cfg, int64_t n) {
  const int G = static_cast<int>(std::min<int64_t>(cfg.groups, n));
  const int k = static_cast<int>(std::max<int64_t>(1, std::min<int64_t>(cfg.group_size, n - 1)));
  return {G, k};
}

torch::Tensor standard_normal(at::IntArrayRef shape, torch::ScalarType dtype, Rng& rng) {
  auto t = torch::empty(shape, torch::kFloat64);
  fill_normal(t, 1.0, rng);
  return t.to(dtype);
}

}  // namespace

torch::Tensor diffusion_loss(const torch::Tensor& x0, const DiffusionSchedule& schedule,
                             DiffusionLearner& model, uint64_t seed,
                             const NoisePredictor& predictor_override) {
  const auto& cfg = model->config();
  auto [G, k] = patch_shape(cfg, x0.size(0));
  PatchSet ps = patchify(x0.detach(), G, k);
  ps = mask_patches(std::move(ps), cfg.mask_ratio, derive_seed(seed, 1));
  if (ps.visible.empty()) {
    ps.visible.push_back(ps.masked.back());
    ps.masked.pop_back();
  }
  auto encoded = model->dl_encode(ps);
  auto masked_centers = ps.centers.index_select(0, torch::tensor(ps.masked, torch::kInt64));
  auto cond = model->aggregate_condition(encoded, masked_centers);

  Rng rng(derive_seed(seed, 2));
  const int t = static_cast<int>(std::uniform_int_distribution<int>(0, schedule.T - 1)(rng));
  auto eps = standard_normal(x0.sizes(), x0.scalar_type(), rng);
  auto z_t = q_sample(x0, t, eps, schedule);
  auto pred = predictor_override ? predictor_override(z_t, t, cond, eps) : model->denoise(z_t, t, cond);
  return (eps - pred).pow(2).mean();
}

DLTrainResult pretrain_dl(std::span<const PointCloud> blocks, const DiffusionConfig& cfg,
                          const DLTrainOptions& opts) {
  if (blocks.empty()) throw InvalidArgument("pretrain_dl: no training blocks");
  DLTrainResult result;
  result.schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
  result.model = make_diffusion_learner(cfg, opts.seed);
  auto& model = result.model;
  torch::optim::Adam optim(model->parameters(), torch::optim::AdamOptions(opts.lr));

  std::vector<torch::Tensor> coords;
  for (const auto& b : blocks) coords.push_back(diffusion_coords(b));

  Rng rng(derive_seed(opts.seed, 41));
  std::vector<std::size_t> order(blocks.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch_blocks)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(opts.batch_blocks));
      optim.zero_grad();
      torch::Tensor loss = torch::zeros({}, torch::kFloat32);
      for (std::size_t b = start; b < stop; ++b) {
        const uint64_t s = derive_seed(opts.seed, (static_cast<uint64_t>(step) << 16) ^ b);
        loss = loss + diffusion_loss(coords[order[b]], result.schedule, model, s) /
                          static_cast<double>(stop - start);
      }
      const double value = loss.item<double>();
      if (!std::isfinite(value)) throw TrainingError(step, "pretrain_dl: non-finite loss");
      loss.backward();
      optim.step();
      sum += value * static_cast<double>(stop - start);
      ++step;
    }
    result.loss_curve.push_back(sum / static_cast<double>(order.size()));
  }
  std::vector<torch::Tensor> outputs;
  for (const auto& b : blocks) outputs.push_back(dl_features(b, model).features);
  auto [mean, std] = channel_stats(outputs);
  model->set_output_stats(mean, std);
  return result;
}

DLTrainResult pretrain_dl(const SceneManifest& manifest, Fold test_fold, const DiffusionConfig& cfg,
                          const DLTrainOptions& opts, const BlockBankOptions& block_opts) {
  const auto train_classes = manifest.role_classes(test_fold, SplitRole::Train);
  if (train_classes.empty()) throw InvalidArgument("pretrain_dl: split has no classes");
  BlockBank bank(manifest, train_classes, block_opts);
  std::vector<PointCloud> blocks;
  for (std::size_t i = 0; i < bank.size(); ++i) blocks.push_back(bank.block(i));
  return pretrain_dl(blocks, cfg, opts);
}

FeatureMap dl_features(const PointCloud& pc, DiffusionLearner& model, double mask_ratio, uint64_t seed) {
  torch::NoGradGuard guard;
  auto x = diffusion_coords(pc);
  auto [G, k] = patch_shape(model->config(), x.size(0));
  PatchSet ps = patchify(x, G, k);
  if (mask_ratio > 0) {
    ps = mask_patches(std::move(ps), mask_ratio, seed);
    if (ps.visible.empty()) {
      ps.visible.push_back(ps.masked.back());
      ps.masked.pop_back();
    }
  }
  auto encoded = model->dl_encode(ps);

  const auto n = x.size(0);
  auto xa = x.accessor<float, 2>();
  auto ca = ps.centers.accessor<float, 2>();
  auto ga = ps.groups.accessor<int64_t, 2>();
  auto sq = [&](int64_t p, int64_t g) {
    double d = 0;
    for (int a = 0; a < 3; ++a) {
      const double t = static_cast<double>(xa[p][a]) - ca[g][a];
      d += t * t;
    }
    return d;
  };
  std::vector<int64_t> owner(static_cast<std::size_t>(n), -1);
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < ps.visible.size(); ++r) {
    const auto g = ps.visible[r];
    for (int64_t j = 0; j < ps.groups.size(1); ++j) {
      const auto p = ga[g][j];
      const double d = sq(p, g);
      if (d < best[static_cast<std::size_t>(p)]) {
        best[static_cast<std::size_t>(p)] = d;
        owner[static_cast<std::size_t>(p)] = static_cast<int64_t>(r);
      }
    }
  }
  for (int64_t p = 0; p < n; ++p) {
    if (owner[static_cast<std::size_t>(p)] >= 0) continue;
    for (std::size_t r = 0; r < ps.visible.size(); ++r) {
      const double d = sq(p, ps.visible[r]);
      if (d < best[static_cast<std::size_t>(p)]) {
        best[static_cast<std::size_t>(p)] = d;
        owner[static_cast<std::size_t>(p)] = static_cast<int64_t>(r);
      }
    }
  }
  FeatureMap fm;
  fm.features = model->standardize(encoded).index_select(0, torch::tensor(owner, torch::kInt64));
  fm.source = FeatureSource::Diffusion;
  fm.coords = pc.points;
  return fm;
}

void save_diffusion(DiffusionLearner& model, const DiffusionSchedule& schedule,
                    const std::filesystem::path& path, const nlohmann::json& extra) {
  Checkpoint ck;
  ck.manifest = {{"kind", "diffusion"}, {"config", model->config().to_json()}, {"extra", extra}};
  ck.add_module(*model);
  ck.add("schedule.beta", torch::tensor(schedule.beta, torch::kFloat64));
  ck.add("schedule.alpha", torch::tensor(schedule.alpha, torch::kFloat64));
  ck.add("schedule.alpha_bar", torch::tensor(schedule.alpha_bar, torch::kFloat64));
  ck.save(path);
}

DiffusionLearner load_diffusion(const std::filesystem::path& path, DiffusionSchedule* schedule) {
  const auto ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "diffusion") {
    throw FormatError("kind", path.string() + " is not a diffusion-learner checkpoint");
  }
  DiffusionLearner m(DiffusionConfig::from_json(ck.manifest.at("config")));
  ck.load_module(*m);
  if (schedule) {
    auto to_vec = [&](const char* name) {
      auto t = ck.get(name).contiguous();
      return std::vector<double>(t.data_ptr<double>(), t.data_ptr<double>() + t.numel());
    };
    schedule->beta = to_vec("schedule.beta");
    schedule->alpha = to_vec("schedule.alpha");
    schedule->alpha_bar = to_vec("schedule.alpha_bar");
    schedule->T = static_cast<int>(schedule->beta.size());
  }
  return m;
}

}  // namespace penet
