#include "penet/pam.hpp"

#include <cmath>

#include "penet/checkpoint.hpp"
#include "penet/errors.hpp"
#include "penet/prototypes.hpp"
#include "penet/tensor_util.hpp"

namespace penet {

torch::Tensor channel_attention(const torch::Tensor& f_query, const torch::Tensor& f_support,
                                const torch::Tensor& w_q, const torch::Tensor& w_k, double scale) {
  if (f_query.dim() != 2 || f_support.dim() != 2) throw InvalidArgument("channel_attention: features must be 2-D");
  if (f_query.size(0) != f_support.size(0)) {
    throw InvalidArgument("channel_attention: query has " + std::to_string(f_query.size(0)) +
                          " points, support has " + std::to_string(f_support.size(0)) +
                          "; resample the support features first");
  }
  if (f_query.size(1) != w_q.size(0) || f_support.size(1) != w_k.size(0)) {
    throw InvalidArgument("channel_attention: feature width does not match the projections");
  }
  auto query = f_query.mm(w_q).t();   // D×n
  auto key = f_support.mm(w_k).t();   // D×n
  return torch::softmax(query.mm(key.t()) / scale, 1);
}

std::vector<int64_t> resample_indices(std::span<const Vec3f> coords, std::size_t n) {
  if (n == 0 || coords.empty()) throw InvalidArgument("resample_indices: empty input");
  if (coords.size() == n) {
    std::vector<int64_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int64_t>(i);
    return idx;
  }
  if (coords.size() > n) return fps(coords, n);
  std::vector<int64_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int64_t>(i % coords.size());
  return idx;
}

AlignBlockImpl::AlignBlockImpl(int dim) {
  w_q = register_parameter("w_q", torch::empty({dim, dim}));
  w_k = register_parameter("w_k", torch::empty({dim, dim}));
  w_v = register_parameter("w_v", torch::empty({dim, dim}));
  fc1 = register_module("fc1", torch::nn::Linear(dim, dim));
  fc2 = register_module("fc2", torch::nn::Linear(dim, dim));
}

torch::Tensor AlignBlockImpl::mlp(const torch::Tensor& x) { return fc2->forward(torch::relu(fc1->forward(x))); }

torch::Tensor align_prototypes(const torch::Tensor& prototypes, const torch::Tensor& f_query,
                               const torch::Tensor& f_support, AlignBlock& block, const BlockHooks& hooks) {
  const auto d = block->w_v.size(0);
  if (prototypes.dim() != 2 || prototypes.size(1) != d) {
    throw InvalidArgument("align_prototypes: prototypes must be (C+1)×" + std::to_string(d));
  }
  torch::Tensor attn;
  if (hooks.attention) {
    attn = *hooks.attention;
  } else {
    attn = channel_attention(f_query, f_support, block->w_q, block->w_k, std::sqrt(static_cast<double>(d)));
  }
  auto value = prototypes.mm(block->w_v);  // (C+1)×D
  auto update = attn.mm(value.t()).t();
  return prototypes + (hooks.mlp ? hooks.mlp(update) : block->mlp(update));
}

PamVariant parse_pam_variant(const std::string& s) {
  if (s == "pushpull") return PamVariant::PushPull;
  if (s == "push_only") return PamVariant::PushOnly;
  if (s == "pull_only") return PamVariant::PullOnly;
  throw InvalidArgument("unknown PAM variant '" + s + "' (pushpull, push_only, pull_only)");
}

const char* pam_variant_name(PamVariant v) {
  switch (v) {
    case PamVariant::PushPull: return "pushpull";
    case PamVariant::PushOnly: return "push_only";
    case PamVariant::PullOnly: return "pull_only";
  }
  return "?";
}

nlohmann::json PamConfig::to_json() const {
  return {{"dim", dim},
          {"iterations", iterations},
          {"variant", pam_variant_name(variant)},
          {"share_weights", share_weights},
          {"qk_init", qk_init}};
}

PamConfig PamConfig::from_json(const nlohmann::json& j) {
  PamConfig c;
  c.dim = j.at("dim");
  c.iterations = j.at("iterations");
  c.variant = parse_pam_variant(j.at("variant"));
  c.share_weights = j.at("share_weights");
  c.qk_init = j.at("qk_init");
  return c;
}

PrototypeAssimilationImpl::PrototypeAssimilationImpl(PamConfig cfg) : cfg_(cfg) {
  if (cfg_.iterations < 1) throw InvalidArgument("PAM needs at least one iteration");
  if (cfg_.dim < 1) throw InvalidArgument("PAM width must be positive");
  const int blocks = cfg_.share_weights ? 1 : cfg_.iterations;
  for (int m = 0; m < blocks; ++m) {
    if (cfg_.variant != PamVariant::PushOnly) {
      pull_.push_back(register_module("pull" + std::to_string(m), AlignBlock(cfg_.dim)));
    }
    if (cfg_.variant != PamVariant::PullOnly) {
      push_.push_back(register_module("push" + std::to_string(m), AlignBlock(cfg_.dim)));
    }
  }
}

AlignBlock& PrototypeAssimilationImpl::pull(int m) {
  if (pull_.empty()) throw InvalidState("PAM variant has no pull blocks");
  return pull_.at(cfg_.share_weights ? 0 : static_cast<std::size_t>(m));
}

AlignBlock& PrototypeAssimilationImpl::push(int m) {
  if (push_.empty()) throw InvalidState("PAM variant has no push blocks");
  return push_.at(cfg_.share_weights ? 0 : static_cast<std::size_t>(m));
}

std::pair<torch::Tensor, torch::Tensor> PrototypeAssimilationImpl::assimilate(const torch::Tensor& p_i,
                                                                              const torch::Tensor& p_d,
                                                                              const StreamFeatures& f) {
  if (p_i.sizes() != p_d.sizes()) throw InvalidArgument("assimilate: prototype sets differ in shape");
  torch::Tensor a = p_i, b = p_d;
  for (int m = 0; m < cfg_.iterations; ++m) {
    if (has_pull()) a = pull_block(a, f.f_qd, f.f_sd, pull(m));
    if (has_push()) b = push_block(b, f.f_qi, f.f_si, push(m));
  }
  return {a, b};
}

torch::Tensor PrototypeAssimilationImpl::assimilate_intrinsic(const torch::Tensor& p_i, const torch::Tensor& f_qi,
                                                              const torch::Tensor& f_si) {
  torch::Tensor a = p_i;
  for (int m = 0; m < cfg_.iterations; ++m) {
    a = align_prototypes(a, f_qi, f_si, has_pull() ? pull(m) : push(m));
  }
  return a;
}

PrototypeAssimilation make_pam(const PamConfig& cfg, uint64_t seed) {
  PrototypeAssimilation pam(cfg);
  init_module(*pam, seed);
  Rng rng(derive_seed(seed, 77));
  torch::NoGradGuard guard;
  for (auto& child : pam->named_modules("", false)) {
    auto* block = child.value()->as<AlignBlockImpl>();
    if (!block) continue;
    fill_uniform(block->w_q, cfg.qk_init, rng);
    fill_uniform(block->w_k, cfg.qk_init, rng);
    block->fc2->weight.zero_();
    block->fc2->bias.zero_();
  }
  return pam;
}

torch::Tensor fuse(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw InvalidArgument("fuse: prototype sets differ in shape");
  return a + b;
}

void save_pam(PrototypeAssimilation& pam, const std::filesystem::path& path, const nlohmann::json& extra) {
  Checkpoint ck;
  ck.manifest = {{"kind", "pam"}, {"config", pam->config().to_json()}, {"extra", extra}};
  ck.add_module(*pam);
  ck.save(path);
}

PrototypeAssimilation load_pam(const std::filesystem::path& path, nlohmann::json* extra) {
  const auto ck = Checkpoint::load(path);
  if (ck.manifest.value("kind", "") != "pam") {
    throw FormatError("kind", path.string() + " is not a PAM checkpoint");
  }
  PrototypeAssimilation pam(PamConfig::from_json(ck.manifest.at("config")));
  ck.load_module(*pam);
  if (extra) *extra = ck.manifest.value("extra", nlohmann::json::object());
  return pam;
}

}  // namespace penet
