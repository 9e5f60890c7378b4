#include "penet/pipeline.hpp"

#include "penet/digest.hpp"
#include "penet/errors.hpp"
#include "penet/losses.hpp"
#include "penet/prototypes.hpp"

namespace penet {

Learners Learners::load(const RunConfig& cfg, bool need_dl) {
  Learners l;
  if (!std::filesystem::exists(cfg.intrinsic_checkpoint)) {
    throw FormatError("checkpoints.intrinsic", "missing checkpoint " + cfg.intrinsic_checkpoint.string());
  }
  l.il = load_intrinsic(cfg.intrinsic_checkpoint);
  l.il->eval();
  l.il_digest = sha256_file(cfg.intrinsic_checkpoint);
  if (need_dl) {
    if (!std::filesystem::exists(cfg.diffusion_checkpoint)) {
      throw FormatError("checkpoints.diffusion", "missing checkpoint " + cfg.diffusion_checkpoint.string());
    }
    l.dl = load_diffusion(cfg.diffusion_checkpoint);
    l.dl->eval();
    l.dl_digest = sha256_file(cfg.diffusion_checkpoint);
  }
  for (auto& p : l.il->parameters()) p.set_requires_grad(false);
  if (l.dl)
    for (auto& p : l.dl->parameters()) p.set_requires_grad(false);
  return l;
}

FeatureCache::FeatureCache(const BlockBank& bank, Learners& learners, double infer_mask_ratio)
    : bank_(bank), learners_(learners), mask_ratio_(infer_mask_ratio), il_(bank.size()), dl_(bank.size()) {}

const torch::Tensor& FeatureCache::intrinsic(std::size_t block) {
  auto& slot = il_.at(block);
  ++il_requests_;
  if (!slot) {
    slot = il_forward(bank_.block(block), learners_.il).features;
    ++il_calls_;
  }
  return *slot;
}

const torch::Tensor& FeatureCache::diffusion(std::size_t block) {
  if (!learners_.dl) throw InvalidState("diffusion features requested without a diffusion learner");
  auto& slot = dl_.at(block);
  ++dl_requests_;
  if (!slot) {
    slot = dl_features(bank_.block(block), learners_.dl, mask_ratio_, derive_seed(block, 5)).features;
    ++dl_calls_;
  }
  return *slot;
}

EpisodeInputs prepare_episode(const Episode& ep, FeatureCache& cache, const ModuleSet& modules, int proto_seeds) {
  std::vector<std::vector<ShotFeatures>> shots(ep.support.size());
  for (std::size_t c = 0; c < ep.support.size(); ++c) {
    for (const auto& shot : ep.support[c]) {
      const auto id = static_cast<std::size_t>(shot.block_id);
      ShotFeatures f{cache.intrinsic(id), {}};
      if (modules.dl) f.diffusion = cache.diffusion(id);
      shots[c].push_back(f);
    }
  }
  const auto q = static_cast<std::size_t>(ep.query_block_id);
  ShotFeatures query{cache.intrinsic(q), {}};
  if (modules.dl) query.diffusion = cache.diffusion(q);
  return prepare_episode(ep, shots, query, modules, proto_seeds);
}

EpisodeInputs prepare_episode(const Episode& ep, const std::vector<std::vector<ShotFeatures>>& shots,
                              const ShotFeatures& query, const ModuleSet& modules, int proto_seeds) {
  torch::NoGradGuard guard;
  EpisodeInputs in;
  in.n_way = ep.n_way;
  const auto seeds = static_cast<std::size_t>(proto_seeds);

  std::vector<std::vector<ShotView>> iv(shots.size()), dv(shots.size());
  std::vector<Vec3f> support_coords;
  std::vector<torch::Tensor> si, sd;
  std::vector<int64_t> labels;
  for (std::size_t c = 0; c < shots.size(); ++c) {
    for (std::size_t k = 0; k < shots[c].size(); ++k) {
      const auto& shot = ep.support[c][k];
      const auto& f = shots[c][k];
      iv[c].push_back({f.intrinsic, shot.cloud.points, shot.mask});
      si.push_back(f.intrinsic);
      if (modules.dl) {
        dv[c].push_back({f.diffusion, shot.cloud.points, shot.mask});
        sd.push_back(f.diffusion);
      }
      support_coords.insert(support_coords.end(), shot.cloud.points.begin(), shot.cloud.points.end());
      for (auto m : shot.mask) labels.push_back(m ? static_cast<int64_t>(c) : ep.n_way);
    }
  }
  auto pi = proto_gen(iv, seeds);
  in.p_i = assemble(pi.foreground, pi.background, PrototypeSource::Intrinsic).rows;
  if (modules.dl) {
    auto pd = proto_gen(dv, seeds);
    in.p_d = assemble(pd.foreground, pd.background, PrototypeSource::Diffusion).rows;
  }
  in.support_all = torch::cat(si, 0);
  in.support_labels = torch::tensor(labels, torch::kInt64);

  const auto n = static_cast<std::size_t>(query.intrinsic.size(0));
  auto idx = torch::tensor(resample_indices(support_coords, n), torch::kInt64);
  in.streams.f_qi = query.intrinsic;
  in.streams.f_si = in.support_all.index_select(0, idx);
  if (modules.dl) {
    in.streams.f_qd = query.diffusion;
    in.streams.f_sd = torch::cat(sd, 0).index_select(0, idx);
  }
  std::vector<int64_t> ql(ep.query_labels.begin(), ep.query_labels.end());
  in.query_labels = torch::tensor(ql, torch::kInt64);
  return in;
}

PipelineOutput run_pipeline(const EpisodeInputs& in, PrototypeAssimilation* pam, const ModuleSet& modules,
                            double lambda, double temperature) {
  PipelineOutput out;
  if (modules.pam) {
    if (!pam || !*pam) throw InvalidState("run_pipeline: PAM requested but not provided");
    if (modules.dl) {
      auto [pi, pd] = (*pam)->assimilate(in.p_i, in.p_d, in.streams);
      out.prototypes = fuse(pi, pd);
    } else {
      out.prototypes = (*pam)->assimilate_intrinsic(in.p_i, in.streams.f_qi, in.streams.f_si);
    }
  } else {
    out.prototypes = modules.dl ? fuse(in.p_i, in.p_d) : in.p_i;
  }
  out.probs = cosine_probs(in.streams.f_qi, out.prototypes, temperature);
  out.seg = seg_loss(out.probs, in.query_labels);
  const double lam = modules.pcm ? lambda : 0.0;
  out.cal = modules.pcm ? calib_loss(in.support_all, out.prototypes, in.support_labels, temperature)
                        : torch::zeros({}, out.seg.options());
  out.total = total_loss(out.seg, out.cal, lam);
  return out;
}

}  // namespace penet
