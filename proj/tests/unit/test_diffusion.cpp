#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "penet/blocks.hpp"
#include "penet/checkpoint.hpp"
#include "penet/diffusion.hpp"
#include "penet/errors.hpp"
#include "penet/grad_check.hpp"
#include "penet/manifest.hpp"
#include "penet/scene.hpp"
#include "support.hpp"

using namespace penet;

namespace {

DiffusionConfig tiny_config() {
  DiffusionConfig c;
  c.dim = 8;
  c.point_embed = 4;
  c.heads = 2;
  c.layers = 1;
  c.ffn = 8;
  c.cond_dim = 6;
  c.time_dim = 4;
  c.denoiser_hidden = 8;
  c.groups = 4;
  c.group_size = 4;
  c.timesteps = 10;
  return c;
}

PointCloud desk_block(uint64_t seed, std::size_t n = 512) {
  const auto scene = generate_scene(make_scene_spec({0, 2, 3, 4}, 0.3), seed);
  return sample_block(scene, 1.0, n, seed);
}

}  // namespace

TEST_CASE("schedule: constant beta 0.1 over two steps") {
  const auto s = make_schedule(2, 0.1, 0.1);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.81).epsilon(1e-15));
}

TEST_CASE("schedule: T=1") {
  const auto s = make_schedule(1, 0.02, 0.05);
  CHECK(s.alpha_bar[0] == 1.0 - s.beta[0]);
  CHECK(s.beta[0] == 0.02);
}

TEST_CASE("schedule: desk default agrees with an extended-precision product") {
  const auto s = make_schedule(100, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int t = 0; t < 100; ++t) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t) / 99.0L;
    CHECK(std::abs(static_cast<long double>(s.beta[t]) - beta) <= 1e-15L);
    prod *= 1.0L - beta;
    CHECK(std::abs(static_cast<long double>(s.alpha_bar[t]) - prod) <= 1e-12L);
    CHECK(s.beta[t] > 0);
    CHECK(s.beta[t] < 1);
    CHECK(s.alpha[t] == 1.0 - s.beta[t]);
    if (t > 0) {
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      CHECK(s.alpha_bar[t] == doctest::Approx(s.alpha_bar[t - 1] * s.alpha[t]).epsilon(1e-15));
    }
  }
  CHECK(s.alpha_bar.back() > 0);
}

TEST_CASE("schedule: bounds are enforced") {
  CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), InvalidArgument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), InvalidArgument);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), InvalidArgument);
  CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), InvalidArgument);
}

TEST_CASE("q_sample: zero noise scales x0") {
  const auto s = make_schedule(10, 0.01, 0.05);
  const auto x0 = torch::randn({5, 3}, torch::kFloat64);
  const auto out = q_sample(x0, 4, torch::zeros_like(x0), s);
  CHECK(torch::equal(out, std::sqrt(s.alpha_bar[4]) * x0));
}

TEST_CASE("q_sample: closed-form arithmetic") {
  const auto s = make_schedule(2, 0.1, 0.1);
  const auto x0 = torch::ones({1}, torch::kFloat64);
  const auto out = q_sample(x0, 1, torch::ones({1}, torch::kFloat64), s);
  CHECK(out.item<double>() == doctest::Approx(0.9 + std::sqrt(0.19)).epsilon(1e-12));
  CHECK(out.item<double>() == doctest::Approx(1.3359).epsilon(1e-4));
}

TEST_CASE("q_sample: timestep range") {
  const auto s = make_schedule(5, 0.01, 0.05);
  const auto x0 = torch::ones({1});
  CHECK_THROWS_AS(q_sample(x0, 5, x0, s), InvalidArgument);
  CHECK_THROWS_AS(q_sample(x0, -1, x0, s), InvalidArgument);
}

TEST_CASE("q_sample: moments match iterative one-step noising") {
  const auto s = make_schedule(50, 1e-4, 0.02);
  const int draws = 20000;
  Rng rng(123);
  for (int t : {1, 10, 49}) {
    // Markov chain oracle: x_0 = 1, x_{u} = sqrt(alpha_u) x_{u-1} + sqrt(beta_u) eps.
    auto chain = torch::ones({draws}, torch::kFloat64);
    for (int u = 0; u <= t; ++u) {
      auto e = torch::empty({draws}, torch::kFloat64);
      fill_normal(e, 1.0, rng);
      chain = std::sqrt(s.alpha[u]) * chain + std::sqrt(s.beta[u]) * e;
    }
    auto e = torch::empty({draws}, torch::kFloat64);
    fill_normal(e, 1.0, rng);
    const auto closed = q_sample(torch::ones({draws}, torch::kFloat64), t, e, s);

    for (const auto& x : {chain, closed}) {
      const double mean = x.mean().item<double>();
      const double var = x.var().item<double>();
      const double se = std::sqrt((1 - s.alpha_bar[t]) / draws);
      CHECK(std::abs(mean - std::sqrt(s.alpha_bar[t])) <= 3 * se);
      CHECK(std::abs(var - (1 - s.alpha_bar[t])) <= 0.05 * (1 - s.alpha_bar[t]));
    }
    const double se2 = std::sqrt(2 * (1 - s.alpha_bar[t]) / draws);
    CHECK(std::abs(chain.mean().item<double>() - closed.mean().item<double>()) <= 3 * se2);
    CHECK(std::abs(chain.var().item<double>() / closed.var().item<double>() - 1) <= 0.05);
  }
}

TEST_CASE("patchify: G=n, k=1 makes every point its own center") {
  const auto x = diffusion_coords(desk_block(1, 32));
  const auto ps = patchify(x, 32, 1);
  std::set<int64_t> own;
  for (int g = 0; g < 32; ++g) {
    const auto idx = ps.groups[g][0].item<int64_t>();
    own.insert(idx);
    CHECK(torch::equal(ps.centers[g], x[idx]));
    CHECK(torch::equal(ps.relative[g][0], torch::zeros({3})));
  }
  CHECK(own.size() == 32);
}

TEST_CASE("patchify: desk-scale shape contract") {
  const auto x = diffusion_coords(desk_block(2));
  const auto ps = patchify(x, 64, 32);
  CHECK(ps.centers.sizes() == torch::IntArrayRef{64, 3});
  CHECK(ps.groups.sizes() == torch::IntArrayRef{64, 32});
  CHECK(ps.relative.sizes() == torch::IntArrayRef{64, 32, 3});
  CHECK(ps.visible.size() == 64);
  CHECK(ps.masked.empty());
  CHECK(torch::allclose(ps.relative[3][5], x[ps.groups[3][5].item<int64_t>()] - ps.centers[3]));
}

TEST_CASE("patchify: groups are the k nearest points of each center") {
  const auto x = diffusion_coords(desk_block(3, 64));
  const auto ps = patchify(x, 8, 5);
  for (int g = 0; g < 8; ++g) {
    const auto d = (x - ps.centers[g]).pow(2).sum(1);
    const auto kth = std::get<0>(d.sort()).index({4}).item<float>();
    for (int r = 0; r < 5; ++r) CHECK(d[ps.groups[g][r].item<int64_t>()].item<float>() <= kth);
  }
}

TEST_CASE("patchify: coverage of G=64, k=32 on desk-scale blocks") {
  // Regression threshold: the lowest coverage measured over these 20 blocks (0.9883).
  double worst = 1.0;
  for (uint64_t s = 0; s < 20; ++s) {
    const auto ps = patchify(diffusion_coords(desk_block(s)), 64, 32);
    const auto flat = ps.groups.reshape({-1});
    const auto covered = std::get<0>(torch::_unique(flat)).size(0);
    worst = std::min(worst, static_cast<double>(covered) / 512.0);
  }
  MESSAGE("worst coverage " << worst);
  CHECK(worst >= 0.988);
}

TEST_CASE("patchify: invalid sizes") {
  const auto x = torch::rand({10, 3});
  CHECK_THROWS_AS(patchify(x, 11, 2), InvalidArgument);
  CHECK_THROWS_AS(patchify(x, 2, 10), InvalidArgument);
}

TEST_CASE("mask_patches: rho=0.8 with G=64 masks 51") {
  const auto ps = mask_patches(patchify(diffusion_coords(desk_block(4)), 64, 32), 0.8, 7);
  CHECK(ps.masked.size() == 51);
  CHECK(ps.visible.size() == 13);
  std::vector<int64_t> all(ps.masked);
  all.insert(all.end(), ps.visible.begin(), ps.visible.end());
  std::sort(all.begin(), all.end());
  std::vector<int64_t> expected(64);
  std::iota(expected.begin(), expected.end(), 0);
  CHECK(all == expected);
  CHECK(std::is_sorted(ps.masked.begin(), ps.masked.end()));
}

TEST_CASE("mask_patches: rounding is half-up and exact") {
  const auto base = patchify(torch::rand({40, 3}), 10, 3);
  CHECK(mask_patches(base, 0.25, 1).masked.size() == 3);  // 2.5 rounds up
  CHECK(mask_patches(base, 0.24, 1).masked.size() == 2);
  for (double rho : {0.1, 0.33, 0.5, 0.77, 0.95})
    CHECK(mask_patches(base, rho, 3).masked.size() == static_cast<std::size_t>(std::floor(rho * 10 + 0.5)));
}

TEST_CASE("mask_patches: rho=0 keeps everything visible; seed determinism") {
  const auto base = patchify(torch::rand({40, 3}), 10, 3);
  const auto none = mask_patches(base, 0.0, 1);
  CHECK(none.masked.empty());
  CHECK(none.visible.size() == 10);
  CHECK(mask_patches(base, 0.6, 9).masked == mask_patches(base, 0.6, 9).masked);
  bool differs = false;
  for (uint64_t s = 0; s < 10 && !differs; ++s)
    differs = mask_patches(base, 0.6, s).masked != mask_patches(base, 0.6, 9).masked;
  CHECK(differs);
  CHECK_THROWS_AS(mask_patches(base, 1.0, 1), InvalidArgument);
}

TEST_CASE("pos_embed: function properties") {
  auto model = make_diffusion_learner({}, 1);
  auto c = torch::rand({13, 3});
  c[5] = c[2];
  const auto e = model->pos_embed(c);
  CHECK(e.sizes() == torch::IntArrayRef{13, 64});
  CHECK(torch::equal(e[5], e[2]));
  CHECK(torch::equal(model->pos_embed(c), e));
  {
    torch::NoGradGuard g;
    model->pos_fc1()->weight.zero_();
    model->pos_fc1()->bias.zero_();
    model->pos_fc2()->weight.zero_();
    model->pos_fc2()->bias.fill_(0.5);
  }
  const auto z = model->pos_embed(c);
  CHECK(torch::equal(z, torch::full({13, 64}, 0.5)));
}

TEST_CASE("dl_encode: shape and visible-order equivariance") {
  auto model = make_diffusion_learner({}, 2);
  model->eval();
  auto ps = mask_patches(patchify(diffusion_coords(desk_block(5)), 64, 32), 0.8, 3);
  const auto a = model->dl_encode(ps);
  CHECK(a.sizes() == torch::IntArrayRef{13, 64});
  auto perm = ps;
  std::reverse(perm.visible.begin(), perm.visible.end());
  std::rotate(perm.visible.begin(), perm.visible.begin() + 4, perm.visible.end());
  const auto b = model->dl_encode(perm);
  for (std::size_t i = 0; i < perm.visible.size(); ++i) {
    const auto j = std::find(ps.visible.begin(), ps.visible.end(), perm.visible[i]) - ps.visible.begin();
    CHECK(torch::allclose(b[static_cast<int64_t>(i)], a[j], 1e-5, 1e-5));
  }
}

TEST_CASE("dl_encode: identity-initialized single layer returns the embedded input") {
  DiffusionConfig cfg;
  cfg.layers = 1;
  auto model = make_diffusion_learner(cfg, 3);
  model->identity_init_encoder();
  const auto ps = patchify(diffusion_coords(desk_block(6)), 64, 32);
  const auto tokens = model->embed_tokens(ps, ps.visible);
  CHECK(torch::allclose(model->dl_encode(ps), tokens, 0, 1e-6));
}

TEST_CASE("dl_encode: no visible patch") {
  auto model = make_diffusion_learner({}, 2);
  auto ps = patchify(torch::rand({20, 3}), 4, 3);
  ps.masked = ps.visible;
  ps.visible.clear();
  CHECK_THROWS_AS(model->dl_encode(ps), InvalidState);
}

TEST_CASE("aggregate_condition: pooling contracts") {
  auto model = make_diffusion_learner({}, 4);
  const auto f = torch::randn({1, 64});
  const auto centers = torch::rand({3, 3});
  const auto c1 = model->aggregate_condition(f, centers);
  CHECK(c1.sizes() == torch::IntArrayRef{64});
  CHECK(torch::isfinite(c1).all().item<bool>());
  // One visible patch: meanpool is that row, so duplicating it changes nothing.
  const auto c2 = model->aggregate_condition(torch::cat({f, f, f}, 0), centers);
  CHECK(torch::allclose(c1, c2, 1e-6, 1e-6));
  CHECK(torch::equal(model->aggregate_condition(f, centers), c1));
  // Without masked centers the condition is still defined.
  CHECK(model->aggregate_condition(f, torch::zeros({0, 3})).sizes() == torch::IntArrayRef{64});
}

TEST_CASE("denoise: point-wise noise predictor") {
  auto model = make_diffusion_learner({}, 5);
  auto z = torch::randn({128, 3});
  z[7] = z[3];
  const auto c = torch::randn({64});
  const auto eps = model->denoise(z, 17, c);
  CHECK(eps.sizes() == torch::IntArrayRef{128, 3});
  CHECK(torch::equal(eps[7], eps[3]));
  {
    torch::NoGradGuard g;
    auto& last = model->denoiser_layers().back();
    last->weight.zero_();
    last->bias.zero_();
  }
  CHECK(torch::equal(model->denoise(z, 17, c), torch::zeros({128, 3})));
}

TEST_CASE("timestep_embedding: sinusoid layout") {
  const auto e = timestep_embedding(0, 8, torch::kFloat64);
  CHECK(torch::equal(e, torch::cat({torch::zeros({4}, torch::kFloat64), torch::ones({4}, torch::kFloat64)})));
  const auto f = timestep_embedding(3, 8, torch::kFloat64);
  CHECK(f[0].item<double>() == doctest::Approx(std::sin(3.0)));
  CHECK(f[5].item<double>() == doctest::Approx(std::cos(3.0 * std::exp(-std::log(1e4) / 4))));
}

TEST_CASE("diffusion_loss: zero predictor gives unit loss per coordinate") {
  auto model = make_diffusion_learner({}, 6);
  const auto s = make_schedule(100, 1e-4, 0.02);
  const auto x0 = torch::rand({10000, 3}) * 2 - 1;
  const auto zero = [](const torch::Tensor& z, int, const torch::Tensor&, const torch::Tensor&) {
    return torch::zeros_like(z);
  };
  const double loss = diffusion_loss(x0, s, model, 1, zero).item<double>();
  // Mean of 30000 squared standard normals: standard error sqrt(2/30000).
  CHECK(std::abs(loss - 1.0) <= 4 * std::sqrt(2.0 / 30000));
}

TEST_CASE("diffusion_loss: exact noise predictor gives zero; loss is non-negative") {
  auto model = make_diffusion_learner({}, 7);
  const auto s = make_schedule(100, 1e-4, 0.02);
  const auto x0 = diffusion_coords(desk_block(7));
  const auto exact = [](const torch::Tensor&, int, const torch::Tensor&, const torch::Tensor& eps) { return eps; };
  CHECK(diffusion_loss(x0, s, model, 2, exact).item<double>() == 0.0);
  for (uint64_t seed = 0; seed < 5; ++seed) CHECK(diffusion_loss(x0, s, model, seed).item<double>() >= 0.0);
  CHECK(diffusion_loss(x0, s, model, 3).item<double>() == diffusion_loss(x0, s, model, 3).item<double>());
}

TEST_CASE("diffusion_loss: gradient matches central differences in double precision") {
  auto model = make_diffusion_learner(tiny_config(), 8);
  model->to(torch::kFloat64);
  const auto s = make_schedule(10, 1e-3, 0.05);
  const auto x0 = torch::rand({16, 3}, torch::kFloat64) * 2 - 1;
  NamedTensors params;
  for (std::size_t i = 0; i < model->denoiser_layers().size(); ++i)
    for (auto& p : named_params(*model->denoiser_layers()[i], "denoiser" + std::to_string(i) + "."))
      params.push_back(p);
  const auto result = grad_check([&] { return diffusion_loss(x0, s, model, 4); }, params, 1e-6);
  MESSAGE("max relative error " << result.max_rel_error << " at " << result.worst_param);
  CHECK(result.checked > 100);
  CHECK(result.max_rel_error <= 1e-4);
}

TEST_CASE("pretrain_dl: zero epochs keep the initialization") {
  std::vector<PointCloud> blocks{desk_block(1, 64)};
  DLTrainOptions opts;
  opts.epochs = 0;
  opts.seed = 3;
  const auto result = pretrain_dl(blocks, tiny_config(), opts);
  CHECK(result.loss_curve.empty());
  auto fresh = make_diffusion_learner(tiny_config(), 3);
  const auto a = result.model->parameters();
  const auto b = fresh->parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));
}

TEST_CASE("pretrain_dl: loss decreases on a toy corpus") {
  std::vector<PointCloud> blocks;
  for (uint64_t s = 0; s < 16; ++s) blocks.push_back(desk_block(s, 256));
  DiffusionConfig cfg;
  cfg.groups = 32;
  cfg.group_size = 16;
  DLTrainOptions opts;
  opts.epochs = 12;
  opts.batch_blocks = 4;
  const auto result = pretrain_dl(blocks, cfg, opts);
  REQUIRE(result.loss_curve.size() == 12);
  const auto& c = result.loss_curve;
  const double first = (c[0] + c[1] + c[2]) / 3, last = (c[9] + c[10] + c[11]) / 3;
  MESSAGE("loss " << c.front() << " -> " << c.back());
  CHECK(last < first);
  CHECK(c.back() <= 0.9 * c.front());
}

TEST_CASE("dl_features: G=n, k=1 maps patch features straight to points") {
  DiffusionConfig cfg;
  cfg.groups = 48;
  cfg.group_size = 1;
  auto model = make_diffusion_learner(cfg, 9);
  model->eval();
  const auto pc = desk_block(9, 48);
  const auto fm = dl_features(pc, model);
  const auto ps = patchify(diffusion_coords(pc), 48, 1);
  torch::NoGradGuard g;
  const auto patch = model->standardize(model->dl_encode(ps));
  for (int gi = 0; gi < 48; ++gi)
    CHECK(torch::equal(fm.features[ps.groups[gi][0].item<int64_t>()], patch[gi]));
}

TEST_CASE("dl_features: a single patch gives identical rows") {
  DiffusionConfig cfg;
  cfg.groups = 1;
  cfg.group_size = 1000;
  auto model = make_diffusion_learner(cfg, 10);
  const auto f = dl_features(desk_block(10, 64), model).features;
  CHECK(torch::equal(f, f[0].expand_as(f)));
}

TEST_CASE("dl_features: desk-scale shape and determinism") {
  auto model = make_diffusion_learner({}, 11);
  const auto pc = desk_block(11);
  const auto a = dl_features(pc, model);
  CHECK(a.features.sizes() == torch::IntArrayRef{512, 64});
  CHECK(a.source == FeatureSource::Diffusion);
  CHECK(torch::equal(a.features, dl_features(pc, model).features));
  CHECK(torch::isfinite(a.features).all().item<bool>());
}

TEST_CASE("diffusion checkpoint: round trip keeps features and schedule") {
  testing::TempDir dir("dlck");
  auto model = make_diffusion_learner(tiny_config(), 12);
  model->set_output_stats(torch::full({8}, 0.1), torch::full({8}, 3.0));
  const auto s = make_schedule(10, 1e-3, 0.05);
  save_diffusion(model, s, dir / "dl.pnck");
  DiffusionSchedule loaded_s;
  auto loaded = load_diffusion(dir / "dl.pnck", &loaded_s);
  CHECK(loaded_s.alpha_bar == s.alpha_bar);
  CHECK(loaded->config().dim == 8);
  const auto pc = desk_block(12, 64);
  CHECK(torch::equal(dl_features(pc, model).features, dl_features(pc, loaded).features));

  Checkpoint ck;
  ck.manifest = {{"kind", "intrinsic"}};
  ck.save(dir / "wrong.pnck");
  CHECK_THROWS_AS(load_diffusion(dir / "wrong.pnck"), FormatError);
}
