#include <doctest.h>

#include <fstream>
#include <set>

#include "penet/diffusion.hpp"
#include "penet/digest.hpp"
#include "penet/engine.hpp"
#include "penet/errors.hpp"
#include "penet/intrinsic.hpp"
#include "penet/manifest.hpp"
#include "support.hpp"

using namespace penet;

namespace {

// A small corpus with one-epoch learners, built once per process.
struct Fixture {
  penet::testing::TempDir dir{"engine"};
  std::filesystem::path data, il, dl;

  Fixture() {
    data = dir / "data";
    DatasetOptions gen;
    gen.out_dir = data;
    gen.scenes = 96;
    gen.seed = 5;
    const auto manifest = generate_dataset(gen);

    il = dir / "il.pnck";
    ILTrainOptions il_opts;
    il_opts.epochs = 1;
    auto il_run = pretrain_il(manifest, Fold::S0, IntrinsicConfig{}, il_opts);
    save_intrinsic(il_run.model, il);

    dl = dir / "dl.pnck";
    DLTrainOptions dl_opts;
    dl_opts.epochs = 1;
    auto dl_run = pretrain_dl(manifest, Fold::S0, DiffusionConfig{}, dl_opts);
    save_diffusion(dl_run.model, dl_run.schedule, dl);
  }

  RunConfig config(const std::string& out) const {
    RunConfig c;
    c.data = data;
    c.intrinsic_checkpoint = il;
    c.diffusion_checkpoint = dl;
    c.train_episodes = 6;
    c.test_episodes = 4;
    c.seeds = {0, 1};
    c.out = dir / out;
    return c;
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

bool same_params(torch::nn::Module& a, torch::nn::Module& b) {
  const auto x = a.parameters();
  const auto y = b.parameters();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!torch::equal(x[i], y[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("evaluate: stub predictors") {
  Session s(fixture().config("stubs"));
  const auto perfect = s.evaluate_predictor(s.config(), [](const Episode& ep) { return ep.query_labels; });
  CHECK(perfect.iou.mean == 1.0);
  const auto background = s.evaluate_predictor(s.config(), [](const Episode& ep) {
    return std::vector<int32_t>(ep.query_labels.size(), ep.n_way);
  });
  CHECK(background.iou.mean == 0.0);
  CHECK_THROWS_AS(s.evaluate_predictor(s.config(), [](const Episode&) { return std::vector<int32_t>{0}; }),
                  InvalidState);
}

TEST_CASE("meta_train: zero episodes leave the fresh parameters") {
  auto run = fixture().config("zero");
  run.train_episodes = 0;
  Session s(run);
  auto a = s.meta_train(run, Variant::F, 3);
  auto b = s.meta_train(run, Variant::F, 3);
  CHECK(a.log.total.empty());
  CHECK(same_params(*a.pam, *b.pam));
  for (auto& p : a.pam->named_parameters())
    if (p.key().find("fc2") != std::string::npos) CHECK(p.value().abs().max().item<double>() == 0.0);

  run.train_episodes = 3;
  auto c = s.meta_train(run, Variant::F, 3);
  CHECK(c.log.total.size() == 3);
  CHECK_FALSE(same_params(*a.pam, *c.pam));
}

TEST_CASE("meta_train: learners stay frozen") {
  auto run = fixture().config("frozen");
  const auto il_file = sha256_file(run.intrinsic_checkpoint);
  const auto dl_file = sha256_file(run.diffusion_checkpoint);
  Session s(run);
  s.ensure_dl();
  const auto il_before = module_digest(*s.learners().il);
  const auto dl_before = module_digest(*s.learners().dl);
  auto m = s.meta_train(run, Variant::F, 0);
  CHECK(m.log.total.size() == 6);
  CHECK(module_digest(*s.learners().il) == il_before);
  CHECK(module_digest(*s.learners().dl) == dl_before);
  CHECK(sha256_file(run.intrinsic_checkpoint) == il_file);
  CHECK(sha256_file(run.diffusion_checkpoint) == dl_file);
}

TEST_CASE("meta_train: learning-rate log follows the schedule") {
  auto run = fixture().config("lr");
  run.decay_interval = 2;
  Session s(run);
  auto m = s.meta_train(run, Variant::E, 0);
  REQUIRE(m.log.lr.size() == 6);
  for (std::size_t t = 0; t < 6; ++t) CHECK(m.log.lr[t] == lr_at(run, static_cast<long>(t)));
}

TEST_CASE("ablate: variant wiring") {
  auto run = fixture().config("ablate");
  Session s(run);
  const auto reports = ablate(s, run, {Variant::A, Variant::D, Variant::E});
  CHECK(s.train_cache().diffusion_calls() == 0);
  CHECK(s.test_cache().diffusion_calls() == 0);
  CHECK_FALSE(s.learners().dl);
  for (const auto& [v, r] : reports) {
    CHECK(r.at("feature_requests").at("diffusion") == 0);
    CHECK(r.at("feature_requests").at("intrinsic").get<long>() > 0);
    CHECK(r.at("variant") == variant_name(v));
    CHECK(r.at("modules") == modules_for(v).to_json());
  }

  auto c = s.meta_train(run, Variant::C, 0);
  REQUIRE(c.log.total.size() == 6);
  for (std::size_t t = 0; t < 6; ++t) CHECK(c.log.total[t] == c.log.seg[t]);
  const auto rc = train_and_evaluate(s, run, Variant::C, "ablate");
  CHECK(rc.at("loss").at("lambda") == 0.0);
  CHECK(rc.at("feature_requests").at("diffusion").get<long>() > 0);

  auto b = s.meta_train(run, Variant::B, 0);
  CHECK_FALSE(b.pam);
  CHECK(b.log.total.empty());
}

TEST_CASE("reports are deterministic") {
  auto run = fixture().config("det");
  Session s1(run);
  Session s2(run);
  const auto r1 = train_and_evaluate(s1, run, Variant::F, "ablate");
  const auto r2 = train_and_evaluate(s2, run, Variant::F, "ablate");
  CHECK(strip_wall_clock(r1).dump() == strip_wall_clock(r2).dump());
  CHECK(r1.at("schema_version") == kReportSchemaVersion);
  CHECK(r1.at("per_seed").size() == 2);
  CHECK(r1.at("config_digest").get<std::string>().size() == 64);
}

TEST_CASE("variant F evaluation equals the saved-model evaluation") {
  auto run = fixture().config("saved");
  Session s(run);
  std::vector<TrainedModel> models;
  const auto fresh = train_and_evaluate(s, run, Variant::F, "ablate", &models);
  for (const auto& m : models) save_trained(run, m);
  CHECK(std::filesystem::exists(pam_checkpoint_path(run, Variant::F, 1)));
  const auto saved = evaluate_saved(s, run, Variant::F);
  CHECK(saved.at("per_seed") == fresh.at("per_seed"));
  CHECK(saved.at("mean_iou") == fresh.at("mean_iou"));
  CHECK(saved.at("config_digest") == fresh.at("config_digest"));
  CHECK_THROWS_AS(load_trained(run, Variant::A), FormatError);
  CHECK(load_trained(run, Variant::D).size() == 2);
}

TEST_CASE("sweep-pam: three structure and three iteration reports") {
  auto run = fixture().config("sweep");
  run.seeds = {0};
  Session s(run);
  const auto reports = pam_variant_sweep(s, run);
  REQUIRE(reports.size() == 6);
  std::set<std::string> structures;
  std::vector<int> iterations;
  for (const auto& [label, r] : reports) {
    if (r.at("sweep").at("group") == "structure") structures.insert(r.at("sweep").at("pam_variant"));
    else iterations.push_back(r.at("sweep").at("iterations"));
  }
  CHECK(structures == std::set<std::string>{"pushpull", "push_only", "pull_only"});
  CHECK(iterations == std::vector<int>{1, 2, 3});

  const auto def = train_and_evaluate(s, run, Variant::F, "ablate");
  const auto& m2 = reports[4].second;
  CHECK(m2.at("sweep").at("iterations") == 2);
  CHECK(m2.at("per_seed") == def.at("per_seed"));
  CHECK(m2.at("config_digest") == def.at("config_digest"));
}

TEST_CASE("sweep-nway") {
  auto run = fixture().config("nway");
  run.seeds = {0};
  run.train_episodes = 2;
  run.test_episodes = 2;
  run.variant = Variant::D;
  Session s(run);
  REQUIRE(s.test_classes().size() >= 6);
  const auto reports = nway_sweep(s, run, {2, 3, 4, 5, 6}, {1, 5});
  REQUIRE(reports.size() == 10);
  std::set<std::pair<int, int>> cells;
  for (const auto& r : reports) cells.emplace(r.at("n_way"), r.at("k_shot"));
  CHECK(cells.size() == 10);
  CHECK(cells.count({6, 5}) == 1);
  CHECK_THROWS_AS(nway_sweep(s, run, {static_cast<int>(s.test_classes().size()) + 1}, {1}), InvalidArgument);

  write_nway_csv(reports, run.out / "nway.csv");
  write_nway_svg(reports, run.out / "nway.svg");
  std::ifstream csv(run.out / "nway.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 11);
}

TEST_CASE("results store") {
  penet::testing::TempDir dir("store");
  ResultsStore store(dir / "results");
  const auto a = store.write({{"kind", "ablate"}, {"variant", "F"}, {"mean_iou", 0.5}}, "ablate_F/2w1s");
  store.write({{"kind", "ablate"}, {"variant", "D"}, {"mean_iou", 0.25}}, "ablate_D");
  CHECK(std::filesystem::exists(a));
  CHECK(a.filename() == "ablate_F_2w1s.json");
  const auto index = store.index();
  REQUIRE(index.size() == 2);
  CHECK(index[0].at("variant") == "F");
  CHECK(index[1].at("mean_iou") == 0.25);
  CHECK(nlohmann::json::parse(std::ifstream(a)).at("mean_iou") == 0.5);
}

TEST_CASE("session errors") {
  auto run = fixture().config("errors");
  run.data = fixture().dir / "missing";
  CHECK_THROWS(Session(run));
}
