#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <torch/torch.h>

#include "penet/config.hpp"
#include "penet/diffusion.hpp"
#include "penet/engine.hpp"
#include "penet/errors.hpp"
#include "penet/intrinsic.hpp"
#include "penet/manifest.hpp"

namespace {

using penet::RunConfig;

/// Flags shared by every run-level subcommand.
struct RunFlags {
  std::string config;
  std::optional<std::string> data, split, out, il_ckpt, dl_ckpt, variant, pam_variant;
  std::optional<int> n_way, k_shot, episodes, test_episodes, iterations;
  std::optional<uint64_t> seed;
  std::optional<double> infer_mask_ratio, lambda;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "RunConfig JSON file");
    app->add_option("--data", data, "dataset directory");
    app->add_option("--split", split, "test fold (S0|S1)");
    app->add_option("--out", out, "output directory");
    app->add_option("--il-ckpt", il_ckpt, "intrinsic learner checkpoint");
    app->add_option("--dl-ckpt", dl_ckpt, "diffusion learner checkpoint");
    app->add_option("--n-way", n_way);
    app->add_option("--k-shot", k_shot);
    app->add_option("--seed", seed, "run a single training seed");
    app->add_option("--episodes", episodes, "meta-training episodes per seed");
    app->add_option("--test-episodes", test_episodes);
    app->add_option("--iterations", iterations, "PAM iterations");
    app->add_option("--pam-variant", pam_variant, "pushpull|push_only|pull_only");
    app->add_option("--lambda", lambda, "calibration loss weight");
    app->add_option("--infer-mask-ratio", infer_mask_ratio, "patch mask ratio for diffusion features at meta time");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : RunConfig::load(config);
    if (data) c.data = *data;
    if (split) c.split = penet::parse_fold(*split);
    if (out) c.out = *out;
    if (il_ckpt) c.intrinsic_checkpoint = *il_ckpt;
    if (dl_ckpt) c.diffusion_checkpoint = *dl_ckpt;
    if (variant) c.variant = penet::parse_variant(*variant);
    if (n_way) c.n_way = *n_way;
    if (k_shot) c.k_shot = *k_shot;
    if (seed) c.seeds = {*seed};
    if (episodes) c.train_episodes = *episodes;
    if (test_episodes) c.test_episodes = *test_episodes;
    if (iterations) c.pam.iterations = *iterations;
    if (pam_variant) c.pam.variant = penet::parse_pam_variant(*pam_variant);
    if (lambda) c.lambda = *lambda;
    if (infer_mask_ratio) c.infer_mask_ratio = *infer_mask_ratio;
    c.validate();
    return c;
  }
};

std::string cell_name(const RunConfig& c) {
  return std::to_string(c.n_way) + "w" + std::to_string(c.k_shot) + "s";
}

void print_report(const std::string& label, const nlohmann::json& r) {
  std::printf("%-24s mIoU %.2f  (", label.c_str(), 100.0 * r.at("mean_iou").get<double>());
  bool first = true;
  for (const auto& s : r.at("per_seed")) {
    std::printf("%sseed %llu: %.2f", first ? "" : ", ", static_cast<unsigned long long>(s.at("seed").get<uint64_t>()),
                100.0 * s.at("mean_iou").get<double>());
    first = false;
  }
  std::printf(")\n");
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"Few-shot point-cloud segmentation with prototype expansion"};
  app.require_subcommand(1);

  // gen-data
  penet::DatasetOptions gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic scene corpus");
  gen_cmd->add_option("--out", gen_out, "output directory")->required();
  gen_cmd->add_option("--scenes", gen.scenes);
  gen_cmd->add_option("--classes", gen.classes);
  gen_cmd->add_option("--diversity", gen.diversity);
  gen_cmd->add_option("--seed", gen.seed);

  // pretrain-il
  std::string il_data, il_split = "S0", il_out;
  penet::ILTrainOptions il_opts;
  std::size_t il_points = 512;
  auto* il_cmd = app.add_subcommand("pretrain-il", "supervised pre-training of the intrinsic learner");
  il_cmd->add_option("--data", il_data)->required();
  il_cmd->add_option("--split", il_split, "test fold; the other fold supervises");
  il_cmd->add_option("--epochs", il_opts.epochs);
  il_cmd->add_option("--lr", il_opts.lr);
  il_cmd->add_option("--seed", il_opts.seed);
  il_cmd->add_option("--points", il_points, "points per block");
  il_cmd->add_option("--out", il_out)->required();

  // pretrain-dl
  std::string dl_data, dl_split = "S0", dl_out;
  penet::DLTrainOptions dl_opts;
  penet::DiffusionConfig dl_cfg;
  std::size_t dl_points = 512;
  auto* dl_cmd = app.add_subcommand("pretrain-dl", "diffusion pre-training of the generalizable learner");
  dl_cmd->add_option("--data", dl_data)->required();
  dl_cmd->add_option("--split", dl_split);
  dl_cmd->add_option("--mask-ratio", dl_cfg.mask_ratio);
  dl_cmd->add_option("--timesteps", dl_cfg.timesteps);
  dl_cmd->add_option("--epochs", dl_opts.epochs);
  dl_cmd->add_option("--lr", dl_opts.lr);
  dl_cmd->add_option("--seed", dl_opts.seed);
  dl_cmd->add_option("--points", dl_points, "points per block");
  dl_cmd->add_option("--out", dl_out)->required();

  RunFlags train_flags, eval_flags, ablate_flags, pam_flags, nway_flags;
  auto* train_cmd = app.add_subcommand("meta-train", "episodic training of the prototype modules");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--variant", train_flags.variant, "A-F");
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate meta-trained models on test episodes");
  eval_flags.attach(eval_cmd);
  eval_cmd->add_option("--variant", eval_flags.variant, "A-F");
  std::string report_path;
  eval_cmd->add_option("--report", report_path, "also write the report to this file");

  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate module ablations");
  ablate_flags.attach(ablate_cmd);
  std::string ablate_variants = "A,B,C,D,E,F";
  ablate_cmd->add_option("--variants", ablate_variants, "comma-separated subset of A-F");

  auto* pam_cmd = app.add_subcommand("sweep-pam", "block-structure and iteration-count sweep");
  pam_flags.attach(pam_cmd);

  auto* nway_cmd = app.add_subcommand("sweep-nway", "N-way sweep at several shot counts");
  nway_flags.attach(nway_cmd);
  nway_cmd->add_option("--variant", nway_flags.variant, "A-F");
  std::string n_values = "2,3,4,5,6", k_values = "1,5";
  nway_cmd->add_option("--n-values", n_values);
  nway_cmd->add_option("--k-values", k_values);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      gen.out_dir = gen_out;
      const auto m = penet::generate_dataset(gen);
      std::printf("wrote %zu scenes, %d classes to %s\n", m.scenes.size(), m.num_classes, gen_out.c_str());
      return 0;
    }
    if (*il_cmd) {
      const auto manifest = penet::SceneManifest::load(il_data);
      penet::BlockBankOptions blocks;
      blocks.points_per_block = il_points;
      blocks.seed = il_opts.seed;
      auto r = penet::pretrain_il(manifest, penet::parse_fold(il_split), penet::IntrinsicConfig{}, il_opts, blocks);
      penet::save_intrinsic(r.model, il_out,
                            {{"split", il_split}, {"loss_curve", r.loss_curve}, {"accuracy_curve", r.accuracy_curve}});
      for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
        std::printf("epoch %zu  loss %.4f  acc %.3f\n", e + 1, r.loss_curve[e], r.accuracy_curve[e]);
      }
      return 0;
    }
    if (*dl_cmd) {
      const auto manifest = penet::SceneManifest::load(dl_data);
      penet::BlockBankOptions blocks;
      blocks.points_per_block = dl_points;
      blocks.seed = dl_opts.seed;
      auto r = penet::pretrain_dl(manifest, penet::parse_fold(dl_split), dl_cfg, dl_opts, blocks);
      penet::save_diffusion(r.model, r.schedule, dl_out, {{"split", dl_split}, {"loss_curve", r.loss_curve}});
      for (std::size_t e = 0; e < r.loss_curve.size(); ++e) std::printf("epoch %zu  loss %.4f\n", e + 1, r.loss_curve[e]);
      return 0;
    }
    if (*train_cmd) {
      const auto cfg = train_flags.resolve();
      penet::Session s(cfg);
      for (auto seed : cfg.seeds) {
        auto m = s.meta_train(cfg, cfg.variant, seed);
        penet::save_trained(cfg, m);
        const auto n = m.log.total.size();
        double tail = 0;
        const std::size_t w = std::min<std::size_t>(n, 100);
        for (std::size_t i = n - w; i < n; ++i) tail += m.log.total[i];
        std::printf("variant %s seed %llu: %zu steps, mean loss of last %zu = %.4f\n", penet::variant_name(cfg.variant),
                    static_cast<unsigned long long>(seed), n, w, w ? tail / static_cast<double>(w) : 0.0);
      }
      return 0;
    }
    if (*eval_cmd) {
      const auto cfg = eval_flags.resolve();
      penet::Session s(cfg);
      auto report = penet::evaluate_saved(s, cfg, cfg.variant);
      penet::ResultsStore store(cfg.out);
      store.write(report, std::string("evaluate_") + penet::variant_name(cfg.variant) + "_" + cell_name(cfg));
      if (!report_path.empty()) std::ofstream(report_path) << report.dump(2) << '\n';
      print_report(std::string("variant ") + penet::variant_name(cfg.variant), report);
      return 0;
    }
    if (*ablate_cmd) {
      const auto cfg = ablate_flags.resolve();
      std::vector<penet::Variant> variants;
      std::stringstream ss(ablate_variants);
      std::string item;
      while (std::getline(ss, item, ',')) variants.push_back(penet::parse_variant(item));
      penet::Session s(cfg);
      penet::ResultsStore store(cfg.out);
      for (auto v : variants) {
        auto report = penet::train_and_evaluate(s, cfg, v, "ablate");
        store.write(report, std::string("ablate_") + penet::variant_name(v) + "_" + cell_name(cfg));
        print_report(std::string("variant ") + penet::variant_name(v), report);
      }
      return 0;
    }
    if (*pam_cmd) {
      const auto cfg = pam_flags.resolve();
      penet::Session s(cfg);
      penet::ResultsStore store(cfg.out);
      for (const auto& [label, report] : penet::pam_variant_sweep(s, cfg)) {
        store.write(report, "sweep_pam_" + label + "_" + cell_name(cfg));
        print_report(label, report);
      }
      return 0;
    }
    if (*nway_cmd) {
      const auto cfg = nway_flags.resolve();
      penet::Session s(cfg);
      penet::ResultsStore store(cfg.out);
      const auto reports = penet::nway_sweep(s, cfg, parse_int_list(n_values), parse_int_list(k_values));
      for (const auto& r : reports) {
        RunConfig cell = cfg;
        cell.n_way = r.at("n_way");
        cell.k_shot = r.at("k_shot");
        store.write(r, "sweep_nway_" + cell_name(cell));
        print_report(cell_name(cell), r);
      }
      penet::write_nway_csv(reports, cfg.out / "nway_sweep.csv");
      penet::write_nway_svg(reports, cfg.out / "nway_sweep.svg");
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
