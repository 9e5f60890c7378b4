#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "penet/config.hpp"
#include "penet/metrics.hpp"
#include "penet/pipeline.hpp"

namespace penet {

struct TrainLog {
  std::vector<double> total;
  std::vector<double> seg;
  std::vector<double> cal;
  std::vector<double> lr;
};

struct TrainedModel {
  Variant variant = Variant::F;
  ModuleSet modules;
  uint64_t seed = 0;
  PrototypeAssimilation pam{nullptr};  // null for variants without PAM
  TrainLog log;
};

/// Episode-space labels for the query of `ep`.
using Predictor = std::function<std::vector<int32_t>(const Episode& ep)>;

struct SeedResult {
  uint64_t seed = 0;
  IoUResult iou;
};

/// Shared state of one dataset: the manifest, the frozen learners and the
/// train/test block banks with their feature caches. Per-run settings
/// (ways, shots, PAM, loss, episode counts) come from the RunConfig passed to
/// each call; block and checkpoint settings come from the session config.
class Session {
 public:
  explicit Session(RunConfig cfg);

  const RunConfig& config() const noexcept { return cfg_; }
  const SceneManifest& manifest() const noexcept { return manifest_; }
  Learners& learners();
  BlockBank& train_bank();
  BlockBank& test_bank();
  FeatureCache& train_cache();
  FeatureCache& test_cache();
  const std::vector<int>& test_classes() const noexcept { return test_classes_; }
  /// Loads the diffusion learner on first use.
  void ensure_dl();

  /// Episodic training of the PAM parameters for one seed; learners stay frozen.
  TrainedModel meta_train(const RunConfig& run, Variant v, uint64_t seed);
  SeedResult evaluate(const RunConfig& run, TrainedModel& model);
  /// Global confusion over the test classes plus background across the run's
  /// test episodes. Throws InvalidState when the test split is empty.
  SeedResult evaluate_predictor(const RunConfig& run, const Predictor& predict, uint64_t seed = 0);

 private:
  RunConfig cfg_;
  SceneManifest manifest_;
  std::vector<int> train_classes_, test_classes_;
  std::unique_ptr<Learners> learners_;
  std::unique_ptr<BlockBank> train_bank_, test_bank_;
  std::unique_ptr<FeatureCache> train_cache_, test_cache_;
};

/// Query labels predicted by a trained model.
std::vector<int32_t> predict_episode(Session& s, const RunConfig& run, TrainedModel& model, const Episode& ep);

/// Serializable report. `wall_clock_seconds` is the only field that varies
/// between identical runs.
nlohmann::json make_report(const std::string& kind, const RunConfig& run, Variant v,
                           const std::vector<SeedResult>& seeds, const std::vector<int>& test_classes,
                           const nlohmann::json& extra = nlohmann::json::object());
constexpr int kReportSchemaVersion = 1;

/// Copy of `report` without the wall-clock field, for byte comparisons.
nlohmann::json strip_wall_clock(nlohmann::json report);

/// Trains (one model per seed) and evaluates `v` under `run`.
nlohmann::json train_and_evaluate(Session& s, const RunConfig& run, Variant v, const std::string& kind,
                                  std::vector<TrainedModel>* models = nullptr);

/// One report per requested variant, in the given order.
std::vector<std::pair<Variant, nlohmann::json>> ablate(Session& s, const RunConfig& run,
                                                       const std::vector<Variant>& variants);

/// Three block-structure reports (pushpull, push_only, pull_only at the run's
/// iteration count) followed by three iteration reports (M = 1, 2, 3).
std::vector<std::pair<std::string, nlohmann::json>> pam_variant_sweep(Session& s, const RunConfig& run);

/// One report per (N, K). Throws InvalidArgument if an N exceeds the test classes.
std::vector<nlohmann::json> nway_sweep(Session& s, const RunConfig& run, const std::vector<int>& n_values,
                                       const std::vector<int>& k_values);

void write_nway_csv(const std::vector<nlohmann::json>& reports, const std::filesystem::path& path);
void write_nway_svg(const std::vector<nlohmann::json>& reports, const std::filesystem::path& path);

/// One JSON file per report under `root`/runs plus an append-only
/// `root`/index.jsonl, appended under an exclusive file lock.
class ResultsStore {
 public:
  explicit ResultsStore(std::filesystem::path root);

  std::filesystem::path write(const nlohmann::json& report, const std::string& name);
  std::vector<nlohmann::json> index() const;
  const std::filesystem::path& root() const noexcept { return root_; }

 private:
  std::filesystem::path root_;
};

/// Path of the PAM checkpoint a meta-train run writes for (variant, seed).
std::filesystem::path pam_checkpoint_path(const RunConfig& run, Variant v, uint64_t seed);

/// Writes the model's PAM checkpoint (if any) and its training log next to it.
void save_trained(const RunConfig& run, const TrainedModel& model);
/// Rebuilds the per-seed models of `v` from the checkpoints meta-train wrote.
/// Throws FormatError if a required checkpoint is missing.
std::vector<TrainedModel> load_trained(const RunConfig& run, Variant v);
/// Evaluates previously trained models (see load_trained).
nlohmann::json evaluate_saved(Session& s, const RunConfig& run, Variant v);

}  // namespace penet
