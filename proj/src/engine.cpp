#include "penet/engine.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "penet/errors.hpp"
#include "penet/losses.hpp"

namespace penet {

Session::Session(RunConfig cfg) : cfg_(std::move(cfg)) {
  manifest_ = SceneManifest::load(cfg_.data);
  train_classes_ = manifest_.role_classes(cfg_.split, SplitRole::Train);
  test_classes_ = manifest_.role_classes(cfg_.split, SplitRole::Test);
}

Learners& Session::learners() {
  if (!learners_) learners_ = std::make_unique<Learners>(Learners::load(cfg_, false));
  return *learners_;
}

void Session::ensure_dl() {
  auto& l = learners();
  if (l.dl) return;
  auto with_dl = Learners::load(cfg_, true);
  l.dl = with_dl.dl;
  l.dl_digest = with_dl.dl_digest;
}

BlockBank& Session::train_bank() {
  if (!train_bank_) {
    BlockBankOptions o;
    o.block_size = cfg_.block_size;
    o.points_per_block = cfg_.points_per_block;
    o.min_class_points = cfg_.min_class_points;
    o.copies_per_cell = cfg_.train_copies;
    o.augment = cfg_.train_augment;
    o.seed = derive_seed(manifest_.seed, 101);
    train_bank_ = std::make_unique<BlockBank>(manifest_, train_classes_, o);
  }
  return *train_bank_;
}

BlockBank& Session::test_bank() {
  if (!test_bank_) {
    BlockBankOptions o;
    o.block_size = cfg_.block_size;
    o.points_per_block = cfg_.points_per_block;
    o.min_class_points = cfg_.min_class_points;
    o.seed = derive_seed(manifest_.seed, 202);
    test_bank_ = std::make_unique<BlockBank>(manifest_, test_classes_, o);
  }
  return *test_bank_;
}

FeatureCache& Session::train_cache() {
  if (!train_cache_) train_cache_ = std::make_unique<FeatureCache>(train_bank(), learners(), cfg_.infer_mask_ratio);
  return *train_cache_;
}

FeatureCache& Session::test_cache() {
  if (!test_cache_) test_cache_ = std::make_unique<FeatureCache>(test_bank(), learners(), cfg_.infer_mask_ratio);
  return *test_cache_;
}

TrainedModel Session::meta_train(const RunConfig& run, Variant v, uint64_t seed) {
  TrainedModel m;
  m.variant = v;
  m.modules = modules_for(v);
  m.seed = seed;
  if (m.modules.dl) ensure_dl();
  if (!m.modules.pam) return m;

  m.pam = make_pam(run.pam, derive_seed(seed, 0x5eed));
  auto params = m.pam->parameters();
  torch::optim::Adam optim(params, torch::optim::AdamOptions(run.lr));
  auto& cache = train_cache();
  const uint64_t stream = derive_seed(seed, 3);
  for (long step = 0; step < run.train_episodes; ++step) {
    const double lr = lr_at(run, step);
    for (auto& g : optim.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
    const Episode ep = sample_episode(train_bank(), run.n_way, run.k_shot, derive_seed(stream, static_cast<uint64_t>(step)));
    const auto inputs = prepare_episode(ep, cache, m.modules, run.proto_seeds);
    auto out = run_pipeline(inputs, &m.pam, m.modules, run.lambda, run.temperature);
    const double total = out.total.item<double>();
    if (!std::isfinite(total)) throw TrainingError(step, "meta_train: non-finite loss");
    optim.zero_grad();
    out.total.backward();
    optim.step();
    m.log.total.push_back(total);
    m.log.seg.push_back(out.seg.item<double>());
    m.log.cal.push_back(out.cal.item<double>());
    m.log.lr.push_back(lr);
  }
  return m;
}

std::vector<int32_t> predict_episode(Session& s, const RunConfig& run, TrainedModel& model, const Episode& ep) {
  torch::NoGradGuard guard;
  const auto inputs = prepare_episode(ep, s.test_cache(), model.modules, run.proto_seeds);
  auto out = run_pipeline(inputs, model.pam ? &model.pam : nullptr, model.modules, run.lambda, run.temperature);
  return row_argmax(out.probs);
}

SeedResult Session::evaluate(const RunConfig& run, TrainedModel& model) {
  if (model.modules.dl) ensure_dl();
  return evaluate_predictor(
      run, [&](const Episode& ep) { return predict_episode(*this, run, model, ep); }, model.seed);
}

SeedResult Session::evaluate_predictor(const RunConfig& run, const Predictor& predict, uint64_t seed) {
  if (test_classes_.empty()) throw InvalidState("evaluate: the test split has no classes");
  const int bg = static_cast<int>(test_classes_.size());
  ConfusionMatrix cm(bg + 1);
  for (int e = 0; e < run.test_episodes; ++e) {
    const Episode ep = sample_episode(test_bank(), run.n_way, run.k_shot, derive_seed(run.eval_seed, static_cast<uint64_t>(e)));
    const auto pred = predict(ep);
    if (pred.size() != ep.query_labels.size()) throw InvalidState("predictor returned the wrong label count");
    std::vector<int> to_global(static_cast<std::size_t>(ep.n_way) + 1, bg);
    for (int c = 0; c < ep.n_way; ++c) {
      const auto it = std::find(test_classes_.begin(), test_classes_.end(), ep.class_map[static_cast<std::size_t>(c)]);
      to_global[static_cast<std::size_t>(c)] = static_cast<int>(it - test_classes_.begin());
    }
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if (pred[p] < 0 || pred[p] > ep.n_way) throw InvalidState("predictor emitted an out-of-range label");
      cm.add(to_global[static_cast<std::size_t>(ep.query_labels[p])], to_global[static_cast<std::size_t>(pred[p])]);
    }
  }
  return {seed, miou(cm)};
}

nlohmann::json make_report(const std::string& kind, const RunConfig& run, Variant v,
                           const std::vector<SeedResult>& seeds, const std::vector<int>& test_classes,
                           const nlohmann::json& extra) {
  RunConfig keyed = run;
  keyed.variant = v;
  nlohmann::json per_seed = nlohmann::json::array();
  std::vector<double> sums(test_classes.size(), 0.0);
  std::vector<int> counts(test_classes.size(), 0);
  double mean = 0;
  std::vector<uint64_t> seed_ids;
  for (const auto& s : seeds) {
    nlohmann::json pc = nlohmann::json::object();
    for (std::size_t c = 0; c < test_classes.size(); ++c) {
      const auto& v_c = s.iou.per_class.at(c);
      pc[std::to_string(test_classes[c])] = v_c ? nlohmann::json(*v_c) : nlohmann::json(nullptr);
      if (v_c) {
        sums[c] += *v_c;
        ++counts[c];
      }
    }
    per_seed.push_back({{"seed", s.seed}, {"mean_iou", s.iou.mean}, {"per_class", pc}});
    mean += s.iou.mean;
    seed_ids.push_back(s.seed);
  }
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t c = 0; c < test_classes.size(); ++c) {
    per_class[std::to_string(test_classes[c])] =
        counts[c] ? nlohmann::json(sums[c] / counts[c]) : nlohmann::json(nullptr);
  }
  nlohmann::json r = {
      {"schema_version", kReportSchemaVersion},
      {"kind", kind},
      {"variant", variant_name(v)},
      {"modules", modules_for(v).to_json()},
      {"n_way", run.n_way},
      {"k_shot", run.k_shot},
      {"split", fold_name(run.split)},
      {"episodes", {{"train", run.train_episodes}, {"test", run.test_episodes}}},
      {"seeds", seed_ids},
      {"eval_seed", run.eval_seed},
      {"pam", run.pam.to_json()},
      {"loss", {{"lambda", modules_for(v).pcm ? run.lambda : 0.0}, {"temperature", run.temperature}}},
      {"test_classes", test_classes},
      {"per_seed", per_seed},
      {"per_class", per_class},
      {"mean_iou", seeds.empty() ? 0.0 : mean / static_cast<double>(seeds.size())},
      {"config_digest", keyed.digest()},
      {"wall_clock_seconds", 0.0},
  };
  for (const auto& [k, val] : extra.items()) r[k] = val;
  return r;
}

nlohmann::json strip_wall_clock(nlohmann::json report) {
  report.erase("wall_clock_seconds");
  return report;
}

nlohmann::json train_and_evaluate(Session& s, const RunConfig& run, Variant v, const std::string& kind,
                                  std::vector<TrainedModel>* models) {
  const auto start = std::chrono::steady_clock::now();
  const long il0 = s.train_cache().intrinsic_requests() + s.test_cache().intrinsic_requests();
  const long dl0 = s.train_cache().diffusion_requests() + s.test_cache().diffusion_requests();
  std::vector<SeedResult> results;
  std::vector<std::string> pam_digests;
  for (auto seed : run.seeds) {
    auto m = s.meta_train(run, v, seed);
    results.push_back(s.evaluate(run, m));
    if (models) models->push_back(std::move(m));
  }
  const long il1 = s.train_cache().intrinsic_requests() + s.test_cache().intrinsic_requests();
  const long dl1 = s.train_cache().diffusion_requests() + s.test_cache().diffusion_requests();
  auto& l = s.learners();
  nlohmann::json extra = {
      {"feature_requests", {{"intrinsic", il1 - il0}, {"diffusion", dl1 - dl0}}},
      {"learner_digests", {{"intrinsic", l.il_digest}, {"diffusion", modules_for(v).dl ? l.dl_digest : ""}}},
  };
  auto report = make_report(kind, run, v, results, s.test_classes(), extra);
  report["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<std::pair<Variant, nlohmann::json>> ablate(Session& s, const RunConfig& run,
                                                       const std::vector<Variant>& variants) {
  std::vector<std::pair<Variant, nlohmann::json>> out;
  for (auto v : variants) out.emplace_back(v, train_and_evaluate(s, run, v, "ablate"));
  return out;
}

std::vector<std::pair<std::string, nlohmann::json>> pam_variant_sweep(Session& s, const RunConfig& run) {
  std::map<std::pair<PamVariant, int>, nlohmann::json> done;
  auto cell = [&](PamVariant pv, int m, const std::string& group) {
    const auto key = std::make_pair(pv, m);
    if (!done.count(key)) {
      RunConfig r = run;
      r.pam.variant = pv;
      r.pam.iterations = m;
      done[key] = train_and_evaluate(s, r, Variant::F, "sweep-pam");
    }
    auto report = done[key];
    report["sweep"] = {{"group", group}, {"pam_variant", pam_variant_name(pv)}, {"iterations", m}};
    return report;
  };
  std::vector<std::pair<std::string, nlohmann::json>> out;
  for (auto pv : {PamVariant::PushPull, PamVariant::PushOnly, PamVariant::PullOnly}) {
    out.emplace_back(std::string(pam_variant_name(pv)) + "_M" + std::to_string(run.pam.iterations),
                     cell(pv, run.pam.iterations, "structure"));
  }
  for (int m : {1, 2, 3}) {
    out.emplace_back("iterations_M" + std::to_string(m), cell(PamVariant::PushPull, m, "iterations"));
  }
  return out;
}

std::vector<nlohmann::json> nway_sweep(Session& s, const RunConfig& run, const std::vector<int>& n_values,
                                       const std::vector<int>& k_values) {
  const int available = static_cast<int>(s.test_classes().size());
  for (int n : n_values) {
    if (n < 1 || n > available) {
      throw InvalidArgument("N=" + std::to_string(n) + " exceeds the " + std::to_string(available) +
                            " classes of the test split");
    }
  }
  std::vector<nlohmann::json> out;
  for (int k : k_values) {
    for (int n : n_values) {
      RunConfig r = run;
      r.n_way = n;
      r.k_shot = k;
      out.push_back(train_and_evaluate(s, r, run.variant, "sweep-nway"));
    }
  }
  return out;
}

void write_nway_csv(const std::vector<nlohmann::json>& reports, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << "n_way,k_shot,mean_iou\n";
  for (const auto& r : reports) {
    out << r.at("n_way").get<int>() << ',' << r.at("k_shot").get<int>() << ',' << r.at("mean_iou").get<double>()
        << '\n';
  }
}

void write_nway_svg(const std::vector<nlohmann::json>& reports, const std::filesystem::path& path) {
  std::map<int, std::vector<std::pair<int, double>>> series;
  int n_min = 1 << 30, n_max = 0;
  for (const auto& r : reports) {
    const int n = r.at("n_way");
    series[r.at("k_shot").get<int>()].emplace_back(n, 100.0 * r.at("mean_iou").get<double>());
    n_min = std::min(n_min, n);
    n_max = std::max(n_max, n);
  }
  const double w = 480, h = 320, left = 50, right = 20, top = 20, bottom = 40;
  auto x_of = [&](int n) {
    return n_max == n_min ? left + (w - left - right) / 2
                          : left + (w - left - right) * (n - n_min) / static_cast<double>(n_max - n_min);
  };
  auto y_of = [&](double v) { return top + (h - top - bottom) * (1.0 - v / 100.0); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
      << "\" stroke=\"black\"/>\n";
  for (int v = 0; v <= 100; v += 25) {
    svg << "<text x=\"" << left - 6 << "\" y=\"" << y_of(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << v
        << "</text>\n";
  }
  for (int n = n_min; n <= n_max && n_max > 0; ++n) {
    svg << "<text x=\"" << x_of(n) << "\" y=\"" << h - bottom + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
        << n << "</text>\n";
  }
  svg << "<text x=\"" << (w + left) / 2 << "\" y=\"" << h - 6 << "\" font-size=\"12\" text-anchor=\"middle\">N-way</text>\n";
  svg << "<text x=\"14\" y=\"" << (h - bottom) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
      << (h - bottom) / 2 << ")\" text-anchor=\"middle\">mIoU (%)</text>\n";
  int idx = 0;
  for (auto& [k, pts] : series) {
    std::sort(pts.begin(), pts.end());
    const char* color = colors[idx % 4];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [n, v] : pts) svg << x_of(n) << ',' << y_of(v) << ' ';
    svg << "\"/>\n";
    for (const auto& [n, v] : pts) {
      svg << "<circle cx=\"" << x_of(n) << "\" cy=\"" << y_of(v) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    svg << "<text x=\"" << w - right - 60 << "\" y=\"" << top + 14 * (idx + 1) << "\" font-size=\"11\" fill=\""
        << color << "\">K=" << k << "</text>\n";
    ++idx;
  }
  svg << "</svg>\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << svg.str();
}

ResultsStore::ResultsStore(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_ / "runs");
}

std::filesystem::path ResultsStore::write(const nlohmann::json& report, const std::string& name) {
  std::string safe;
  for (char c : name) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '_';
  const auto file = root_ / "runs" / (safe + ".json");
  {
    std::ofstream out(file);
    if (!out) throw InvalidArgument("cannot write " + file.string());
    out << report.dump(2) << '\n';
  }
  nlohmann::json entry = {{"file", std::filesystem::relative(file, root_).string()},
                          {"kind", report.value("kind", "")},
                          {"variant", report.value("variant", "")},
                          {"n_way", report.value("n_way", 0)},
                          {"k_shot", report.value("k_shot", 0)},
                          {"mean_iou", report.value("mean_iou", 0.0)},
                          {"config_digest", report.value("config_digest", "")}};
  const std::string line = entry.dump() + "\n";
  const auto index = (root_ / "index.jsonl").string();
  const int fd = ::open(index.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw InvalidArgument("cannot open " + index);
  ::flock(fd, LOCK_EX);
  const auto written = ::write(fd, line.data(), line.size());
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (written != static_cast<ssize_t>(line.size())) throw InvalidState("short write to " + index);
  return file;
}

std::vector<nlohmann::json> ResultsStore::index() const {
  std::vector<nlohmann::json> out;
  std::ifstream in(root_ / "index.jsonl");
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

std::filesystem::path pam_checkpoint_path(const RunConfig& run, Variant v, uint64_t seed) {
  return run.out / "checkpoints" /
         ("pam_" + std::string(variant_name(v)) + "_" + std::to_string(run.n_way) + "w" +
          std::to_string(run.k_shot) + "s_seed" + std::to_string(seed) + ".pnck");
}

void save_trained(const RunConfig& run, const TrainedModel& model) {
  const auto path = pam_checkpoint_path(run, model.variant, model.seed);
  std::filesystem::create_directories(path.parent_path());
  nlohmann::json log = {{"variant", variant_name(model.variant)},
                        {"seed", model.seed},
                        {"modules", model.modules.to_json()},
                        {"total", model.log.total},
                        {"seg", model.log.seg},
                        {"cal", model.log.cal},
                        {"lr", model.log.lr}};
  auto log_path = path;
  log_path.replace_extension(".log.json");
  std::ofstream(log_path) << log.dump() << '\n';
  if (model.pam) {
    auto pam = model.pam;
    save_pam(pam, path, {{"variant", variant_name(model.variant)}, {"seed", model.seed}});
  }
}

std::vector<TrainedModel> load_trained(const RunConfig& run, Variant v) {
  std::vector<TrainedModel> out;
  for (auto seed : run.seeds) {
    TrainedModel m;
    m.variant = v;
    m.modules = modules_for(v);
    m.seed = seed;
    if (m.modules.pam) {
      const auto path = pam_checkpoint_path(run, v, seed);
      if (!std::filesystem::exists(path)) {
        throw FormatError("pam_checkpoint", "missing " + path.string() + "; run meta-train first");
      }
      m.pam = load_pam(path);
    }
    out.push_back(std::move(m));
  }
  return out;
}

nlohmann::json evaluate_saved(Session& s, const RunConfig& run, Variant v) {
  const auto start = std::chrono::steady_clock::now();
  auto models = load_trained(run, v);
  std::vector<SeedResult> results;
  const long il0 = s.test_cache().intrinsic_requests();
  const long dl0 = s.test_cache().diffusion_requests();
  for (auto& m : models) results.push_back(s.evaluate(run, m));
  auto& l = s.learners();
  nlohmann::json extra = {
      {"feature_requests",
       {{"intrinsic", s.test_cache().intrinsic_requests() - il0},
        {"diffusion", s.test_cache().diffusion_requests() - dl0}}},
      {"learner_digests", {{"intrinsic", l.il_digest}, {"diffusion", modules_for(v).dl ? l.dl_digest : ""}}},
  };
  auto report = make_report("evaluate", run, v, results, s.test_classes(), extra);
  report["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace penet
