#include "penet/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "penet/errors.hpp"
#include "penet/rng.hpp"
#include "penet/scene.hpp"
#include "penet/scene_io.hpp"

namespace penet {

using nlohmann::json;

Fold parse_fold(const std::string& s) {
  if (s == "S0" || s == "s0" || s == "0") return Fold::S0;
  if (s == "S1" || s == "s1" || s == "1") return Fold::S1;
  throw InvalidArgument("unknown split '" + s + "' (expected S0 or S1)");
}

const char* fold_name(Fold f) { return f == Fold::S0 ? "S0" : "S1"; }

bool ClassSplit::disjoint() const {
  std::set<int> a(train_classes.begin(), train_classes.end());
  return std::none_of(test_classes.begin(), test_classes.end(),
                      [&](int c) { return a.count(c) > 0; });
}

ClassSplit SceneManifest::split(Fold test_fold) const {
  if (test_fold == Fold::S0) return {fold1, fold0};
  return {fold0, fold1};
}

std::vector<int> SceneManifest::role_classes(Fold test_fold, SplitRole role) const {
  auto s = split(test_fold);
  return role == SplitRole::Train ? s.train_classes : s.test_classes;
}

SceneManifest SceneManifest::load(const std::filesystem::path& path) {
  auto file = std::filesystem::is_directory(path) ? path / kFileName : path;
  std::ifstream in(file);
  if (!in) throw FormatError("manifest", "cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  SceneManifest m;
  m.root = file.parent_path();
  try {
    if (j.at("version").get<int>() != kVersion) throw FormatError("version", "unsupported");
    m.seed = j.at("seed").get<uint64_t>();
    m.num_classes = j.at("num_classes").get<int>();
    m.diversity = j.at("diversity").get<double>();
    m.room_size = j.at("room_size").get<double>();
    m.fold0 = j.at("split").at("S0").get<std::vector<int>>();
    m.fold1 = j.at("split").at("S1").get<std::vector<int>>();
    for (const auto& s : j.at("scenes")) {
      m.scenes.push_back({s.at("file").get<std::string>(), s.at("classes").get<std::vector<int>>(),
                          s.at("num_points").get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  m.validate(false);
  return m;
}

void SceneManifest::save() const {
  json j;
  j["version"] = kVersion;
  j["seed"] = seed;
  j["num_classes"] = num_classes;
  j["diversity"] = diversity;
  j["room_size"] = room_size;
  j["split"] = {{"S0", fold0}, {"S1", fold1}};
  j["scenes"] = json::array();
  for (const auto& s : scenes) {
    j["scenes"].push_back({{"file", s.file}, {"classes", s.classes}, {"num_points", s.num_points}});
  }
  std::ofstream out(root / kFileName);
  if (!out) throw FormatError("manifest", "cannot write " + (root / kFileName).string());
  out << j.dump(2) << '\n';
}

void SceneManifest::validate(bool deep) const {
  if (!split(Fold::S0).disjoint()) throw FormatError("split", "S0 and S1 overlap");
  for (int c : fold0)
    if (c < 0 || c >= num_classes) throw FormatError("split", "class id out of range");
  for (int c : fold1)
    if (c < 0 || c >= num_classes) throw FormatError("split", "class id out of range");
  if (!deep) return;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto path = scene_path(i);
    if (!std::filesystem::exists(path)) throw FormatError("scenes", "missing " + path.string());
    const auto pc = read_scene(path);
    auto inv = label_inventory(pc);
    auto expected = scenes[i].classes;
    std::sort(expected.begin(), expected.end());
    if (inv != std::vector<int32_t>(expected.begin(), expected.end())) {
      throw FormatError("scenes", "class inventory mismatch in " + scenes[i].file);
    }
    if (pc.size() != scenes[i].num_points) {
      throw FormatError("scenes", "point count mismatch in " + scenes[i].file);
    }
  }
}

SceneManifest generate_dataset(const DatasetOptions& opts) {
  if (opts.classes < 4) throw InvalidArgument("gen-data needs at least 4 classes (2 per split)");
  if (opts.scenes < 1) throw InvalidArgument("gen-data needs at least one scene");
  std::filesystem::create_directories(opts.out_dir);

  SceneManifest m;
  m.root = opts.out_dir;
  m.seed = opts.seed;
  m.num_classes = opts.classes;
  m.diversity = opts.diversity;
  m.room_size = opts.room_size;
  const int half = opts.classes / 2;
  for (int c = 0; c < opts.classes; ++c) (c < half ? m.fold0 : m.fold1).push_back(c);

  Rng rng(derive_seed(opts.seed, 0));
  for (int s = 0; s < opts.scenes; ++s) {
    // Each scene has a dominant fold so that blocks holding many classes of
    // one split exist, plus an occasional object from the other fold.
    const auto& theme = (rng() % 2 == 0) ? m.fold0 : m.fold1;
    const auto& other = (&theme == &m.fold0) ? m.fold1 : m.fold0;
    const int max_k = static_cast<int>(theme.size());
    const int k = 2 + static_cast<int>(rng() % static_cast<uint64_t>(std::max(1, max_k - 1)));
    std::vector<int> pool = theme;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<int> classes(pool.begin(), pool.begin() + std::min(k, max_k));
    if (rng() % 3 == 0) classes.push_back(other[rng() % other.size()]);
    std::sort(classes.begin(), classes.end());

    SceneSpec spec = make_scene_spec(classes, opts.diversity);
    spec.room_size = opts.room_size;
    spec.min_points = opts.min_points;
    const auto pc = generate_scene(spec, derive_seed(opts.seed, 1000 + s));

    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d.pcs", s);
    write_scene(pc, m.root / name);
    m.scenes.push_back({name, classes, pc.size()});
  }
  m.save();
  return m;
}

}  // namespace penet
