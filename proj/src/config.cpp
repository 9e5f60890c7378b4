#include "penet/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "penet/digest.hpp"
#include "penet/errors.hpp"

namespace penet {

Variant parse_variant(const std::string& s) {
  static const char* names[] = {"A", "B", "C", "D", "E", "F"};
  for (int i = 0; i < 6; ++i)
    if (s == names[i]) return static_cast<Variant>(i);
  throw InvalidArgument("unknown variant '" + s + "' (expected one of A-F)");
}

const char* variant_name(Variant v) {
  static const char* names[] = {"A", "B", "C", "D", "E", "F"};
  return names[static_cast<int>(v)];
}

nlohmann::json ModuleSet::to_json() const { return {{"il", il}, {"dl", dl}, {"pam", pam}, {"pcm", pcm}}; }

ModuleSet modules_for(Variant v) {
  switch (v) {
    case Variant::A: return {true, false, true, true};
    case Variant::B: return {true, true, false, true};
    case Variant::C: return {true, true, true, false};
    case Variant::D: return {true, false, false, true};
    case Variant::E: return {true, false, true, false};
    case Variant::F: return {true, true, true, true};
  }
  throw InvalidArgument("unknown variant");
}

nlohmann::json RunConfig::to_json() const {
  return {
      {"data", data.string()},
      {"split", fold_name(split)},
      {"n_way", n_way},
      {"k_shot", k_shot},
      {"episodes", {{"train", train_episodes}, {"test", test_episodes}}},
      {"seeds", seeds},
      {"eval_seed", eval_seed},
      {"optimizer", {{"lr", lr}, {"decay", decay}, {"decay_interval", decay_interval}}},
      {"pam", pam.to_json()},
      {"loss", {{"lambda", lambda}, {"temperature", temperature}}},
      {"prototypes", {{"seeds", proto_seeds}}},
      {"infer_mask_ratio", infer_mask_ratio},
      {"blocks",
       {{"points_per_block", points_per_block},
        {"block_size", block_size},
        {"min_class_points", min_class_points},
        {"train_copies", train_copies},
        {"train_augment", train_augment}}},
      {"checkpoints", {{"intrinsic", intrinsic_checkpoint.string()}, {"diffusion", diffusion_checkpoint.string()}}},
      {"out", out.string()},
      {"variant", variant_name(variant)},
  };
}

namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError(where.empty() ? "config" : where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw FormatError(where + key, "unknown config key");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + key, e.what());
  }
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  check_keys(j,
             {"data", "split", "n_way", "k_shot", "episodes", "seeds", "eval_seed", "optimizer", "pam", "loss",
              "prototypes", "infer_mask_ratio", "blocks", "checkpoints", "out", "variant"},
             "");
  if (j.contains("data")) c.data = j.at("data").get<std::string>();
  if (j.contains("split")) c.split = parse_fold(j.at("split").get<std::string>());
  read(j, "n_way", c.n_way, "");
  read(j, "k_shot", c.k_shot, "");
  read(j, "seeds", c.seeds, "");
  read(j, "eval_seed", c.eval_seed, "");
  read(j, "infer_mask_ratio", c.infer_mask_ratio, "");
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("episodes")) {
    const auto& e = j.at("episodes");
    check_keys(e, {"train", "test"}, "episodes.");
    read(e, "train", c.train_episodes, "episodes.");
    read(e, "test", c.test_episodes, "episodes.");
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_keys(o, {"lr", "decay", "decay_interval"}, "optimizer.");
    read(o, "lr", c.lr, "optimizer.");
    read(o, "decay", c.decay, "optimizer.");
    read(o, "decay_interval", c.decay_interval, "optimizer.");
  }
  if (j.contains("pam")) {
    const auto& p = j.at("pam");
    check_keys(p, {"dim", "iterations", "variant", "share_weights", "qk_init"}, "pam.");
    read(p, "dim", c.pam.dim, "pam.");
    read(p, "iterations", c.pam.iterations, "pam.");
    if (p.contains("variant")) c.pam.variant = parse_pam_variant(p.at("variant").get<std::string>());
    read(p, "share_weights", c.pam.share_weights, "pam.");
    read(p, "qk_init", c.pam.qk_init, "pam.");
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, {"lambda", "temperature"}, "loss.");
    read(l, "lambda", c.lambda, "loss.");
    read(l, "temperature", c.temperature, "loss.");
  }
  if (j.contains("prototypes")) {
    const auto& p = j.at("prototypes");
    check_keys(p, {"seeds"}, "prototypes.");
    read(p, "seeds", c.proto_seeds, "prototypes.");
  }
  if (j.contains("blocks")) {
    const auto& b = j.at("blocks");
    check_keys(b, {"points_per_block", "block_size", "min_class_points", "train_copies", "train_augment"},
               "blocks.");
    read(b, "points_per_block", c.points_per_block, "blocks.");
    read(b, "block_size", c.block_size, "blocks.");
    read(b, "min_class_points", c.min_class_points, "blocks.");
    read(b, "train_copies", c.train_copies, "blocks.");
    read(b, "train_augment", c.train_augment, "blocks.");
  }
  if (j.contains("checkpoints")) {
    const auto& k = j.at("checkpoints");
    check_keys(k, {"intrinsic", "diffusion"}, "checkpoints.");
    if (k.contains("intrinsic")) c.intrinsic_checkpoint = k.at("intrinsic").get<std::string>();
    if (k.contains("diffusion")) c.diffusion_checkpoint = k.at("diffusion").get<std::string>();
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config", "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config", e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("config", "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

void RunConfig::validate() const {
  if (n_way < 1) throw InvalidArgument("n_way must be >= 1");
  if (k_shot < 1) throw InvalidArgument("k_shot must be >= 1");
  if (train_episodes < 0 || test_episodes < 1) throw InvalidArgument("episode counts must be train >= 0, test >= 1");
  if (seeds.empty()) throw InvalidArgument("at least one seed is required");
  if (!(lr > 0) || !(decay > 0) || decay_interval < 1) throw InvalidArgument("invalid optimizer settings");
  if (!(lambda >= 0)) throw InvalidArgument("loss.lambda must be >= 0");
  if (proto_seeds < 1) throw InvalidArgument("prototypes.seeds must be >= 1");
  if (!std::filesystem::exists(data)) throw InvalidArgument("data directory " + data.string() + " does not exist");
  if (!std::filesystem::exists(intrinsic_checkpoint)) {
    throw FormatError("checkpoints.intrinsic", "missing checkpoint " + intrinsic_checkpoint.string());
  }
  if (modules_for(variant).dl && !std::filesystem::exists(diffusion_checkpoint)) {
    throw FormatError("checkpoints.diffusion", "missing checkpoint " + diffusion_checkpoint.string());
  }
}

std::string RunConfig::digest() const { return sha256_hex(to_json().dump()); }

double lr_at(const RunConfig& cfg, long step) {
  return cfg.lr * std::pow(cfg.decay, static_cast<double>(step / cfg.decay_interval));
}

}  // namespace penet
