#include "cnd/run_config.hpp"

#include <fstream>

#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::config {
namespace {

constexpr std::uint64_t kCorpusStream = 10;

bool compatible(const nlohmann::json& base, const nlohmann::json& value) {
  if (base.is_number_float()) return value.is_number();
  if (base.is_number_unsigned()) return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  if (base.is_number_integer()) return value.is_number_integer();
  return base.type() == value.type();
}

template <typename T>
T typed(const nlohmann::json& tree, const char* key) {
  try {
    return tree.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config section '") + key + "': " + e.what());
  }
}

}  // namespace

nlohmann::json default_tree() {
  nlohmann::json tree;
  tree["seed"] = std::uint64_t{0};

  nlohmann::json corpus = data::CorpusSpec{};
  corpus.erase("seed");
  corpus.erase("patch_size");
  tree["corpus"] = corpus;

  tree["encoder"] = encoder::EncoderConfig{};
  tree["contrastive"] = contrastive::ContrastiveConfig{};

  nlohmann::json diffusion = diffusion::DiffusionConfig{};
  diffusion["autoencoder"].erase("image_size");
  diffusion["unet"].erase("latent_size");
  diffusion["unet"].erase("in_channels");
  tree["diffusion"] = diffusion;

  tree["phase2"] = concepts::Phase2Config{};
  tree["classifier"] = eval::ClassifierConfig{};

  const EvaluationSettings evaluation;
  tree["evaluation"] = {{"ways", evaluation.ways},
                        {"trials", evaluation.trials},
                        {"faithfulness_per_class", evaluation.faithfulness_per_class}};

  nlohmann::json analysis = analysis::AnalysisConfig{};
  analysis.erase("seed");
  tree["analysis"] = analysis;

  tree["inputs"] = {{"run_dir", ""},   {"corpus", ""},    {"encoder", ""},   {"diffusion", ""},
                    {"condition", ""}, {"classifier", ""}, {"generated", ""}};
  return tree;
}

void merge_tree(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " '" + where + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      merge_tree(slot, value, path);
    } else if (!compatible(slot, value)) {
      throw ConfigError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got " +
                        std::string(value.type_name()));
    } else {
      slot = value;
    }
  }
}

void apply_override(nlohmann::json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json patch = value;
  std::size_t end = key.size();
  while (true) {
    const auto dot = key.rfind('.', end - 1);
    const auto start = dot == std::string::npos ? 0 : dot + 1;
    const auto part = key.substr(start, end - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    patch = nlohmann::json{{part, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  merge_tree(tree, patch);
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  auto tree = nlohmann::json::parse(in, nullptr, false);
  if (tree.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return tree;
}

RunConfig resolve(const nlohmann::json& input) {
  auto tree = default_tree();
  merge_tree(tree, input);

  RunConfig rc;
  rc.tree = tree;
  rc.seed = typed<std::uint64_t>(tree, "seed");

  rc.encoder = typed<encoder::EncoderConfig>(tree, "encoder");
  auto corpus = tree.at("corpus");
  corpus["seed"] = mix_seed(rc.seed, kCorpusStream);
  corpus["patch_size"] = rc.encoder.patch_size;
  rc.corpus = typed<data::CorpusSpec>(nlohmann::json{{"corpus", corpus}}, "corpus");

  rc.contrastive = typed<contrastive::ContrastiveConfig>(tree, "contrastive");

  auto diffusion = tree.at("diffusion");
  diffusion["autoencoder"]["image_size"] = rc.corpus.image_size;
  const auto ae = typed<diffusion::AutoencoderConfig>(diffusion, "autoencoder");
  diffusion["unet"]["latent_size"] = ae.latent_size();
  diffusion["unet"]["in_channels"] = ae.latent_channels;
  rc.diffusion = typed<diffusion::DiffusionConfig>(nlohmann::json{{"diffusion", diffusion}}, "diffusion");

  rc.phase2 = typed<concepts::Phase2Config>(tree, "phase2");
  rc.classifier = typed<eval::ClassifierConfig>(tree, "classifier");

  const auto& ev = tree.at("evaluation");
  rc.evaluation.ways = ev.at("ways").get<std::vector<std::int64_t>>();
  rc.evaluation.trials = ev.at("trials").get<std::int64_t>();
  rc.evaluation.faithfulness_per_class = ev.at("faithfulness_per_class").get<std::int64_t>();

  auto an = tree.at("analysis");
  an["seed"] = rc.seed;
  try {
    rc.analysis = an.get<analysis::AnalysisConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config section 'analysis': ") + e.what());
  }

  const auto& in = tree.at("inputs");
  rc.inputs = {in.at("run_dir").get<std::string>(),   in.at("corpus").get<std::string>(),
               in.at("encoder").get<std::string>(),   in.at("diffusion").get<std::string>(),
               in.at("condition").get<std::string>(), in.at("classifier").get<std::string>(),
               in.at("generated").get<std::string>()};

  rc.corpus.validate();
  rc.encoder.validate();
  rc.contrastive.validate();
  rc.diffusion.validate();
  rc.phase2.validate();
  rc.classifier.validate();
  rc.analysis.validate(rc.diffusion.timesteps);
  if (rc.evaluation.trials < 1) throw ConfigError("evaluation.trials must be positive");
  if (rc.evaluation.faithfulness_per_class < 0) throw ConfigError("evaluation.faithfulness_per_class must be >= 0");
  for (auto n : rc.evaluation.ways) {
    if (n < 2) throw ConfigError("evaluation.ways entries must be at least 2");
  }
  const auto blocks = rc.diffusion.unet.levels() * rc.diffusion.unet.num_res_blocks;
  for (const auto& l : rc.analysis.layers) {
    const auto limit = l.stage == diffusion::TapStage::Middle ? 1 : blocks;
    if (l.index < 0 || l.index >= limit) {
      throw ConfigError("analysis.layers: " + diffusion::to_string(l.stage) + " has no block " +
                        std::to_string(l.index));
    }
  }
  return rc;
}

RunConfig load(const std::filesystem::path& config_file, const std::vector<std::string>& overrides,
               const std::uint64_t* seed) {
  auto tree = default_tree();
  if (!config_file.empty()) merge_tree(tree, read_config_file(config_file));
  for (const auto& o : overrides) apply_override(tree, o);
  if (seed != nullptr) tree["seed"] = *seed;
  return resolve(tree);
}

}  // namespace cnd::config
