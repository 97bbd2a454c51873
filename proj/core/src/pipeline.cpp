#include "cnd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "cnd/checkpoint.hpp"
#include "cnd/errors.hpp"
#include "cnd/image_io.hpp"
#include "cnd/rng.hpp"

namespace cnd::pipeline {
namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<Stage, std::string>>& stage_table() {
  static const std::vector<std::pair<Stage, std::string>> table = {
      {Stage::GenData, "gen-data"},   {Stage::Pretrain, "pretrain"}, {Stage::TrainDiffusion, "train-diffusion"},
      {Stage::Finetune, "finetune"},  {Stage::Generate, "generate"}, {Stage::Evaluate, "evaluate"},
      {Stage::Analyze, "analyze"},    {Stage::All, "all"}};
  return table;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(8) << v;
  return s.str();
}

void write_series_csv(const fs::path& path, const std::string& header, const std::vector<double>& values,
                      std::int64_t stride) {
  std::ostringstream s;
  s << header << '\n';
  for (std::size_t i = 0; i < values.size(); ++i) {
    s << static_cast<std::int64_t>(i + 1) * stride << ',' << format_double(values[i]) << '\n';
  }
  write_text(path, s.str());
}

void write_pretrain_csv(const fs::path& path, const std::vector<contrastive::LossReport>& history) {
  std::ostringstream s;
  s << "epoch,cross,self,total\n";
  for (const auto& r : history) {
    s << r.epoch << ',' << format_double(r.cross) << ',' << format_double(r.self) << ',' << format_double(r.total)
      << '\n';
  }
  write_text(path, s.str());
}

fs::path pick_input(const std::string& explicit_path, const std::string& run_dir, const std::string& default_name) {
  if (!explicit_path.empty()) return explicit_path;
  if (!run_dir.empty()) return fs::path(run_dir) / default_name;
  return {};
}

void require(const fs::path& path, const std::string& name, const std::string& stage) {
  if (path.empty()) {
    throw ConfigError(stage + " needs input '" + name + "': set inputs." + name + " or inputs.run_dir");
  }
  if (!fs::exists(path)) throw ConfigError(stage + ": input '" + name + "' not found at " + path.string());
}

fs::path optional_input(const fs::path& path) { return !path.empty() && fs::exists(path) ? path : fs::path{}; }

struct Context {
  const config::RunConfig& rc;
  fs::path dir;
  std::ostream& log;
  nlohmann::json outputs = nlohmann::json::array();

  std::uint64_t seed(std::uint64_t stream) const { return mix_seed(rc.seed, stream); }
  void produced(const fs::path& path) { outputs.push_back(fs::relative(path, dir).generic_string()); }
};

data::Corpus run_gen_data(Context& ctx) {
  ctx.log << "[gen-data] generating " << ctx.rc.corpus.num_classes << " classes\n" << std::flush;
  auto corpus = data::generate_corpus(ctx.rc.corpus);
  data::save_corpus(corpus, ctx.dir / "corpus");
  ctx.produced(ctx.dir / "corpus");
  return corpus;
}

encoder::FmriMae run_pretrain(Context& ctx, const data::Corpus& corpus) {
  const auto& rc = ctx.rc;
  auto result = contrastive::pretrain(corpus, rc.encoder, rc.contrastive, ctx.seed(streams::kPretrain),
                                      [&](const contrastive::LossReport& r) {
                                        ctx.log << "[pretrain] epoch " << r.epoch << "/" << rc.contrastive.epochs
                                                << " total=" << r.total << " cross=" << r.cross << " self=" << r.self
                                                << '\n'
                                                << std::flush;
                                      });
  encoder::save_encoder(result.model, ctx.dir / "encoder.ckpt");
  write_pretrain_csv(ctx.dir / "pretrain_loss.csv", result.history);
  ctx.produced(ctx.dir / "encoder.ckpt");
  ctx.produced(ctx.dir / "pretrain_loss.csv");
  return result.model;
}

diffusion::DiffusionModel run_train_diffusion(Context& ctx, const data::Corpus& corpus) {
  ctx.log << "[train-diffusion] autoencoder + " << ctx.rc.diffusion.train_steps << " denoiser steps\n" << std::flush;
  diffusion::DiffusionTrainReport report;
  auto model = diffusion::train_label_diffusion(corpus, ctx.rc.diffusion, ctx.seed(streams::kDiffusion), &report);
  diffusion::save_diffusion(model, ctx.dir / "diffusion.ckpt");
  write_series_csv(ctx.dir / "diffusion_loss.csv", "step,loss", report.diffusion_loss, report.log_interval);
  write_json(ctx.dir / "autoencoder.json", {{"reconstruction_mae", report.autoencoder_mae},
                                            {"final_loss", report.autoencoder_loss.empty()
                                                               ? 0.0
                                                               : report.autoencoder_loss.back()}});
  ctx.log << "[train-diffusion] autoencoder MAE " << report.autoencoder_mae << ", final denoiser loss "
          << (report.diffusion_loss.empty() ? 0.0 : report.diffusion_loss.back()) << '\n'
          << std::flush;
  for (const auto* name : {"diffusion.ckpt", "diffusion_loss.csv", "autoencoder.json"}) ctx.produced(ctx.dir / name);
  return model;
}

concepts::Phase2Result run_finetune(Context& ctx, const data::Corpus& corpus, encoder::FmriMae& encoder,
                                    diffusion::DiffusionModel& model) {
  const auto& cfg = ctx.rc.phase2;
  ctx.log << "[finetune] " << cfg.steps << " steps, lr " << cfg.lr << ", depth " << cfg.attention.depth << '\n'
          << std::flush;
  auto result = concepts::finetune_phase2(corpus, encoder, model, cfg, ctx.seed(streams::kPhase2));
  concepts::save_condition(result, cfg, ctx.dir / "condition.ckpt", &encoder);
  write_series_csv(ctx.dir / "phase2_loss.csv", "step,loss", result.loss_history, cfg.log_interval);
  write_json(ctx.dir / "freeze.json", {{"unet_sha256_before", result.unet_hash_before},
                                       {"unet_sha256_after", result.unet_hash_after},
                                       {"bank_sha256_before", result.bank_hash_before},
                                       {"bank_sha256_after", result.bank_hash_after}});
  for (const auto* name : {"condition.ckpt", "phase2_loss.csv", "freeze.json"}) ctx.produced(ctx.dir / name);
  return result;
}

Generated run_generate(Context& ctx, const data::Corpus& corpus, encoder::FmriMae& encoder,
                       diffusion::DiffusionModel& model, concepts::ConditionModule& module,
                       const concepts::ConceptBank& bank) {
  ctx.log << "[generate] sampling " << corpus.test.size() << " test reconstructions\n" << std::flush;
  auto generated = generate_test_images(corpus, encoder, model, module, bank, ctx.seed(streams::kGenerate));
  const auto dir = ctx.dir / "generated";
  fs::create_directories(dir);
  save_generated(generated, dir / "generated.ckpt");
  for (std::size_t i = 0; i < generated.stimulus_ids.size(); ++i) {
    const auto& id = generated.stimulus_ids[i];
    io::write_png(dir / (id + ".png"), generated.images[static_cast<std::int64_t>(i)]);
    io::write_png(dir / (id + "_gt.png"), data::image_tensor(corpus.test[i].image));
  }
  ctx.produced(dir);
  return generated;
}

void run_evaluate(Context& ctx, const data::Corpus& corpus, const Generated& generated, const fs::path& classifier_path,
                  diffusion::DiffusionModel* model) {
  const auto& rc = ctx.rc;
  eval::ToyClassifier classifier(nullptr);
  nlohmann::json classifier_info;
  if (!classifier_path.empty()) {
    classifier = eval::load_classifier(classifier_path);
    classifier_info = {{"source", classifier_path.string()}};
  } else {
    ctx.log << "[evaluate] training the toy classifier\n" << std::flush;
    auto trained = eval::train_toy_classifier(corpus, rc.classifier, ctx.seed(streams::kClassifier));
    classifier = trained.model;
    eval::save_classifier(classifier, ctx.dir / "classifier.ckpt");
    ctx.produced(ctx.dir / "classifier.ckpt");
    classifier_info = {{"source", "trained"}, {"held_out_accuracy", trained.held_out_accuracy}};
    ctx.log << "[evaluate] classifier held-out accuracy " << trained.held_out_accuracy << '\n' << std::flush;
  }
  if (generated.stimulus_ids.size() != corpus.test.size()) {
    throw InputError("evaluate: " + std::to_string(generated.stimulus_ids.size()) + " generations for " +
                     std::to_string(corpus.test.size()) + " test samples");
  }
  for (std::size_t i = 0; i < corpus.test.size(); ++i) {
    if (generated.stimulus_ids[i] != corpus.test[i].fmri.stimulus_id) {
      throw InputError("evaluate: generation " + std::to_string(i) + " belongs to " + generated.stimulus_ids[i] +
                       ", expected " + corpus.test[i].fmri.stimulus_id);
    }
  }
  std::vector<std::int64_t> ways;
  for (auto n : rc.evaluation.ways) {
    if (n <= corpus.spec.num_classes) ways.push_back(n);
  }
  if (ways.empty()) throw ConfigError("evaluate: no way count fits " + std::to_string(corpus.spec.num_classes) + " classes");
  auto result = eval::evaluate_suite(classifier, generated.images, corpus.test, ways, rc.evaluation.trials,
                                     ctx.seed(streams::kEvaluate));
  eval::write_results_csv(result, ctx.dir / "results.csv");
  eval::write_table_csv(result, ctx.dir / "accuracy.csv");
  auto summary = eval::summary_json(result);
  summary["classifier"] = classifier_info;
  summary["generated_label_accuracy"] =
      eval::accuracy(classifier, generated.images, data::label_vector(corpus.test));
  write_json(ctx.dir / "summary.json", summary);
  for (const auto& row : result.table) {
    ctx.log << "[evaluate] " << row.n << "-way top-1 " << row.mean_rate << '\n';
  }
  for (const auto* name : {"results.csv", "accuracy.csv", "summary.json"}) ctx.produced(ctx.dir / name);

  if (model != nullptr && rc.evaluation.faithfulness_per_class > 0) {
    const auto f = measure_faithfulness(*model, classifier, rc.evaluation.faithfulness_per_class,
                                        ctx.seed(streams::kFaithfulness));
    write_json(ctx.dir / "faithfulness.json", to_json(f));
    ctx.produced(ctx.dir / "faithfulness.json");
    ctx.log << "[evaluate] class-conditional faithfulness " << f.rate << '\n';
  }
  ctx.log << std::flush;
}

void run_analyze(Context& ctx, const data::Corpus& corpus, encoder::FmriMae& encoder, diffusion::DiffusionModel& model,
                 concepts::ConditionModule& module, const concepts::ConceptBank& bank) {
  if (corpus.test.size() < 3) throw ConfigError("analyze: needs at least three test samples");
  ctx.log << "[analyze] capturing " << ctx.rc.analysis.layers.size() << " layers x "
          << ctx.rc.analysis.timesteps.size() << " timesteps\n"
          << std::flush;
  const auto voxels = data::voxel_matrix(corpus.test);
  auto cond = concepts::condition_from_voxels(encoder, module, bank, voxels);
  auto features = analysis::capture_features(model, cond, ctx.rc.analysis, ctx.seed(streams::kAnalysis));
  (void)analysis::run_analysis(features, voxels, ctx.rc.analysis, ctx.dir / "analysis");
  ctx.produced(ctx.dir / "analysis");
}

void apply_encoder_state(encoder::FmriMae& encoder, const concepts::LoadedCondition& condition) {
  if (condition.encoder_state.empty()) return;
  io::load_module_state(*encoder, condition.encoder_state);
  encoder->eval();
}

}  // namespace

std::string to_string(Stage stage) {
  for (const auto& [s, name] : stage_table()) {
    if (s == stage) return name;
  }
  return "unknown";
}

Stage parse_stage(const std::string& name) {
  for (const auto& [s, n] : stage_table()) {
    if (n == name) return s;
  }
  throw ConfigError("unknown subcommand '" + name + "'");
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& entry : stage_table()) out.push_back(entry.second);
    return out;
  }();
  return names;
}

fs::path output_root(const std::optional<fs::path>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("CND_RUN_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

StageInputs resolve_inputs(Stage stage, const config::RunConfig& rc) {
  const auto& in = rc.inputs;
  StageInputs out;
  if (stage == Stage::GenData || stage == Stage::All) return out;
  const auto name = to_string(stage);
  out.corpus = pick_input(in.corpus, in.run_dir, "corpus");
  require(out.corpus, "corpus", name);
  auto need = [&](fs::path& slot, const std::string& explicit_path, const char* key, const char* file) {
    slot = pick_input(explicit_path, in.run_dir, file);
    require(slot, key, name);
  };
  switch (stage) {
    case Stage::Finetune:
      need(out.encoder, in.encoder, "encoder", "encoder.ckpt");
      need(out.diffusion, in.diffusion, "diffusion", "diffusion.ckpt");
      break;
    case Stage::Generate:
    case Stage::Analyze:
      need(out.encoder, in.encoder, "encoder", "encoder.ckpt");
      need(out.diffusion, in.diffusion, "diffusion", "diffusion.ckpt");
      need(out.condition, in.condition, "condition", "condition.ckpt");
      break;
    case Stage::Evaluate:
      need(out.generated, in.generated, "generated", "generated/generated.ckpt");
      if (!in.classifier.empty()) {
        need(out.classifier, in.classifier, "classifier", "classifier.ckpt");
      } else {
        out.classifier = optional_input(pick_input("", in.run_dir, "classifier.ckpt"));
      }
      if (!in.diffusion.empty()) {
        need(out.diffusion, in.diffusion, "diffusion", "diffusion.ckpt");
      } else {
        out.diffusion = optional_input(pick_input("", in.run_dir, "diffusion.ckpt"));
      }
      break;
    default:
      break;
  }
  return out;
}

fs::path create_run_dir(const fs::path& root, const std::string& label, std::uint64_t seed) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream name;
  name << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << label << "-s" << seed;
  fs::create_directories(root);
  auto dir = root / name.str();
  for (int suffix = 1; !fs::create_directory(dir); ++suffix) dir = root / (name.str() + "-" + std::to_string(suffix));
  return dir;
}

std::string content_hash(const fs::path& path) {
  if (!fs::is_directory(path)) return io::sha256_file(path);
  std::vector<std::string> lines;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    lines.push_back(fs::relative(entry.path(), path).generic_string() + " " + io::sha256_file(entry.path()));
  }
  std::sort(lines.begin(), lines.end());
  std::string joined;
  for (const auto& l : lines) joined += l + "\n";
  return io::sha256_hex(std::vector<std::uint8_t>(joined.begin(), joined.end()));
}

void save_generated(const Generated& generated, const fs::path& path) {
  io::Checkpoint ckpt;
  ckpt.kind = "generated";
  ckpt.meta = {{"stimulus_ids", generated.stimulus_ids}};
  ckpt.tensors = {{"images", generated.images.contiguous()}};
  io::save_checkpoint(path, ckpt);
}

Generated load_generated(const fs::path& path) {
  const auto ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "generated") throw StateError(path.string() + " is a '" + ckpt.kind + "' checkpoint, not generated");
  Generated out;
  try {
    out.stimulus_ids = ckpt.meta.at("stimulus_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad metadata: " + e.what());
  }
  out.images = ckpt.at("images");
  if (out.images.dim() != 4 || out.images.size(0) != static_cast<std::int64_t>(out.stimulus_ids.size())) {
    throw FormatError(path.string() + ": image count does not match stimulus ids");
  }
  return out;
}

Generated generate_test_images(const data::Corpus& corpus, encoder::FmriMae& encoder,
                               diffusion::DiffusionModel& model, concepts::ConditionModule& module,
                               const concepts::ConceptBank& bank, std::uint64_t seed) {
  Generated out;
  for (const auto& item : corpus.test) out.stimulus_ids.push_back(item.fmri.stimulus_id);
  if (corpus.test.empty()) {
    out.images = torch::zeros({0, 3, corpus.spec.image_size, corpus.spec.image_size});
    return out;
  }
  auto cond = concepts::condition_from_voxels(encoder, module, bank, data::voxel_matrix(corpus.test));
  torch::NoGradGuard guard;
  auto latents = diffusion::sample(model.unet, cond, model.schedule, seed);
  out.images = model.autoencoder->decode(latents).contiguous();
  return out;
}

Faithfulness measure_faithfulness(diffusion::DiffusionModel& model, eval::ToyClassifier& classifier,
                                  std::int64_t per_class, std::uint64_t seed) {
  auto samples = diffusion::sample_per_class(model, per_class, seed);
  const auto predicted = eval::predict(classifier, samples.images);
  Faithfulness f;
  f.samples = samples.labels.size(0);
  const auto hits = predicted.eq(samples.labels).to(torch::kFloat64);
  f.rate = f.samples == 0 ? 0.0 : hits.mean().item<double>();
  for (std::int64_t c = 0; c < model.num_classes; ++c) {
    f.per_class.push_back(hits.slice(0, c * per_class, (c + 1) * per_class).mean().item<double>());
  }
  return f;
}

nlohmann::json to_json(const Faithfulness& f) {
  return {{"rate", f.rate}, {"samples", f.samples}, {"per_class", f.per_class}};
}

void execute(Stage stage, const config::RunConfig& rc, const StageInputs& inputs, const fs::path& run_dir,
             std::ostream& log) {
  torch::set_num_threads(1);
  Context ctx{rc, run_dir, log};
  auto tree = rc.tree;
  tree["seed"] = rc.seed;
  write_json(run_dir / "config.json", tree);

  nlohmann::json run = {{"subcommand", to_string(stage)}, {"seed", rc.seed}, {"corpus_seed", rc.corpus.seed}};
  nlohmann::json input_info = nlohmann::json::object();
  auto record = [&](const char* name, const fs::path& p) {
    if (!p.empty()) input_info[name] = {{"path", fs::absolute(p).string()}, {"sha256", content_hash(p)}};
  };
  record("corpus", inputs.corpus);
  record("encoder", inputs.encoder);
  record("diffusion", inputs.diffusion);
  record("condition", inputs.condition);
  record("classifier", inputs.classifier);
  record("generated", inputs.generated);
  run["inputs"] = input_info;

  const auto started = std::chrono::steady_clock::now();
  try {
    switch (stage) {
      case Stage::GenData:
        (void)run_gen_data(ctx);
        break;
      case Stage::Pretrain:
        (void)run_pretrain(ctx, data::load_corpus(inputs.corpus));
        break;
      case Stage::TrainDiffusion:
        (void)run_train_diffusion(ctx, data::load_corpus(inputs.corpus));
        break;
      case Stage::Finetune: {
        const auto corpus = data::load_corpus(inputs.corpus);
        auto encoder = encoder::load_encoder(inputs.encoder);
        auto model = diffusion::load_diffusion(inputs.diffusion);
        (void)run_finetune(ctx, corpus, encoder, model);
        break;
      }
      case Stage::Generate:
      case Stage::Analyze: {
        const auto corpus = data::load_corpus(inputs.corpus);
        auto encoder = encoder::load_encoder(inputs.encoder);
        auto model = diffusion::load_diffusion(inputs.diffusion);
        auto condition = concepts::load_condition(inputs.condition);
        apply_encoder_state(encoder, condition);
        if (stage == Stage::Generate) {
          (void)run_generate(ctx, corpus, encoder, model, condition.module, condition.bank);
        } else {
          run_analyze(ctx, corpus, encoder, model, condition.module, condition.bank);
        }
        break;
      }
      case Stage::Evaluate: {
        const auto corpus = data::load_corpus(inputs.corpus);
        const auto generated = load_generated(inputs.generated);
        std::optional<diffusion::DiffusionModel> model;
        if (!inputs.diffusion.empty()) model = diffusion::load_diffusion(inputs.diffusion);
        run_evaluate(ctx, corpus, generated, inputs.classifier, model ? &*model : nullptr);
        break;
      }
      case Stage::All: {
        const auto corpus = run_gen_data(ctx);
        auto encoder = run_pretrain(ctx, corpus);
        auto model = run_train_diffusion(ctx, corpus);
        auto phase2 = run_finetune(ctx, corpus, encoder, model);
        const auto generated = run_generate(ctx, corpus, encoder, model, phase2.module, phase2.bank);
        run_evaluate(ctx, corpus, generated, {}, &model);
        run_analyze(ctx, corpus, encoder, model, phase2.module, phase2.bank);
        break;
      }
    }
  } catch (const std::exception& e) {
    run["status"] = "failed";
    run["error"] = e.what();
    run["outputs"] = ctx.outputs;
    write_json(run_dir / "run.json", run);
    throw;
  }
  run["status"] = "ok";
  run["outputs"] = ctx.outputs;
  run["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_json(run_dir / "run.json", run);
}

std::vector<AblationCase> ablation_grid(const config::RunConfig& base) {
  std::vector<AblationCase> cases;
  auto make = [&](std::string name, std::string axis) {
    AblationCase c{std::move(name), std::move(axis), base.contrastive, base.encoder, base.phase2};
    return c;
  };
  for (auto [ac, as] : {std::pair{1.0, 0.0}, std::pair{0.0, 1.0}, std::pair{1.0, 0.5}}) {
    std::ostringstream name;
    name << "alpha_c" << ac << "_alpha_s" << as;
    auto c = make(name.str(), "loss_weights");
    c.contrastive.alpha_c = ac;
    c.contrastive.alpha_s = as;
    cases.push_back(c);
  }
  for (double ratio : {0.25, 0.5, 0.75}) {
    std::ostringstream name;
    name << "mask" << ratio;
    auto c = make(name.str(), "mask_ratio");
    c.encoder.mask_ratio = ratio;
    cases.push_back(c);
  }
  for (std::int64_t depth : {2, 4, 8}) {
    auto c = make("depth" + std::to_string(depth), "cl_depth");
    c.phase2.attention.depth = depth;
    cases.push_back(c);
  }
  for (bool dup : {false, true}) {
    auto c = make(dup ? "dup_on" : "dup_off", "duplicate_self_contrast");
    c.contrastive.duplicate_self_contrast = dup;
    cases.push_back(c);
  }
  return cases;
}

std::vector<AblationRow> run_ablation_grid(const config::RunConfig& base, const std::vector<AblationCase>& cases,
                                           const fs::path& dir, std::ostream& log) {
  torch::set_num_threads(1);
  fs::create_directories(dir);
  Context ctx{base, dir, log};
  const auto corpus = data::generate_corpus(base.corpus);
  log << "[ablation] shared diffusion model and classifier\n" << std::flush;
  auto model = diffusion::train_label_diffusion(corpus, base.diffusion, ctx.seed(streams::kDiffusion));
  auto classifier = eval::train_toy_classifier(corpus, base.classifier, ctx.seed(streams::kClassifier)).model;

  std::vector<std::int64_t> ways;
  for (auto n : base.evaluation.ways) {
    if (n <= corpus.spec.num_classes) ways.push_back(n);
  }
  if (ways.empty()) throw ConfigError("ablation: no way count fits the class count");

  std::map<std::string, encoder::FmriMae> encoders;
  std::map<std::string, eval::SuiteResult> results;
  std::vector<AblationRow> rows;
  for (const auto& c : cases) {
    const auto start = std::chrono::steady_clock::now();
    const nlohmann::json phase1_key = {{"encoder", c.encoder}, {"contrastive", c.contrastive}};
    const nlohmann::json full_key = {{"phase1", phase1_key}, {"phase2", c.phase2}};
    AblationRow row{c, {}, 0.0};
    if (auto hit = results.find(full_key.dump()); hit != results.end()) {
      row.result = hit->second;
    } else {
      auto enc = encoders.find(phase1_key.dump());
      if (enc == encoders.end()) {
        log << "[ablation] " << c.name << ": phase 1\n" << std::flush;
        auto trained = contrastive::pretrain(corpus, c.encoder, c.contrastive, ctx.seed(streams::kPretrain));
        enc = encoders.emplace(phase1_key.dump(), trained.model).first;
      }
      log << "[ablation] " << c.name << ": phase 2, generation, evaluation\n" << std::flush;
      auto phase2 = concepts::finetune_phase2(corpus, enc->second, model, c.phase2, ctx.seed(streams::kPhase2));
      auto generated = generate_test_images(corpus, enc->second, model, phase2.module, phase2.bank,
                                            ctx.seed(streams::kGenerate));
      row.result = eval::evaluate_suite(classifier, generated.images, corpus.test, ways, base.evaluation.trials,
                                        ctx.seed(streams::kEvaluate));
      results.emplace(full_key.dump(), row.result);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    eval::write_table_csv(row.result, dir / ("accuracy_" + c.name + ".csv"));
    for (const auto& r : row.result.table) {
      log << "[ablation] " << c.name << " " << r.n << "-way " << r.mean_rate << '\n';
    }
    rows.push_back(std::move(row));
  }

  std::ostringstream csv;
  csv << "case,axis,alpha_c,alpha_s,mask_ratio,cl_depth,duplicate_self_contrast,n,mean_rate\n";
  for (const auto& row : rows) {
    for (const auto& r : row.result.table) {
      csv << row.spec.name << ',' << row.spec.axis << ',' << row.spec.contrastive.alpha_c << ','
          << row.spec.contrastive.alpha_s << ',' << row.spec.encoder.mask_ratio << ','
          << row.spec.phase2.attention.depth << ',' << (row.spec.contrastive.duplicate_self_contrast ? 1 : 0) << ','
          << r.n << ',' << format_double(r.mean_rate) << '\n';
    }
  }
  write_text(dir / "ablation.csv", csv.str());
  return rows;
}

}  // namespace cnd::pipeline
