#include "cnd/concept_conditioning.hpp"

#include <cmath>

#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::concepts {

ConceptBank::ConceptBank(const torch::Tensor& embeddings) {
  if (embeddings.dim() != 2) throw ShapeError("concept bank: expected a num_classes x dim table");
  if (!torch::isfinite(embeddings).all().item<bool>()) throw NumericError("concept bank: non-finite rows");
  embeddings_ = embeddings.detach().to(torch::kFloat32).clone();
}

void ConceptBank::set_row(std::int64_t index, const torch::Tensor& row) {
  if (frozen_) throw StateError("concept bank is frozen");
  if (index < 0 || index >= num_classes()) throw std::out_of_range("concept bank: row index out of range");
  if (row.numel() != dim()) throw ShapeError("concept bank: row width mismatch");
  torch::NoGradGuard guard;
  embeddings_[index].copy_(row.reshape({dim()}));
}

std::string ConceptBank::hash() const {
  return io::sha256_hex(io::serialize_tensors({{"embeddings", embeddings_}}));
}

ConceptBank build_concept_bank(std::int64_t num_classes, std::int64_t d_c, const torch::Tensor& source) {
  if (source.dim() != 2 || source.size(0) != num_classes || source.size(1) != d_c) {
    throw ConfigError("concept bank: label table does not match " + std::to_string(num_classes) + " x " +
                      std::to_string(d_c));
  }
  ConceptBank bank(source);
  bank.freeze();
  return bank;
}

void ConceptAttentionConfig::validate() const {
  if (depth < 1) throw ConfigError("concept attention: depth must be at least 1");
  if (d < 1 || num_heads < 1 || d % num_heads != 0) throw ConfigError("concept attention: d must divide by num_heads");
}

void to_json(nlohmann::json& j, const ConceptAttentionConfig& c) {
  j = {{"depth", c.depth}, {"d", c.d}, {"num_heads", c.num_heads}};
}

void from_json(const nlohmann::json& j, ConceptAttentionConfig& c) {
  j.at("depth").get_to(c.depth);
  j.at("d").get_to(c.d);
  j.at("num_heads").get_to(c.num_heads);
}

ConceptLayerImpl::ConceptLayerImpl(std::int64_t query_dim, std::int64_t concept_dim, std::int64_t d, std::int64_t heads)
    : heads_(heads) {
  w_q = register_module("w_q", torch::nn::Linear(torch::nn::LinearOptions(query_dim, d).bias(false)));
  w_k = register_module("w_k", torch::nn::Linear(torch::nn::LinearOptions(concept_dim, d).bias(false)));
  w_v = register_module("w_v", torch::nn::Linear(torch::nn::LinearOptions(concept_dim, d).bias(false)));
  out = register_module("out", torch::nn::Linear(d, d));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

nn::AttentionResult ConceptLayerImpl::attend(const torch::Tensor& query, const torch::Tensor& bank) {
  if (query.dim() != 2 || query.size(1) != w_q->options.in_features()) {
    throw ShapeError("concept attention: query width mismatch");
  }
  if (bank.dim() != 2 || bank.size(1) != w_k->options.in_features()) {
    throw ShapeError("concept attention: bank width mismatch");
  }
  const auto b = query.size(0), c = bank.size(0), d = w_q->options.out_features();
  const auto dh = d / heads_;
  auto q = w_q(query).view({b, heads_, 1, dh});
  auto k = w_k(bank).view({c, heads_, dh}).permute({1, 0, 2}).unsqueeze(0);  // 1 x H x C x dh
  auto v = w_v(bank).view({c, heads_, dh}).permute({1, 0, 2}).unsqueeze(0);
  auto logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d));
  auto weights = torch::softmax(logits, -1);                      // B x H x 1 x C
  auto attended = torch::matmul(weights, v).reshape({b, d});      // heads concatenated
  return {attended, weights.squeeze(2)};
}

ConceptAttentionImpl::ConceptAttentionImpl(std::int64_t feature_dim, std::int64_t concept_dim,
                                           const ConceptAttentionConfig& config)
    : config_(config), feature_dim_(feature_dim), concept_dim_(concept_dim) {
  config_.validate();
  in_proj_ = register_module("in_proj", torch::nn::Linear(feature_dim, config_.d));
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (std::int64_t l = 0; l < config_.depth; ++l) {
    layers_->push_back(ConceptLayer(l == 0 ? feature_dim : config_.d, concept_dim, config_.d, config_.num_heads));
  }
}

ConceptLayer ConceptAttentionImpl::layer(std::int64_t index) const {
  if (index < 0 || index >= config_.depth) throw std::out_of_range("concept attention: layer index out of range");
  return ConceptLayer(layers_->ptr<ConceptLayerImpl>(static_cast<std::size_t>(index)));
}

ConceptAttendResult ConceptAttentionImpl::forward(const torch::Tensor& feature, const torch::Tensor& bank) {
  if (feature.dim() != 2 || feature.size(1) != feature_dim_) {
    throw ShapeError("concept attention: fMRI feature must be B x " + std::to_string(feature_dim_));
  }
  ConceptAttendResult result;
  std::vector<torch::Tensor> tokens;
  auto x = in_proj_(feature);
  for (std::int64_t l = 0; l < config_.depth; ++l) {
    auto layer_l = layer(l);
    auto attn = layer_l->attend(l == 0 ? feature : x, bank);
    x = layer_l->norm(x + layer_l->out(attn.output));
    tokens.push_back(x);
    result.attended.push_back(attn.output);
    result.weights.push_back(attn.weights);
  }
  result.tokens = torch::stack(tokens, 1);
  return result;
}

ConceptAttendResult concept_attend(ConceptAttention& attention, const torch::Tensor& fmri_feature,
                                   const ConceptBank& bank) {
  if (!bank.frozen()) throw StateError("concept_attend: the concept bank must be frozen");
  const bool single = fmri_feature.dim() == 1;
  auto result = attention->forward(single ? fmri_feature.unsqueeze(0) : fmri_feature, bank.embeddings());
  return result;
}

ConditionModuleImpl::ConditionModuleImpl(std::int64_t feature_dim, std::int64_t concept_dim,
                                         const ConceptAttentionConfig& config, std::int64_t context_dim,
                                         std::int64_t time_dim)
    : feature_dim_(feature_dim), concept_dim_(concept_dim), context_dim_(context_dim), time_dim_(time_dim) {
  attention_ = register_module("attention", ConceptAttention(feature_dim, concept_dim, config));
  context_proj_ = register_module("context_proj", torch::nn::Linear(config.d, context_dim));
  time_proj_ = register_module("time_proj", torch::nn::Linear(config.d, time_dim));
}

ConditionOutput ConditionModuleImpl::forward(const torch::Tensor& feature, const torch::Tensor& bank) {
  auto tokens = attention_->forward(feature, bank).tokens;
  return ConditionOutput{context_proj_(tokens), time_proj_(tokens.mean(1))};
}

ConditionOutput make_condition(ConditionModule& module, const torch::Tensor& fmri_feature, const ConceptBank& bank) {
  if (!bank.frozen()) throw StateError("make_condition: the concept bank must be frozen");
  const bool single = fmri_feature.dim() == 1;
  return module->forward(single ? fmri_feature.unsqueeze(0) : fmri_feature, bank.embeddings());
}

void Phase2Config::validate() const {
  attention.validate();
  if (!(lr > 0.0) || steps < 0 || batch_size < 1) throw ConfigError("phase2: invalid training settings");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw ConfigError("phase2: weight_decay and grad_clip must be >= 0");
  if (log_interval < 1) throw ConfigError("phase2: log_interval must be positive");
}

void to_json(nlohmann::json& j, const Phase2Config& c) {
  j = {{"attention", c.attention},
       {"lr", c.lr},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip},
       {"finetune_encoder", c.finetune_encoder},
       {"warm_start_time", c.warm_start_time},
       {"log_interval", c.log_interval}};
}

void from_json(const nlohmann::json& j, Phase2Config& c) {
  j.at("attention").get_to(c.attention);
  j.at("lr").get_to(c.lr);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("grad_clip").get_to(c.grad_clip);
  j.at("finetune_encoder").get_to(c.finetune_encoder);
  j.at("warm_start_time").get_to(c.warm_start_time);
  j.at("log_interval").get_to(c.log_interval);
}

namespace {

void check_compatible(const data::Corpus& corpus, encoder::FmriMae& encoder, const diffusion::DiffusionModel& model) {
  if (!encoder->is_pretrained()) throw StateError("phase2: encoder is not pretrained");
  if (!model.unet || !model.unet->is_trained() || !model.labels || !model.autoencoder) {
    throw StateError("phase2: diffusion model is not trained");
  }
  const auto& ec = encoder->config();
  if (encoder->num_patches() * ec.patch_size != corpus.spec.voxel_count) {
    throw StateError("phase2: encoder expects " + std::to_string(encoder->num_patches() * ec.patch_size) +
                     " voxels, corpus has " + std::to_string(corpus.spec.voxel_count));
  }
  if (model.num_classes != corpus.spec.num_classes) {
    throw StateError("phase2: diffusion model was trained on a different class count");
  }
  if (model.config.autoencoder.image_size != corpus.spec.image_size) {
    throw StateError("phase2: diffusion model was trained on a different image size");
  }
}

std::vector<bool> freeze(const std::vector<torch::Tensor>& params) {
  std::vector<bool> previous;
  for (auto p : params) {
    previous.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
  return previous;
}

void restore(const std::vector<torch::Tensor>& params, const std::vector<bool>& previous) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    p.set_requires_grad(previous[i]);
  }
}

}  // namespace

Phase2Result finetune_phase2(const data::Corpus& corpus, encoder::FmriMae& encoder,
                             diffusion::DiffusionModel& model, const Phase2Config& config, std::uint64_t seed) {
  config.validate();
  check_compatible(corpus, encoder, model);
  if (corpus.train.empty()) throw ConfigError("phase2: corpus has no training samples");

  Phase2Result result;
  const auto& uc = model.config.unet;
  result.bank = build_concept_bank(model.num_classes, uc.context_dim, model.labels->embedding_table());
  result.unet_hash_before = io::state_hash(*model.unet);
  result.bank_hash_before = result.bank.hash();
  const auto labels_hash = io::state_hash(*model.labels);

  const auto voxels = data::voxel_matrix(corpus.train);
  torch::Tensor latents, features;
  {
    torch::NoGradGuard guard;
    latents = model.autoencoder->encode(data::image_batch(corpus.train));
    if (!config.finetune_encoder) {
      encoder->eval();
      features = encoder->condition_features(voxels);
    }
  }

  seed_parameter_init(mix_seed(seed, 31));
  result.module = ConditionModule(encoder->config().embed_dim, result.bank.dim(), config.attention, uc.context_dim,
                                  uc.time_dim());
  auto& module = result.module;
  if (config.warm_start_time) {
    if (config.attention.d != uc.context_dim) throw ConfigError("phase2: warm_start_time needs d == context_dim");
    torch::NoGradGuard guard;
    auto source = model.labels->time_projection();
    module->time_projection()->weight.copy_(source->weight);
    module->time_projection()->bias.copy_(source->bias);
  }

  auto frozen_params = model.unet->parameters();
  for (const auto& p : model.labels->parameters()) frozen_params.push_back(p);
  const auto previous = freeze(frozen_params);
  model.unet->eval();

  auto trainable = module->parameters();
  if (config.finetune_encoder) {
    for (const auto& p : encoder->parameters()) trainable.push_back(p);
    encoder->train();
  }
  torch::optim::AdamW optimizer(trainable,
                                torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));

  auto predictor = diffusion::as_predictor(model.unet);
  auto gen = make_generator(mix_seed(seed, 32));
  const auto n = voxels.size(0);
  const auto bank = result.bank.embeddings();
  module->train();
  double running = 0.0;
  std::int64_t counted = 0;
  try {
    for (std::int64_t step = 0; step < config.steps; ++step) {
      auto index = torch::randint(n, {std::min(config.batch_size, n)}, gen, torch::kInt64);
      auto feature = config.finetune_encoder ? encoder->condition_features(voxels.index_select(0, index))
                                             : features.index_select(0, index);
      auto cond = module->forward(feature, bank);
      auto loss = diffusion::diffusion_loss(predictor, latents.index_select(0, index), cond, model.schedule, gen);
      optimizer.zero_grad();
      loss.backward();
      if (config.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(trainable, config.grad_clip);
      optimizer.step();
      running += loss.item<double>();
      if (++counted == config.log_interval || step + 1 == config.steps) {
        result.loss_history.push_back(running / static_cast<double>(counted));
        running = 0.0;
        counted = 0;
      }
    }
  } catch (...) {
    restore(frozen_params, previous);
    throw;
  }
  restore(frozen_params, previous);
  module->eval();
  encoder->eval();

  result.unet_hash_after = io::state_hash(*model.unet);
  result.bank_hash_after = result.bank.hash();
  if (result.unet_hash_after != result.unet_hash_before || result.bank_hash_after != result.bank_hash_before ||
      io::state_hash(*model.labels) != labels_hash) {
    throw StateError("phase2: frozen diffusion weights changed during fine-tuning");
  }
  return result;
}

void save_condition(const Phase2Result& result, const Phase2Config& config, const std::filesystem::path& path,
                    const encoder::FmriMae* encoder) {
  io::Checkpoint ckpt;
  ckpt.kind = "condition";
  const auto& m = *result.module;
  ckpt.meta = {{"config", config},
               {"feature_dim", m.feature_dim()},
               {"concept_dim", m.concept_dim()},
               {"context_dim", m.context_dim()},
               {"time_dim", m.time_dim()},
               {"bank_sha256", result.bank.hash()}};
  ckpt.tensors = io::module_state(m, "module.");
  ckpt.tensors.emplace_back("bank", result.bank.embeddings().clone());
  if (config.finetune_encoder && encoder != nullptr) {
    for (auto& kv : io::module_state(**encoder, "encoder.")) ckpt.tensors.push_back(std::move(kv));
  }
  io::save_checkpoint(path, ckpt);
}

LoadedCondition load_condition(const std::filesystem::path& path) {
  const auto ckpt = io::load_checkpoint(path);
  if (ckpt.kind != "condition") throw StateError(path.string() + " is a '" + ckpt.kind + "' checkpoint, not condition");
  LoadedCondition out;
  std::int64_t feature_dim = 0, concept_dim = 0, context_dim = 0, time_dim = 0;
  try {
    out.config = ckpt.meta.at("config").get<Phase2Config>();
    feature_dim = ckpt.meta.at("feature_dim").get<std::int64_t>();
    concept_dim = ckpt.meta.at("concept_dim").get<std::int64_t>();
    context_dim = ckpt.meta.at("context_dim").get<std::int64_t>();
    time_dim = ckpt.meta.at("time_dim").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad condition metadata: " + e.what());
  }
  out.module = ConditionModule(feature_dim, concept_dim, out.config.attention, context_dim, time_dim);
  io::load_module_state(*out.module, ckpt.with_prefix("module."));
  out.module->eval();
  out.bank = ConceptBank(ckpt.at("bank"));
  out.bank.freeze();
  out.encoder_state = ckpt.with_prefix("encoder.");
  return out;
}

ConditionOutput condition_from_voxels(encoder::FmriMae& encoder, ConditionModule& module, const ConceptBank& bank,
                                      const torch::Tensor& voxels) {
  torch::NoGradGuard guard;
  return make_condition(module, encoder->condition_features(voxels), bank);
}

}  // namespace cnd::concepts
