#include <cmath>
#include <sstream>

#include "cnd/contrastive.hpp"
#include "cnd/errors.hpp"
#include "cnd/rng.hpp"

namespace cnd::contrastive {

ContrastiveViews embed_views(encoder::FmriMae& model, const torch::Tensor& voxels, at::Generator& gen) {
  const auto& cfg = model->config();
  const auto b = voxels.size(0);
  const auto p = model->num_patches();

  auto augmented = encoder::random_sparsify_batch(voxels, cfg.sparsify_frac, gen);
  auto patches = encoder::patchify(augmented, cfg.patch_size);
  auto mask1 = encoder::random_mask_batch(b, p, cfg.mask_ratio, gen);
  auto mask2 = encoder::random_mask_batch(b, p, cfg.mask_ratio, gen);
  auto first = model->decode_batch(model->encode_batch(patches, mask1), mask1);
  auto second = model->decode_batch(model->encode_batch(patches, mask2), mask2);

  // The unmasked original goes through the same encoder/decoder with an all-false mask.
  auto clean = torch::zeros({b, p}, torch::kBool);
  auto original_patches = encoder::patchify(voxels, cfg.patch_size);
  auto original = model->decode_batch(model->encode_batch(original_patches, clean), clean);
  return ContrastiveViews{first, second, original};
}

PretrainResult pretrain(const data::Corpus& corpus, const encoder::EncoderConfig& encoder_config,
                        const ContrastiveConfig& config, std::uint64_t seed, const EpochCallback& on_epoch) {
  encoder_config.validate();
  config.validate();
  if (corpus.train.empty()) throw ConfigError("pretrain: corpus has no training samples");
  const auto voxels = data::voxel_matrix(corpus.train);
  if (voxels.size(1) % encoder_config.patch_size != 0) {
    throw ShapeError("pretrain: voxel count is not a multiple of the patch size");
  }

  seed_parameter_init(mix_seed(seed, 1));
  PretrainResult result;
  result.model = encoder::FmriMae(encoder_config, voxels.size(1) / encoder_config.patch_size);
  auto& model = result.model;
  model->train();

  torch::optim::AdamW optimizer(model->parameters(),
                                torch::optim::AdamWOptions(config.max_lr).weight_decay(config.weight_decay));

  const auto n = static_cast<std::size_t>(voxels.size(0));
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const bool drop_last = n >= batch;
  const auto steps_per_epoch = static_cast<std::int64_t>(drop_last ? n / batch : 1);
  const auto total_steps = steps_per_epoch * config.epochs;
  const auto warmup_steps = steps_per_epoch * config.warmup_epochs;

  auto gen = make_generator(mix_seed(seed, 2));
  std::int64_t step = 0;
  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = data::batch_iter(n, batch, mix_seed(seed, 100 + static_cast<std::uint64_t>(epoch)), drop_last);
    double cross_sum = 0.0, self_sum = 0.0;
    for (const auto& indices : batches) {
      const double lr = warmup_cosine_lr(step, warmup_steps, total_steps, config.max_lr);
      for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);

      auto index = torch::tensor(std::vector<std::int64_t>(indices.begin(), indices.end()), torch::kInt64);
      auto views = embed_views(model, voxels.index_select(0, index), gen);
      auto loss = combined_loss(views, config);
      const auto report = loss.report(epoch);
      if (!std::isfinite(report.total)) {
        std::ostringstream msg;
        msg << "pretrain diverged at epoch " << epoch << " step " << step << ": cross=" << report.cross
            << " self=" << report.self << " lr=" << lr;
        throw NumericError(msg.str());
      }
      optimizer.zero_grad();
      loss.total.backward();
      if (config.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(model->parameters(), config.grad_clip);
      optimizer.step();
      cross_sum += report.cross;
      self_sum += report.self;
      ++step;
    }
    const double count = static_cast<double>(batches.size());
    result.history.push_back(combine(cross_sum / count, self_sum / count, config, epoch));
    if (on_epoch) on_epoch(result.history.back());
  }
  model->eval();
  model->mark_pretrained();
  return result;
}

}  // namespace cnd::contrastive
