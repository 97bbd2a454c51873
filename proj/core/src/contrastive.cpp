#include "cnd/contrastive.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "cnd/errors.hpp"

namespace cnd::contrastive {
namespace {

void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("contrastive: tau must be positive");
}

void check_pair(const torch::Tensor& a, const torch::Tensor& b, const char* op) {
  if (a.dim() != 2 || b.dim() != 2 || a.sizes() != b.sizes()) {
    throw ShapeError(std::string(op) + ": expected two N x D batches of equal shape");
  }
  if (a.size(0) < 1) throw ConfigError(std::string(op) + ": batch must hold at least one sample");
}

}  // namespace

void ContrastiveConfig::validate() const {
  check_tau(tau);
  if (alpha_c < 0.0 || alpha_s < 0.0) throw ConfigError("contrastive: loss weights must be non-negative");
  if (alpha_c == 0.0 && alpha_s == 0.0) throw ConfigError("contrastive: alpha_c and alpha_s cannot both be zero");
  if (epochs < 1 || batch_size < 1) throw ConfigError("contrastive: epochs and batch_size must be positive");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("contrastive: warmup_epochs out of range");
  if (!(max_lr > 0.0) || weight_decay < 0.0) throw ConfigError("contrastive: invalid optimizer settings");
}

void to_json(nlohmann::json& j, const ContrastiveConfig& c) {
  j = {{"tau", c.tau},
       {"alpha_c", c.alpha_c},
       {"alpha_s", c.alpha_s},
       {"duplicate_self_contrast", c.duplicate_self_contrast},
       {"symmetric", c.symmetric},
       {"epochs", c.epochs},
       {"warmup_epochs", c.warmup_epochs},
       {"batch_size", c.batch_size},
       {"max_lr", c.max_lr},
       {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip}};
}

void from_json(const nlohmann::json& j, ContrastiveConfig& c) {
  j.at("tau").get_to(c.tau);
  j.at("alpha_c").get_to(c.alpha_c);
  j.at("alpha_s").get_to(c.alpha_s);
  j.at("duplicate_self_contrast").get_to(c.duplicate_self_contrast);
  j.at("symmetric").get_to(c.symmetric);
  j.at("epochs").get_to(c.epochs);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("max_lr").get_to(c.max_lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("grad_clip").get_to(c.grad_clip);
}

torch::Tensor info_nce(const torch::Tensor& anchor, const torch::Tensor& positive, const torch::Tensor& negatives,
                       double tau) {
  check_tau(tau);
  if (anchor.dim() != 1 || positive.sizes() != anchor.sizes()) throw ShapeError("info_nce: anchor/positive mismatch");
  if (negatives.dim() != 2 || (negatives.size(0) > 0 && negatives.size(1) != anchor.size(0))) {
    throw ShapeError("info_nce: negatives must be K x D");
  }
  auto positive_logit = (anchor * positive).sum().unsqueeze(0) / tau;
  auto logits = negatives.size(0) > 0 ? torch::cat({positive_logit, torch::mv(negatives, anchor) / tau})
                                      : positive_logit;
  return torch::logsumexp(logits, 0) - positive_logit.squeeze(0);
}

torch::Tensor in_batch_info_nce(const torch::Tensor& anchors, const torch::Tensor& positives,
                                const torch::Tensor& negative_pool, double tau) {
  check_tau(tau);
  check_pair(anchors, positives, "in_batch_info_nce");
  check_pair(anchors, negative_pool, "in_batch_info_nce");
  const auto n = anchors.size(0);
  auto positive_logits = (anchors * positives).sum(1, /*keepdim=*/true) / tau;
  auto negative_logits = torch::matmul(anchors, negative_pool.transpose(0, 1)) / tau;
  const auto diagonal = torch::eye(n, torch::TensorOptions().dtype(torch::kBool));
  negative_logits = negative_logits.masked_fill(diagonal, -std::numeric_limits<double>::infinity());
  auto logits = torch::cat({positive_logits, negative_logits}, 1);
  return (torch::logsumexp(logits, 1) - positive_logits.squeeze(1)).mean();
}

torch::Tensor cross_contrastive_loss(const torch::Tensor& dm1, const torch::Tensor& dm2, double tau, bool symmetric) {
  check_pair(dm1, dm2, "cross_contrastive_loss");
  auto loss = in_batch_info_nce(dm1, dm2, dm1, tau);
  if (symmetric) loss = 0.5 * (loss + in_batch_info_nce(dm2, dm1, dm2, tau));
  return loss;
}

torch::Tensor self_contrastive_loss(const torch::Tensor& dm, const torch::Tensor& original, double tau,
                                    bool symmetric) {
  check_pair(dm, original, "self_contrastive_loss");
  auto loss = in_batch_info_nce(dm, original, dm, tau);
  if (symmetric) loss = 0.5 * (loss + in_batch_info_nce(original, dm, original, tau));
  return loss;
}

LossReport CombinedLoss::report(std::int64_t epoch) const {
  return LossReport{total.item<double>(), cross.item<double>(), self.item<double>(), epoch};
}

CombinedLoss combined_loss(const ContrastiveViews& views, const ContrastiveConfig& config) {
  config.validate();
  auto cross = cross_contrastive_loss(views.first, views.second, config.tau, config.symmetric);
  auto self = self_contrastive_loss(views.first, views.original, config.tau, config.symmetric);
  if (config.duplicate_self_contrast) {
    self = 0.5 * (self + self_contrastive_loss(views.second, views.original, config.tau, config.symmetric));
  }
  auto total = config.alpha_c * cross + config.alpha_s * self;
  return CombinedLoss{total, cross, self};
}

LossReport combine(double cross, double self, const ContrastiveConfig& config, std::int64_t epoch) {
  return LossReport{config.alpha_c * cross + config.alpha_s * self, cross, self, epoch};
}

double warmup_cosine_lr(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, double max_lr) {
  if (step < warmup_steps) return max_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const auto decay_steps = std::max<std::int64_t>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return 0.5 * max_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cnd::contrastive
