#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unoise/data.hpp"
#include "unoise/rng.hpp"
#include "unoise/tensor.hpp"
#include "unoise/unet.hpp"

namespace unoise {

// Hyperparameters for training the noise (interpretability) model against a
// frozen utility model.
struct NoiseTrainConfig {
  double lambda = 0.05;     // noise-ratio weight; default pinned by the lr sweep in README
  double sigma_min = 0.05;  // noise-scale bounds, normalized-intensity units
  double sigma_max = 2.0;
  double lr = 1e-3;
  int batch_size = 8;
  int epochs = 100;
  std::uint64_t seed = 0;
  double log_floor = 1e-6;  // clamp for log B
  bool pretrain = false;
  int pretrain_epochs = 0;  // 0 -> same as epochs
  double val_fraction = 0.2;
};

void validate(const NoiseTrainConfig& cfg);

// Settings for plain segmentation training (utility model, pretraining).
struct TrainSettings {
  double lr = 1e-3;
  int batch_size = 8;
  int epochs = 100;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
};

// Adaptive-moment gradient descent. Moment buffers shape-match their
// parameters; step order follows the model's parameter order.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  void step(ModelParams& model);
  void zero_grad(ModelParams& model) { model.zero_grad(); }

  int step_count() const { return t_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// x'[n,c,i,j] = x[n,c,i,j] + sigma[n,i,j] * eps[n,i,j]
// with sigma = sigma_min + B * (sigma_max - sigma_min), broadcast over
// channels. eps is treated as a constant (reparameterization), so the result
// is differentiable w.r.t. B.
template <typename S>
TensorT<S> apply_noise(const TensorT<S>& x, const TensorT<S>& mask_b, S sigma_min,
                       S sigma_max, const TensorT<S>& epsilon) {
  if (x.ndim() != 4 || mask_b.ndim() != 3)
    throw std::invalid_argument("apply_noise: expected x NxCxHxW and B NxHxW, got " +
                                shape_str(x.shape()) + " and " +
                                shape_str(mask_b.shape()));
  if (mask_b.dim(0) != x.dim(0) || mask_b.dim(1) != x.dim(2) ||
      mask_b.dim(2) != x.dim(3))
    throw std::invalid_argument("apply_noise: B shape " + shape_str(mask_b.shape()) +
                                " does not match x " + shape_str(x.shape()));
  if (epsilon.shape() != mask_b.shape())
    throw std::invalid_argument("apply_noise: epsilon shape " +
                                shape_str(epsilon.shape()) +
                                " does not match B " + shape_str(mask_b.shape()));
  if (!(sigma_min >= S(0)) || !(sigma_min < sigma_max))
    throw std::invalid_argument("apply_noise: need 0 <= sigma_min < sigma_max");
  for (long long i = 0; i < mask_b.size(); ++i) {
    const S v = mask_b.at(i);
    if (!(v > S(0) && v < S(1)))
      throw std::invalid_argument("apply_noise: B value " +
                                  std::to_string(static_cast<double>(v)) +
                                  " outside (0, 1)");
  }
  auto sigma = scalar_add(scalar_mul(mask_b, sigma_max - sigma_min), sigma_min);
  return add(x, expand_channels(mul(sigma, epsilon), x.dim(1)));
}

// The two-term objective evaluated on one (mini)batch, with the pieces
// exposed for logging and tests.
template <typename S>
struct LossParts {
  TensorT<S> total;       // utility_ce - lambda * mean(log(max(B, floor)))
  TensorT<S> utility_ce;  // cross-entropy of utility predictions on noised input
  TensorT<S> log_b_mean;  // mean(log(max(B, floor)))
  TensorT<S> mask_b;      // sigmoid of the noise logits, N x H x W
};

// Cross-entropy of the frozen utility model on the noised image minus
// lambda times the mean log noise mask. Epsilon is drawn from `stream`, one
// value per pixel per sample. Gradient flows to the noise logits only, as
// long as the utility parameters do not require grad.
template <typename S, typename UtilityFwd>
LossParts<S> unoise_loss(const TensorT<S>& x, const TensorT<S>& y,
                         const TensorT<S>& noise_logits, UtilityFwd&& utility,
                         const NoiseTrainConfig& cfg, RngStream& stream) {
  LossParts<S> parts;
  parts.mask_b = sigmoid(noise_logits);
  TensorT<S> eps = randn<S>(parts.mask_b.shape(), stream);
  TensorT<S> noised =
      apply_noise(x, parts.mask_b, static_cast<S>(cfg.sigma_min),
                  static_cast<S>(cfg.sigma_max), eps);
  parts.utility_ce = softmax_cross_entropy(utility(noised), y);
  parts.log_b_mean =
      mean(log(clamp_min(parts.mask_b, static_cast<S>(cfg.log_floor))));
  parts.total = sub(parts.utility_ce,
                    scalar_mul(parts.log_b_mean, static_cast<S>(cfg.lambda)));
  return parts;
}

// One row of the training metrics log (CSV schema:
// epoch,utility_loss,noise_term,mean_B,val_dice). For plain segmentation
// training noise_term and mean_B are 0.
struct EpochStats {
  int epoch = 0;
  double utility_loss = 0.0;
  double noise_term = 0.0;  // -lambda * mean(log(max(B, floor))) contribution
  double mean_b = 0.0;
  double val_dice = 0.0;
};

std::string metrics_csv(const std::vector<EpochStats>& history);

struct TrainResult {
  ModelParams model;
  std::vector<EpochStats> history;
  double final_val_dice = 0.0;
};

struct NoiseTrainResult {
  ModelParams noise_model;
  std::vector<EpochStats> history;
  double final_val_dice_noised = 0.0;  // utility dice on noised validation inputs
  double final_mean_b = 0.0;           // mean B over validation pixels
};

// Raised when a training loss goes non-finite. Carries the last finite-loss
// epoch snapshot so callers can persist it.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, ModelParams last_good, int epoch)
      : std::runtime_error(what), last_good_(std::move(last_good)), epoch_(epoch) {}
  const ModelParams& last_good() const { return last_good_; }
  int last_good_epoch() const { return epoch_; }

 private:
  ModelParams last_good_;
  int epoch_;
};

// Called after each epoch with that epoch's stats (progress reporting).
using EpochCallback = std::function<void(const EpochStats&)>;

// Train a segmentation model with softmax cross-entropy. Splits off a
// validation set internally; deterministic per settings.seed.
TrainResult train_utility(const Dataset& dataset, const UNetConfig& config,
                          const TrainSettings& settings,
                          const EpochCallback& on_epoch = {});

// Algorithm: per step, run the noise model, draw epsilon, noise the input,
// score it with the frozen utility model, and descend the two-term objective
// on the noise parameters only. The utility parameters are asserted bitwise
// unchanged at exit.
NoiseTrainResult train_unoise(const Dataset& dataset, const ModelParams& utility,
                              const UNetConfig& noise_arch,
                              const NoiseTrainConfig& cfg,
                              const EpochCallback& on_epoch = {});

// Train the interpretability architecture on the segmentation task itself,
// then swap in a freshly initialized single-channel-logit head. Provenance of
// the result is pretrained-segmentation.
ModelParams pretrain_noise_model(const Dataset& dataset, const UNetConfig& noise_arch,
                                 const TrainSettings& settings);

}  // namespace unoise
