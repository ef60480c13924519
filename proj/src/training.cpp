#include "unoise/training.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <tuple>

#include "unoise/eval.hpp"

namespace unoise {

void validate(const NoiseTrainConfig& cfg) {
  if (cfg.lambda < 0) throw std::invalid_argument("NoiseTrainConfig: lambda must be >= 0");
  if (!(cfg.sigma_min >= 0 && cfg.sigma_min < cfg.sigma_max))
    throw std::invalid_argument("NoiseTrainConfig: need 0 <= sigma_min < sigma_max");
  if (!(cfg.log_floor > 0))
    throw std::invalid_argument("NoiseTrainConfig: log_floor must be > 0");
  if (cfg.batch_size < 1 || cfg.epochs < 1)
    throw std::invalid_argument("NoiseTrainConfig: batch_size and epochs must be >= 1");
  if (!(cfg.val_fraction > 0 && cfg.val_fraction < 1))
    throw std::invalid_argument("NoiseTrainConfig: val_fraction must be in (0, 1)");
}

void AdamOptimizer::step(ModelParams& model) {
  if (m_.empty()) {
    m_.resize(model.params.size());
    v_.resize(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(model.params[i].second.size()), 0.0f);
      v_[i].assign(static_cast<std::size_t>(model.params[i].second.size()), 0.0f);
    }
  }
  if (m_.size() != model.params.size())
    throw std::logic_error("AdamOptimizer: model parameter count changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    Tensor& p = model.params[i].second;
    if (!p.has_grad()) continue;
    const std::vector<float>& g = p.grad();
    float* data = p.mutable_data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      m_[i][j] = static_cast<float>(beta1_ * m_[i][j] + (1.0 - beta1_) * g[j]);
      v_[i][j] = static_cast<float>(beta2_ * v_[i][j] +
                                    (1.0 - beta2_) * static_cast<double>(g[j]) * g[j]);
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      data[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

std::string metrics_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,utility_loss,noise_term,mean_B,val_dice\n";
  char line[256];
  for (const EpochStats& e : history) {
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch,
                  e.utility_loss, e.noise_term, e.mean_b, e.val_dice);
    out += line;
  }
  return out;
}

namespace {

constexpr std::uint64_t kShuffleSalt = 0x73687566666C6531ULL;
constexpr std::uint64_t kEpsilonSalt = 0x657073696C6F6E31ULL;
constexpr std::uint64_t kEvalSalt = 0x6576616C5F657073ULL;
constexpr std::uint64_t kHeadSalt = 0x686561645F696E69ULL;

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

void shuffle_indices(std::vector<std::size_t>& idx, RngStream& stream) {
  for (std::size_t i = idx.size() - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(stream.next_int(static_cast<int>(i + 1)));
    std::swap(idx[i], idx[j]);
  }
}

void check_dims(const Dataset& ds, const UNetConfig& cfg, const char* who) {
  if (ds.empty()) throw std::invalid_argument(std::string(who) + ": dataset is empty");
  const Tensor& img = ds[0].image;
  const int div = 1 << cfg.depth;
  if (img.dim(1) % div != 0 || img.dim(2) % div != 0)
    throw std::invalid_argument(std::string(who) + ": image dims " +
                                std::to_string(img.dim(1)) + "x" +
                                std::to_string(img.dim(2)) +
                                " not divisible by 2^depth = " + std::to_string(div));
  if (img.dim(0) != cfg.in_channels)
    throw std::invalid_argument(std::string(who) + ": dataset has " +
                                std::to_string(img.dim(0)) +
                                " channels, config expects " +
                                std::to_string(cfg.in_channels));
}

// Mean dice of utility predictions on noise-perturbed validation inputs, plus
// the mean B over validation pixels. Deterministic per eval_stream.
std::pair<double, double> noised_validation(const ModelParams& utility,
                                            ModelParams& noise_model,
                                            const Dataset& val,
                                            const NoiseTrainConfig& cfg,
                                            RngStream eval_stream) {
  noise_model.set_requires_grad(false);
  double dice_sum = 0.0;
  double b_sum = 0.0;
  long long b_count = 0;
  for (std::size_t begin = 0; begin < val.size();
       begin += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end =
        std::min(val.size(), begin + static_cast<std::size_t>(cfg.batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    const Tensor x = stack_images(val, idx);
    Tensor logits = forward(noise_model, x);
    Tensor b = sigmoid(logits);
    Tensor eps = randn<float>(b.shape(), eval_stream);
    Tensor noised = apply_noise(x, b, static_cast<float>(cfg.sigma_min),
                                static_cast<float>(cfg.sigma_max), eps);
    Tensor pred = predict_masks(utility, noised);
    const int H = pred.dim(1), W = pred.dim(2);
    const long long plane = static_cast<long long>(H) * W;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::vector<float> one(pred.data() + static_cast<long long>(i) * plane,
                             pred.data() + static_cast<long long>(i + 1) * plane);
      dice_sum += dice(Tensor::from_data({H, W}, std::move(one)), val[idx[i]].mask);
    }
    for (long long j = 0; j < b.size(); ++j) b_sum += b.at(j);
    b_count += b.size();
  }
  noise_model.set_requires_grad(true);
  return {dice_sum / static_cast<double>(val.size()),
          b_sum / static_cast<double>(b_count)};
}

}  // namespace

TrainResult train_utility(const Dataset& dataset, const UNetConfig& config,
                          const TrainSettings& settings,
                          const EpochCallback& on_epoch) {
  check_dims(dataset, config, "train_utility");
  if (config.head != Head::kClassLogits)
    throw std::invalid_argument("train_utility: config must use the class-logits head");

  Dataset train, val;
  if (dataset.size() == 1) {
    train = dataset;  // degenerate case: validate on the training sample
    val = dataset;
  } else {
    std::tie(train, val) = split(dataset, 1.0 - settings.val_fraction, settings.seed);
  }

  ModelParams model = build_model<float>(config, settings.seed);
  model.set_requires_grad(true);
  AdamOptimizer opt(settings.lr);
  RngStream shuffle_stream(RngStream::mix64(settings.seed ^ kShuffleSalt));
  std::vector<EpochStats> history;
  ModelParams last_good = clone_params(model);  // latest finite-loss snapshot

  auto idx = all_indices(train.size());
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    shuffle_indices(idx, shuffle_stream);
    double loss_sum = 0.0;
    int steps = 0;
    for (std::size_t begin = 0; begin < idx.size();
         begin += static_cast<std::size_t>(settings.batch_size)) {
      const std::size_t end =
          std::min(idx.size(), begin + static_cast<std::size_t>(settings.batch_size));
      const std::vector<std::size_t> batch(idx.begin() + begin, idx.begin() + end);
      Tensor x = stack_images(train, batch);
      Tensor y = stack_masks(train, batch);
      Tensor loss = softmax_cross_entropy(forward(model, x), y);
      const double lval = loss.item();
      if (!std::isfinite(lval))
        throw DivergenceError("train_utility: non-finite loss at epoch " +
                                  std::to_string(epoch) + "; last good epoch " +
                                  std::to_string(epoch - 1),
                              last_good, epoch - 1);
      loss_sum += lval;
      ++steps;
      opt.zero_grad(model);
      backward(loss);
      opt.step(model);
    }
    model.set_requires_grad(false);
    const double vd = mean_validation_dice(model, val, settings.batch_size);
    model.set_requires_grad(true);
    history.push_back({epoch, loss_sum / steps, 0.0, 0.0, vd});
    if (on_epoch) on_epoch(history.back());
    last_good = clone_params(model);
  }

  model.set_requires_grad(false);
  model.provenance = Provenance::kUtilityCheckpoint;
  TrainResult result;
  result.final_val_dice = history.empty() ? 0.0 : history.back().val_dice;
  result.model = std::move(model);
  result.history = std::move(history);
  return result;
}

NoiseTrainResult train_unoise(const Dataset& dataset, const ModelParams& utility,
                              const UNetConfig& noise_arch,
                              const NoiseTrainConfig& cfg,
                              const EpochCallback& on_epoch) {
  validate(cfg);
  check_dims(dataset, noise_arch, "train_unoise");
  if (noise_arch.head != Head::kSingleChannelLogit)
    throw std::invalid_argument(
        "train_unoise: noise architecture must use the single-channel-logit head");
  if (utility.config.in_channels != noise_arch.in_channels)
    throw std::invalid_argument("train_unoise: utility and noise models disagree on "
                                "input channels");

  const std::uint64_t utility_hash_before = params_hash(utility);

  Dataset train, val;
  std::tie(train, val) = split(dataset, 1.0 - cfg.val_fraction, cfg.seed);

  ModelParams noise_model;
  if (cfg.pretrain) {
    TrainSettings pre;
    pre.lr = cfg.lr;
    pre.batch_size = cfg.batch_size;
    pre.epochs = cfg.pretrain_epochs > 0 ? cfg.pretrain_epochs : cfg.epochs;
    pre.seed = cfg.seed;
    pre.val_fraction = cfg.val_fraction;
    noise_model = pretrain_noise_model(dataset, noise_arch, pre);
  } else {
    noise_model = build_model<float>(noise_arch, cfg.seed);
  }
  noise_model.set_requires_grad(true);

  auto utility_fwd = [&utility](const Tensor& noised) {
    return forward(utility, noised);
  };

  AdamOptimizer opt(cfg.lr);
  RngStream shuffle_stream(RngStream::mix64(cfg.seed ^ kShuffleSalt));
  RngStream eps_stream(RngStream::mix64(cfg.seed ^ kEpsilonSalt));
  std::vector<EpochStats> history;
  ModelParams last_good = clone_params(noise_model);

  auto idx = all_indices(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_indices(idx, shuffle_stream);
    double ce_sum = 0.0, noise_sum = 0.0, b_sum = 0.0;
    int steps = 0;
    for (std::size_t begin = 0; begin < idx.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(idx.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> batch(idx.begin() + begin, idx.begin() + end);
      Tensor x = stack_images(train, batch);
      Tensor y = stack_masks(train, batch);
      Tensor logits = forward(noise_model, x);
      LossParts<float> parts = unoise_loss(x, y, logits, utility_fwd, cfg, eps_stream);
      const double total = parts.total.item();
      if (!std::isfinite(total))
        throw DivergenceError("train_unoise: non-finite loss at epoch " +
                                  std::to_string(epoch) + "; last good epoch " +
                                  std::to_string(epoch - 1),
                              last_good, epoch - 1);
      ce_sum += parts.utility_ce.item();
      noise_sum += -cfg.lambda * parts.log_b_mean.item();
      double bm = 0.0;
      for (long long j = 0; j < parts.mask_b.size(); ++j) bm += parts.mask_b.at(j);
      b_sum += bm / static_cast<double>(parts.mask_b.size());
      ++steps;
      opt.zero_grad(noise_model);
      backward(parts.total);
      opt.step(noise_model);
    }
    auto [vd, vb] = noised_validation(utility, noise_model, val, cfg,
                                      RngStream(RngStream::mix64(cfg.seed ^ kEvalSalt),
                                                0).derive(epoch));
    history.push_back({epoch, ce_sum / steps, noise_sum / steps, vb, vd});
    if (on_epoch) on_epoch(history.back());
    last_good = clone_params(noise_model);
  }

  if (params_hash(utility) != utility_hash_before)
    throw std::logic_error("train_unoise: frozen utility parameters changed");

  noise_model.set_requires_grad(false);
  NoiseTrainResult result;
  result.final_val_dice_noised = history.empty() ? 0.0 : history.back().val_dice;
  result.final_mean_b = history.empty() ? 0.0 : history.back().mean_b;
  result.noise_model = std::move(noise_model);
  result.history = std::move(history);
  return result;
}

ModelParams pretrain_noise_model(const Dataset& dataset, const UNetConfig& noise_arch,
                                 const TrainSettings& settings) {
  UNetConfig seg_cfg = noise_arch;
  seg_cfg.head = Head::kClassLogits;
  seg_cfg.out_channels = 2;
  TrainResult seg = train_utility(dataset, seg_cfg, settings);

  UNetConfig out_cfg = noise_arch;
  out_cfg.head = Head::kSingleChannelLogit;
  out_cfg.out_channels = 1;
  // fresh head, everything else from the segmentation run
  ModelParams fresh = build_model<float>(out_cfg, RngStream::mix64(settings.seed ^ kHeadSalt));
  ModelParams model;
  model.config = out_cfg;
  model.provenance = Provenance::kPretrainedSegmentation;
  for (auto& [name, tensor] : fresh.params) {
    if (name.rfind("head.", 0) == 0)
      model.params.emplace_back(name, tensor);
    else
      model.params.emplace_back(name, seg.model.at(name));
  }
  return model;
}

}  // namespace unoise
