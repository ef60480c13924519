#include "unoise/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

#include "unoise/interpret.hpp"

namespace unoise {

double dice(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("dice: shape mismatch " + shape_str(pred.shape()) +
                                " vs " + shape_str(target.shape()));
  long long p = 0, t = 0, both = 0;
  for (long long i = 0; i < pred.size(); ++i) {
    const float pv = pred.at(i);
    const float tv = target.at(i);
    if ((pv != 0.0f && pv != 1.0f) || (tv != 0.0f && tv != 1.0f))
      throw std::invalid_argument("dice: masks must be binary (0/1), got " +
                                  std::to_string(pv) + " / " + std::to_string(tv));
    p += pv == 1.0f;
    t += tv == 1.0f;
    both += (pv == 1.0f && tv == 1.0f);
  }
  if (p + t == 0) return 1.0;  // both empty, by convention
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

Tensor predict_masks(const ModelParams& utility, const Tensor& x) {
  if (utility.config.head != Head::kClassLogits)
    throw std::invalid_argument("predict_masks: model must have a class-logits head");
  Tensor logits = forward(utility, x);
  const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const long long plane = static_cast<long long>(H) * W;
  std::vector<float> out(static_cast<std::size_t>(N) * plane);
  for (int n = 0; n < N; ++n) {
    const long long base = static_cast<long long>(n) * K * plane;
    for (long long px = 0; px < plane; ++px) {
      int best = 0;
      float bestv = logits.at(base + px);
      for (int k = 1; k < K; ++k) {
        const float v = logits.at(base + k * plane + px);
        if (v > bestv) {
          bestv = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(n * plane + px)] = static_cast<float>(best);
    }
  }
  return Tensor::from_data({N, H, W}, std::move(out));
}

Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const Shape& s = ds[indices[0]].image.shape();
  const long long per = shape_numel(s);
  std::vector<float> out(static_cast<std::size_t>(per) * indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& img = ds[indices[i]].image;
    if (img.shape() != s)
      throw std::invalid_argument("stack_images: inconsistent image shapes");
    std::copy_n(img.data(), per, out.data() + static_cast<long long>(i) * per);
  }
  return Tensor::from_data({static_cast<int>(indices.size()), s[0], s[1], s[2]},
                           std::move(out));
}

Tensor stack_masks(const Dataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_masks: empty batch");
  const Shape& s = ds[indices[0]].mask.shape();
  const long long per = shape_numel(s);
  std::vector<float> out(static_cast<std::size_t>(per) * indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& m = ds[indices[i]].mask;
    if (m.shape() != s)
      throw std::invalid_argument("stack_masks: inconsistent mask shapes");
    std::copy_n(m.data(), per, out.data() + static_cast<long long>(i) * per);
  }
  return Tensor::from_data({static_cast<int>(indices.size()), s[0], s[1]},
                           std::move(out));
}

double mean_validation_dice(const ModelParams& utility, const Dataset& ds,
                            int batch_size) {
  if (ds.empty()) throw std::invalid_argument("mean_validation_dice: empty dataset");
  double sum = 0.0;
  for (std::size_t begin = 0; begin < ds.size();
       begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(ds.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    Tensor pred = predict_masks(utility, stack_images(ds, idx));
    const int H = pred.dim(1), W = pred.dim(2);
    const long long plane = static_cast<long long>(H) * W;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::vector<float> one(pred.data() + static_cast<long long>(i) * plane,
                             pred.data() + static_cast<long long>(i + 1) * plane);
      sum += dice(Tensor::from_data({H, W}, std::move(one)), ds[idx[i]].mask);
    }
  }
  return sum / static_cast<double>(ds.size());
}

std::pair<Tensor, double> threshold_visibility(const Tensor& x, const Tensor& mask_b,
                                               double t) {
  if (x.ndim() != 3 || mask_b.ndim() != 2 || x.dim(1) != mask_b.dim(0) ||
      x.dim(2) != mask_b.dim(1))
    throw std::invalid_argument("threshold_visibility: expected x CxHxW and B HxW");
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("threshold_visibility: t must be in [0, 1]");
  const int C = x.dim(0);
  const long long plane = mask_b.size();
  std::vector<float> out(x.vec());
  long long visible = 0;
  for (long long px = 0; px < plane; ++px) {
    if (static_cast<double>(mask_b.at(px)) <= t) {
      ++visible;
    } else {
      for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c * plane + px)] = 0.0f;
    }
  }
  return {Tensor::from_data(x.shape(), std::move(out)),
          static_cast<double>(visible) / static_cast<double>(plane)};
}

std::vector<MetricsRecord> visibility_sweep(const ModelParams& utility,
                                            const ModelParams& noise_model,
                                            const Dataset& ds,
                                            std::vector<double> thresholds,
                                            const std::string& model_tag,
                                            bool pretrained) {
  if (ds.empty()) throw std::invalid_argument("visibility_sweep: empty dataset");
  if (std::find(thresholds.begin(), thresholds.end(), 1.0) == thresholds.end())
    thresholds.push_back(1.0);  // unmasked reference row

  // One noise-model forward per image, reused across thresholds.
  std::vector<Tensor> masks;
  masks.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor logits = forward(noise_model, stack_images(ds, {i}));
    Tensor b = sigmoid(logits);
    masks.push_back(Tensor::from_data({b.dim(1), b.dim(2)}, b.vec()));
  }

  std::vector<MetricsRecord> records;
  for (double t : thresholds) {
    double dice_sum = 0.0, vis_sum = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto [xt, vis] = threshold_visibility(ds[i].image, masks[i], t);
      const Shape& s = xt.shape();
      Tensor batch = Tensor::from_data({1, s[0], s[1], s[2]}, xt.vec());
      Tensor pred = predict_masks(utility, batch);
      dice_sum += dice(Tensor::from_data({pred.dim(1), pred.dim(2)}, pred.vec()),
                       ds[i].mask);
      vis_sum += vis;
    }
    MetricsRecord rec;
    rec.threshold = t;
    rec.percent_visible = vis_sum / static_cast<double>(ds.size());
    rec.dice = dice_sum / static_cast<double>(ds.size());
    rec.model_tag = model_tag;
    rec.pretrained = pretrained;
    records.push_back(std::move(rec));
  }
  return records;
}

std::string sweep_csv(const std::vector<MetricsRecord>& records) {
  std::string out = "threshold,percent_visible,dice,model,pretrained\n";
  char line[256];
  for (const MetricsRecord& r : records) {
    std::snprintf(line, sizeof(line), "%.9g,%.9g,%.9g,%s,%d\n", r.threshold,
                  r.percent_visible, r.dice, r.model_tag.c_str(),
                  r.pretrained ? 1 : 0);
    out += line;
  }
  return out;
}

const MetricsRecord& record_nearest_visibility(const std::vector<MetricsRecord>& rec,
                                               double target_visible) {
  if (rec.empty()) throw std::invalid_argument("record_nearest_visibility: no records");
  std::size_t best = 0;
  double best_d = std::abs(rec[0].percent_visible - target_visible);
  for (std::size_t i = 1; i < rec.size(); ++i) {
    const double d = std::abs(rec[i].percent_visible - target_visible);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return rec[best];
}

UNetConfig noise_preset(const std::string& size) {
  UNetConfig cfg;
  cfg.base_channels = 16;
  cfg.in_channels = 1;
  cfg.out_channels = 1;
  cfg.head = Head::kSingleChannelLogit;
  if (size == "small")
    cfg.depth = 2;
  else if (size == "medium")
    cfg.depth = 3;
  else if (size == "large")
    cfg.depth = 4;
  else
    throw std::invalid_argument("unknown model size preset: " + size +
                                " (expected small|medium|large)");
  return cfg;
}

std::vector<PretrainComparisonCell> pretraining_comparison(
    const Dataset& dataset, const ModelParams& utility,
    const std::vector<std::string>& sizes, const NoiseTrainConfig& base_cfg) {
  // 21-point threshold grid; dice read off at the row nearest 50% visibility.
  std::vector<double> thresholds;
  for (int i = 0; i <= 20; ++i) thresholds.push_back(i / 20.0);

  Dataset train, val;
  std::tie(train, val) = split(dataset, 1.0 - base_cfg.val_fraction, base_cfg.seed);

  std::vector<PretrainComparisonCell> cells;
  for (const std::string& size : sizes) {
    for (bool pretrained : {false, true}) {
      NoiseTrainConfig cfg = base_cfg;
      cfg.pretrain = pretrained;
      NoiseTrainResult run = train_unoise(dataset, utility, noise_preset(size), cfg);
      auto records = visibility_sweep(utility, run.noise_model, val, thresholds,
                                      size, pretrained);
      const MetricsRecord& at50 = record_nearest_visibility(records, 0.5);
      cells.push_back(
          {size, pretrained, at50.threshold, at50.percent_visible, at50.dice});
    }
  }
  return cells;
}

std::string pretrain_csv(const std::vector<PretrainComparisonCell>& cells) {
  std::string out = "model,pretrained,threshold,percent_visible,dice\n";
  char line[256];
  for (const PretrainComparisonCell& c : cells) {
    std::snprintf(line, sizeof(line), "%s,%d,%.9g,%.9g,%.9g\n", c.size.c_str(),
                  c.pretrained ? 1 : 0, c.threshold, c.percent_visible, c.dice);
    out += line;
  }
  return out;
}

BenchmarkReport runtime_benchmark(const ModelParams& utility,
                                  const ModelParams& noise_model, const Tensor& x,
                                  int trials) {
  if (trials < 1) throw std::invalid_argument("runtime_benchmark: trials must be >= 1");
  using clock = std::chrono::steady_clock;

  const int saved_threads = kernel_threads();
  kernel_threads() = 1;  // timings comparable across methods

  auto timed = [&](auto&& fn) {
    fn();  // warm-up, excluded
    double total = 0.0;
    for (int i = 0; i < trials; ++i) {
      const auto start = clock::now();
      fn();
      total += std::chrono::duration<double>(clock::now() - start).count();
    }
    return total / trials;
  };

  BenchmarkReport report;
  report.input_shape = x.shape();
  report.trials = trials;
  report.host = "cpu-hw-threads=" + std::to_string(std::thread::hardware_concurrency());
  report.rows.push_back(
      {"unoise", timed([&] { unoise_map(noise_model, x); }), trials});
  report.rows.push_back({"gradcam", timed([&] { grad_cam(utility, x, 1); }), trials});
  report.rows.push_back(
      {"occlusion", timed([&] { occlusion_sensitivity(utility, x, 15, 2, 0.0f); }),
       trials});

  kernel_threads() = saved_threads;
  return report;
}

std::string benchmark_csv(const BenchmarkReport& report) {
  std::string out = "method,mean_seconds,trials,input_shape,host\n";
  char line[256];
  for (const BenchmarkRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%s,%.9g,%d,%s,%s\n", r.method.c_str(),
                  r.mean_seconds, r.trials, shape_str(report.input_shape).c_str(),
                  report.host.c_str());
    out += line;
  }
  return out;
}

std::string benchmark_table(const BenchmarkReport& report) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof(line), "%-12s %14s   (input %s, %d trials, %s)\n",
                "method", "mean seconds", shape_str(report.input_shape).c_str(),
                report.trials, report.host.c_str());
  out += line;
  for (const BenchmarkRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%-12s %14.6f\n", r.method.c_str(),
                  r.mean_seconds);
    out += line;
  }
  return out;
}

}  // namespace unoise
