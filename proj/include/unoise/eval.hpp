#pragma once

#include <string>
#include <utility>
#include <vector>

#include "unoise/data.hpp"
#include "unoise/tensor.hpp"
#include "unoise/training.hpp"
#include "unoise/unet.hpp"

namespace unoise {

// One row of an evaluation sweep.
struct MetricsRecord {
  double threshold = 0.0;
  double percent_visible = 0.0;  // fraction of pixels with B <= threshold
  double dice = 0.0;
  std::string model_tag;
  bool pretrained = false;
};

// 2|P∩T| / (|P|+|T|) over binary H x W masks. Both empty -> 1.0; exactly one
// empty -> 0.0.
double dice(const Tensor& pred, const Tensor& target);

// Argmax-over-classes prediction masks for a class-logits model.
// x: N x C x H x W -> N x H x W with values {0..K-1} as floats.
Tensor predict_masks(const ModelParams& utility, const Tensor& x);

// Stacks dataset samples into batch tensors.
Tensor stack_images(const Dataset& ds, const std::vector<std::size_t>& indices);
Tensor stack_masks(const Dataset& ds, const std::vector<std::size_t>& indices);

// Mean utility dice against ground truth over a dataset (clean inputs).
double mean_validation_dice(const ModelParams& utility, const Dataset& ds,
                            int batch_size = 8);

// Keeps pixels with B <= t, zeroes the rest across all channels.
// x: C x H x W, B: H x W. Returns (thresholded image, percent visible).
std::pair<Tensor, double> threshold_visibility(const Tensor& x, const Tensor& mask_b,
                                               double t);

// For each threshold: mean dice of utility predictions on thresholded images
// vs ground truth, and mean percent visible. Appends t = 1 as the unmasked
// reference row if absent. Deterministic and epsilon-free.
std::vector<MetricsRecord> visibility_sweep(const ModelParams& utility,
                                            const ModelParams& noise_model,
                                            const Dataset& ds,
                                            std::vector<double> thresholds,
                                            const std::string& model_tag = "",
                                            bool pretrained = false);

// CSV with the fixed header threshold,percent_visible,dice,model,pretrained.
std::string sweep_csv(const std::vector<MetricsRecord>& records);

// Dice at the sweep row whose percent_visible is closest to `target_visible`.
const MetricsRecord& record_nearest_visibility(const std::vector<MetricsRecord>& rec,
                                               double target_visible);

struct PretrainComparisonCell {
  std::string size;  // "small" | "medium" | "large"
  bool pretrained = false;
  double threshold = 0.0;
  double percent_visible = 0.0;
  double dice = 0.0;
};

// Trains a noise model per (size, pretrained) cell on demand and reports the
// dice at the threshold whose percent visibility is closest to 50%.
std::vector<PretrainComparisonCell> pretraining_comparison(
    const Dataset& dataset, const ModelParams& utility,
    const std::vector<std::string>& sizes, const NoiseTrainConfig& base_cfg);

std::string pretrain_csv(const std::vector<PretrainComparisonCell>& cells);

// Preset architectures (small/medium/large: depth 2/3/4, base 16).
UNetConfig noise_preset(const std::string& size);

struct BenchmarkRow {
  std::string method;
  double mean_seconds = 0.0;
  int trials = 0;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
  Shape input_shape;
  int trials = 0;
  std::string host;
};

// Mean wall-clock seconds per importance-map computation, one warm-up run
// excluded, strictly single-threaded per method.
BenchmarkReport runtime_benchmark(const ModelParams& utility,
                                  const ModelParams& noise_model, const Tensor& x,
                                  int trials = 10);

std::string benchmark_csv(const BenchmarkReport& report);
std::string benchmark_table(const BenchmarkReport& report);

}  // namespace unoise
