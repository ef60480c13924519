#include "unoise/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "unoise/eval.hpp"

namespace unoise {

using nlohmann::json;

const char* map_method_name(MapMethod m) {
  switch (m) {
    case MapMethod::kUNoise:
      return "unoise";
    case MapMethod::kOcclusion:
      return "occlusion";
    case MapMethod::kGradCam:
      return "gradcam";
  }
  return "unoise";
}

namespace {

Tensor add_batch_dim(const Tensor& x) {
  if (x.ndim() != 3)
    throw std::invalid_argument("expected a CxHxW image, got " +
                                shape_str(x.shape()));
  return Tensor::from_data({1, x.dim(0), x.dim(1), x.dim(2)}, x.vec());
}

// Rescale to [0,1] recording the original range. A constant map stays 0.
ImportanceMap finalize_map(std::vector<float> values, int H, int W, MapMethod method,
                           bool empty_prediction = false) {
  ImportanceMap map;
  map.method = method;
  map.empty_prediction = empty_prediction;
  float lo = values.empty() ? 0.0f : values[0];
  float hi = lo;
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  map.scale_min = lo;
  map.scale_max = hi;
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (float& v : values) v = (v - lo) * inv;
  } else {
    std::fill(values.begin(), values.end(), 0.0f);
  }
  map.values = Tensor::from_data({H, W}, std::move(values));
  return map;
}

}  // namespace

std::pair<NoiseMask, ImportanceMap> unoise_map(const ModelParams& noise_model,
                                               const Tensor& x) {
  if (noise_model.config.head != Head::kSingleChannelLogit)
    throw std::invalid_argument(
        "unoise_map: model must have a single-channel-logit head");
  Tensor batch = add_batch_dim(x);
  Tensor logits_b = forward(noise_model, batch);  // 1 x H x W
  const int H = logits_b.dim(1), W = logits_b.dim(2);
  Tensor logits = Tensor::from_data({H, W}, logits_b.vec());
  Tensor b2 = sigmoid(logits);

  std::vector<float> vals(static_cast<std::size_t>(logits.size()));
  for (long long i = 0; i < logits.size(); ++i)
    vals[static_cast<std::size_t>(i)] = std::max(-logits.at(i), 0.0f);

  NoiseMask mask{logits, b2};
  return {mask, finalize_map(std::move(vals), H, W, MapMethod::kUNoise)};
}

ImportanceMap occlusion_sensitivity_with_fill(const ModelParams& utility,
                                              const Tensor& x, int window,
                                              int stride, const Tensor& fill_image) {
  if (x.ndim() != 3)
    throw std::invalid_argument("occlusion_sensitivity: expected CxHxW image");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (window > std::min(H, W) || window < 1)
    throw std::invalid_argument("occlusion_sensitivity: window " +
                                std::to_string(window) + " exceeds image " +
                                std::to_string(H) + "x" + std::to_string(W));
  if (stride <= 0)
    throw std::invalid_argument("occlusion_sensitivity: stride must be positive");
  if (fill_image.shape() != x.shape())
    throw std::invalid_argument("occlusion_sensitivity: fill image shape mismatch");

  const long long plane = static_cast<long long>(H) * W;
  Tensor base_pred_b = predict_masks(utility, add_batch_dim(x));
  Tensor base_pred = Tensor::from_data({H, W}, base_pred_b.vec());

  std::vector<double> accum(static_cast<std::size_t>(plane), 0.0);
  std::vector<int> cover(static_cast<std::size_t>(plane), 0);

  std::vector<float> work(x.vec());
  for (int oy = 0; oy + window <= H; oy += stride) {
    for (int ox = 0; ox + window <= W; ox += stride) {
      // occlude
      for (int c = 0; c < C; ++c)
        for (int y = oy; y < oy + window; ++y)
          for (int xx = ox; xx < ox + window; ++xx)
            work[static_cast<std::size_t>(c * plane + y * W + xx)] =
                fill_image.at(c * plane + y * W + xx);
      Tensor occluded =
          Tensor::from_data({1, C, H, W}, std::vector<float>(work));
      Tensor pred_b = predict_masks(utility, occluded);
      Tensor pred = Tensor::from_data({H, W}, pred_b.vec());
      const double score = 1.0 - dice(pred, base_pred);
      for (int y = oy; y < oy + window; ++y)
        for (int xx = ox; xx < ox + window; ++xx) {
          accum[static_cast<std::size_t>(y * W + xx)] += score;
          cover[static_cast<std::size_t>(y * W + xx)] += 1;
        }
      // restore
      for (int c = 0; c < C; ++c)
        for (int y = oy; y < oy + window; ++y)
          for (int xx = ox; xx < ox + window; ++xx)
            work[static_cast<std::size_t>(c * plane + y * W + xx)] =
                x.at(c * plane + y * W + xx);
    }
  }

  // raw per-pixel means; 1 - dice is already in [0,1], no per-image rescale
  std::vector<float> vals(static_cast<std::size_t>(plane), 0.0f);
  for (long long i = 0; i < plane; ++i)
    if (cover[static_cast<std::size_t>(i)] > 0)
      vals[static_cast<std::size_t>(i)] = static_cast<float>(
          accum[static_cast<std::size_t>(i)] / cover[static_cast<std::size_t>(i)]);
  ImportanceMap map;
  map.method = MapMethod::kOcclusion;
  map.scale_min = 0.0;
  map.scale_max = 1.0;
  map.values = Tensor::from_data({H, W}, std::move(vals));
  return map;
}

ImportanceMap occlusion_sensitivity(const ModelParams& utility, const Tensor& x,
                                    int window, int stride, float fill) {
  Tensor fill_image = Tensor::full(x.shape(), fill);
  return occlusion_sensitivity_with_fill(utility, x, window, stride, fill_image);
}

ImportanceMap grad_cam(const ModelParams& utility, const Tensor& x,
                       int target_class) {
  if (utility.config.head != Head::kClassLogits)
    throw std::invalid_argument("grad_cam: model must have a class-logits head");
  Tensor batch = add_batch_dim(x);
  batch.set_requires_grad(true);  // record the graph down to the bottleneck
  ForwardTrace<float> trace = forward_traced(utility, batch);

  bool empty = false;
  Tensor raw = grad_cam_raw(trace.output, trace.bottleneck, target_class, &empty);

  // back to input resolution: one bilinear doubling per depth stage
  Tensor up = Tensor::from_data({1, 1, raw.dim(1), raw.dim(2)}, raw.vec());
  for (int d = 0; d < utility.config.depth; ++d) up = upsample_bilinear2x(up);
  const int H = up.dim(2), W = up.dim(3);

  std::vector<float> vals(up.vec());
  return finalize_map(std::move(vals), H, W, MapMethod::kGradCam, empty);
}

void write_pgm_with_sidecar(const ImportanceMap& map, const std::string& path) {
  const int H = map.values.dim(0), W = map.values.dim(1);
  std::string pgm = "P2\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const float v = map.values.at(static_cast<long long>(y) * W + x);
      const int q = std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
      pgm += std::to_string(q);
      pgm += (x + 1 == W) ? '\n' : ' ';
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write map: " + path);
  out << pgm;

  // 8-bit value q maps back to scale_min + (q/255)*(scale_max - scale_min).
  const json sidecar = {{"method", map_method_name(map.method)},
                        {"scale_min", map.scale_min},
                        {"scale_max", map.scale_max},
                        {"orientation", "higher-is-more-important"},
                        {"empty_prediction", map.empty_prediction}};
  std::ofstream side(path + ".json", std::ios::binary | std::ios::trunc);
  if (!side) throw std::runtime_error("cannot write sidecar: " + path + ".json");
  side << sidecar.dump(2) << "\n";
}

}  // namespace unoise
