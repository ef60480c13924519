#pragma once

#include <string>
#include <utility>

#include "unoise/tensor.hpp"
#include "unoise/unet.hpp"

namespace unoise {

// Pre-sigmoid logits and the (0,1) noise mask they induce, H x W.
struct NoiseMask {
  Tensor logits;
  Tensor mask_b;
};

enum class MapMethod { kUNoise, kOcclusion, kGradCam };
const char* map_method_name(MapMethod m);

// Per-pixel importance, H x W, rescaled to [0,1]; higher = more important for
// every method. scale_min/scale_max record the pre-rescale value range.
struct ImportanceMap {
  Tensor values;
  MapMethod method = MapMethod::kUNoise;
  bool empty_prediction = false;  // grad-cam: no pixel predicted as target
  double scale_min = 0.0;
  double scale_max = 0.0;
};

// Importance = max(-logits, 0), rescaled per image: a strongly negative
// pre-sigmoid logit means the pixel tolerates almost no noise. The raw mask
// is returned alongside for thresholding sweeps.
// x: C x H x W (a batch dimension of 1 is added internally).
std::pair<NoiseMask, ImportanceMap> unoise_map(const ModelParams& noise_model,
                                               const Tensor& x);

// Slides a window x window patch with the given stride, occludes it with the
// matching pixels of fill_image, and scores 1 - dice(occluded prediction,
// unoccluded prediction). Per-pixel values are the mean over the windows
// covering the pixel.
ImportanceMap occlusion_sensitivity_with_fill(const ModelParams& utility,
                                              const Tensor& x, int window,
                                              int stride, const Tensor& fill_image);

// Constant-fill variant (the usual baseline).
ImportanceMap occlusion_sensitivity(const ModelParams& utility, const Tensor& x,
                                    int window = 15, int stride = 2,
                                    float fill = 0.0f);

// Core of grad-cam: given graph-recorded logits (1 x K x H x W) and the
// bottleneck activation (1 x Cb x h x w) of the same forward pass, computes
// relu(sum_k w_k A_k) at bottleneck resolution, where w_k is the spatial mean
// of d(score)/dA_k and score is the sum of target-class logits over pixels
// predicted as the target class. Sets *empty_prediction when no pixel is
// predicted as the target (result is the zero map).
template <typename S>
TensorT<S> grad_cam_raw(const TensorT<S>& logits, const TensorT<S>& bottleneck,
                        int target_class, bool* empty_prediction) {
  if (logits.ndim() != 4 || logits.dim(0) != 1)
    throw std::invalid_argument("grad_cam_raw: logits must be 1xKxHxW");
  if (target_class < 0 || target_class >= logits.dim(1))
    throw std::invalid_argument("grad_cam_raw: target class out of range");
  const int K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const long long plane = static_cast<long long>(H) * W;

  // pixels where argmax == target_class
  std::vector<S> sel(static_cast<std::size_t>(plane), S(0));
  bool any = false;
  for (long long px = 0; px < plane; ++px) {
    int best = 0;
    S bestv = logits.at(px);
    for (int k = 1; k < K; ++k) {
      const S v = logits.at(k * plane + px);
      if (v > bestv) {
        bestv = v;
        best = k;
      }
    }
    if (best == target_class) {
      sel[static_cast<std::size_t>(px)] = S(1);
      any = true;
    }
  }
  const int hb = bottleneck.dim(2), wb = bottleneck.dim(3);
  if (empty_prediction) *empty_prediction = !any;
  if (!any) return TensorT<S>::zeros({1, hb, wb});

  auto mask = TensorT<S>::from_data({1, H, W}, std::move(sel));
  auto score = sum(mul(select_channel(logits, target_class), mask));
  backward(score);

  const auto& grad_a = bottleneck.node()->grad;
  if (grad_a.empty())
    throw std::logic_error("grad_cam_raw: bottleneck received no gradient; "
                           "was the forward pass recorded?");
  const int cb = bottleneck.dim(1);
  const long long bplane = static_cast<long long>(hb) * wb;
  std::vector<S> map(static_cast<std::size_t>(bplane), S(0));
  for (int k = 0; k < cb; ++k) {
    S w = S(0);
    for (long long i = 0; i < bplane; ++i) w += grad_a[k * bplane + i];
    w /= static_cast<S>(bplane);
    for (long long i = 0; i < bplane; ++i)
      map[static_cast<std::size_t>(i)] += w * bottleneck.at(k * bplane + i);
  }
  for (S& v : map) v = v > S(0) ? v : S(0);
  return TensorT<S>::from_data({1, hb, wb}, std::move(map));
}

// Grad-cam against the utility model's bottleneck, bilinearly upsampled back
// to input resolution and rescaled to [0,1]. x: C x H x W.
ImportanceMap grad_cam(const ModelParams& utility, const Tensor& x,
                       int target_class = 1);

// P2 (ASCII) 8-bit PGM, row-major, plus a <path>.json sidecar recording the
// method, the min/max scaling, and flags. Byte-identical for identical inputs.
void write_pgm_with_sidecar(const ImportanceMap& map, const std::string& path);

}  // namespace unoise
