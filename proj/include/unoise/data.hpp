#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unoise/tensor.hpp"

namespace unoise {

// Half-open pixel box [y0, y1) x [x0, x1).
struct Box {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  int height() const { return y1 - y0; }
  int width() const { return x1 - x0; }
  bool overlaps(const Box& o) const {
    return y0 < o.y1 && o.y0 < y1 && x0 < o.x1 && o.x0 < x1;
  }
  Box inflated(int margin) const {
    return {y0 - margin, x0 - margin, y1 + margin, x1 + margin};
  }
  bool operator==(const Box& o) const = default;
};

struct SampleMeta {
  Box landmark;
  Box target;
  std::vector<Box> distractors;
};

// One segmentation example: image C x H x W in [0,1], mask H x W in {0,1}.
struct Sample {
  std::string id;
  Tensor image;
  Tensor mask;
  SampleMeta meta;
  bool has_meta = false;
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  const Sample& operator[](std::size_t i) const { return samples[i]; }
};

// Context-dependent synthetic segmentation task. Each image contains one
// landmark (a cross) and 1 + n_distractors blobs (discs) drawn from the same
// appearance distribution. The single blob sitting at (offset_y, offset_x)
// from the landmark center is the target; without the landmark the blobs are
// statistically indistinguishable, so segmenting correctly requires context.
struct SyntheticTaskSpec {
  int image_size = 64;
  int n_distractors = 3;

  // landmark: axis-aligned cross
  int landmark_arm = 5;        // arm length from center
  int landmark_thickness = 3;  // bar thickness
  double landmark_intensity = 0.35;

  // blobs: filled discs, radius drawn uniformly from [blob_r_min, blob_r_max].
  // The radius range doubles as the class-balance control (target area vs
  // image area).
  int blob_r_min = 4;
  int blob_r_max = 6;
  double blob_intensity = 0.7;

  // displacement from landmark center to the true target center; must be
  // large enough that a maximal-radius blob clears the landmark box by
  // min_separation
  int offset_y = 6;
  int offset_x = 15;

  double background_base = 0.08;
  double background_noise = 0.02;

  int min_separation = 2;  // minimum gap between any two shapes, in pixels
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// n samples, deterministic per (spec, seed); sample i depends only on the
// derived substream (seed, i).
Dataset generate_synthetic(const SyntheticTaskSpec& spec, int n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk dataset layout
// ---------------------------------------------------------------------------
// <dir>/manifest.json     version, class names, normalization window, samples
// <dir>/<id>.img.f32      raw little-endian float32, C*H*W row-major
// <dir>/<id>.mask.u8      raw uint8, H*W row-major, values in {0,1}
//
// On load, image values v are mapped through the manifest's normalization
// window [lo, hi]: clamp((v - lo) / (hi - lo), 0, 1). Datasets written by
// save_dataset use the identity window [0, 1].

void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& manifest_path);

// Deterministic shuffle-then-cut split into (train, validation).
std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed);

}  // namespace unoise
