#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unoise/rng.hpp"
#include "unoise/tensor.hpp"

namespace unoise {

// Architecture descriptor. `depth` is the number of downsample (and matching
// upsample) stages; spatial input dims must be divisible by 2^depth. The
// channel count at stage d is base_channels * 2^d.
enum class Head { kClassLogits, kSingleChannelLogit };

struct UNetConfig {
  int depth = 3;
  int base_channels = 16;
  int in_channels = 1;
  int out_channels = 2;
  Head head = Head::kClassLogits;
};

inline const char* head_name(Head h) {
  return h == Head::kClassLogits ? "class-logits" : "single-channel-logit";
}
Head head_from_name(const std::string& name);

enum class Provenance { kRandomInit, kUtilityCheckpoint, kPretrainedSegmentation };
const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

// Named parameter set induced by a UNetConfig. Parameter names follow a fixed
// schema so checkpoints round-trip exactly:
//   enc{d}.conv{1,2}.{weight,bias}     encoder double blocks, d = 0..depth-1
//   bottleneck.conv{1,2}.{weight,bias}
//   dec{d}.up.{weight,bias}            3x3 conv applied after bilinear 2x
//   dec{d}.conv{1,2}.{weight,bias}     decoder double blocks, d = depth-1..0
//   head.{weight,bias}                 final 1x1 conv
// in exactly that (build) order.
template <typename S>
struct ModelParamsT {
  UNetConfig config;
  Provenance provenance = Provenance::kRandomInit;
  std::vector<std::pair<std::string, TensorT<S>>> params;

  TensorT<S>& at(const std::string& name) {
    for (auto& [k, v] : params)
      if (k == name) return v;
    throw std::out_of_range("model parameter not found: " + name);
  }
  const TensorT<S>& at(const std::string& name) const {
    for (const auto& [k, v] : params)
      if (k == name) return v;
    throw std::out_of_range("model parameter not found: " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& [k, v] : params)
      if (k == name) return true;
    return false;
  }

  void set_requires_grad(bool b) {
    for (auto& [k, v] : params) v.set_requires_grad(b);
  }
  void zero_grad() {
    for (auto& [k, v] : params) v.zero_grad();
  }
  long long total_elements() const {
    long long n = 0;
    for (const auto& [k, v] : params) n += v.size();
    return n;
  }
};

using ModelParams = ModelParamsT<float>;

namespace unet_detail {

struct LayerSpec {
  std::string name;
  int in_ch;
  int out_ch;
  int kernel;
};

// The full conv-layer list for a config, in build order. Single source of
// truth for build(), count_parameters() and the checkpoint schema.
std::vector<LayerSpec> layer_specs(const UNetConfig& cfg);

}  // namespace unet_detail

void validate_config(const UNetConfig& cfg);

// Closed-form parameter count: sum over conv layers of out*(in*k*k + 1).
// Per layer, in build order (F = base_channels, D = depth, Cin/Cout = i/o):
//   enc0:        F(9*Cin+1) + F(9F+1)
//   enc d>=1:    F2^d(9*F2^{d-1}+1) + F2^d(9*F2^d+1)
//   bottleneck:  F2^D(9*F2^{D-1}+1) + F2^D(9*F2^D+1)
//   dec d:       up F2^d(9*F2^{d+1}+1); conv1 F2^d(9*2F2^d+1); conv2 F2^d(9*F2^d+1)
//   head:        Cout(F+1)
long long count_parameters(const UNetConfig& cfg);

// Kaiming-uniform (fan-in) initialized parameter set, deterministic per seed.
template <typename S>
ModelParamsT<S> build_model(const UNetConfig& cfg, std::uint64_t init_seed) {
  validate_config(cfg);
  ModelParamsT<S> model;
  model.config = cfg;
  model.provenance = Provenance::kRandomInit;
  RngStream stream(init_seed);
  for (const auto& spec : unet_detail::layer_specs(cfg)) {
    const int fan_in = spec.in_ch * spec.kernel * spec.kernel;
    const double wbound = std::sqrt(6.0 / fan_in);
    const double bbound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<S> w(static_cast<std::size_t>(spec.out_ch) * fan_in);
    for (S& v : w) v = static_cast<S>(stream.next_uniform_sym(wbound));
    std::vector<S> b(static_cast<std::size_t>(spec.out_ch));
    for (S& v : b) v = static_cast<S>(stream.next_uniform_sym(bbound));
    model.params.emplace_back(
        spec.name + ".weight",
        TensorT<S>::from_data({spec.out_ch, spec.in_ch, spec.kernel, spec.kernel},
                              std::move(w)));
    model.params.emplace_back(spec.name + ".bias",
                              TensorT<S>::from_data({spec.out_ch}, std::move(b)));
  }
  return model;
}

// Throws if `model` does not carry exactly the parameter schema of `cfg`;
// names the first missing or incompatible key.
template <typename S>
void check_schema(const ModelParamsT<S>& model, const UNetConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> expected;
  for (const auto& spec : unet_detail::layer_specs(cfg)) {
    expected.emplace_back(spec.name + ".weight",
                          Shape{spec.out_ch, spec.in_ch, spec.kernel, spec.kernel});
    expected.emplace_back(spec.name + ".bias", Shape{spec.out_ch});
  }
  for (const auto& [name, shape] : expected) {
    if (!model.has(name))
      throw std::runtime_error("checkpoint schema mismatch: missing parameter '" +
                               name + "' required by config (depth " +
                               std::to_string(cfg.depth) + ", base " +
                               std::to_string(cfg.base_channels) + ")");
    const Shape& got = model.at(name).shape();
    if (got != shape)
      throw std::runtime_error("checkpoint schema mismatch: parameter '" + name +
                               "' has shape " + shape_str(got) + ", config needs " +
                               shape_str(shape));
  }
  if (model.params.size() != expected.size())
    throw std::runtime_error(
        "checkpoint schema mismatch: checkpoint carries " +
        std::to_string(model.params.size()) + " parameters, config needs " +
        std::to_string(expected.size()));
}

// Forward pass and, optionally, the bottleneck activation (the deepest
// double-block output, before any upsampling).
template <typename S>
struct ForwardTrace {
  TensorT<S> output;      // class-logits: N x out x H x W; single-logit: N x H x W
  TensorT<S> bottleneck;  // N x (base * 2^depth) x H/2^depth x W/2^depth
};

template <typename S>
ForwardTrace<S> forward_traced(const ModelParamsT<S>& model, const TensorT<S>& x) {
  const UNetConfig& cfg = model.config;
  if (x.ndim() != 4)
    throw std::invalid_argument("forward: input must be NxCxHxW, got " +
                                shape_str(x.shape()));
  if (x.dim(1) != cfg.in_channels)
    throw std::invalid_argument("forward: input has " + std::to_string(x.dim(1)) +
                                " channels, model expects " +
                                std::to_string(cfg.in_channels));
  const int div = 1 << cfg.depth;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
    throw std::invalid_argument(
        "forward: spatial dims " + std::to_string(x.dim(2)) + "x" +
        std::to_string(x.dim(3)) + " must be divisible by " + std::to_string(div) +
        " (2^depth)");

  auto block = [&](const TensorT<S>& in, const std::string& prefix) {
    auto h = relu(conv2d(in, model.at(prefix + ".conv1.weight"),
                         model.at(prefix + ".conv1.bias"), 1, 1));
    return relu(conv2d(h, model.at(prefix + ".conv2.weight"),
                       model.at(prefix + ".conv2.bias"), 1, 1));
  };

  std::vector<TensorT<S>> skips;
  TensorT<S> h = x;
  for (int d = 0; d < cfg.depth; ++d) {
    h = block(h, "enc" + std::to_string(d));
    skips.push_back(h);
    h = max_pool2d(h, 2);
  }
  h = block(h, "bottleneck");
  TensorT<S> bottleneck = h;
  for (int d = cfg.depth - 1; d >= 0; --d) {
    const std::string prefix = "dec" + std::to_string(d);
    h = conv2d(upsample_bilinear2x(h), model.at(prefix + ".up.weight"),
               model.at(prefix + ".up.bias"), 1, 1);
    h = block(concat_channels(skips[static_cast<std::size_t>(d)], h), prefix);
  }
  h = conv2d(h, model.at("head.weight"), model.at("head.bias"), 1, 0);

  ForwardTrace<S> trace;
  trace.bottleneck = bottleneck;
  if (cfg.head == Head::kSingleChannelLogit)
    trace.output = select_channel(h, 0);
  else
    trace.output = h;
  return trace;
}

template <typename S>
TensorT<S> forward(const ModelParamsT<S>& model, const TensorT<S>& x) {
  return forward_traced(model, x).output;
}

// Deep copy: parameter buffers are duplicated, not shared.
template <typename S>
ModelParamsT<S> clone_params(const ModelParamsT<S>& m) {
  ModelParamsT<S> out;
  out.config = m.config;
  out.provenance = m.provenance;
  out.params.reserve(m.params.size());
  for (const auto& [name, t] : m.params)
    out.params.emplace_back(name, t.detach_copy());
  return out;
}

// FNV-1a over the parameter buffers, for frozen-model assertions.
template <typename S>
std::uint64_t params_hash(const ModelParamsT<S>& model) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto feed = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& [name, t] : model.params) {
    feed(reinterpret_cast<const unsigned char*>(name.data()), name.size());
    feed(reinterpret_cast<const unsigned char*>(t.data()), t.size() * sizeof(S));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint file format
// ---------------------------------------------------------------------------
// magic "UNSE" | format version u16 LE | header length u32 LE |
// UTF-8 JSON header (config, provenance, ordered name -> shape/offset table) |
// raw little-endian float32 buffers in header order.
// Round-trips bit-exactly for float32 models.

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const ModelParams& model, const std::string& path);
ModelParams load_checkpoint(const std::string& path);
// Load and validate against an expected architecture.
ModelParams load_checkpoint(const std::string& path, const UNetConfig& expected);

}  // namespace unoise
