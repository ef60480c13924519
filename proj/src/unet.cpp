#include "unoise/unet.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace unoise {

using nlohmann::json;

Head head_from_name(const std::string& name) {
  if (name == "class-logits") return Head::kClassLogits;
  if (name == "single-channel-logit") return Head::kSingleChannelLogit;
  throw std::invalid_argument("unknown head type: " + name);
}

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kRandomInit:
      return "random-init";
    case Provenance::kUtilityCheckpoint:
      return "utility-checkpoint";
    case Provenance::kPretrainedSegmentation:
      return "pretrained-segmentation";
  }
  return "random-init";
}

Provenance provenance_from_name(const std::string& name) {
  if (name == "random-init") return Provenance::kRandomInit;
  if (name == "utility-checkpoint") return Provenance::kUtilityCheckpoint;
  if (name == "pretrained-segmentation") return Provenance::kPretrainedSegmentation;
  throw std::invalid_argument("unknown provenance: " + name);
}

void validate_config(const UNetConfig& cfg) {
  if (cfg.depth < 1) throw std::invalid_argument("UNetConfig: depth must be >= 1");
  if (cfg.base_channels < 1)
    throw std::invalid_argument("UNetConfig: base_channels must be >= 1");
  if (cfg.in_channels < 1)
    throw std::invalid_argument("UNetConfig: in_channels must be >= 1");
  if (cfg.out_channels < 1)
    throw std::invalid_argument("UNetConfig: out_channels must be >= 1");
  if (cfg.head == Head::kSingleChannelLogit && cfg.out_channels != 1)
    throw std::invalid_argument(
        "UNetConfig: single-channel-logit head requires out_channels == 1");
}

namespace unet_detail {

std::vector<LayerSpec> layer_specs(const UNetConfig& cfg) {
  std::vector<LayerSpec> specs;
  const int F = cfg.base_channels;
  auto ch = [F](int stage) { return F << stage; };
  for (int d = 0; d < cfg.depth; ++d) {
    const int in = d == 0 ? cfg.in_channels : ch(d - 1);
    const std::string p = "enc" + std::to_string(d);
    specs.push_back({p + ".conv1", in, ch(d), 3});
    specs.push_back({p + ".conv2", ch(d), ch(d), 3});
  }
  specs.push_back({"bottleneck.conv1", ch(cfg.depth - 1), ch(cfg.depth), 3});
  specs.push_back({"bottleneck.conv2", ch(cfg.depth), ch(cfg.depth), 3});
  for (int d = cfg.depth - 1; d >= 0; --d) {
    const std::string p = "dec" + std::to_string(d);
    specs.push_back({p + ".up", ch(d + 1), ch(d), 3});
    specs.push_back({p + ".conv1", 2 * ch(d), ch(d), 3});
    specs.push_back({p + ".conv2", ch(d), ch(d), 3});
  }
  specs.push_back({"head", F, cfg.out_channels, 1});
  return specs;
}

}  // namespace unet_detail

long long count_parameters(const UNetConfig& cfg) {
  validate_config(cfg);
  long long n = 0;
  for (const auto& s : unet_detail::layer_specs(cfg))
    n += static_cast<long long>(s.out_ch) *
         (static_cast<long long>(s.in_ch) * s.kernel * s.kernel + 1);
  return n;
}

namespace {

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

json config_to_json(const UNetConfig& cfg) {
  return json{{"depth", cfg.depth},
              {"base_channels", cfg.base_channels},
              {"in_channels", cfg.in_channels},
              {"out_channels", cfg.out_channels},
              {"head", head_name(cfg.head)}};
}

UNetConfig config_from_json(const json& j) {
  UNetConfig cfg;
  cfg.depth = j.at("depth").get<int>();
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.out_channels = j.at("out_channels").get<int>();
  cfg.head = head_from_name(j.at("head").get<std::string>());
  return cfg;
}

}  // namespace

void save_checkpoint(const ModelParams& model, const std::string& path) {
  json params = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : model.params) {
    params.push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
  }
  const json header = {{"config", config_to_json(model.config)},
                       {"provenance", provenance_name(model.provenance)},
                       {"params", params}};
  const std::string hdr = header.dump();

  std::string blob;
  blob.reserve(10 + hdr.size() + offset);
  blob += "UNSE";
  put_u16(blob, kCheckpointVersion);
  put_u32(blob, static_cast<std::uint32_t>(hdr.size()));
  blob += hdr;
  static_assert(sizeof(float) == 4);
  for (const auto& [name, t] : model.params)
    blob.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw CheckpointError("failed writing checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 10 || std::memcmp(p, "UNSE", 4) != 0)
    throw CheckpointError("not a model checkpoint (bad magic): " + path);
  const std::uint16_t version = get_u16(p + 4);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version mismatch: file has " +
                          std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  const std::uint32_t hdr_len = get_u32(p + 6);
  if (bytes.size() < 10 + static_cast<std::size_t>(hdr_len))
    throw CheckpointError("truncated checkpoint header: " + path);

  json header;
  try {
    header = json::parse(bytes.begin() + 10, bytes.begin() + 10 + hdr_len);
  } catch (const json::exception& e) {
    throw CheckpointError("corrupt checkpoint header: " + std::string(e.what()));
  }

  ModelParams model;
  model.config = config_from_json(header.at("config"));
  model.provenance = provenance_from_name(header.at("provenance").get<std::string>());
  const std::size_t blob_base = 10 + hdr_len;
  for (const auto& entry : header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    const long long count = shape_numel(shape);
    const std::size_t end = blob_base + offset + count * sizeof(float);
    if (end > bytes.size())
      throw CheckpointError("truncated checkpoint data at parameter '" + name +
                            "': " + path);
    std::vector<float> data(static_cast<std::size_t>(count));
    std::memcpy(data.data(), bytes.data() + blob_base + offset,
                count * sizeof(float));
    model.params.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  return model;
}

ModelParams load_checkpoint(const std::string& path, const UNetConfig& expected) {
  ModelParams model = load_checkpoint(path);
  check_schema(model, expected);
  return model;
}

}  // namespace unoise
