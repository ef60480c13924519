#include "unoise/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "unoise/rng.hpp"

namespace unoise {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Disc {
  int cy, cx, r;
  Box box() const { return {cy - r, cx - r, cy + r + 1, cx + r + 1}; }
};

Box cross_box(int cy, int cx, const SyntheticTaskSpec& s) {
  const int half_t = s.landmark_thickness / 2;
  const int reach = std::max(s.landmark_arm, half_t);
  return {cy - reach, cx - reach, cy + reach + 1, cx + reach + 1};
}

bool box_in_image(const Box& b, int size) {
  return b.y0 >= 0 && b.x0 >= 0 && b.y1 <= size && b.x1 <= size;
}

void paint_disc(std::vector<float>& img, int size, const Disc& d, float value) {
  for (int y = d.cy - d.r; y <= d.cy + d.r; ++y)
    for (int x = d.cx - d.r; x <= d.cx + d.r; ++x) {
      const int dy = y - d.cy, dx = x - d.cx;
      if (dy * dy + dx * dx <= d.r * d.r)
        img[static_cast<std::size_t>(y) * size + x] = value;
    }
}

void paint_cross(std::vector<float>& img, int size, int cy, int cx,
                 const SyntheticTaskSpec& s, float value) {
  const int half_t = s.landmark_thickness / 2;
  for (int y = cy - s.landmark_arm; y <= cy + s.landmark_arm; ++y)
    for (int x = cx - half_t; x <= cx + half_t; ++x)
      img[static_cast<std::size_t>(y) * size + x] = value;
  for (int y = cy - half_t; y <= cy + half_t; ++y)
    for (int x = cx - s.landmark_arm; x <= cx + s.landmark_arm; ++x)
      img[static_cast<std::size_t>(y) * size + x] = value;
}

Box disc_mask_box(const Disc& d, int size, const std::vector<float>& mask) {
  int y0 = size, x0 = size, y1 = 0, x1 = 0;
  for (int y = d.cy - d.r; y <= d.cy + d.r; ++y)
    for (int x = d.cx - d.r; x <= d.cx + d.r; ++x)
      if (mask[static_cast<std::size_t>(y) * size + x] > 0.5f) {
        y0 = std::min(y0, y);
        x0 = std::min(x0, x);
        y1 = std::max(y1, y + 1);
        x1 = std::max(x1, x + 1);
      }
  return {y0, x0, y1, x1};
}

Sample generate_sample(const SyntheticTaskSpec& s, RngStream stream,
                       const std::string& id) {
  const int size = s.image_size;
  const int n_blobs = 1 + s.n_distractors;

  // Anchor feasible region: the landmark cross must fit at the anchor and a
  // maximal-radius disc must fit at anchor + offset.
  const int reach = std::max(s.landmark_arm, s.landmark_thickness / 2);
  const int rmax = s.blob_r_max;
  const int lo_y = std::max(reach, rmax - s.offset_y);
  const int hi_y = std::min(size - 1 - reach, size - 1 - rmax - s.offset_y);
  const int lo_x = std::max(reach, rmax - s.offset_x);
  const int hi_x = std::min(size - 1 - reach, size - 1 - rmax - s.offset_x);
  if (lo_y > hi_y || lo_x > hi_x)
    throw DataError("synthetic spec leaves no feasible anchor positions (image " +
                    std::to_string(size) + ", landmark reach " +
                    std::to_string(reach) + ", offset " + std::to_string(s.offset_y) +
                    "," + std::to_string(s.offset_x) + ")");

  // Every anchor carries the same constraint pair (a virtual landmark box at
  // the anchor plus a blob box at anchor + offset), and the target role is
  // assigned uniformly at random afterwards, so the target's position and
  // appearance distributions match the distractors' exactly - a
  // landmark-blind classifier is reduced to chance.
  struct Anchor {
    int ay, ax;
    Disc blob;
  };
  std::vector<Anchor> anchors;
  int attempts = 0, restarts = 0;
  std::vector<Box> placed;  // virtual landmark boxes and blob boxes, inflated checks
  while (static_cast<int>(anchors.size()) < n_blobs) {
    if (++attempts > 800) {
      // dead-end layout; start over (still deterministic, same stream)
      attempts = 0;
      anchors.clear();
      placed.clear();
      if (++restarts > 50)
        throw DataError(
            "could not place non-overlapping shapes after 50 restarts; reduce "
            "n_distractors or blob size in the synthetic spec");
    }
    const int ay = lo_y + stream.next_int(hi_y - lo_y + 1);
    const int ax = lo_x + stream.next_int(hi_x - lo_x + 1);
    const int r = s.blob_r_min + stream.next_int(s.blob_r_max - s.blob_r_min + 1);
    const Disc d{ay + s.offset_y, ax + s.offset_x, r};
    const Box lm = cross_box(ay, ax, s);
    const Box db = d.box();
    if (!box_in_image(db, size) || !box_in_image(lm, size)) continue;
    if (lm.inflated(s.min_separation).overlaps(db)) continue;

    bool ok = true;
    for (const Box& b : placed)
      if (db.inflated(s.min_separation).overlaps(b) ||
          lm.inflated(s.min_separation).overlaps(b)) {
        ok = false;
        break;
      }
    if (!ok) continue;

    placed.push_back(lm);
    placed.push_back(db);
    anchors.push_back({ay, ax, d});
  }

  const int target_idx = stream.next_int(n_blobs);
  const int landmark_cy = anchors[static_cast<std::size_t>(target_idx)].ay;
  const int landmark_cx = anchors[static_cast<std::size_t>(target_idx)].ax;
  const Box landmark_box = cross_box(landmark_cy, landmark_cx, s);
  std::vector<Disc> blobs;  // target first
  blobs.push_back(anchors[static_cast<std::size_t>(target_idx)].blob);
  for (int i = 0; i < n_blobs; ++i)
    if (i != target_idx) blobs.push_back(anchors[static_cast<std::size_t>(i)].blob);

  // Render: noisy background, then landmark and blobs painted over it.
  std::vector<float> img(static_cast<std::size_t>(size) * size);
  for (float& v : img) {
    const double noisy = s.background_base + s.background_noise * stream.next_normal();
    v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
  }
  paint_cross(img, size, landmark_cy, landmark_cx, s,
              static_cast<float>(s.landmark_intensity));
  for (const Disc& d : blobs)
    paint_disc(img, size, d, static_cast<float>(s.blob_intensity));

  std::vector<float> mask(static_cast<std::size_t>(size) * size, 0.0f);
  paint_disc(mask, size, blobs[0], 1.0f);

  Sample sample;
  sample.id = id;
  sample.image = Tensor::from_data({1, size, size}, std::move(img));
  sample.mask = Tensor::from_data({size, size}, std::move(mask));
  sample.meta.landmark = landmark_box;
  sample.meta.target = disc_mask_box(blobs[0], size, sample.mask.vec());
  for (std::size_t i = 1; i < blobs.size(); ++i)
    sample.meta.distractors.push_back(blobs[i].box());
  sample.has_meta = true;
  return sample;
}

}  // namespace

Dataset generate_synthetic(const SyntheticTaskSpec& spec, int n, std::uint64_t seed) {
  if (n < 1) throw DataError("generate_synthetic: n must be >= 1");
  if (spec.blob_r_min < 1 || spec.blob_r_max < spec.blob_r_min)
    throw DataError("generate_synthetic: invalid blob radius range");
  if (spec.n_distractors < 0)
    throw DataError("generate_synthetic: n_distractors must be >= 0");
  const Box lm0 = cross_box(0, 0, spec);
  const Box b0 = Disc{spec.offset_y, spec.offset_x, spec.blob_r_max}.box();
  if (lm0.inflated(spec.min_separation).overlaps(b0))
    throw DataError(
        "generate_synthetic: offset (" + std::to_string(spec.offset_y) + "," +
        std::to_string(spec.offset_x) +
        ") is too small; the target blob would touch its landmark. Increase the "
        "offset or shrink the shapes");
  Dataset ds;
  ds.samples.reserve(static_cast<std::size_t>(n));
  RngStream root(seed);
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "sample_%05d", i);
    ds.samples.push_back(
        generate_sample(spec, root.derive(static_cast<std::uint64_t>(i)), id));
  }
  return ds;
}

namespace {

json box_to_json(const Box& b) { return json{b.y0, b.x0, b.y1, b.x1}; }

Box box_from_json(const json& j) {
  return Box{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(),
             j.at(3).get<int>()};
}

void write_file(const fs::path& path, const char* data, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(data, static_cast<std::streamsize>(bytes));
  if (!out) throw DataError("failed writing: " + path.string());
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(dir);
  json samples = json::array();
  for (const Sample& s : dataset.samples) {
    const std::string img_name = s.id + ".img.f32";
    const std::string mask_name = s.id + ".mask.u8";
    write_file(fs::path(dir) / img_name,
               reinterpret_cast<const char*>(s.image.data()),
               static_cast<std::size_t>(s.image.size()) * sizeof(float));
    std::vector<std::uint8_t> m(static_cast<std::size_t>(s.mask.size()));
    for (long long i = 0; i < s.mask.size(); ++i)
      m[static_cast<std::size_t>(i)] = s.mask.at(i) > 0.5f ? 1 : 0;
    write_file(fs::path(dir) / mask_name, reinterpret_cast<const char*>(m.data()),
               m.size());
    json entry = {{"id", s.id},
                  {"image", img_name},
                  {"mask", mask_name},
                  {"shape", s.image.shape()}};
    if (s.has_meta) {
      entry["meta"] = {{"landmark", box_to_json(s.meta.landmark)},
                       {"target", box_to_json(s.meta.target)},
                       {"distractors", json::array()}};
      for (const Box& b : s.meta.distractors)
        entry["meta"]["distractors"].push_back(box_to_json(b));
    }
    samples.push_back(std::move(entry));
  }
  const json manifest = {{"version", 1},
                         {"class_names", {"background", "target"}},
                         {"normalization", {{"lo", 0.0}, {"hi", 1.0}}},
                         {"samples", samples}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(fs::path(dir) / "manifest.json", text.data(), text.size());
}

Dataset load_dataset(const std::string& manifest_path) {
  fs::path mpath(manifest_path);
  if (fs::is_directory(mpath)) mpath /= "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw DataError("missing file: " + mpath.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.at("version").get<int>() != 1)
    throw DataError("unsupported dataset manifest version");
  const double lo = manifest.at("normalization").at("lo").get<double>();
  const double hi = manifest.at("normalization").at("hi").get<double>();
  if (!(hi > lo)) throw DataError("manifest normalization window must have hi > lo");
  const fs::path dir = mpath.parent_path();

  Dataset ds;
  for (const auto& entry : manifest.at("samples")) {
    Sample s;
    s.id = entry.at("id").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape.size() != 3)
      throw DataError("sample '" + s.id + "': image shape must be CxHxW");
    const long long count = shape_numel(shape);
    const int H = shape[1], W = shape[2];

    const fs::path img_path = dir / entry.at("image").get<std::string>();
    std::vector<char> raw = read_file(img_path);
    if (raw.size() != static_cast<std::size_t>(count) * sizeof(float))
      throw DataError("shape mismatch: " + img_path.string() + " has " +
                      std::to_string(raw.size() / sizeof(float)) +
                      " floats, manifest shape " + shape_str(shape) + " needs " +
                      std::to_string(count));
    std::vector<float> img(static_cast<std::size_t>(count));
    std::memcpy(img.data(), raw.data(), raw.size());
    const double scale = 1.0 / (hi - lo);
    for (float& v : img)
      v = static_cast<float>(std::clamp((static_cast<double>(v) - lo) * scale, 0.0, 1.0));
    s.image = Tensor::from_data(shape, std::move(img));

    const fs::path mask_path = dir / entry.at("mask").get<std::string>();
    std::vector<char> rawm = read_file(mask_path);
    if (rawm.size() != static_cast<std::size_t>(H) * W)
      throw DataError("shape mismatch: " + mask_path.string() + " has " +
                      std::to_string(rawm.size()) + " bytes, expected " +
                      std::to_string(static_cast<long long>(H) * W));
    std::vector<float> mask(rawm.size());
    for (std::size_t i = 0; i < rawm.size(); ++i) {
      const auto v = static_cast<std::uint8_t>(rawm[i]);
      if (v > 1)
        throw DataError("mask label " + std::to_string(v) + " outside {0,1} in " +
                        mask_path.string());
      mask[i] = static_cast<float>(v);
    }
    s.mask = Tensor::from_data({H, W}, std::move(mask));

    if (entry.contains("meta")) {
      const auto& m = entry.at("meta");
      s.meta.landmark = box_from_json(m.at("landmark"));
      s.meta.target = box_from_json(m.at("target"));
      for (const auto& b : m.at("distractors"))
        s.meta.distractors.push_back(box_from_json(b));
      s.has_meta = true;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw DataError("split: train_fraction must be in (0, 1)");
  const std::size_t n = dataset.size();
  const auto n_train =
      static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 1e-9));
  if (n_train == 0 || n_train == n)
    throw DataError("split: fraction " + std::to_string(train_fraction) +
                    " leaves an empty side for " + std::to_string(n) + " samples");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  RngStream stream(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(stream.next_int(static_cast<int>(i + 1)));
    std::swap(idx[i], idx[j]);
  }
  Dataset train, val;
  for (std::size_t i = 0; i < n; ++i)
    (i < n_train ? train : val).samples.push_back(dataset.samples[idx[i]]);
  return {std::move(train), std::move(val)};
}

}  // namespace unoise
