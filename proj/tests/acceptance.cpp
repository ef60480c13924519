// End-to-end acceptance suite. Each criterion prints one [PASS]/[FAIL] line;
// the exit code is the number of failed criteria. Trained artifacts are shared
// across criteria, so the suite runs the expensive trainings once.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <sys/wait.h>
#include <tuple>
#include <vector>

#include "oracle_helpers.hpp"
#include "unoise/data.hpp"
#include "unoise/eval.hpp"
#include "unoise/interpret.hpp"
#include "unoise/training.hpp"
#include "unoise/unet.hpp"

using namespace unoise;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

// ---- pinned desk-scale run settings ----------------------------------------
constexpr int kUtilityEpochs = 8;   // criterion requires dice >= 0.85 within 30
constexpr int kNoiseEpochs = 16;    // medium-preset noise training
constexpr int kCompareEpochs = 10;  // per-cell epochs for the pretraining table
constexpr int kComparePretrainEpochs = 6;
constexpr std::uint64_t kSeed = 17;

int g_failures = 0;

double seconds_since(clk::time_point start) {
  return std::chrono::duration<double>(clk::now() - start).count();
}

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion,
              name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof(buf), f, args);
  va_end(args);
  return buf;
}

// ---------------------------------------------------------------------------
// criterion 1: gradient suite
// ---------------------------------------------------------------------------
bool gradient_suite(std::string& detail) {
  const auto start = clk::now();
  RngStream rng(101);
  double worst = 0.0;
  auto track = [&worst](double err) { worst = std::max(worst, err); };

  for (int trial = 0; trial < 20; ++trial) {
    const int h = 2 + rng.next_int(3), w = 2 + rng.next_int(3);
    {
      auto a = oracle::random_tensor64({2, h, w}, rng, true);
      auto b = oracle::random_tensor64({2, h, w}, rng, true);
      track(oracle::max_fd_error(
          [&] { return sum(mul(add(a, b), sub(a, b))); }, {a, b}));
    }
    {
      auto a = oracle::random_tensor64({h, w}, rng, true, 2.0);
      track(oracle::max_fd_error(
          [&] { return mean(log(sigmoid(scalar_add(scalar_mul(a, 1.1), 0.3)))); },
          {a}));
      track(oracle::max_fd_error(
          [&] { return mean(relu(scalar_add(a, 3.0))); }, {a}));
      track(oracle::max_fd_error(
          [&] { return mean(clamp_min(scalar_add(a, 3.0), 0.5)); }, {a}));
    }
    {
      auto x = oracle::random_tensor64({1, 2, 4, 4}, rng, true);
      auto w2 = oracle::random_tensor64({3, 2, 3, 3}, rng, true);
      auto b2 = oracle::random_tensor64({3}, rng, true);
      track(oracle::max_fd_error([&] { return mean(conv2d(x, w2, b2, 1, 1)); },
                                 {x, w2, b2}));
      auto x1 = oracle::random_tensor64({1, 1, 4, 4}, rng, true);
      track(oracle::max_fd_error([&] { return mean(max_pool2d(x1, 2)); }, {x1}));
      track(oracle::max_fd_error(
          [&] { return mean(upsample_bilinear2x(x1)); }, {x1}));
    }
    {
      auto a = oracle::random_tensor64({1, 2, 3, 3}, rng, true);
      auto b = oracle::random_tensor64({1, 1, 3, 3}, rng, true);
      track(oracle::max_fd_error([&] { return mean(concat_channels(a, b)); },
                                 {a, b}));
      track(oracle::max_fd_error([&] { return sum(select_channel(a, 1)); }, {a}));
      auto e = oracle::random_tensor64({1, 3, 3}, rng, true);
      track(oracle::max_fd_error([&] { return mean(expand_channels(e, 2)); }, {e}));
    }
    {
      auto logits = oracle::random_tensor64({1, 3, 2, 2}, rng, true, 2.0);
      std::vector<double> t(4);
      for (auto& v : t) v = rng.next_int(3);
      auto target = Tensor64::from_data({1, 2, 2}, t);
      track(oracle::max_fd_error(
          [&] { return softmax_cross_entropy(logits, target); }, {logits}));
    }
  }

  // full two-model objective on a 1x1x8x8 toy: every noise parameter
  {
    UNetConfig ucfg{1, 2, 1, 2, Head::kClassLogits};
    auto utility_model = build_model<double>(ucfg, 31);
    auto utility = [&utility_model](const Tensor64& noised) {
      return forward(utility_model, noised);
    };
    UNetConfig ncfg{1, 2, 1, 1, Head::kSingleChannelLogit};
    auto noise_model = build_model<double>(ncfg, 43);
    for (auto& [name, p] : noise_model.params) p.set_requires_grad(true);
    std::vector<Tensor64> leaves;
    for (auto& [name, p] : noise_model.params) leaves.push_back(p);

    auto x = oracle::random_tensor64({1, 1, 8, 8}, rng, false, 0.5);
    std::vector<double> yv(64);
    for (auto& v : yv) v = rng.next_int(2);
    auto y = Tensor64::from_data({1, 8, 8}, yv);
    NoiseTrainConfig cfg;
    cfg.lambda = 0.07;
    const RngStream frozen(77);
    track(oracle::max_fd_error(
        [&] {
          RngStream s = frozen;
          auto logits = forward(noise_model, x);
          return unoise_loss(x, y, logits, utility, cfg, s).total;
        },
        leaves));
  }

  const double t = seconds_since(start);
  detail = fmt("max rel err %.3g vs bound 1e-4, %.1fs vs bound 120s", worst, t);
  return worst <= 1e-4 && t < 120.0;
}

// ---------------------------------------------------------------------------
// criterion 2: oracle suite
// ---------------------------------------------------------------------------
bool oracle_suite(std::string& detail) {
  const auto start = clk::now();
  RngStream rng(202);
  bool ok = true;
  double worst_rel = 0.0;

  // conv2d vs direct summation, randomized instances
  for (int trial = 0; trial < 10; ++trial) {
    const int c = 1 + rng.next_int(3), o = 1 + rng.next_int(4);
    const int hw = 4 + 2 * rng.next_int(3);
    auto x = oracle::random_tensor64({2, c, hw, hw}, rng);
    auto w = oracle::random_tensor64({o, c, 3, 3}, rng);
    auto b = oracle::random_tensor64({o}, rng);
    auto y = conv2d(x, w, b, 1, 1);
    int ho, wo;
    auto ref = oracle::conv2d_direct(x.vec(), 2, c, hw, hw, w.vec(), o, 3, b.vec(),
                                     1, 1, ho, wo);
    for (long long i = 0; i < y.size(); ++i)
      worst_rel =
          std::max(worst_rel, oracle::rel_err(y.at(i), ref[(std::size_t)i]));
  }
  ok = ok && worst_rel <= 1e-12;

  // pooling vs exhaustive window scan
  for (int trial = 0; trial < 10; ++trial) {
    auto x = oracle::random_tensor64({1, 1, 8, 8}, rng);
    auto y = max_pool2d(x, 2);
    auto ref = oracle::max_pool_direct(x.vec(), 1, 1, 8, 8, 2);
    for (long long i = 0; i < y.size(); ++i)
      ok = ok && y.at(i) == ref[(std::size_t)i];
  }

  // cross-entropy vs per-pixel enumeration
  for (int trial = 0; trial < 10; ++trial) {
    auto logits = oracle::random_tensor64({1, 2, 2, 2}, rng, false, 3.0);
    std::vector<double> t(4);
    for (auto& v : t) v = rng.next_int(2);
    auto target = Tensor64::from_data({1, 2, 2}, t);
    const double ref = oracle::cross_entropy_direct(logits.vec(), 1, 2, 2, 2, t);
    ok = ok && std::abs(softmax_cross_entropy(logits, target).item() - ref) <= 1e-10;
  }

  // dice vs direct counting
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> pv(25), tv(25);
    std::vector<double> pd(25), td(25);
    for (int i = 0; i < 25; ++i) {
      pv[(std::size_t)i] = static_cast<float>(rng.next_int(2));
      tv[(std::size_t)i] = static_cast<float>(rng.next_int(2));
      pd[(std::size_t)i] = pv[(std::size_t)i];
      td[(std::size_t)i] = tv[(std::size_t)i];
    }
    const double got =
        dice(Tensor::from_data({5, 5}, pv), Tensor::from_data({5, 5}, tv));
    ok = ok && std::abs(got - oracle::dice_direct(pd, td)) <= 1e-12;
  }

  // occlusion sensitivity vs brute-force position enumeration (small instance)
  {
    SyntheticTaskSpec spec;
    spec.image_size = 16;
    spec.n_distractors = 0;
    spec.offset_y = 2;
    spec.offset_x = 8;
    spec.blob_r_min = 2;
    spec.blob_r_max = 2;
    spec.landmark_arm = 2;
    spec.landmark_thickness = 1;
    Dataset ds = generate_synthetic(spec, 4, 5);
    UNetConfig cfg{1, 4, 1, 2, Head::kClassLogits};
    TrainSettings ts;
    ts.epochs = 4;
    ts.seed = 5;
    ModelParams utility = train_utility(ds, cfg, ts).model;
    const Tensor& x = ds[0].image;
    const int H = 16, W = 16, window = 5, stride = 2;
    ImportanceMap map = occlusion_sensitivity(utility, x, window, stride, 0.0f);

    auto predict_hw = [&](const std::vector<float>& img) {
      Tensor p = predict_masks(utility, Tensor::from_data({1, 1, H, W}, img));
      return Tensor::from_data({H, W}, p.vec());
    };
    Tensor base = predict_hw(x.vec());
    std::vector<double> acc(H * W, 0.0);
    std::vector<int> cover(H * W, 0);
    for (int oy = 0; oy + window <= H; oy += stride)
      for (int ox = 0; ox + window <= W; ox += stride) {
        std::vector<float> occluded = x.vec();
        for (int y = oy; y < oy + window; ++y)
          for (int xx = ox; xx < ox + window; ++xx)
            occluded[(std::size_t)(y * W + xx)] = 0.0f;
        const double score = 1.0 - dice(predict_hw(occluded), base);
        for (int y = oy; y < oy + window; ++y)
          for (int xx = ox; xx < ox + window; ++xx) {
            acc[(std::size_t)(y * W + xx)] += score;
            cover[(std::size_t)(y * W + xx)] += 1;
          }
      }
    for (int i = 0; i < H * W; ++i) {
      const float expect = cover[(std::size_t)i]
                               ? static_cast<float>(acc[(std::size_t)i] /
                                                    cover[(std::size_t)i])
                               : 0.0f;
      ok = ok && map.values.at(i) == expect;
    }
  }

  const double t = seconds_since(start);
  detail = fmt("conv worst rel err %.3g, %.1fs vs bound 120s", worst_rel, t);
  return ok && t < 120.0;
}

// shared artifacts built by criteria 3 and 5
struct Artifacts {
  Dataset dataset;
  Dataset train_split;
  Dataset val_split;
  ModelParams utility;
  double clean_val_dice = 0.0;
  ModelParams noise_model;
  double noised_val_dice = 0.0;
  double mean_b = 0.0;
};

bool utility_training(Artifacts& art, std::string& detail) {
  const auto start = clk::now();
  SyntheticTaskSpec spec;  // defaults: 64x64, 3 distractors
  art.dataset = generate_synthetic(spec, 512, kSeed);

  UNetConfig cfg{3, 16, 1, 2, Head::kClassLogits};
  TrainSettings settings;
  settings.epochs = kUtilityEpochs;
  settings.seed = kSeed;
  TrainResult result = train_utility(art.dataset, cfg, settings);
  art.utility = std::move(result.model);

  std::tie(art.train_split, art.val_split) = split(art.dataset, 0.8, kSeed);
  art.clean_val_dice = mean_validation_dice(art.utility, art.val_split);

  const double t = seconds_since(start);
  detail = fmt("val dice %.4f vs bound 0.85 within %d epochs, %.0fs vs 1800s",
               result.final_val_dice, kUtilityEpochs, t);
  return result.final_val_dice >= 0.85 && kUtilityEpochs <= 30 && t < 1800.0;
}

std::pair<bool, bool> frozen_and_tradeoff(Artifacts& art, std::string& d4,
                                          std::string& d5) {
  const auto start = clk::now();
  const std::uint64_t hash_before = params_hash(art.utility);

  NoiseTrainConfig cfg;  // default lambda: pinned by the sweep documented in README
  cfg.epochs = kNoiseEpochs;
  cfg.seed = kSeed;
  NoiseTrainResult run =
      train_unoise(art.dataset, art.utility, noise_preset("medium"), cfg);
  art.noise_model = std::move(run.noise_model);
  art.noised_val_dice = run.final_val_dice_noised;
  art.mean_b = run.final_mean_b;

  const std::uint64_t hash_after = params_hash(art.utility);
  const bool frozen = hash_before == hash_after;
  d4 = fmt("utility hash %016llx before, %016llx after",
           static_cast<unsigned long long>(hash_before),
           static_cast<unsigned long long>(hash_after));

  const double t = seconds_since(start);
  const bool tradeoff = art.mean_b >= 0.5 &&
                        art.noised_val_dice >= 0.95 * art.clean_val_dice &&
                        t < 2700.0;
  d5 = fmt("lambda %.3g: mean B %.3f vs 0.5, noised dice %.4f vs 0.95*%.4f=%.4f, "
           "%.0fs vs 2700s",
           cfg.lambda, art.mean_b, art.noised_val_dice, art.clean_val_dice,
           0.95 * art.clean_val_dice, t);
  return {frozen, tradeoff};
}

bool visibility_tradeoff(const Artifacts& art, std::string& detail) {
  std::vector<double> thresholds;
  for (int i = 0; i <= 20; ++i) thresholds.push_back(i / 20.0);
  auto records = visibility_sweep(art.utility, art.noise_model, art.val_split,
                                  thresholds, "medium", false);

  const MetricsRecord* unmasked = nullptr;
  for (const auto& r : records)
    if (r.threshold == 1.0) unmasked = &r;
  const MetricsRecord& at90 = record_nearest_visibility(records, 0.9);

  // highest-visibility row at or below 10%
  const MetricsRecord* low = nullptr;
  for (const auto& r : records)
    if (r.percent_visible <= 0.10 &&
        (!low || r.percent_visible > low->percent_visible))
      low = &r;

  const bool has_low = low != nullptr;
  const bool near90 = std::abs(at90.dice - unmasked->dice) <= 0.05;
  const bool drop = has_low && (unmasked->dice - low->dice >= 0.2);
  detail = fmt("dice %.4f@%.0f%% vis vs %.4f unmasked (|diff| %.4f <= 0.05); "
               "dice %.4f@%.1f%% vis, drop %.4f >= 0.2",
               at90.dice, 100.0 * at90.percent_visible, unmasked->dice,
               std::abs(at90.dice - unmasked->dice), has_low ? low->dice : -1.0,
               has_low ? 100.0 * low->percent_visible : -1.0,
               has_low ? unmasked->dice - low->dice : -1.0);
  return near90 && drop;
}

bool context_discovery(const Artifacts& art, std::string& detail) {
  int qualifying = 0;
  int total = 0;
  for (const Sample& s : art.val_split.samples) {
    if (!s.has_meta) continue;
    ++total;
    ImportanceMap map = unoise_map(art.noise_model, s.image).second;
    const int H = map.values.dim(0), W = map.values.dim(1);
    auto inside = [&](int y, int x) {
      const Box& t = s.meta.target;
      const Box& l = s.meta.landmark;
      return (y >= t.y0 && y < t.y1 && x >= t.x0 && x < t.x1) ||
             (y >= l.y0 && y < l.y1 && x >= l.x0 && x < l.x1);
    };
    double in_sum = 0.0, all_sum = 0.0;
    long long in_count = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double v = map.values.at(static_cast<long long>(y) * W + x);
        all_sum += v;
        if (inside(y, x)) {
          in_sum += v;
          ++in_count;
        }
      }
    const double mean_in = in_count ? in_sum / in_count : 0.0;
    const double mean_all = all_sum / (static_cast<double>(H) * W);
    if (mean_all > 0.0 && mean_in >= 2.0 * mean_all) ++qualifying;
  }
  const double frac = total ? static_cast<double>(qualifying) / total : 0.0;
  detail = fmt("%d/%d validation images with region importance >= 2x image mean "
               "(%.1f%% vs bound 80%%)",
               qualifying, total, 100.0 * frac);
  return frac >= 0.8;
}

bool pretraining_table(const Artifacts& art, std::string& detail) {
  NoiseTrainConfig cfg;
  cfg.epochs = kCompareEpochs;
  cfg.pretrain_epochs = kComparePretrainEpochs;
  cfg.seed = kSeed;
  // half-size subset keeps the six trainings inside the suite budget
  Dataset subset;
  subset.samples.assign(art.dataset.samples.begin(),
                        art.dataset.samples.begin() + 256);
  auto cells =
      pretraining_comparison(subset, art.utility, {"small", "large"}, cfg);
  double small_plain = -1, small_pre = -1, large_plain = -1, large_pre = -1;
  for (const auto& c : cells) {
    if (c.size == "small") (c.pretrained ? small_pre : small_plain) = c.dice;
    if (c.size == "large") (c.pretrained ? large_pre : large_plain) = c.dice;
  }
  const double small_gain = small_pre - small_plain;
  const double large_gain = large_pre - large_plain;
  const bool large_helped = large_pre >= large_plain - 0.02;
  const bool ordering = small_gain <= large_gain + 0.02;
  detail = fmt("dice@~50%% vis: small %.4f->%.4f (gain %+.4f), large %.4f->%.4f "
               "(gain %+.4f); large_pre>=large-0.02: %s; small_gain<="
               "large_gain+0.02: %s",
               small_plain, small_pre, small_gain, large_plain, large_pre,
               large_gain, large_helped ? "yes" : "no", ordering ? "yes" : "no");
  return large_helped && ordering;
}

bool runtime_ordering(const Artifacts& art, std::string& detail) {
  BenchmarkReport report = runtime_benchmark(
      art.utility, art.noise_model, art.val_split.samples[0].image, 10);
  double unoise_t = 0, gradcam_t = 0, occl_t = 0;
  for (const auto& r : report.rows) {
    if (r.method == "unoise") unoise_t = r.mean_seconds;
    if (r.method == "gradcam") gradcam_t = r.mean_seconds;
    if (r.method == "occlusion") occl_t = r.mean_seconds;
  }
  const double ratio = occl_t / unoise_t;
  detail = fmt("unoise %.4fs < gradcam %.4fs < occlusion %.2fs; occl/unoise %.0fx "
               "vs bound 50x (10 trials)",
               unoise_t, gradcam_t, occl_t, ratio);
  return unoise_t < gradcam_t && gradcam_t < occl_t && ratio >= 50.0;
}

// criterion 10: byte determinism through the CLI
bool cli_determinism(std::string& detail) {
  const std::string cli = UNOISE_CLI_PATH;
  const fs::path root = fs::temp_directory_path() / "unoise_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);

  auto sh = [&](const std::string& cmd) {
    const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) && WEXITSTATUS(status) == 0;
  };
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
  };

  const std::string tiny =
      "--image-size 32 --n-distractors 1 --offset-y 4 --offset-x 11 "
      "--blob-r-min 3 --blob-r-max 4 --landmark-arm 4";
  bool ok = true;
  for (const char* run : {"a", "b"}) {
    const std::string base = (root / run).string();
    ok = ok && sh(cli + " synth-data --n 32 --seed 5 " + tiny + " --out " + base +
                  "/data");
    ok = ok && sh(cli + " train-utility --data " + base + "/data --out " + base +
                  "/util --depth 2 --base 8 --epochs 3 --seed 9");
    ok = ok && sh(cli + " train-noise --data " + base + "/data --utility-ckpt " +
                  base + "/util/utility.ckpt --out " + base +
                  "/noise --depth 2 --base 8 --epochs 2 --seed 9");
    ok = ok && sh(cli + " evaluate --mode sweep --data " + base +
                  "/data --utility-ckpt " + base +
                  "/util/utility.ckpt --noise-ckpt " + base +
                  "/noise/noise.ckpt --out " + base + "/eval --thresholds 11");
  }
  if (!ok) {
    detail = "pipeline command failed";
    return false;
  }

  const std::vector<std::string> compare = {
      "data/manifest.json",  "data/sample_00000.img.f32", "util/utility.ckpt",
      "util/metrics.csv",    "noise/noise.ckpt",          "noise/metrics.csv",
      "eval/sweep.csv"};
  int identical = 0;
  for (const auto& rel : compare) {
    const std::string a = slurp(root / "a" / rel);
    const std::string b = slurp(root / "b" / rel);
    if (!a.empty() && a == b) ++identical;
  }
  detail = fmt("%d/%zu artifacts byte-identical across same-seed reruns",
               identical, compare.size());
  return identical == static_cast<int>(compare.size());
}

}  // namespace

int main() {
  std::printf("acceptance suite: desk-scale criteria on a CPU\n");
  Artifacts art;
  std::string detail;

  const bool c1 = gradient_suite(detail);
  report(1, "gradient suite (finite differences, 64-bit)", c1, detail);

  const bool c2 = oracle_suite(detail);
  report(2, "oracle suite (brute-force references)", c2, detail);

  const bool c3 = utility_training(art, detail);
  report(3, "utility training reaches dice 0.85", c3, detail);
  if (art.clean_val_dice <= 0.0) {
    std::printf("cannot continue without a trained utility model\n");
    return g_failures + 7;
  }

  std::string d4, d5;
  auto [c4, c5] = frozen_and_tradeoff(art, d4, d5);
  report(4, "frozen-utility invariant", c4, d4);
  report(5, "noise-utility tradeoff at default lambda", c5, d5);

  const bool c6 = visibility_tradeoff(art, detail);
  report(6, "visibility sweep tradeoff", c6, detail);

  const bool c7 = context_discovery(art, detail);
  report(7, "context discovery (target+landmark importance)", c7, detail);

  const bool c8 = pretraining_table(art, detail);
  report(8, "pretraining comparison (directional)", c8, detail);

  const bool c9 = runtime_ordering(art, detail);
  report(9, "runtime ordering unoise < gradcam < occlusion", c9, detail);

  const bool c10 = cli_determinism(detail);
  report(10, "CLI determinism (byte-identical artifacts)", c10, detail);

  std::printf("%d criterion(s) failed\n", g_failures);
  return g_failures;
}
