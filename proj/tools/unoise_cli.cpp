// Command-line entry point: synthetic data generation, utility / noise-model
// training, importance-map export, evaluation sweeps, and the runtime
// benchmark. Every run writes a resolved config snapshot next to its outputs
// and stages results in a temp directory that is renamed into place on
// success, so interrupted runs never leave partial outputs behind.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "unoise/data.hpp"
#include "unoise/eval.hpp"
#include "unoise/interpret.hpp"
#include "unoise/training.hpp"
#include "unoise/unet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unoise;

namespace {

// Staged output directory: work in <out>.tmp, rename to <out> on success.
class StagedDir {
 public:
  explicit StagedDir(const std::string& out) : final_(out), stage_(out + ".tmp") {
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  ~StagedDir() {
    if (!committed_) fs::remove_all(stage_);
  }
  const fs::path& path() const { return stage_; }
  void commit() {
    fs::remove_all(final_);
    fs::rename(stage_, final_);
    committed_ = true;
  }

 private:
  fs::path final_;
  fs::path stage_;
  bool committed_ = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_config_snapshot(const fs::path& dir, const std::string& subcommand,
                           json resolved) {
  resolved["subcommand"] = subcommand;
  write_text(dir / "config.json", resolved.dump(2) + "\n");
}

std::string default_out_root() {
  if (const char* env = std::getenv("UNOISE_OUT_ROOT")) return env;
  return ".";
}

std::vector<double> threshold_grid(int count) {
  std::vector<double> t;
  for (int i = 0; i < count; ++i)
    t.push_back(static_cast<double>(i) / (count - 1));
  return t;
}

struct NoiseFlags {
  NoiseTrainConfig cfg;
  std::string size = "medium";
  int depth = 0;  // 0 = use preset
  int base = 0;

  UNetConfig arch() const {
    UNetConfig a = noise_preset(size);
    if (depth > 0) a.depth = depth;
    if (base > 0) a.base_channels = base;
    return a;
  }
  json to_json() const {
    return {{"size", size},           {"depth", arch().depth},
            {"base_channels", arch().base_channels},
            {"lambda", cfg.lambda},   {"sigma_min", cfg.sigma_min},
            {"sigma_max", cfg.sigma_max}, {"lr", cfg.lr},
            {"batch_size", cfg.batch_size}, {"epochs", cfg.epochs},
            {"seed", cfg.seed},       {"log_floor", cfg.log_floor},
            {"pretrain", cfg.pretrain}, {"pretrain_epochs", cfg.pretrain_epochs},
            {"val_fraction", cfg.val_fraction}};
  }
};

void add_noise_flags(CLI::App* cmd, NoiseFlags& f) {
  cmd->add_option("--size", f.size, "Noise model preset: small|medium|large")
      ->check(CLI::IsMember({"small", "medium", "large"}));
  cmd->add_option("--depth", f.depth, "Override preset depth");
  cmd->add_option("--base", f.base, "Override preset base channels");
  cmd->add_option("--lambda", f.cfg.lambda, "Noise-ratio weight")->capture_default_str();
  cmd->add_option("--sigma-min", f.cfg.sigma_min, "Lower noise-scale bound")->capture_default_str();
  cmd->add_option("--sigma-max", f.cfg.sigma_max, "Upper noise-scale bound")->capture_default_str();
  cmd->add_option("--lr", f.cfg.lr, "Learning rate")->capture_default_str();
  cmd->add_option("--batch", f.cfg.batch_size, "Minibatch size")->capture_default_str();
  cmd->add_option("--epochs", f.cfg.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--seed", f.cfg.seed, "Random seed")->capture_default_str();
  cmd->add_option("--log-floor", f.cfg.log_floor, "Clamp for log B")->capture_default_str();
  cmd->add_flag("--pretrain", f.cfg.pretrain,
                "Pretrain the noise model on the segmentation task first");
  cmd->add_option("--pretrain-epochs", f.cfg.pretrain_epochs,
                  "Epochs for the pretraining phase (0 = same as --epochs)")->capture_default_str();
  cmd->add_option("--val-fraction", f.cfg.val_fraction, "Validation fraction")->capture_default_str();
}

int run(int argc, char** argv) {
  CLI::App app{"Noise-mask interpretability for image segmentation models"};
  app.require_subcommand(1);

  // --- synth-data ---------------------------------------------------------
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic dataset");
  SyntheticTaskSpec spec;
  int synth_n = 512;
  std::uint64_t synth_seed = 0;
  std::string synth_out = default_out_root() + "/dataset";
  synth->add_option("--n", synth_n, "Number of samples")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
  synth->add_option("--out", synth_out, "Output dataset directory")->capture_default_str();
  synth->add_option("--image-size", spec.image_size, "Image side length")->capture_default_str();
  synth->add_option("--n-distractors", spec.n_distractors, "Distractor blobs")->capture_default_str();
  synth->add_option("--blob-r-min", spec.blob_r_min, "Min blob radius")->capture_default_str();
  synth->add_option("--blob-r-max", spec.blob_r_max, "Max blob radius")->capture_default_str();
  synth->add_option("--offset-y", spec.offset_y, "Landmark-to-target dy")->capture_default_str();
  synth->add_option("--offset-x", spec.offset_x, "Landmark-to-target dx")->capture_default_str();
  synth->add_option("--landmark-arm", spec.landmark_arm, "Landmark arm length")->capture_default_str();
  synth->add_option("--landmark-thickness", spec.landmark_thickness,
                    "Landmark bar thickness")->capture_default_str();
  synth->add_option("--background-noise", spec.background_noise,
                    "Background noise sigma")->capture_default_str();
  synth->callback([&] {
    StagedDir out(synth_out);
    Dataset ds = generate_synthetic(spec, synth_n, synth_seed);
    save_dataset(ds, out.path().string());
    write_config_snapshot(out.path(), "synth-data",
                          {{"n", synth_n},
                           {"seed", synth_seed},
                           {"image_size", spec.image_size},
                           {"n_distractors", spec.n_distractors},
                           {"blob_r_min", spec.blob_r_min},
                           {"blob_r_max", spec.blob_r_max},
                           {"offset_y", spec.offset_y},
                           {"offset_x", spec.offset_x},
                           {"landmark_intensity", spec.landmark_intensity},
                           {"blob_intensity", spec.blob_intensity},
                           {"background_base", spec.background_base},
                           {"background_noise", spec.background_noise}});
    out.commit();
    std::printf("wrote %d samples to %s\n", synth_n, synth_out.c_str());
  });

  // --- train-utility ------------------------------------------------------
  auto* tu = app.add_subcommand("train-utility", "Train the segmentation model");
  std::string tu_data, tu_out = default_out_root() + "/utility";
  UNetConfig tu_cfg;  // depth 3, base 16, class-logits
  TrainSettings tu_settings;
  tu->add_option("--data", tu_data, "Dataset directory or manifest")
      ->required()
      ->check(CLI::ExistingPath);
  tu->add_option("--out", tu_out, "Output directory")->capture_default_str();
  tu->add_option("--depth", tu_cfg.depth, "Downsample stages")->capture_default_str();
  tu->add_option("--base", tu_cfg.base_channels, "Base channels")->capture_default_str();
  tu->add_option("--epochs", tu_settings.epochs, "Training epochs")->capture_default_str();
  tu->add_option("--batch", tu_settings.batch_size, "Minibatch size")->capture_default_str();
  tu->add_option("--lr", tu_settings.lr, "Learning rate")->capture_default_str();
  tu->add_option("--seed", tu_settings.seed, "Random seed")->capture_default_str();
  tu->add_option("--val-fraction", tu_settings.val_fraction, "Validation fraction")
      ->capture_default_str();
  tu->callback([&] {
    Dataset ds = load_dataset(tu_data);
    StagedDir out(tu_out);
    try {
      auto progress = [](const EpochStats& e) {
        std::printf("epoch %d: loss %.5f, val dice %.4f\n", e.epoch,
                    e.utility_loss, e.val_dice);
        std::fflush(stdout);
      };
      TrainResult result = train_utility(ds, tu_cfg, tu_settings, progress);
      save_checkpoint(result.model, (out.path() / "utility.ckpt").string());
      write_text(out.path() / "metrics.csv", metrics_csv(result.history));
      write_config_snapshot(out.path(), "train-utility",
                            {{"data", tu_data},
                             {"depth", tu_cfg.depth},
                             {"base_channels", tu_cfg.base_channels},
                             {"epochs", tu_settings.epochs},
                             {"batch_size", tu_settings.batch_size},
                             {"lr", tu_settings.lr},
                             {"seed", tu_settings.seed},
                             {"val_fraction", tu_settings.val_fraction}});
      out.commit();
      std::printf("final validation dice: %.4f\n", result.final_val_dice);
    } catch (const DivergenceError& e) {
      const std::string rescue = tu_out + ".diverged.ckpt";
      save_checkpoint(e.last_good(), rescue);
      throw std::runtime_error(std::string(e.what()) +
                               "; last good checkpoint saved to " + rescue);
    }
  });

  // --- train-noise --------------------------------------------------------
  auto* tn = app.add_subcommand("train-noise",
                                "Train the interpretability (noise) model");
  std::string tn_data, tn_utility, tn_out = default_out_root() + "/noise";
  NoiseFlags tn_flags;
  tn->add_option("--data", tn_data, "Dataset directory or manifest")
      ->required()
      ->check(CLI::ExistingPath);
  tn->add_option("--utility-ckpt", tn_utility, "Frozen utility checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  tn->add_option("--out", tn_out, "Output directory")->capture_default_str();
  add_noise_flags(tn, tn_flags);
  tn->callback([&] {
    Dataset ds = load_dataset(tn_data);
    ModelParams utility = load_checkpoint(tn_utility);
    StagedDir out(tn_out);
    try {
      auto progress = [](const EpochStats& e) {
        std::printf("epoch %d: ce %.5f, noise term %.5f, mean B %.4f, "
                    "noised val dice %.4f\n",
                    e.epoch, e.utility_loss, e.noise_term, e.mean_b, e.val_dice);
        std::fflush(stdout);
      };
      NoiseTrainResult result =
          train_unoise(ds, utility, tn_flags.arch(), tn_flags.cfg, progress);
      save_checkpoint(result.noise_model, (out.path() / "noise.ckpt").string());
      write_text(out.path() / "metrics.csv", metrics_csv(result.history));
      json snap = tn_flags.to_json();
      snap["data"] = tn_data;
      snap["utility_ckpt"] = tn_utility;
      write_config_snapshot(out.path(), "train-noise", snap);
      out.commit();
      std::printf("final noised validation dice: %.4f, mean B: %.4f\n",
                  result.final_val_dice_noised, result.final_mean_b);
    } catch (const DivergenceError& e) {
      const std::string rescue = tn_out + ".diverged.ckpt";
      save_checkpoint(e.last_good(), rescue);
      throw std::runtime_error(std::string(e.what()) +
                               "; last good checkpoint saved to " + rescue);
    }
  });

  // --- interpret ----------------------------------------------------------
  auto* in = app.add_subcommand("interpret", "Export importance maps as PGM");
  std::string in_data, in_utility, in_noise, in_out = default_out_root() + "/maps";
  std::vector<std::string> in_methods = {"unoise", "occlusion", "gradcam"};
  int in_index = -1;  // -1 = all
  int in_window = 15, in_stride = 2;
  double in_fill = 0.0;
  in->add_option("--data", in_data, "Dataset directory or manifest")
      ->required()
      ->check(CLI::ExistingPath);
  in->add_option("--utility-ckpt", in_utility, "Utility checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  in->add_option("--noise-ckpt", in_noise, "Noise-model checkpoint")
      ->check(CLI::ExistingFile);
  in->add_option("--out", in_out, "Output directory")->capture_default_str();
  in->add_option("--methods", in_methods,
                 "Methods to run (unoise occlusion gradcam)");
  in->add_option("--index", in_index, "Sample index (-1 = all)")->capture_default_str();
  in->add_option("--window", in_window, "Occlusion window")->capture_default_str();
  in->add_option("--stride", in_stride, "Occlusion stride")->capture_default_str();
  in->add_option("--fill", in_fill, "Occlusion fill value")->capture_default_str();
  in->callback([&] {
    Dataset ds = load_dataset(in_data);
    ModelParams utility = load_checkpoint(in_utility);
    ModelParams noise_model;
    bool want_unoise = false;
    for (const auto& m : in_methods) want_unoise |= (m == "unoise");
    if (want_unoise) {
      if (in_noise.empty())
        throw CLI::RequiredError("--noise-ckpt (required by method 'unoise')");
      noise_model = load_checkpoint(in_noise);
    }
    StagedDir out(in_out);
    std::vector<std::size_t> indices;
    if (in_index >= 0) {
      if (static_cast<std::size_t>(in_index) >= ds.size())
        throw std::runtime_error("--index " + std::to_string(in_index) +
                                 " out of range; dataset has " +
                                 std::to_string(ds.size()) + " samples");
      indices.push_back(static_cast<std::size_t>(in_index));
    } else {
      for (std::size_t i = 0; i < ds.size(); ++i) indices.push_back(i);
    }
    for (std::size_t i : indices) {
      const Sample& s = ds[i];
      for (const std::string& method : in_methods) {
        ImportanceMap map;
        if (method == "unoise") {
          map = unoise_map(noise_model, s.image).second;
        } else if (method == "occlusion") {
          map = occlusion_sensitivity(utility, s.image, in_window, in_stride,
                                      static_cast<float>(in_fill));
        } else if (method == "gradcam") {
          map = grad_cam(utility, s.image, 1);
        } else {
          throw std::runtime_error("unknown method: " + method);
        }
        write_pgm_with_sidecar(map,
                               (out.path() / (s.id + "_" + method + ".pgm")).string());
      }
    }
    write_config_snapshot(out.path(), "interpret",
                          {{"data", in_data},
                           {"utility_ckpt", in_utility},
                           {"noise_ckpt", in_noise},
                           {"methods", in_methods},
                           {"index", in_index},
                           {"window", in_window},
                           {"stride", in_stride},
                           {"fill", in_fill}});
    out.commit();
    std::printf("wrote %zu maps to %s\n", indices.size() * in_methods.size(),
                in_out.c_str());
  });

  // --- evaluate -----------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Visibility sweep or pretraining table");
  std::string ev_mode = "sweep";
  std::string ev_data, ev_utility, ev_noise, ev_out = default_out_root() + "/eval";
  int ev_thresholds = 21;
  std::vector<std::string> ev_sizes = {"small", "medium", "large"};
  NoiseFlags ev_flags;
  ev->add_option("--mode", ev_mode, "sweep | pretraining")
      ->capture_default_str()
      ->check(CLI::IsMember({"sweep", "pretraining"}));
  ev->add_option("--data", ev_data, "Dataset directory or manifest")
      ->required()
      ->check(CLI::ExistingPath);
  ev->add_option("--utility-ckpt", ev_utility, "Utility checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--noise-ckpt", ev_noise, "Noise checkpoint (sweep mode)")
      ->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "Output directory")->capture_default_str();
  ev->add_option("--thresholds", ev_thresholds, "Threshold grid size")->capture_default_str();
  ev->add_option("--sizes", ev_sizes, "Model sizes for pretraining mode");
  add_noise_flags(ev, ev_flags);
  ev->callback([&] {
    Dataset ds = load_dataset(ev_data);
    ModelParams utility = load_checkpoint(ev_utility);
    StagedDir out(ev_out);
    json snap = {{"mode", ev_mode},   {"data", ev_data},
                 {"utility_ckpt", ev_utility}, {"noise_ckpt", ev_noise},
                 {"thresholds", ev_thresholds},
                 {"sizes", ev_sizes}};
    if (ev_mode == "sweep") {
      if (ev_noise.empty())
        throw CLI::RequiredError("--noise-ckpt (required by --mode sweep)");
      ModelParams noise_model = load_checkpoint(ev_noise);
      auto records = visibility_sweep(utility, noise_model, ds,
                                      threshold_grid(ev_thresholds), "noise", false);
      write_text(out.path() / "sweep.csv", sweep_csv(records));
    } else {
      auto cells = pretraining_comparison(ds, utility, ev_sizes, ev_flags.cfg);
      write_text(out.path() / "pretraining.csv", pretrain_csv(cells));
      snap["noise"] = ev_flags.to_json();
    }
    write_config_snapshot(out.path(), "evaluate", snap);
    out.commit();
    std::printf("evaluation written to %s\n", ev_out.c_str());
  });

  // --- benchmark ----------------------------------------------------------
  auto* bm = app.add_subcommand("benchmark", "Per-method inference timing");
  std::string bm_data, bm_utility, bm_noise, bm_out = default_out_root() + "/bench";
  int bm_trials = 10, bm_index = 0;
  bm->add_option("--data", bm_data, "Dataset directory or manifest")
      ->required()
      ->check(CLI::ExistingPath);
  bm->add_option("--utility-ckpt", bm_utility, "Utility checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  bm->add_option("--noise-ckpt", bm_noise, "Noise checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  bm->add_option("--out", bm_out, "Output directory")->capture_default_str();
  bm->add_option("--trials", bm_trials, "Timed trials per method")->capture_default_str();
  bm->add_option("--index", bm_index, "Sample index to benchmark")->capture_default_str();
  bm->callback([&] {
    Dataset ds = load_dataset(bm_data);
    if (static_cast<std::size_t>(bm_index) >= ds.size())
      throw std::runtime_error("--index out of range");
    ModelParams utility = load_checkpoint(bm_utility);
    ModelParams noise_model = load_checkpoint(bm_noise);
    StagedDir out(bm_out);
    BenchmarkReport report =
        runtime_benchmark(utility, noise_model, ds[bm_index].image, bm_trials);
    write_text(out.path() / "benchmark.csv", benchmark_csv(report));
    write_text(out.path() / "benchmark.txt", benchmark_table(report));
    write_config_snapshot(out.path(), "benchmark",
                          {{"data", bm_data},
                           {"utility_ckpt", bm_utility},
                           {"noise_ckpt", bm_noise},
                           {"trials", bm_trials},
                           {"index", bm_index}});
    out.commit();
    std::fputs(benchmark_table(report).c_str(), stdout);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
