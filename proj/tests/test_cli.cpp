#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const std::string kCli = UNOISE_CLI_PATH;

struct RunResult {
  int exit_code;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  const fs::path log = fs::temp_directory_path() / "unoise_cli_test_out.txt";
  const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::string output((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
  int code = -1;
  if (WIFEXITED(status)) code = WEXITSTATUS(status);
  return {code, output};
}

fs::path work_dir() {
  auto dir = fs::temp_directory_path() / "unoise_cli_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool dirs_byte_identical(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names_a, names_b;
  for (const auto& e : fs::directory_iterator(a))
    names_a.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b))
    names_b.push_back(e.path().filename().string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  if (names_a != names_b) return false;
  for (const auto& name : names_a)
    if (slurp(a / name) != slurp(b / name)) return false;
  return true;
}

// small dataset flags shared by the pipeline tests (32x32 images)
const std::string kTinyData =
    "--image-size 32 --n-distractors 1 --offset-y 4 --offset-x 11 "
    "--blob-r-min 3 --blob-r-max 4 --landmark-arm 4";

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli("").exit_code == 2);                       // missing subcommand
  CHECK(run_cli("frobnicate").exit_code == 2);             // unknown subcommand
  CHECK(run_cli("synth-data --bogus-flag 1").exit_code == 2);

  auto missing = run_cli("train-noise --data /tmp --out /tmp/x");
  CHECK(missing.exit_code == 2);
  CHECK(missing.output.find("--utility-ckpt") != std::string::npos);

  // unreadable path is a usage error
  CHECK(run_cli("train-utility --data /nonexistent/dataset --out /tmp/x")
            .exit_code == 2);
}

TEST_CASE("--help exits cleanly") {
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("synth-data --help").exit_code == 0);
}

TEST_CASE("synth-data is byte-deterministic per seed") {
  const auto dir = work_dir();
  fs::remove_all(dir / "d1");
  fs::remove_all(dir / "d2");
  const std::string flags = "--n 8 --seed 7 " + kTinyData;
  CHECK(run_cli("synth-data " + flags + " --out " + (dir / "d1").string())
            .exit_code == 0);
  CHECK(run_cli("synth-data " + flags + " --out " + (dir / "d2").string())
            .exit_code == 0);
  CHECK(dirs_byte_identical(dir / "d1", dir / "d2"));
  CHECK(fs::exists(dir / "d1" / "config.json"));
  CHECK(fs::exists(dir / "d1" / "manifest.json"));
  CHECK(slurp(dir / "d1" / "config.json").find("\"seed\": 7") != std::string::npos);

  SUBCASE("a different seed changes the bytes") {
    fs::remove_all(dir / "d3");
    CHECK(run_cli("synth-data --n 8 --seed 8 " + kTinyData + " --out " +
                  (dir / "d3").string())
              .exit_code == 0);
    CHECK_FALSE(dirs_byte_identical(dir / "d1", dir / "d3"));
  }
}

TEST_CASE("pipeline: synth-data, train-utility, train-noise, evaluate, interpret") {
  const auto dir = work_dir() / "pipeline";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string data = (dir / "data").string();
  const std::string util = (dir / "util").string();
  const std::string noise = (dir / "noise").string();

  REQUIRE(run_cli("synth-data --n 24 --seed 3 " + kTinyData + " --out " + data)
              .exit_code == 0);

  auto tu = run_cli("train-utility --data " + data + " --out " + util +
                    " --depth 2 --base 4 --epochs 3 --seed 1");
  CHECK(tu.exit_code == 0);
  CHECK(fs::exists(fs::path(util) / "utility.ckpt"));
  const std::string metrics = slurp(fs::path(util) / "metrics.csv");
  CHECK(metrics.rfind("epoch,utility_loss,noise_term,mean_B,val_dice\n", 0) == 0);

  auto tn = run_cli("train-noise --data " + data + " --utility-ckpt " + util +
                    "/utility.ckpt --out " + noise +
                    " --depth 2 --base 4 --epochs 2 --seed 2");
  CHECK(tn.exit_code == 0);
  CHECK(fs::exists(fs::path(noise) / "noise.ckpt"));

  auto ev = run_cli("evaluate --mode sweep --data " + data + " --utility-ckpt " +
                    util + "/utility.ckpt --noise-ckpt " + noise +
                    "/noise.ckpt --out " + (dir / "eval").string() +
                    " --thresholds 5");
  CHECK(ev.exit_code == 0);
  const std::string sweep = slurp(dir / "eval" / "sweep.csv");
  CHECK(sweep.rfind("threshold,percent_visible,dice,model,pretrained\n", 0) == 0);

  auto in = run_cli("interpret --data " + data + " --utility-ckpt " + util +
                    "/utility.ckpt --noise-ckpt " + noise +
                    "/noise.ckpt --out " + (dir / "maps").string() +
                    " --index 0 --window 7 --stride 3");
  CHECK(in.exit_code == 0);
  CHECK(fs::exists(dir / "maps" / "sample_00000_unoise.pgm"));
  CHECK(fs::exists(dir / "maps" / "sample_00000_unoise.pgm.json"));
  CHECK(fs::exists(dir / "maps" / "sample_00000_occlusion.pgm"));
  CHECK(fs::exists(dir / "maps" / "sample_00000_gradcam.pgm"));

  SUBCASE("out-of-range index is a runtime error (exit 1)") {
    auto bad = run_cli("interpret --data " + data + " --utility-ckpt " + util +
                       "/utility.ckpt --noise-ckpt " + noise +
                       "/noise.ckpt --out " + (dir / "maps2").string() +
                       " --index 999");
    CHECK(bad.exit_code == 1);
    CHECK(bad.output.find("out of range") != std::string::npos);
  }

  SUBCASE("evaluate pretraining mode trains cells on demand") {
    auto ep = run_cli("evaluate --mode pretraining --data " + data +
                      " --utility-ckpt " + util + "/utility.ckpt --out " +
                      (dir / "pre").string() +
                      " --sizes small --epochs 1 --seed 4");
    CHECK(ep.exit_code == 0);
    const std::string table = slurp(dir / "pre" / "pretraining.csv");
    CHECK(table.rfind("model,pretrained,threshold,percent_visible,dice\n", 0) == 0);
    CHECK(std::count(table.begin(), table.end(), '\n') == 3);  // header + 2 cells
  }

  SUBCASE("benchmark emits csv and table") {
    auto bm = run_cli("benchmark --data " + data + " --utility-ckpt " + util +
                      "/utility.ckpt --noise-ckpt " + noise +
                      "/noise.ckpt --out " + (dir / "bench").string() +
                      " --trials 1");
    CHECK(bm.exit_code == 0);
    CHECK(slurp(dir / "bench" / "benchmark.csv")
              .rfind("method,mean_seconds,trials,input_shape,host\n", 0) == 0);
    CHECK(fs::exists(dir / "bench" / "benchmark.txt"));
  }

  SUBCASE("train-noise rerun with the same seed is byte-identical") {
    const std::string noise2 = (dir / "noise2").string();
    auto again = run_cli("train-noise --data " + data + " --utility-ckpt " + util +
                         "/utility.ckpt --out " + noise2 +
                         " --depth 2 --base 4 --epochs 2 --seed 2");
    CHECK(again.exit_code == 0);
    CHECK(slurp(fs::path(noise) / "noise.ckpt") ==
          slurp(fs::path(noise2) / "noise.ckpt"));
    CHECK(slurp(fs::path(noise) / "metrics.csv") ==
          slurp(fs::path(noise2) / "metrics.csv"));
  }
}

TEST_CASE("staged outputs: no partial directory on failure") {
  const auto dir = work_dir() / "staging";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string data = (dir / "data").string();
  REQUIRE(run_cli("synth-data --n 4 --seed 1 " + kTinyData + " --out " + data)
              .exit_code == 0);
  // divergence: absurd lr; the run fails but leaves no half-written out dir
  auto boom = run_cli("train-utility --data " + data + " --out " +
                      (dir / "util").string() +
                      " --depth 2 --base 4 --epochs 3 --seed 1 --lr 1e30");
  CHECK(boom.exit_code == 1);
  CHECK_FALSE(fs::exists(dir / "util"));
  CHECK_FALSE(fs::exists(dir / "util.tmp"));
  // the last-good rescue checkpoint is saved next to the target
  CHECK(boom.output.find("last good checkpoint") != std::string::npos);
  CHECK(fs::exists(dir / "util.diverged.ckpt"));
}
