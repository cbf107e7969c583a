#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "codednet/analysis.hpp"
#include "codednet/cli.hpp"
#include "doctest.h"
#include "json.hpp"

namespace an = codednet::analysis;
namespace cli = codednet::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "codednet_cli_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  json j;
  f >> j;
  return j;
}

double csv_value(const std::vector<an::CsvRow>& rows, const std::string& metric,
                 int class_index = -1, int block = -1) {
  for (const auto& r : rows)
    if (r.metric == metric && r.class_index == class_index && r.block == block)
      return r.value;
  FAIL("metric not found: " << metric);
  return 0.0;
}

// One small coded training run shared by the checkpoint-consuming tests.
const fs::path& tiny_run() {
  static const fs::path dir = [] {
    const fs::path d = fresh_dir("tiny-train");
    const int rc = cli::run({"train", "--arch", "toy-dense", "--epochs", "4",
                             "--blobs-per-class", "40", "--batch-size", "32",
                             "-o", d.string()});
    REQUIRE(rc == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("scheme files round-trip through generation and verification") {
  const fs::path dir = fresh_dir("codebook");
  const std::string file = (dir / "scheme.txt").string();
  CHECK(cli::run({"codebook", "generate", "--K", "10", "--N", "10", "--N-act",
                  "3", "--H-min", "4", "-o", file}) == 0);
  CHECK(fs::exists(file));
  CHECK(cli::run({"codebook", "verify", file}) == 0);

  // Tampering with one codeword must fail the re-verification.
  std::string text = slurp(file);
  const auto pos = text.find('1');
  REQUIRE(pos != std::string::npos);
  text[pos] = '0';
  std::ofstream(file, std::ios::trunc) << text;
  CHECK(cli::run({"codebook", "verify", file}) != 0);
}

TEST_CASE("the parameter command reports the published fractions") {
  struct Case {
    const char* arch;
    double fraction;
  };
  const Case cases[] = {{"cifar10", 0.38}, {"cifar100", 0.27}, {"imagenet", 0.35}};
  for (const auto& c : cases) {
    const fs::path dir = fresh_dir(std::string("params-") + c.arch);
    CHECK(cli::run({"params", "--arch", c.arch, "--class", "0", "-o",
                    dir.string()}) == 0);
    const auto rows = an::read_csv((dir / "params.csv").string());
    const double fraction = csv_value(rows, "fraction", 0);
    CHECK(std::abs(fraction - c.fraction) < 0.02);
    CHECK(read_json(dir / "config.json")["arch"] == c.arch);
  }
}

TEST_CASE("bad invocations exit with the usage status") {
  CHECK(cli::run({"train", "--no-such-flag"}) == 2);
  CHECK(cli::run({"no-such-command"}) == 2);
  CHECK(cli::run({}) == 2);
  CHECK(cli::run({"params"}) == 2);                       // --arch is required
  CHECK(cli::run({"params", "--arch", "bogus"}) == 2);    // not a preset
  CHECK(cli::run({"eval"}) == 2);                         // --checkpoint required
}

TEST_CASE("help requests succeed") {
  CHECK(cli::run({"--help"}) == 0);
  CHECK(cli::run({"train", "--help"}) == 0);
  CHECK(cli::run({"codebook", "generate", "--help"}) == 0);
}

TEST_CASE("a missing or malformed config file fails with a diagnostic") {
  CHECK(cli::run({"train", "--config", "definitely-missing.json"}) == 1);

  const fs::path dir = fresh_dir("bad-config");
  const fs::path unknown = dir / "unknown-key.json";
  std::ofstream(unknown) << R"({"epochs": 2, "not-a-real-key": 5})";
  CHECK(cli::run({"train", "--config", unknown.string()}) == 1);

  const fs::path invalid = dir / "invalid.json";
  std::ofstream(invalid) << "{not json";
  CHECK(cli::run({"train", "--config", invalid.string()}) == 1);
}

TEST_CASE("config files fill in what the command line leaves unset") {
  const fs::path dir = fresh_dir("config-merge");
  const fs::path cfg = dir / "run.json";
  {
    json j;
    j["epochs"] = 2;
    j["blobs-per-class"] = 30;
    j["batch-size"] = 32;
    j["out-dir"] = (dir / "a").string();
    std::ofstream(cfg) << j.dump();
  }
  // 240 samples, 192 in the training split, batch 32 -> 6 steps per epoch.
  // The explicit --epochs 1 must override the config's 2.
  CHECK(cli::run({"train", "--config", cfg.string(), "--epochs", "1"}) == 0);
  const json summary = read_json(dir / "a" / "summary.json");
  CHECK(summary["steps"] == 6);

  // The stored provenance config reproduces the run exactly.
  const json stored = read_json(dir / "a" / "config.json");
  CHECK(stored["command"] == "train");
  CHECK(stored["epochs"] == 1);
  CHECK(stored["blobs-per-class"] == 30);
  json replay = stored;
  replay.erase("command");
  replay["out-dir"] = (dir / "b").string();
  const fs::path cfg2 = dir / "replay.json";
  std::ofstream(cfg2) << replay.dump();
  CHECK(cli::run({"train", "--config", cfg2.string()}) == 0);
  CHECK(slurp(dir / "a" / "history.csv") == slurp(dir / "b" / "history.csv"));
}

TEST_CASE("training artifacts round-trip through eval") {
  const fs::path& train_dir = tiny_run();
  for (const char* name : {"config.json", "history.csv", "model.ckpt", "summary.json"})
    CHECK(fs::exists(train_dir / name));

  const fs::path dir = fresh_dir("eval");
  CHECK(cli::run({"eval", "--checkpoint", (train_dir / "model.ckpt").string(),
                  "--blobs-per-class", "40", "-o", dir.string()}) == 0);

  // The evaluated accuracy equals the last validation accuracy of training.
  const auto history = an::read_csv((train_dir / "history.csv").string());
  double last_val = -1.0;
  int last_epoch = -1;
  for (const auto& r : history)
    if (r.metric == "val-accuracy" && r.trial > last_epoch) {
      last_epoch = r.trial;
      last_val = r.value;
    }
  const auto eval_rows = an::read_csv((dir / "eval.csv").string());
  CHECK(csv_value(eval_rows, "accuracy") == last_val);
  CHECK(read_json(dir / "summary.json")["accuracy"] == last_val);
}

TEST_CASE("deterministic reruns produce byte-identical artifacts") {
  const fs::path a = fresh_dir("det-a");
  const fs::path b = fresh_dir("det-b");
  const std::vector<std::string> base = {
      "train", "--arch",  "toy-dense", "--epochs", "3", "--blobs-per-class",
      "30",    "--deterministic"};
  auto with_out = [&](const fs::path& d) {
    auto args = base;
    args.push_back("-o");
    args.push_back(d.string());
    return args;
  };
  REQUIRE(cli::run(with_out(a)) == 0);
  REQUIRE(cli::run(with_out(b)) == 0);
  CHECK(slurp(a / "history.csv") == slurp(b / "history.csv"));
  CHECK(slurp(a / "model.ckpt") == slurp(b / "model.ckpt"));

  const fs::path aa = fresh_dir("det-ablate-a");
  const fs::path ab = fresh_dir("det-ablate-b");
  for (const fs::path* d : {&aa, &ab})
    REQUIRE(cli::run({"ablate", "--checkpoint", (a / "model.ckpt").string(),
                      "--blobs-per-class", "30", "--trials", "2",
                      "--deterministic", "-o", d->string()}) == 0);
  CHECK(slurp(aa / "ablation.csv") == slurp(ab / "ablation.csv"));
}

TEST_CASE("ablation, extraction, and decoding commands write their tables") {
  const fs::path& train_dir = tiny_run();
  const std::string ckpt = (train_dir / "model.ckpt").string();

  const fs::path ab = fresh_dir("ablate");
  CHECK(cli::run({"ablate", "--checkpoint", ckpt, "--blobs-per-class", "40",
                  "--class", "2", "--set", "active", "--trials", "2", "-o",
                  ab.string()}) == 0);
  const auto ab_rows = an::read_csv((ab / "ablation.csv").string());
  CHECK(csv_value(ab_rows, "baseline-accuracy", 2, 5) >= 0.0);
  CHECK(csv_value(ab_rows, "mean-accuracy-active-removed", 2, 5) >= 0.0);
  bool has_trial = false;
  for (const auto& r : ab_rows)
    if (r.metric == "accuracy-active-removed" && r.trial == 1) has_trial = true;
  CHECK(has_trial);

  const fs::path ex = fresh_dir("extract");
  CHECK(cli::run({"extract", "--checkpoint", ckpt, "--blobs-per-class", "40",
                  "--class", "1", "-o", ex.string()}) == 0);
  const auto ex_rows = an::read_csv((ex / "extraction.csv").string());
  const double f1 = csv_value(ex_rows, "f1", 1);
  CHECK(f1 >= 0.0);
  CHECK(f1 <= 1.0);
  CHECK(csv_value(ex_rows, "params-kept", 1) > 0.0);
  CHECK(csv_value(ex_rows, "param-fraction", 1) < 1.0);

  const fs::path ed = fresh_dir("early-decode");
  CHECK(cli::run({"early-decode", "--checkpoint", ckpt, "--blobs-per-class",
                  "40", "-o", ed.string()}) == 0);
  const auto ed_rows = an::read_csv((ed / "early_decode.csv").string());
  CHECK(csv_value(ed_rows, "chance") == 0.125);
  int acc_rows = 0;
  for (const auto& r : ed_rows)
    if (r.metric == "accuracy") ++acc_rows;
  CHECK(acc_rows == 4);  // the four coded blocks
}

TEST_CASE("dataset flags are validated against the architecture") {
  // Feature width 16 does not match the dense architecture's input width 32.
  CHECK(cli::run({"train", "--arch", "toy-dense", "--blobs-dim", "16",
                  "--epochs", "1"}) == 1);
  // Synthetic feature rows cannot feed an image architecture.
  CHECK(cli::run({"train", "--arch", "cifar10", "--blobs-k", "10", "--epochs",
                  "1"}) == 1);
  // Class-count mismatch against a trained checkpoint.
  const fs::path& train_dir = tiny_run();
  CHECK(cli::run({"eval", "--checkpoint", (train_dir / "model.ckpt").string(),
                  "--blobs-k", "4"}) == 1);
}

TEST_CASE("the gradient battery stays within tolerance on every probe") {
  const auto entries = cli::run_gradcheck_battery(3, 99);
  CHECK(entries.size() >= 12);
  for (const auto& e : entries) {
    CAPTURE(e.name);
    CHECK(e.max_rel_err < 1e-4);
    CHECK(e.components > 0);
  }
  CHECK_THROWS_AS(cli::run_gradcheck_battery(0, 1), std::invalid_argument);
}
