#include "codednet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "codednet/analysis.hpp"
#include "codednet/blocks.hpp"
#include "codednet/codebook.hpp"
#include "codednet/dataset.hpp"
#include "codednet/gradcheck.hpp"
#include "codednet/graph.hpp"
#include "codednet/network.hpp"
#include "codednet/rng.hpp"
#include "codednet/tensor.hpp"
#include "json.hpp"

namespace codednet::cli {

namespace an = codednet::analysis;
namespace cb = codednet::codebook;
namespace ds = codednet::dataset;
namespace nw = codednet::network;
using json = nlohmann::json;

namespace {

// ---------- small formatting / filesystem helpers ----------

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) std::filesystem::create_directories(dir);
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed for " + path);
}

json load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config file not found: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object())
    throw std::runtime_error("config file " + path + " must hold a JSON object");
  return j;
}

// ---------- config binding ----------
//
// Every option is registered here as well as with the parser, so that a JSON
// config file can fill in whatever the command line left unset (flags win),
// and so the fully resolved configuration can be serialized into the output
// directory for provenance.
class ConfigBinder {
 public:
  explicit ConfigBinder(CLI::App* cmd) : cmd_(cmd) {}

  template <typename T>
  CLI::Option* opt(const std::string& name, T& target, const std::string& desc) {
    CLI::Option* o = cmd_->add_option(name, target, desc);
    note(o, long_key(name), [&target](const json& v) { target = v.get<T>(); },
         [&target] { return json(target); });
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& target, const std::string& desc) {
    CLI::Option* o = cmd_->add_flag(name, target, desc);
    note(o, long_key(name), [&target](const json& v) { target = v.get<bool>(); },
         [&target] { return json(target); });
    return o;
  }

  // Config-file values fill in options the command line did not set.
  void apply(const json& j) const {
    for (const auto& [key, value] : j.items()) {
      if (key == "command") continue;
      const Entry* hit = nullptr;
      for (const Entry& e : entries_)
        if (e.key == key) {
          hit = &e;
          break;
        }
      if (hit == nullptr) throw std::runtime_error("unknown config key: " + key);
      if (hit->option->count() == 0) hit->set(value);
    }
  }

  json snapshot(const std::string& command) const {
    json j;
    j["command"] = command;
    for (const Entry& e : entries_) j[e.key] = e.get();
    return j;
  }

 private:
  struct Entry {
    CLI::Option* option;
    std::string key;
    std::function<void(const json&)> set;
    std::function<json()> get;
  };

  static std::string long_key(const std::string& spec) {
    std::string last;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= spec.size(); ++i)
      if (i == spec.size() || spec[i] == ',') {
        const std::string tok = spec.substr(start, i - start);
        if (tok.rfind("--", 0) == 0) last = tok.substr(2);
        start = i + 1;
      }
    if (last.empty()) throw std::logic_error("option needs a long name: " + spec);
    return last;
  }

  void note(CLI::Option* o, std::string key, std::function<void(const json&)> set,
            std::function<json()> get) {
    entries_.push_back({o, std::move(key), std::move(set), std::move(get)});
  }

  CLI::App* cmd_;
  std::vector<Entry> entries_;
};

// ---------- dataset plumbing ----------

struct DataOpts {
  int blobs_k = 8;
  int blobs_dim = 32;
  int blobs_per_class = 500;
  double blobs_spread = 0.3;
  std::uint64_t data_seed = 42;
  std::string images;
  int channels = 3;
  int height = 32;
  int width = 32;
  int image_classes = 10;
  double val_fraction = 0.2;
  std::uint64_t split_seed = 11;
};

void register_data(ConfigBinder& b, DataOpts& d) {
  b.opt("--blobs-k", d.blobs_k, "synthetic data: number of classes");
  b.opt("--blobs-dim", d.blobs_dim, "synthetic data: feature width");
  b.opt("--blobs-per-class", d.blobs_per_class, "synthetic data: samples per class");
  b.opt("--blobs-spread", d.blobs_spread, "synthetic data: within-class noise scale");
  b.opt("--data-seed", d.data_seed, "synthetic data seed");
  b.opt("--images", d.images,
        "binary image file (1 label byte + C*H*W pixel bytes per record); "
        "replaces the synthetic data when given");
  b.opt("--channels", d.channels, "image file: channels");
  b.opt("--height", d.height, "image file: height");
  b.opt("--width", d.width, "image file: width");
  b.opt("--image-classes", d.image_classes, "image file: number of label values");
  b.opt("--val-fraction", d.val_fraction, "held-out fraction per class");
  b.opt("--split-seed", d.split_seed, "train/validation split seed");
}

struct LoadedData {
  nw::Dataset full;
  nw::Dataset train;
  nw::Dataset val;
};

LoadedData build_data(const DataOpts& d) {
  LoadedData out;
  if (!d.images.empty()) {
    out.full = ds::load_binary_images(d.images, d.channels, d.height, d.width,
                                      d.image_classes);
    auto split = ds::split_dataset(out.full, 1.0 - d.val_fraction, d.split_seed);
    // Standardization statistics come from the training split only.
    const auto stats = ds::channel_stats(split.train);
    ds::standardize(split.train, stats);
    ds::standardize(split.val, stats);
    ds::standardize(out.full, stats);
    out.train = std::move(split.train);
    out.val = std::move(split.val);
  } else {
    out.full = ds::generate_blobs(d.blobs_k, d.blobs_dim, d.blobs_per_class,
                                  d.blobs_spread, d.data_seed);
    auto split = ds::split_dataset(out.full, 1.0 - d.val_fraction, d.split_seed);
    out.train = std::move(split.train);
    out.val = std::move(split.val);
  }
  return out;
}

const nw::Dataset& pick_split(const LoadedData& data, const std::string& on) {
  if (on == "train") return data.train;
  if (on == "val") return data.val;
  return data.full;
}

void check_arch_data(const nw::ArchSpec& arch, const nw::Dataset& set,
                     const char* what) {
  if (set.size() == 0)
    throw std::invalid_argument(std::string(what) + " set is empty");
  if (set.k_classes != arch.k_classes)
    throw std::invalid_argument(
        std::string(what) + " set has " + std::to_string(set.k_classes) +
        " classes but architecture '" + arch.name + "' expects " +
        std::to_string(arch.k_classes));
  if (arch.spatial) {
    if (set.x.rank() != 4 || set.x.dim(1) != arch.in_channels)
      throw std::invalid_argument(std::string(what) +
                                  " set is not [M," + std::to_string(arch.in_channels) +
                                  ",H,W] image data as architecture '" + arch.name +
                                  "' expects");
  } else {
    if (set.x.rank() != 2 || set.x.dim(1) != arch.in_channels)
      throw std::invalid_argument(
          std::string(what) + " set must be [M," +
          std::to_string(arch.in_channels) + "] feature rows for architecture '" +
          arch.name + "'");
  }
}

std::vector<cb::CodingScheme> schemes_for(const nw::ArchSpec& arch) {
  std::vector<cb::CodingScheme> out;
  for (const auto& req : arch.scheme_requests())
    out.push_back(cb::generate_scheme(arch.k_classes, req.n, req.n_act, req.h_min));
  return out;
}

nw::ArchSpec uncoded_variant(nw::ArchSpec arch) {
  for (auto& stage : arch.stages) stage.n_act = stage.n;
  arch.name += "-uncoded";
  return arch;
}

template <typename T>
std::int64_t total_params(const nw::Network<T>& net) {
  std::int64_t n = 0;
  for (const auto& p : net.params) n += p.numel();
  return n;
}

template <typename F>
int dispatch_precision(const std::string& precision, F&& f) {
  if (precision == "f32") return f(std::type_identity<float>{});
  if (precision == "f64") return f(std::type_identity<double>{});
  throw std::invalid_argument("precision must be f32 or f64, got '" + precision + "'");
}

blocks::RemovalConvention convention_of(const std::string& name) {
  return name == "zero" ? blocks::RemovalConvention::kZeroBeforeNorm
                        : blocks::RemovalConvention::kExcludeFromBoth;
}

// ---------- codebook ----------

struct CodebookGenerateCmd {
  int K = 10;
  int N = 10;
  int N_act = 3;
  int H_min = 4;
  std::string out = "scheme.txt";
  std::uint64_t budget = 0;  // 0: library default
  bool streaming = false;
  bool deterministic = false;
};

int cmd_codebook_generate(const CodebookGenerateCmd& c) {
  cb::GenerateOptions opts;
  if (c.budget > 0) opts.budget = c.budget;
  opts.allow_streaming = c.streaming;
  const cb::CodingScheme scheme = cb::generate_scheme(c.K, c.N, c.N_act, c.H_min, opts);
  cb::save_scheme(scheme, c.H_min, c.out);
  const auto report = cb::verify_scheme(scheme, c.K, c.N, c.N_act, c.H_min);
  std::cout << "codebook: generated K=" << c.K << " N=" << c.N
            << " N-act=" << c.N_act << " H-min=" << c.H_min
            << " min-distance=" << report.measured_min_distance
            << " score=" << report.measured_score << " -> " << c.out << "\n";
  return report.all_pass() ? 0 : 1;
}

struct CodebookVerifyCmd {
  std::string file;
  int K = -1;
  int N = -1;
  int N_act = -1;
  int H_min = -1;
  std::string out_dir;
  bool deterministic = false;
};

int cmd_codebook_verify(const CodebookVerifyCmd& c, const json& run_config) {
  const cb::LoadedScheme loaded = cb::load_scheme(c.file);
  const cb::CodingScheme& s = loaded.scheme;
  const int K = c.K >= 0 ? c.K : s.K();
  const int N = c.N >= 0 ? c.N : s.N;
  const int N_act = c.N_act >= 0 ? c.N_act : s.N_act;
  const int H_min = c.H_min >= 0 ? c.H_min : loaded.H_min;
  const auto report = cb::verify_scheme(s, K, N, N_act, H_min);

  if (!c.out_dir.empty()) {
    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);
    json rj;
    rj["pass"] = report.all_pass();
    rj["distinct"] = report.distinct.pass;
    rj["weights"] = report.rule_a.pass;
    rj["distance"] = report.rule_b.pass;
    rj["balance"] = report.rule_c.pass;
    rj["min-distance"] = report.measured_min_distance;
    rj["score"] = report.measured_score;
    rj["column-sums"] = report.column_sums;
    write_json_file(c.out_dir + "/report.json", rj);
  }

  std::ostringstream line;
  line << "codebook: verify " << (report.all_pass() ? "PASS" : "FAIL")
       << " file=" << c.file << " K=" << K << " N=" << N << " N-act=" << N_act
       << " H-min=" << H_min << " min-distance=" << report.measured_min_distance
       << " score=" << report.measured_score;
  if (!report.distinct.pass) line << " [" << report.distinct.detail << "]";
  if (!report.rule_a.pass) line << " [" << report.rule_a.detail << "]";
  if (!report.rule_b.pass) line << " [" << report.rule_b.detail << "]";
  if (!report.rule_c.pass) line << " [" << report.rule_c.detail << "]";
  std::cout << line.str() << "\n";
  return report.all_pass() ? 0 : 1;
}

// ---------- params ----------

struct ParamsCmd {
  std::string arch;
  int class_k = -1;
  std::string mode = "block-scaled";
  std::string out_dir;
  bool deterministic = false;
};

int cmd_params(const ParamsCmd& c, const json& run_config) {
  const nw::ArchSpec arch = nw::ArchSpec::preset(c.arch);
  const nw::CountMode mode = c.mode == "extracted" ? nw::CountMode::kExtractedExact
                                                   : nw::CountMode::kBlockScaled;
  const std::optional<int> keep =
      c.class_k >= 0 ? std::optional<int>(c.class_k) : std::nullopt;
  const nw::ParamCount pc = nw::count_parameters(arch, keep, mode);

  if (!c.out_dir.empty()) {
    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);
    std::vector<an::CsvRow> rows;
    rows.push_back({"params", -1, c.class_k, -1, "total", static_cast<double>(pc.total)});
    rows.push_back({"params", -1, c.class_k, -1, "kept", static_cast<double>(pc.kept)});
    rows.push_back({"params", -1, c.class_k, -1, "fraction", pc.fraction});
    an::write_csv(c.out_dir + "/params.csv", rows);
  }

  std::cout << "params: arch=" << c.arch << " mode=" << c.mode << " class="
            << (c.class_k >= 0 ? std::to_string(c.class_k) : std::string("none"))
            << " total=" << pc.total << " kept=" << pc.kept
            << " fraction=" << fmt("%.4f", pc.fraction) << "\n";
  return 0;
}

// ---------- train ----------

struct TrainCmd {
  DataOpts data;
  std::string arch = "toy-dense";
  bool uncoded = false;
  std::string precision = "f64";
  std::string out_dir = "out/train";
  bool save_epochs = false;
  bool deterministic = false;
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_floor = 1e-4;
  double mu = 6.0;
  double p_drop = 0.1;
  int loss_exponent = 4;
  std::uint64_t seed = 1;
};

int cmd_train(const TrainCmd& c, const json& run_config) {
  nw::ArchSpec arch = nw::ArchSpec::preset(c.arch);
  if (c.uncoded) arch = uncoded_variant(arch);
  const LoadedData data = build_data(c.data);
  check_arch_data(arch, data.train, "training");
  const bool has_val = data.val.size() > 0;
  if (has_val) check_arch_data(arch, data.val, "validation");

  ensure_dir(c.out_dir);
  write_json_file(c.out_dir + "/config.json", run_config);
  const auto schemes = schemes_for(arch);

  return dispatch_precision(c.precision, [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto net = nw::build_network<T>(arch, schemes, c.seed);

    nw::TrainConfig cfg;
    cfg.epochs = c.epochs;
    cfg.batch_size = c.batch_size;
    cfg.lr = c.lr;
    cfg.momentum = c.momentum;
    cfg.weight_decay = c.weight_decay;
    cfg.lr_floor = c.lr_floor;
    cfg.mu = c.mu;
    cfg.p_drop = c.p_drop;
    cfg.loss_exponent = c.loss_exponent;
    cfg.seed = c.seed;
    if (c.save_epochs) {
      cfg.checkpoint_dir = c.out_dir + "/epochs";
      ensure_dir(cfg.checkpoint_dir);
    }

    const nw::TrainResult result =
        nw::train(net, data.train, has_val ? &data.val : nullptr, cfg);

    std::vector<an::CsvRow> rows;
    const std::vector<int> coded = net.coded_block_indices();
    for (const auto& e : result.history) {
      rows.push_back({"train", -1, -1, e.epoch, "loss", e.mean_loss});
      rows.push_back({"train", -1, -1, e.epoch, "cross-entropy", e.mean_ce});
      rows.push_back({"train", -1, -1, e.epoch, "coding-loss", e.mean_code});
      rows.push_back({"train", -1, -1, e.epoch, "train-accuracy", e.train_accuracy});
      if (has_val)
        rows.push_back({"train", -1, -1, e.epoch, "val-accuracy", e.val_accuracy});
      for (std::size_t b = 0; b < e.per_block_code.size(); ++b)
        rows.push_back({"train", coded[b], -1, e.epoch, "coding-loss",
                        e.per_block_code[b]});
    }
    an::write_csv(c.out_dir + "/history.csv", rows);
    nw::save_checkpoint(net, c.out_dir + "/model.ckpt");

    json summary;
    summary["command"] = "train";
    summary["arch"] = arch.name;
    summary["precision"] = c.precision;
    summary["parameters"] = total_params(net);
    summary["steps"] = result.steps;
    summary["diverged"] = result.diverged;
    if (!result.history.empty()) {
      summary["final-train-accuracy"] = result.history.back().train_accuracy;
      if (has_val) summary["final-val-accuracy"] = result.history.back().val_accuracy;
    }
    write_json_file(c.out_dir + "/summary.json", summary);

    if (result.diverged) {
      std::cout << "train: DIVERGED arch=" << arch.name
                << " (weights restored to the last finite epoch) -> " << c.out_dir
                << "\n";
      return 1;
    }
    std::ostringstream line;
    line << "train: arch=" << arch.name << " precision=" << c.precision
         << " epochs=" << c.epochs << " steps=" << result.steps;
    if (!result.history.empty()) {
      line << " train-acc=" << fmt("%.4f", result.history.back().train_accuracy);
      if (has_val)
        line << " val-acc=" << fmt("%.4f", result.history.back().val_accuracy);
    }
    line << " -> " << c.out_dir;
    std::cout << line.str() << "\n";
    return 0;
  });
}

// ---------- eval ----------

struct EvalCmd {
  DataOpts data;
  std::string checkpoint;
  std::string on = "val";
  int batch_size = 256;
  int loss_exponent = 4;
  std::string out_dir = "out/eval";
  bool deterministic = false;
};

int cmd_eval(const EvalCmd& c, const json& run_config) {
  const LoadedData data = build_data(c.data);
  return dispatch_precision(nw::checkpoint_precision(c.checkpoint), [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto net = nw::load_checkpoint<T>(c.checkpoint);
    const nw::Dataset& set = pick_split(data, c.on);
    check_arch_data(net.arch, set, "evaluation");

    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);

    const auto res = nw::evaluate(net, set, c.batch_size, nullptr, false,
                                  c.loss_exponent);
    std::vector<an::CsvRow> rows;
    rows.push_back({"eval", -1, -1, -1, "accuracy", res.accuracy});
    for (std::size_t b = 0; b < res.coded_blocks.size(); ++b)
      rows.push_back({"eval", res.coded_blocks[b], -1, -1, "coding-loss",
                      res.per_block_code[b]});
    an::write_csv(c.out_dir + "/eval.csv", rows);

    json summary;
    summary["command"] = "eval";
    summary["split"] = c.on;
    summary["samples"] = set.size();
    summary["accuracy"] = res.accuracy;
    write_json_file(c.out_dir + "/summary.json", summary);

    std::cout << "eval: checkpoint=" << c.checkpoint << " split=" << c.on
              << " samples=" << set.size()
              << " accuracy=" << fmt("%.4f", res.accuracy) << " -> " << c.out_dir
              << "\n";
    return 0;
  });
}

// ---------- ablate ----------

struct AblateCmd {
  DataOpts data;
  std::string checkpoint;
  std::string on = "val";
  int block = -1;  // default: deepest coded block
  int class_k = -1;
  std::string set = "both";
  int count = -1;  // default: the block's per-class active branch count
  int trials = 20;
  std::uint64_t trial_seed = 7;
  std::string convention = "exclude";
  std::string out_dir = "out/ablate";
  bool deterministic = false;
};

int cmd_ablate(const AblateCmd& c, const json& run_config) {
  const LoadedData data = build_data(c.data);
  return dispatch_precision(nw::checkpoint_precision(c.checkpoint), [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto net = nw::load_checkpoint<T>(c.checkpoint);
    const nw::Dataset& set = pick_split(data, c.on);
    check_arch_data(net.arch, set, "ablation");

    const std::vector<int> coded = net.coded_block_indices();
    if (coded.empty())
      throw std::invalid_argument("checkpoint holds an uncoded network; nothing to ablate");
    const int block = c.block >= 0 ? c.block : coded.back();
    const auto& ref = net.block_refs.at(static_cast<std::size_t>(block));
    if (!ref.coded())
      throw std::invalid_argument("block " + std::to_string(block) + " is uncoded");
    const int count = c.count >= 0 ? c.count : ref.n_act;

    std::vector<int> classes;
    if (c.class_k >= 0)
      classes.push_back(c.class_k);
    else
      for (int k = 0; k < net.arch.k_classes; ++k) classes.push_back(k);

    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);

    const bool do_active = c.set == "active" || c.set == "both";
    const bool do_inactive = c.set == "inactive" || c.set == "both";
    const auto conv = convention_of(c.convention);

    std::vector<an::CsvRow> rows;
    Rng rng(c.trial_seed);
    double baseline_sum = 0.0, active_sum = 0.0, inactive_sum = 0.0;
    for (int k : classes) {
      const nw::Dataset class_set = ds::subset_of_class(set, k);
      if (class_set.size() == 0)
        throw std::invalid_argument("no samples of class " + std::to_string(k) +
                                    " in the chosen split");
      const double baseline = nw::evaluate(net, class_set).accuracy;
      baseline_sum += baseline;
      rows.push_back({"ablation", block, k, -1, "baseline-accuracy", baseline});
      if (do_active) {
        const auto res =
            an::ablate_branches(net, block, k, an::AblationSet::kActive, count,
                                c.trials, class_set, rng, conv);
        for (std::size_t t = 0; t < res.per_trial.size(); ++t)
          rows.push_back({"ablation", block, k, static_cast<int>(t),
                          "accuracy-active-removed", res.per_trial[t]});
        rows.push_back({"ablation", block, k, -1, "mean-accuracy-active-removed",
                        res.mean_accuracy});
        active_sum += res.mean_accuracy;
      }
      if (do_inactive) {
        const auto res =
            an::ablate_branches(net, block, k, an::AblationSet::kInactive, count,
                                c.trials, class_set, rng, conv);
        for (std::size_t t = 0; t < res.per_trial.size(); ++t)
          rows.push_back({"ablation", block, k, static_cast<int>(t),
                          "accuracy-inactive-removed", res.per_trial[t]});
        rows.push_back({"ablation", block, k, -1, "mean-accuracy-inactive-removed",
                        res.mean_accuracy});
        inactive_sum += res.mean_accuracy;
      }
    }
    an::write_csv(c.out_dir + "/ablation.csv", rows);

    const double n_classes = static_cast<double>(classes.size());
    json summary;
    summary["command"] = "ablate";
    summary["block"] = block;
    summary["removed-per-trial"] = count;
    summary["trials"] = c.trials;
    summary["classes"] = classes.size();
    summary["mean-baseline-accuracy"] = baseline_sum / n_classes;
    if (do_active) summary["mean-accuracy-active-removed"] = active_sum / n_classes;
    if (do_inactive)
      summary["mean-accuracy-inactive-removed"] = inactive_sum / n_classes;
    write_json_file(c.out_dir + "/summary.json", summary);

    std::ostringstream line;
    line << "ablate: block=" << block << " classes=" << classes.size()
         << " removed=" << count << " trials=" << c.trials
         << " baseline=" << fmt("%.4f", baseline_sum / n_classes);
    if (do_active) line << " active-removed=" << fmt("%.4f", active_sum / n_classes);
    if (do_inactive)
      line << " inactive-removed=" << fmt("%.4f", inactive_sum / n_classes);
    line << " -> " << c.out_dir;
    std::cout << line.str() << "\n";
    return 0;
  });
}

// ---------- extract ----------

struct ExtractCmd {
  DataOpts data;
  std::string checkpoint;
  int class_k = -1;
  double subsample_ratio = -1.0;  // negative: keep every negative sample
  std::uint64_t pr_seed = 0;
  std::string convention = "exclude";
  std::string out_dir = "out/extract";
  bool deterministic = false;
};

int cmd_extract(const ExtractCmd& c, const json& run_config) {
  const LoadedData data = build_data(c.data);
  return dispatch_precision(nw::checkpoint_precision(c.checkpoint), [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto net = nw::load_checkpoint<T>(c.checkpoint);
    check_arch_data(net.arch, data.train, "calibration");
    check_arch_data(net.arch, data.val, "evaluation");

    std::vector<int> classes;
    if (c.class_k >= 0)
      classes.push_back(c.class_k);
    else
      for (int k = 0; k < net.arch.k_classes; ++k) classes.push_back(k);

    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);

    const double ratio =
        c.subsample_ratio < 0.0 ? an::kNoSubsampling : c.subsample_ratio;
    const std::int64_t full_count = total_params(net);
    const auto conv = convention_of(c.convention);

    std::vector<an::CsvRow> rows;
    double min_f1 = 1.0, sum_f1 = 0.0;
    for (int k : classes) {
      auto bc = an::extract_binary_classifier(net, k, conv);
      bc.threshold = an::calibrate_threshold(bc, data.train);
      const an::PRPoint pr =
          an::precision_recall(bc, bc.threshold, data.val, ratio, c.pr_seed);
      rows.push_back({"extraction", -1, k, -1, "threshold", bc.threshold});
      rows.push_back({"extraction", -1, k, -1, "precision", pr.precision});
      rows.push_back({"extraction", -1, k, -1, "recall", pr.recall});
      rows.push_back({"extraction", -1, k, -1, "f1", pr.f1});
      rows.push_back({"extraction", -1, k, -1, "degenerate",
                      pr.degenerate ? 1.0 : 0.0});
      rows.push_back({"extraction", -1, k, -1, "params-kept",
                      static_cast<double>(bc.param_count)});
      rows.push_back({"extraction", -1, k, -1, "param-fraction",
                      static_cast<double>(bc.param_count) /
                          static_cast<double>(full_count)});
      min_f1 = std::min(min_f1, pr.f1);
      sum_f1 += pr.f1;
    }
    an::write_csv(c.out_dir + "/extraction.csv", rows);

    json summary;
    summary["command"] = "extract";
    summary["classes"] = classes.size();
    summary["min-f1"] = min_f1;
    summary["mean-f1"] = sum_f1 / static_cast<double>(classes.size());
    write_json_file(c.out_dir + "/summary.json", summary);

    std::cout << "extract: classes=" << classes.size()
              << " min-f1=" << fmt("%.4f", min_f1)
              << " mean-f1=" << fmt("%.4f", sum_f1 / static_cast<double>(classes.size()))
              << " -> " << c.out_dir << "\n";
    return 0;
  });
}

// ---------- early-decode ----------

struct EarlyDecodeCmd {
  DataOpts data;
  std::string checkpoint;
  std::string on = "val";
  bool raw = false;  // skip the r scaling before the distance computation
  std::string out_dir = "out/early-decode";
  bool deterministic = false;
};

int cmd_early_decode(const EarlyDecodeCmd& c, const json& run_config) {
  const LoadedData data = build_data(c.data);
  return dispatch_precision(nw::checkpoint_precision(c.checkpoint), [&](auto tag) {
    using T = typename decltype(tag)::type;
    auto net = nw::load_checkpoint<T>(c.checkpoint);
    const nw::Dataset& set = pick_split(data, c.on);
    check_arch_data(net.arch, set, "decoding");
    if (net.coded_block_indices().empty())
      throw std::invalid_argument(
          "checkpoint holds an uncoded network; there are no early decoders");

    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);

    const std::vector<double> acc = an::early_decoder_accuracy(net, set, !c.raw);
    const std::vector<int> coded = net.coded_block_indices();
    std::vector<an::CsvRow> rows;
    for (std::size_t b = 0; b < acc.size(); ++b)
      rows.push_back({"early-decode", coded[b], -1, -1, "accuracy", acc[b]});
    rows.push_back({"early-decode", -1, -1, -1, "chance",
                    1.0 / static_cast<double>(net.arch.k_classes)});
    an::write_csv(c.out_dir + "/early_decode.csv", rows);

    json summary;
    summary["command"] = "early-decode";
    summary["blocks"] = coded.size();
    summary["shallowest-accuracy"] = acc.front();
    summary["deepest-accuracy"] = acc.back();
    summary["chance"] = 1.0 / static_cast<double>(net.arch.k_classes);
    write_json_file(c.out_dir + "/summary.json", summary);

    std::cout << "early-decode: blocks=" << coded.size()
              << " shallowest=" << fmt("%.4f", acc.front())
              << " deepest=" << fmt("%.4f", acc.back())
              << " chance=" << fmt("%.4f", 1.0 / static_cast<double>(net.arch.k_classes))
              << " -> " << c.out_dir << "\n";
    return 0;
  });
}

// ---------- gradcheck ----------

struct GradCheckCmd {
  int points = 10;
  double tolerance = 1e-4;
  std::uint64_t seed = 2026;
  std::string out_dir;
  bool deterministic = false;
};

int cmd_gradcheck(const GradCheckCmd& c, const json& run_config) {
  const auto entries = run_gradcheck_battery(c.points, c.seed);
  double worst = 0.0;
  bool pass = true;
  for (const auto& e : entries) {
    worst = std::max(worst, e.max_rel_err);
    if (!(e.max_rel_err < c.tolerance)) pass = false;
  }

  if (!c.out_dir.empty()) {
    ensure_dir(c.out_dir);
    write_json_file(c.out_dir + "/config.json", run_config);
    std::vector<an::CsvRow> rows;
    for (const auto& e : entries)
      rows.push_back({"gradcheck", -1, -1, -1, e.name, e.max_rel_err});
    an::write_csv(c.out_dir + "/gradcheck.csv", rows);
    json summary;
    summary["command"] = "gradcheck";
    summary["checks"] = entries.size();
    summary["points"] = c.points;
    summary["max-rel-err"] = worst;
    summary["tolerance"] = c.tolerance;
    summary["pass"] = pass;
    write_json_file(c.out_dir + "/summary.json", summary);
  }

  std::cout << "gradcheck: checks=" << entries.size() << " points=" << c.points
            << " max-rel-err=" << fmt("%.2e", worst)
            << " tolerance=" << fmt("%.1e", c.tolerance) << " "
            << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? 0 : 1;
}

}  // namespace

// ---------- gradient battery ----------

namespace {

using autodiff::BatchNormStats;
using autodiff::grad_check;
using autodiff::GradCheckResult;
using DGraph = autodiff::Graph<double>;
using DVar = DGraph::Var;

Tensor<double> randn(Rng& rng, std::vector<std::int64_t> shape, double sd = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, sd);
  return t;
}

// Pushes values away from zero so kinked ops (relu, abs, pooling arg-max)
// stay locally smooth around the probe.
Tensor<double> randn_off_zero(Rng& rng, std::vector<std::int64_t> shape,
                              double margin) {
  Tensor<double> t = randn(rng, std::move(shape));
  for (auto& v : t.data) v += v >= 0.0 ? margin : -margin;
  return t;
}

struct MiniBlock {
  std::vector<Tensor<double>> params;
  std::vector<BatchNormStats<double>> stats;
  blocks::CodedBlockRef ref;
  cb::CodingScheme scheme;
};

int push_randn(MiniBlock& f, std::vector<std::int64_t> shape, Rng& rng, double sd) {
  f.params.push_back(randn(rng, std::move(shape), sd));
  return static_cast<int>(f.params.size()) - 1;
}

int push_full(MiniBlock& f, std::vector<std::int64_t> shape, double value) {
  f.params.push_back(Tensor<double>::full(std::move(shape), value));
  return static_cast<int>(f.params.size()) - 1;
}

blocks::BnRef push_bn(MiniBlock& f, int channels) {
  blocks::BnRef bn;
  bn.gamma = push_full(f, {channels}, 1.0);
  bn.beta = push_full(f, {channels}, 0.0);
  f.stats.push_back(BatchNormStats<double>::fresh(channels));
  bn.stats = static_cast<int>(f.stats.size()) - 1;
  return bn;
}

MiniBlock make_mini_block(bool spatial, std::uint64_t seed) {
  Rng rng(seed);
  MiniBlock f;
  f.ref.c_in = 3;
  f.ref.c_out = 4;
  f.ref.d = 2;
  f.ref.n = spatial ? 2 : 4;
  f.ref.n_act = spatial ? 1 : 2;
  f.ref.stride = spatial ? 2 : 1;
  f.ref.spatial = spatial;
  f.ref.denom_count = f.ref.n;
  f.ref.scheme = 0;
  f.ref.group_id = "g0";
  f.scheme = cb::generate_scheme(spatial ? 2 : 4, f.ref.n, f.ref.n_act, 2);
  for (int i = 0; i < f.ref.n; ++i) {
    f.ref.branch_ids.push_back(i);
    blocks::BranchRef br;
    if (spatial) {
      br.w_in = push_randn(f, {f.ref.d, f.ref.c_in, 1, 1}, rng, 0.3);
      br.bn_in = push_bn(f, f.ref.d);
      br.w_mid = push_randn(f, {f.ref.d, f.ref.d, 3, 3}, rng, 0.2);
      br.bn_mid = push_bn(f, f.ref.d);
      br.w_out = push_randn(f, {f.ref.c_out, f.ref.d, 1, 1}, rng, 0.3);
    } else {
      br.w_in = push_randn(f, {f.ref.d, f.ref.c_in}, rng, 0.4);
      br.bn_in = push_bn(f, f.ref.d);
      br.w_mid = push_randn(f, {f.ref.d, f.ref.d}, rng, 0.4);
      br.bn_mid = push_bn(f, f.ref.d);
      br.w_out = push_randn(f, {f.ref.c_out, f.ref.d}, rng, 0.4);
    }
    f.ref.branches.push_back(br);
  }
  f.ref.bn3 = push_bn(f, f.ref.c_out);
  f.ref.w_proj = spatial ? push_randn(f, {f.ref.c_out, f.ref.c_in, 1, 1}, rng, 0.3)
                         : push_randn(f, {f.ref.c_out, f.ref.c_in}, rng, 0.4);
  f.ref.bn_proj = push_bn(f, f.ref.c_out);
  return f;
}

GradCheckResult composed_block_probe(bool spatial, std::uint64_t seed) {
  MiniBlock f = make_mini_block(spatial, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensor<double> x = spatial ? randn(rng, {3, f.ref.c_in, 4, 4})
                             : randn(rng, {3, f.ref.c_in});
  const std::vector<int> labels = spatial ? std::vector<int>{0, 1, 0}
                                          : std::vector<int>{0, 1, 3};
  std::vector<Tensor<double>> inputs;
  inputs.push_back(x);
  for (const auto& p : f.params) inputs.push_back(p);

  return grad_check(
      [&](DGraph& g, const std::vector<DVar>& vars) {
        std::vector<DVar> leaves(vars.begin() + 1, vars.end());
        auto stats = f.stats;  // fresh running statistics per probe
        blocks::BlockInputs<double> in;
        in.params = &leaves;
        in.stats = &stats;
        in.scheme = &f.scheme;
        in.mode = blocks::Mode::kTrain;
        in.labels = &labels;
        blocks::BlockAux<double> aux;
        DVar y = blocks::coded_block_forward(g, vars[0], f.ref, in, &aux);
        return g.add(g.mean_all(y), g.mean_all(aux.loss));
      },
      inputs);
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_battery(int points, std::uint64_t seed) {
  if (points < 1)
    throw std::invalid_argument("gradcheck battery needs at least one point");

  struct Probe {
    const char* name;
    std::function<GradCheckResult(std::uint64_t)> once;
  };

  const std::vector<Probe> probes = {
      {"elementwise-arithmetic",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {3, 4});
         auto y = randn(rng, {3, 4});
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               DVar prod = g.mul(g.add(v[0], g.scale(v[1], 0.7)), g.sub(v[1], v[0]));
               DVar ratio = g.div(v[0], g.add_scalar(g.square(v[1]), 1.5));
               return g.mean_all(g.add(prod, ratio));
             },
             {x, y});
       }},
      {"powers-and-roots",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {3, 4});
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               DVar p = g.pow_even(v[0], 4);
               DVar r = g.sqrt(g.add_scalar(g.square(v[0]), 0.5));
               return g.mean_all(g.add(p, r));
             },
             {x});
       }},
      {"absolute-value",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn_off_zero(rng, {3, 4}, 0.2);
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.mul(g.abs(v[0]), v[0]));
             },
             {x});
       }},
      {"relu",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn_off_zero(rng, {4, 5}, 0.2);
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.mul(g.relu(v[0]), v[0]));
             },
             {x});
       }},
      {"shift-by-constant",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {3, 4});
         auto c = randn(rng, {3, 4});
         return grad_check(
             [c](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.square(g.sub_const(v[0], c)));
             },
             {x});
       }},
      {"affine",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {4, 6});
         auto w = randn(rng, {3, 6}, 0.5);
         auto b = randn(rng, {3}, 0.5);
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.square(g.affine(v[0], v[1], v[2])));
             },
             {x, w, b});
       }},
      {"conv-grouped-strided",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {2, 4, 5, 5});
         auto w = randn(rng, {6, 2, 3, 3}, 0.3);
         auto b = randn(rng, {6}, 0.3);
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.square(g.conv2d(v[0], v[1], v[2], 2, 1, 2)));
             },
             {x, w, b});
       }},
      {"batch-norm-training",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {3, 4, 2, 2});
         auto gamma = randn(rng, {4}, 0.2);
         for (auto& v : gamma.data) v += 1.0;
         auto beta = randn(rng, {4}, 0.2);
         // Weight the output elementwise: a plain second moment of the
         // normalized values is constant by construction, which starves the
         // input gradient and ruins the finite-difference conditioning.
         auto c = randn(rng, {3, 4, 2, 2});
         return grad_check(
             [c](DGraph& g, const std::vector<DVar>& v) {
               auto stats = BatchNormStats<double>::fresh(4);
               DVar y = g.batch_norm(v[0], v[1], v[2], &stats, true, 0.9, 1e-5);
               return g.mean_all(g.mul(y, g.leaf(c, false)));
             },
             {x, gamma, beta});
       }},
      {"max-pool",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {2, 3, 6, 6});
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.square(g.max_pool2d(v[0], 3, 2, 1)));
             },
             {x});
       }},
      {"row-normalization",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {4, 6});
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               DVar denom = g.add_scalar(g.mean_per_sample(g.square(v[0])), 0.5);
               return g.mean_all(g.square(g.div_rows(v[0], g.sqrt(denom))));
             },
             {x});
       }},
      {"global-avg-pool",
       [](std::uint64_t s) {
         Rng rng(s);
         auto x = randn(rng, {3, 4, 3, 3});
         return grad_check(
             [](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.square(g.global_avg_pool(v[0])));
             },
             {x});
       }},
      {"softmax-cross-entropy",
       [](std::uint64_t s) {
         Rng rng(s);
         auto logits = randn(rng, {5, 4});
         const std::vector<int> labels = {0, 1, 2, 3, 0};
         return grad_check(
             [labels](DGraph& g, const std::vector<DVar>& v) {
               return g.mean_all(g.softmax_cross_entropy(v[0], labels));
             },
             {logits});
       }},
      {"coded-block-dense",
       [](std::uint64_t s) { return composed_block_probe(false, s); }},
      {"coded-block-spatial",
       [](std::uint64_t s) { return composed_block_probe(true, s); }},
  };

  std::vector<GradCheckEntry> out;
  out.reserve(probes.size());
  for (const auto& p : probes) {
    GradCheckEntry entry{p.name, 0.0, 0};
    for (int i = 0; i < points; ++i) {
      const GradCheckResult r =
          p.once(seed + 1000003ull * static_cast<std::uint64_t>(i));
      entry.max_rel_err = std::max(entry.max_rel_err, r.max_rel_err);
      entry.components += r.components;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

// ---------- argument parsing ----------

namespace {

void register_common(ConfigBinder& b, std::string& out_dir, bool& deterministic,
                     const char* out_desc) {
  b.opt("-o,--out-dir", out_dir, out_desc);
  b.flag("--deterministic", deterministic,
         "force single-threaded, bit-reproducible reductions");
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{
      "coded multi-branch networks: constant-weight coding schemes, coded "
      "training, per-class extraction, and decoding experiments"};
  app.require_subcommand(1);
  int rc = 0;

  // ---- codebook ----
  CLI::App* codebook = app.add_subcommand("codebook", "generate or verify coding schemes");
  codebook->require_subcommand(1);

  auto cg = std::make_shared<CodebookGenerateCmd>();
  {
    CLI::App* sub = codebook->add_subcommand(
        "generate", "construct a constant-weight coding scheme and write it to a file");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--K", cg->K, "number of classes (codewords)");
    b->opt("--N", cg->N, "branches per block (codeword length)");
    b->opt("--N-act", cg->N_act, "active branches per class (codeword weight)");
    b->opt("--H-min", cg->H_min, "minimum pairwise Hamming distance");
    b->opt("-o,--out", cg->out, "scheme file to write");
    b->opt("--budget", cg->budget, "search-step budget (0: library default)");
    b->flag("--allow-streaming", cg->streaming,
            "permit candidate sets too large to materialize");
    b->flag("--deterministic", cg->deterministic,
            "force single-threaded, bit-reproducible reductions");
    sub->callback([&rc, cg, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_codebook_generate(*cg);
    });
  }

  auto cv = std::make_shared<CodebookVerifyCmd>();
  {
    CLI::App* sub = codebook->add_subcommand(
        "verify", "recheck every invariant of a scheme file from its raw bits");
    sub->add_option("file", cv->file, "scheme file to verify")->required();
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--K", cv->K, "expected class count (default: from the file)");
    b->opt("--N", cv->N, "expected codeword length (default: from the file)");
    b->opt("--N-act", cv->N_act, "expected codeword weight (default: from the file)");
    b->opt("--H-min", cv->H_min, "required pairwise distance (default: from the file)");
    register_common(*b, cv->out_dir, cv->deterministic,
                    "directory for report.json (default: print only)");
    sub->callback([&rc, cv, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_codebook_verify(*cv, b->snapshot("codebook-verify"));
    });
  }

  // ---- params ----
  auto pc = std::make_shared<ParamsCmd>();
  {
    CLI::App* sub = app.add_subcommand(
        "params", "count parameters and per-class extraction fractions");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--arch", pc->arch, "architecture preset")
        ->required()
        ->check(CLI::IsMember(nw::ArchSpec::preset_names()));
    b->opt("--class", pc->class_k, "class whose extracted share to count (-1: none)");
    b->opt("--mode", pc->mode,
           "block-scaled: coded blocks contribute N_act/N of their budget; "
           "extracted: exact per-class extraction count")
        ->check(CLI::IsMember({"block-scaled", "extracted"}));
    register_common(*b, pc->out_dir, pc->deterministic,
                    "directory for params.csv (default: print only)");
    sub->callback([&rc, pc, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_params(*pc, b->snapshot("params"));
    });
  }

  // ---- train ----
  auto tr = std::make_shared<TrainCmd>();
  {
    CLI::App* sub = app.add_subcommand("train", "train a network and checkpoint it");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--arch", tr->arch, "architecture preset")
        ->check(CLI::IsMember(nw::ArchSpec::preset_names()));
    b->flag("--uncoded", tr->uncoded,
            "baseline variant: every branch serves every class");
    b->opt("--precision", tr->precision, "numeric precision")
        ->check(CLI::IsMember({"f32", "f64"}));
    b->opt("--epochs", tr->epochs, "training epochs");
    b->opt("--batch-size", tr->batch_size, "minibatch size");
    b->opt("--lr", tr->lr, "initial learning rate (cosine-annealed)");
    b->opt("--momentum", tr->momentum, "Nesterov momentum");
    b->opt("--weight-decay", tr->weight_decay, "L2 penalty on conv/affine weights");
    b->opt("--lr-floor", tr->lr_floor, "final learning rate of the cosine schedule");
    b->opt("--mu", tr->mu, "coding-loss weight");
    b->opt("--p-drop", tr->p_drop, "branch drop probability during training");
    b->opt("--loss-exponent", tr->loss_exponent,
           "coding-loss exponent (even, or 1 for absolute value)");
    b->opt("--seed", tr->seed, "initialization and batch-order seed");
    b->flag("--save-epochs", tr->save_epochs, "checkpoint after every epoch");
    register_data(*b, tr->data);
    register_common(*b, tr->out_dir, tr->deterministic,
                    "artifact directory (config, history.csv, model.ckpt, summary)");
    sub->callback([&rc, tr, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_train(*tr, b->snapshot("train"));
    });
  }

  // ---- eval ----
  auto ev = std::make_shared<EvalCmd>();
  {
    CLI::App* sub = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--checkpoint", ev->checkpoint, "checkpoint file")->required();
    b->opt("--on", ev->on, "which split to evaluate")
        ->check(CLI::IsMember({"train", "val", "all"}));
    b->opt("--batch-size", ev->batch_size, "evaluation batch size");
    b->opt("--loss-exponent", ev->loss_exponent, "coding-loss exponent to report");
    register_data(*b, ev->data);
    register_common(*b, ev->out_dir, ev->deterministic,
                    "artifact directory (config, eval.csv, summary)");
    sub->callback([&rc, ev, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_eval(*ev, b->snapshot("eval"));
    });
  }

  // ---- ablate ----
  auto ab = std::make_shared<AblateCmd>();
  {
    CLI::App* sub = app.add_subcommand(
        "ablate", "remove random active/inactive branches and measure per-class accuracy");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--checkpoint", ab->checkpoint, "checkpoint file")->required();
    b->opt("--on", ab->on, "split whose class subsets are evaluated")
        ->check(CLI::IsMember({"train", "val", "all"}));
    b->opt("--block", ab->block, "coded block index (-1: deepest coded block)");
    b->opt("--class", ab->class_k, "class to ablate (-1: every class)");
    b->opt("--set", ab->set, "which branch set to remove from")
        ->check(CLI::IsMember({"active", "inactive", "both"}));
    b->opt("--count", ab->count,
           "branches removed per trial (-1: the per-class active count)");
    b->opt("--trials", ab->trials, "random subsets per class and set");
    b->opt("--trial-seed", ab->trial_seed, "seed for the removal draws");
    b->opt("--convention", ab->convention,
           "removal arithmetic: exclude (drop from sums and denominator) or "
           "zero (zero the energy, keep the full denominator)")
        ->check(CLI::IsMember({"exclude", "zero"}));
    register_data(*b, ab->data);
    register_common(*b, ab->out_dir, ab->deterministic,
                    "artifact directory (config, ablation.csv, summary)");
    sub->callback([&rc, ab, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_ablate(*ab, b->snapshot("ablate"));
    });
  }

  // ---- extract ----
  auto ex = std::make_shared<ExtractCmd>();
  {
    CLI::App* sub = app.add_subcommand(
        "extract", "turn a coded network into calibrated per-class binary classifiers");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--checkpoint", ex->checkpoint, "checkpoint file")->required();
    b->opt("--class", ex->class_k, "class to extract (-1: every class)");
    b->opt("--subsample-ratio", ex->subsample_ratio,
           "negatives kept per positive when scoring (negative: keep all)");
    b->opt("--pr-seed", ex->pr_seed, "seed for the negative subsample");
    b->opt("--convention", ex->convention,
           "removal arithmetic: exclude (drop from sums and denominator) or "
           "zero (zero the energy, keep the full denominator)")
        ->check(CLI::IsMember({"exclude", "zero"}));
    register_data(*b, ex->data);
    register_common(*b, ex->out_dir, ex->deterministic,
                    "artifact directory (config, extraction.csv, summary)");
    sub->callback([&rc, ex, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_extract(*ex, b->snapshot("extract"));
    });
  }

  // ---- early-decode ----
  auto ed = std::make_shared<EarlyDecodeCmd>();
  {
    CLI::App* sub = app.add_subcommand(
        "early-decode", "predict classes from per-block branch energies");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--checkpoint", ed->checkpoint, "checkpoint file")->required();
    b->opt("--on", ed->on, "which split to decode")
        ->check(CLI::IsMember({"train", "val", "all"}));
    b->flag("--raw", ed->raw, "match raw energies instead of r-scaled energies");
    register_data(*b, ed->data);
    register_common(*b, ed->out_dir, ed->deterministic,
                    "artifact directory (config, early_decode.csv, summary)");
    sub->callback([&rc, ed, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_early_decode(*ed, b->snapshot("early-decode"));
    });
  }

  // ---- gradcheck ----
  auto gc = std::make_shared<GradCheckCmd>();
  {
    CLI::App* sub = app.add_subcommand(
        "gradcheck", "compare every primitive and the composed coded block "
                     "against central finite differences");
    auto b = std::make_shared<ConfigBinder>(sub);
    std::shared_ptr<std::string> config = std::make_shared<std::string>();
    sub->add_option("--config", *config, "JSON file with defaults for these options");
    b->opt("--points", gc->points, "random points per check");
    b->opt("--tolerance", gc->tolerance, "max relative error accepted");
    b->opt("--seed", gc->seed, "probe seed");
    register_common(*b, gc->out_dir, gc->deterministic,
                    "directory for gradcheck.csv (default: print only)");
    sub->callback([&rc, gc, b, config] {
      if (!config->empty()) b->apply(load_config(*config));
      rc = cmd_gradcheck(*gc, b->snapshot("gradcheck"));
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* where = &app;
    while (!where->get_subcommands().empty())
      where = where->get_subcommands().front();
    std::cerr << where->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("codednet");
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace codednet::cli
