#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "codednet/blocks.hpp"
#include "codednet/codebook.hpp"
#include "codednet/graph.hpp"
#include "codednet/rng.hpp"
#include "codednet/tensor.hpp"

namespace codednet::network {

// ---------- architecture description ----------

struct StemSpec {
  int out_channels = 64;
  int kernel = 3;      // spatial stems only
  int stride = 1;
  int padding = 1;
  bool maxpool = false;  // 3x3 stride-2 max pool after the stem
};

struct StageSpec {
  int c_out = 0;
  int d = 0;           // bottleneck width per branch
  int n = 0;           // branch count
  int n_act = 0;       // active branches per class; n_act == n means uncoded
  int repeat = 1;
  int first_stride = 1;
  int h_min = 2;       // pairwise-distance requirement for this stage's scheme
};

struct ArchSpec {
  std::string name;
  bool spatial = true;
  int in_channels = 3;  // dense architectures: input feature width
  StemSpec stem;
  std::vector<StageSpec> stages;
  int k_classes = 10;

  // Throws std::invalid_argument when structural invariants fail: first stage
  // must be uncoded, ratios non-increasing with depth, positive dimensions.
  void validate() const;
  // Distinct (n, n_act, h_min) triples of the coded stages, in depth order.
  std::vector<StageSpec> scheme_requests() const;

  static ArchSpec preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

// ---------- assembled network ----------

template <typename T>
struct Network {
  ArchSpec arch;
  std::vector<codebook::CodingScheme> schemes;  // indexed by CodedBlockRef::scheme
  std::vector<std::string> param_names;
  std::vector<Tensor<T>> params;
  std::vector<std::uint8_t> param_decay;  // weight decay applies (conv/affine weights)
  std::vector<autodiff::BatchNormStats<T>> stats;

  int stem_w = -1;
  blocks::BnRef stem_bn;
  std::vector<blocks::CodedBlockRef> block_refs;
  int head_w = -1;
  int head_b = -1;
  std::uint64_t seed = 0;

  std::int64_t total_param_count() const;
  std::vector<int> coded_block_indices() const;
};

// Deterministic build: He-normal fan-in init for conv/affine weights, unit
// gains and zero shifts for normalization, small-normal classifier head.
// Coded stages are matched to `schemes` by (N, N_act); throws when a scheme
// is missing or its class count disagrees with the architecture.
template <typename T>
Network<T> build_network(const ArchSpec& arch,
                         const std::vector<codebook::CodingScheme>& schemes,
                         std::uint64_t seed);

// ---------- forward ----------

template <typename T>
struct ForwardOptions {
  blocks::Mode mode = blocks::Mode::kEval;
  const std::vector<int>* labels = nullptr;            // train mode, coded nets
  blocks::DropMaskCache* drop = nullptr;               // train mode only
  const std::map<int, blocks::BranchAblation>* ablations = nullptr;  // block idx -> mask
  int loss_exponent = 4;
  bool record_energies = false;
  T bn_momentum = T(0.9);
};

template <typename T>
struct ForwardResult {
  typename autodiff::Graph<T>::Var logits{};
  // Graph handles for every entry of Network::params, in the same order, so a
  // trainer can read gradients after backward().
  std::vector<typename autodiff::Graph<T>::Var> param_vars;
  std::vector<int> coded_blocks;  // flattened block indices with r < 1
  std::vector<typename autodiff::Graph<T>::Var> block_losses;  // per coded block, [B]
  std::vector<Tensor<T>> energies;  // per coded block, [B,N] (record_energies)
};

template <typename T>
ForwardResult<T> forward(autodiff::Graph<T>& g, Network<T>& net,
                         const Tensor<T>& x, const ForwardOptions<T>& opt);

// Cross-entropy plus mu times the summed per-block coding losses, batch-mean.
template <typename T>
typename autodiff::Graph<T>::Var total_loss(
    autodiff::Graph<T>& g, typename autodiff::Graph<T>::Var logits,
    const std::vector<int>& labels,
    const std::vector<typename autodiff::Graph<T>::Var>& block_losses, T mu);

// Scalar composition rule used for reporting: ce + mu * sum(block means).
double total_loss_value(double ce, const std::vector<double>& block_means, double mu);

// ---------- datasets (consumed by the trainer and the experiment suite) ----

struct Dataset {
  Tensor<double> x;          // [M, F] dense or [M, C, H, W] spatial
  std::vector<int> labels;
  int k_classes = 0;
  std::int64_t size() const { return x.rank() ? x.dim(0) : 0; }
};

// ---------- training ----------

struct TrainConfig {
  int epochs = 10;
  int batch_size = 64;
  double lr = 0.1;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 5e-4;
  double lr_floor = 1e-4;
  double mu = 6.0;
  double p_drop = 0.1;
  int loss_exponent = 4;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;  // empty: keep checkpoints off disk
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double mean_ce = 0.0;
  double mean_code = 0.0;         // sum over coded blocks of mean coding loss
  double train_accuracy = 0.0;    // measured on the training batches
  double val_accuracy = -1.0;     // -1 when no validation set given
  std::vector<double> per_block_code;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  bool diverged = false;
  int steps = 0;
};

// lr(step) for step in [0, total): cosine from lr down to floor.
double cosine_lr(double lr, double floor, int step, int total_steps);

template <typename T>
TrainResult train(Network<T>& net, const Dataset& train_set,
                  const Dataset* val_set, const TrainConfig& cfg);

// ---------- evaluation ----------

template <typename T>
struct EvalResult {
  double accuracy = 0.0;
  std::vector<int> coded_blocks;
  std::vector<double> per_block_code;   // mean coding loss per coded block
  // Per coded block, per sample energies [M, N]; filled when requested.
  std::vector<Tensor<T>> energies;
};

template <typename T>
EvalResult<T> evaluate(Network<T>& net, const Dataset& ds, int batch_size = 256,
                       const std::map<int, blocks::BranchAblation>* ablations = nullptr,
                       bool record_energies = false, int loss_exponent = 4);

// ---------- parameter counting ----------

// kBlockScaled: coded blocks contribute N_act/N of their entire parameter
// budget (branches, aggregation norm, shortcut) — the accounting behind the
// published 38%/27%/35% fractions. kExtractedExact: what a physically
// extracted per-class model holds — N_act branch parameter sets plus the full
// aggregation norm and shortcut.
enum class CountMode { kBlockScaled, kExtractedExact };

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t kept = 0;
  double fraction = 1.0;
};

ParamCount count_parameters(const ArchSpec& arch,
                            std::optional<int> keep_class = std::nullopt,
                            CountMode mode = CountMode::kBlockScaled);

// ---------- checkpoints ----------

// Single self-describing file: magic "CDNCKPT1", little-endian u64 JSON header
// length, JSON header (format version, precision, seed, architecture, coding
// schemes, named array manifest with shapes/offsets), then raw little-endian
// array bytes. Round-trips bit-identically within one precision mode.
template <typename T>
void save_checkpoint(const Network<T>& net, const std::string& path);

template <typename T>
Network<T> load_checkpoint(const std::string& path);

// Reads just the header to report "f32"/"f64" so callers can dispatch.
std::string checkpoint_precision(const std::string& path);

}  // namespace codednet::network
