#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "codednet/codebook.hpp"
#include "codednet/graph.hpp"
#include "codednet/rng.hpp"
#include "codednet/tensor.hpp"

namespace codednet::blocks {

inline constexpr double kEnergyEps = 1e-8;  // inside the normalization sqrt
inline constexpr double kBnEps = 1e-5;

enum class Mode { kTrain, kEval };

// How a branch is removed for analysis:
//  - kExcludeFromBoth: the branch leaves the normalization denominator
//    (mean over the kept count) and the aggregation sum.
//  - kZeroBeforeNorm: the branch's raw output is zeroed, so it contributes
//    zero energy to a denominator still averaged over all N branches.
enum class RemovalConvention { kExcludeFromBoth, kZeroBeforeNorm };

// ---------- plain reference math (shared by tests and diagnostics) ----------

// Mean of squares over the whole tensor (one sample).
template <typename T>
double mean_energy(const Tensor<T>& t);

// Mean of squares per sample for a [B,...] tensor.
template <typename T>
std::vector<double> per_sample_energy(const Tensor<T>& t);

template <typename T>
struct NormalizeResult {
  std::vector<Tensor<T>> outputs;            // same shapes as inputs
  std::vector<std::vector<double>> energies; // [B][N], post-normalization
};

// Divides every branch by sqrt(eps + (1/denom_count) * sum of branch
// energies), per sample. denom_count defaults to the branch count; the
// extracted-model conventions pass an explicit count.
template <typename T>
NormalizeResult<T> energy_normalize(const std::vector<Tensor<T>>& branch_outputs,
                                    double eps = kEnergyEps,
                                    int denom_count = -1);

// (1/N) * sum_n |r*E_n - w_n|^exponent for one sample's energies. Even
// exponents use the plain power; exponent 1 means absolute value. Other odd
// exponents are rejected (the loss must be non-negative).
double coding_loss(const std::vector<double>& energies,
                   const codebook::Codeword& codeword, double r, int exponent);

// ---------- dropSubNN ----------

struct DropMask {
  std::vector<std::uint8_t> keep;  // 1 = branch survives
  std::string group_id;
};

// Each branch independently dropped with probability p_drop.
DropMask draw_drop_mask(int n, double p_drop, Rng& rng, const std::string& group_id);

// One cache per forward pass: blocks sharing a coding-scheme group reuse the
// first mask drawn for that group ("one mask which is then reused").
class DropMaskCache {
 public:
  DropMaskCache(double p_drop, Rng* rng) : p_drop_(p_drop), rng_(rng) {}
  const DropMask& mask_for(const std::string& group_id, int n);
  // Fixes the mask for a group up front (deterministic experiments/tests).
  void preset(DropMask mask);

 private:
  double p_drop_;
  Rng* rng_;
  std::map<std::string, DropMask> masks_;
};

// ---------- block description and graph-side forward ----------

// Index of a batch-norm's parameters within the owning network's parameter
// list, plus its running-stats slot.
struct BnRef {
  int gamma = -1;
  int beta = -1;
  int stats = -1;
};

// in -> d, d -> d (stride here), d -> C_out; all linear ops bias-free.
struct BranchRef {
  int w_in = -1;
  BnRef bn_in;
  int w_mid = -1;
  BnRef bn_mid;
  int w_out = -1;
};

struct CodedBlockRef {
  int c_in = 0;
  int c_out = 0;
  int d = 0;
  int n = 0;
  int n_act = 0;
  int stride = 1;
  bool spatial = true;       // conv block; false = dense (affine) block
  int scheme = -1;           // index into the network's scheme list; -1 iff r==1
  std::string group_id;      // drop-mask group (blocks sharing a scheme share it)
  // Kept branches (extraction shrinks this list; normally 0..n-1 in order).
  std::vector<int> branch_ids;
  std::vector<BranchRef> branches;
  BnRef bn3;                 // after the branch sum, before the skip add
  int w_proj = -1;           // projection shortcut; -1 = identity skip
  BnRef bn_proj;
  // Normalization denominator count; n for the standard block, overridden by
  // extraction conventions.
  int denom_count = 0;

  bool coded() const { return scheme >= 0; }
  double ratio() const { return static_cast<double>(n_act) / n; }
};

// Per-block optional branch removal for ablation experiments.
struct BranchAblation {
  std::vector<std::uint8_t> keep;  // size N, 1 = keep
  RemovalConvention convention = RemovalConvention::kExcludeFromBoth;
};

template <typename T>
struct BlockAux {
  // Post-normalization per-sample branch energies [B, N_present]; empty for
  // uncoded blocks. Recorded before dropSubNN.
  Tensor<T> energies;
  // Per-sample coding loss [B]; invalid unless train mode on a coded block.
  typename autodiff::Graph<T>::Var loss{};
};

template <typename T>
struct BlockInputs {
  const std::vector<typename autodiff::Graph<T>::Var>* params = nullptr;
  std::vector<autodiff::BatchNormStats<T>>* stats = nullptr;
  const codebook::CodingScheme* scheme = nullptr;  // null iff r == 1
  Mode mode = Mode::kEval;
  const std::vector<int>* labels = nullptr;        // train mode, coded blocks
  int loss_exponent = 4;
  DropMaskCache* drop = nullptr;                   // train mode only
  const BranchAblation* ablation = nullptr;
  T bn_momentum = T(0.9);
};

// Pipeline: branches -> energy normalization -> coding loss -> dropSubNN ->
// branch sum -> batch norm -> + skip -> ReLU. Uncoded blocks (r == 1) skip
// normalization, loss and drop.
template <typename T>
typename autodiff::Graph<T>::Var coded_block_forward(
    autodiff::Graph<T>& g, typename autodiff::Graph<T>::Var x,
    const CodedBlockRef& block, const BlockInputs<T>& in, BlockAux<T>* aux);

}  // namespace codednet::blocks
