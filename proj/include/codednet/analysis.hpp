#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "codednet/blocks.hpp"
#include "codednet/codebook.hpp"
#include "codednet/network.hpp"
#include "codednet/rng.hpp"

namespace codednet::analysis {

// ---------- branch ablation ----------

enum class AblationSet { kActive, kInactive };

struct AblationResult {
  double mean_accuracy = 0.0;
  std::vector<double> per_trial;
};

// Removes `count` randomly chosen branches of the given coded block, drawn
// from the branches that class k's codeword marks active (or inactive), and
// measures eval-mode accuracy on `ds` — normally the class-k slice, since the
// removal is decided by that class's codeword. Each trial redraws the subset.
template <typename T>
AblationResult ablate_branches(
    network::Network<T>& net, int block_index, int class_k, AblationSet which,
    int count, int trials, const network::Dataset& ds, Rng& rng,
    blocks::RemovalConvention convention =
        blocks::RemovalConvention::kExcludeFromBoth);

// ---------- per-class extraction ----------

// A one-class sub-network: per coded block only the branches active for the
// class survive (masks below), r = 1 blocks stay whole, and the classifier
// head is reduced to the class's row. Holds a view, not a copy — `net` must
// outlive the classifier.
template <typename T>
struct BinaryClassifier {
  network::Network<T>* net = nullptr;
  int class_index = -1;
  // How the missing branches affect the energy denominator: exclusion pools
  // over the retained branches only (the default here); zeroing keeps the
  // full-width denominator and makes the extracted logit bit-identical to the
  // full net's class logit whenever the inactive branches output exact zeros.
  blocks::RemovalConvention convention =
      blocks::RemovalConvention::kExcludeFromBoth;
  std::map<int, blocks::BranchAblation> ablations;  // coded block index -> mask
  double threshold = 0.0;
  std::int64_t param_count = 0;  // parameters the extracted model retains
};

template <typename T>
BinaryClassifier<T> extract_binary_classifier(
    network::Network<T>& net, int class_k,
    blocks::RemovalConvention convention =
        blocks::RemovalConvention::kExcludeFromBoth);

// The class logit of every sample, in dataset order, eval mode.
template <typename T>
std::vector<double> binary_logits(const BinaryClassifier<T>& bc,
                                  const network::Dataset& ds,
                                  int batch_size = 256);

// ---------- threshold calibration and precision/recall ----------

// Scans the lowest logit plus all midpoints of consecutive sorted unique
// logits; returns the candidate maximizing F1 (prediction: logit >= t),
// breaking ties toward the lower threshold. Throws when there are no
// positives.
double calibrate_from_logits(const std::vector<double>& logits,
                             const std::vector<char>& is_positive);

template <typename T>
double calibrate_threshold(const BinaryClassifier<T>& bc,
                           const network::Dataset& ds);

struct PRPoint {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  bool degenerate = false;  // nothing predicted positive; precision forced to 0
};

constexpr double kNoSubsampling = std::numeric_limits<double>::infinity();

// precision = TP/(TP+FP), recall = TP/(TP+FN), F1 their harmonic mean; an
// empty predicted-positive set reports precision 0 with the degenerate flag.
PRPoint pr_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t tn,
                       std::int64_t fn);

// Counts threshold decisions over the positives and a seeded random subset of
// negatives capped at ratio * |positives| (all of them when the ratio is
// infinite). Throws when there are no positives.
template <typename T>
PRPoint precision_recall(const BinaryClassifier<T>& bc, double threshold,
                         const network::Dataset& ds,
                         double negative_subsample_ratio = kNoSubsampling,
                         std::uint64_t seed = 0);

// ---------- early decoding ----------

// Nearest codeword (Euclidean) to the energy profile of one sample at one
// coded block; ties break toward the lowest class index. The default scales
// energies by r so a perfectly trained profile lands on its codeword; the
// raw variant measures distances on unscaled energies.
int early_decode(const std::vector<double>& energies,
                 const codebook::CodingScheme& scheme, bool r_scaled = true);

// One accuracy per coded block, ordered by depth.
template <typename T>
std::vector<double> early_decoder_accuracy(network::Network<T>& net,
                                           const network::Dataset& ds,
                                           bool r_scaled = true);

// ---------- tidy results ----------

// One measurement per row; unused dimensions hold -1 (block/class/trial).
struct CsvRow {
  std::string experiment;
  int block = -1;
  int class_index = -1;
  int trial = -1;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const CsvRow&, const CsvRow&) = default;
};

// Header "experiment,block,class,trial,metric,value"; values are printed with
// enough digits to round-trip exactly.
void write_csv(const std::string& path, const std::vector<CsvRow>& rows);
std::vector<CsvRow> read_csv(const std::string& path);

}  // namespace codednet::analysis
