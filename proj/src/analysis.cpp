#include "codednet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "codednet/dataset.hpp"

namespace codednet::analysis {

namespace {

template <typename T>
const blocks::CodedBlockRef& coded_block_or_throw(const network::Network<T>& net,
                                                  int block_index) {
  if (block_index < 0 ||
      block_index >= static_cast<int>(net.block_refs.size()))
    throw std::invalid_argument("analysis: block index out of range");
  const blocks::CodedBlockRef& ref =
      net.block_refs[static_cast<std::size_t>(block_index)];
  if (!ref.coded())
    throw std::invalid_argument("analysis: block " + std::to_string(block_index) +
                                " is uncoded (every branch serves every class)");
  return ref;
}

}  // namespace

// ---------- branch ablation ----------

template <typename T>
AblationResult ablate_branches(network::Network<T>& net, int block_index,
                               int class_k, AblationSet which, int count,
                               int trials, const network::Dataset& ds, Rng& rng,
                               blocks::RemovalConvention convention) {
  const blocks::CodedBlockRef& ref = coded_block_or_throw(net, block_index);
  const codebook::CodingScheme& scheme =
      net.schemes[static_cast<std::size_t>(ref.scheme)];
  if (class_k < 0 || class_k >= scheme.K())
    throw std::invalid_argument("ablate_branches: class out of range");
  if (trials < 1) throw std::invalid_argument("ablate_branches: need trials >= 1");

  const codebook::Codeword& word =
      scheme.codewords[static_cast<std::size_t>(class_k)];
  std::vector<int> pool;
  for (int j = 0; j < ref.n; ++j)
    if (word.get(j) == (which == AblationSet::kActive)) pool.push_back(j);
  if (count < 0 || count > static_cast<int>(pool.size()))
    throw std::invalid_argument("ablate_branches: count " + std::to_string(count) +
                                " exceeds the " +
                                std::to_string(pool.size()) + "-branch set");

  AblationResult out;
  for (int t = 0; t < trials; ++t) {
    rng.shuffle(pool.begin(), pool.end());
    blocks::BranchAblation ab;
    ab.keep.assign(static_cast<std::size_t>(ref.n), 1);
    ab.convention = convention;
    for (int j = 0; j < count; ++j)
      ab.keep[static_cast<std::size_t>(pool[static_cast<std::size_t>(j)])] = 0;
    std::map<int, blocks::BranchAblation> ablations{{block_index, ab}};
    const auto res = network::evaluate(net, ds, 256, &ablations);
    out.per_trial.push_back(res.accuracy);
    out.mean_accuracy += res.accuracy;
  }
  out.mean_accuracy /= trials;
  return out;
}

// ---------- per-class extraction ----------

template <typename T>
BinaryClassifier<T> extract_binary_classifier(network::Network<T>& net,
                                              int class_k,
                                              blocks::RemovalConvention convention) {
  if (net.schemes.empty())
    throw std::invalid_argument("extract_binary_classifier: network has no coding schemes");
  if (class_k < 0 || class_k >= net.arch.k_classes)
    throw std::invalid_argument("extract_binary_classifier: class out of range");

  BinaryClassifier<T> bc;
  bc.net = &net;
  bc.class_index = class_k;
  bc.convention = convention;

  auto numel_of_param = [&](int idx) {
    return net.params[static_cast<std::size_t>(idx)].numel();
  };
  auto bn_param_count = [&](const blocks::BnRef& bn) {
    return numel_of_param(bn.gamma) + numel_of_param(bn.beta);
  };

  std::int64_t kept = numel_of_param(net.stem_w) + bn_param_count(net.stem_bn);
  for (std::size_t i = 0; i < net.block_refs.size(); ++i) {
    const blocks::CodedBlockRef& ref = net.block_refs[i];
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(ref.n), 1);
    if (ref.coded()) {
      const codebook::Codeword& word =
          net.schemes[static_cast<std::size_t>(ref.scheme)]
              .codewords[static_cast<std::size_t>(class_k)];
      for (int j = 0; j < ref.n; ++j)
        keep[static_cast<std::size_t>(j)] = word.get(j) ? 1 : 0;
      blocks::BranchAblation ab;
      ab.keep = keep;
      ab.convention = convention;
      bc.ablations.emplace(static_cast<int>(i), std::move(ab));
    }
    for (int j = 0; j < ref.n; ++j) {
      if (!keep[static_cast<std::size_t>(j)]) continue;
      const blocks::BranchRef& br = ref.branches[static_cast<std::size_t>(j)];
      kept += numel_of_param(br.w_in) + bn_param_count(br.bn_in) +
              numel_of_param(br.w_mid) + bn_param_count(br.bn_mid) +
              numel_of_param(br.w_out);
    }
    kept += bn_param_count(ref.bn3);
    if (ref.w_proj >= 0) kept += numel_of_param(ref.w_proj) + bn_param_count(ref.bn_proj);
  }
  // Head row for the class, plus its bias entry.
  kept += net.params[static_cast<std::size_t>(net.head_w)].dim(1) + 1;
  bc.param_count = kept;
  return bc;
}

template <typename T>
std::vector<double> binary_logits(const BinaryClassifier<T>& bc,
                                  const network::Dataset& ds, int batch_size) {
  if (bc.net == nullptr)
    throw std::invalid_argument("binary_logits: classifier is unbound");
  network::Network<T>& net = *bc.net;
  const std::int64_t m = ds.size();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m));
  if (m == 0) return out;

  const Tensor<T> x_all = tensor_cast<T>(ds.x);
  const std::int64_t per = x_all.numel() / m;
  std::int64_t done = 0;
  while (done < m) {
    const std::int64_t take = std::min<std::int64_t>(batch_size, m - done);
    std::vector<std::int64_t> shape = x_all.shape;
    shape[0] = take;
    Tensor<T> xb = Tensor<T>::zeros(shape);
    std::copy_n(x_all.data.begin() + done * per, take * per, xb.data.begin());

    autodiff::Graph<T> g;
    network::ForwardOptions<T> opt;
    opt.mode = blocks::Mode::kEval;
    opt.ablations = &bc.ablations;
    const auto fw = network::forward(g, net, xb, opt);
    const Tensor<T>& lg = g.value(fw.logits);
    const std::int64_t k_classes = lg.dim(1);
    for (std::int64_t i = 0; i < take; ++i)
      out.push_back(static_cast<double>(
          lg.data[static_cast<std::size_t>(i * k_classes + bc.class_index)]));
    done += take;
  }
  return out;
}

// ---------- threshold calibration and precision/recall ----------

namespace {

double f1_at(const std::vector<double>& logits, const std::vector<char>& is_pos,
             double threshold) {
  std::int64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool pred = logits[i] >= threshold;
    if (pred && is_pos[i]) ++tp;
    if (pred && !is_pos[i]) ++fp;
    if (!pred && is_pos[i]) ++fn;
  }
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

}  // namespace

double calibrate_from_logits(const std::vector<double>& logits,
                             const std::vector<char>& is_positive) {
  if (logits.empty() || logits.size() != is_positive.size())
    throw std::invalid_argument("calibrate_from_logits: bad inputs");
  if (std::find(is_positive.begin(), is_positive.end(), 1) == is_positive.end())
    throw std::invalid_argument("calibrate_from_logits: no positives");

  std::vector<double> uniq = logits;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<double> candidates{uniq.front()};  // admits the all-positive rule
  for (std::size_t i = 0; i + 1 < uniq.size(); ++i)
    candidates.push_back(0.5 * (uniq[i] + uniq[i + 1]));
  std::sort(candidates.begin(), candidates.end());

  double best_t = candidates.front();
  double best_f1 = -1.0;
  for (double t : candidates) {
    const double f1 = f1_at(logits, is_positive, t);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return best_t;
}

template <typename T>
double calibrate_threshold(const BinaryClassifier<T>& bc,
                           const network::Dataset& ds) {
  const std::vector<double> logits = binary_logits(bc, ds);
  std::vector<char> is_pos(logits.size(), 0);
  for (std::size_t i = 0; i < logits.size(); ++i)
    is_pos[i] = ds.labels[i] == bc.class_index;
  return calibrate_from_logits(logits, is_pos);
}

template <typename T>
PRPoint precision_recall(const BinaryClassifier<T>& bc, double threshold,
                         const network::Dataset& ds,
                         double negative_subsample_ratio, std::uint64_t seed) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < ds.labels.size(); ++i)
    (ds.labels[i] == bc.class_index ? pos : neg).push_back(static_cast<int>(i));
  if (pos.empty())
    throw std::invalid_argument("precision_recall: no positives of class " +
                                std::to_string(bc.class_index));

  if (std::isfinite(negative_subsample_ratio)) {
    if (negative_subsample_ratio < 0.0)
      throw std::invalid_argument("precision_recall: negative subsample ratio");
    const auto target = static_cast<std::size_t>(
        std::llround(negative_subsample_ratio * static_cast<double>(pos.size())));
    if (target < neg.size()) {
      Rng rng(seed);
      rng.shuffle(neg.begin(), neg.end());
      neg.resize(target);
      std::sort(neg.begin(), neg.end());
    }
  }

  std::vector<int> rows = pos;
  rows.insert(rows.end(), neg.begin(), neg.end());
  const network::Dataset sub = dataset::take(ds, rows);
  const std::vector<double> logits = binary_logits(bc, sub);

  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool actual = i < pos.size();
    const bool pred = logits[i] >= threshold;
    if (pred && actual) ++tp;
    else if (pred && !actual) ++fp;
    else if (!pred && actual) ++fn;
    else ++tn;
  }
  return pr_from_counts(tp, fp, tn, fn);
}

PRPoint pr_from_counts(std::int64_t tp, std::int64_t fp, std::int64_t tn,
                       std::int64_t fn) {
  if (tp < 0 || fp < 0 || tn < 0 || fn < 0)
    throw std::invalid_argument("pr_from_counts: negative count");
  PRPoint pr;
  pr.tp = tp;
  pr.fp = fp;
  pr.tn = tn;
  pr.fn = fn;
  if (tp + fp > 0) {
    pr.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  } else {
    pr.precision = 0.0;
    pr.degenerate = true;
  }
  pr.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  pr.f1 = pr.precision + pr.recall > 0.0
              ? 2.0 * pr.precision * pr.recall / (pr.precision + pr.recall)
              : 0.0;
  return pr;
}

// ---------- early decoding ----------

int early_decode(const std::vector<double>& energies,
                 const codebook::CodingScheme& scheme, bool r_scaled) {
  if (static_cast<int>(energies.size()) != scheme.N)
    throw std::invalid_argument("early_decode: profile length != branch count");
  for (double e : energies)
    if (e < 0.0) throw std::invalid_argument("early_decode: negative energy");

  const double scale = r_scaled ? scheme.ratio() : 1.0;
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < scheme.K(); ++k) {
    const codebook::Codeword& w = scheme.codewords[static_cast<std::size_t>(k)];
    double d = 0.0;
    for (int j = 0; j < scheme.N; ++j) {
      const double diff =
          scale * energies[static_cast<std::size_t>(j)] - (w.get(j) ? 1.0 : 0.0);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

template <typename T>
std::vector<double> early_decoder_accuracy(network::Network<T>& net,
                                           const network::Dataset& ds,
                                           bool r_scaled) {
  const auto res = network::evaluate(net, ds, 256, nullptr, true);
  std::vector<double> acc(res.coded_blocks.size(), 0.0);
  if (ds.size() == 0) return acc;
  for (std::size_t b = 0; b < res.coded_blocks.size(); ++b) {
    const blocks::CodedBlockRef& ref =
        net.block_refs[static_cast<std::size_t>(res.coded_blocks[b])];
    const codebook::CodingScheme& scheme =
        net.schemes[static_cast<std::size_t>(ref.scheme)];
    const Tensor<T>& e = res.energies[b];
    std::int64_t hits = 0;
    std::vector<double> row(static_cast<std::size_t>(ref.n));
    for (std::int64_t i = 0; i < ds.size(); ++i) {
      for (int j = 0; j < ref.n; ++j)
        row[static_cast<std::size_t>(j)] = static_cast<double>(
            e.data[static_cast<std::size_t>(i * ref.n + j)]);
      if (early_decode(row, scheme, r_scaled) == ds.labels[static_cast<std::size_t>(i)])
        ++hits;
    }
    acc[b] = static_cast<double>(hits) / static_cast<double>(ds.size());
  }
  return acc;
}

// ---------- tidy results ----------

namespace {

void check_field(const std::string& s, const char* what) {
  if (s.find_first_of(",\n\r\"") != std::string::npos)
    throw std::invalid_argument(std::string("csv: ") + what +
                                " may not contain commas, quotes, or newlines: " + s);
}

}  // namespace

void write_csv(const std::string& path, const std::vector<CsvRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("csv: cannot write " + path);
  f << "experiment,block,class,trial,metric,value\n";
  char buf[64];
  for (const CsvRow& r : rows) {
    check_field(r.experiment, "experiment");
    check_field(r.metric, "metric");
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    f << r.experiment << ',' << r.block << ',' << r.class_index << ',' << r.trial
      << ',' << r.metric << ',' << buf << '\n';
  }
  if (!f) throw std::runtime_error("csv: write failed for " + path);
}

std::vector<CsvRow> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "experiment,block,class,trial,metric,value")
    throw std::runtime_error("csv: unexpected header in " + path);
  std::vector<CsvRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    if (fields.size() != 6)
      throw std::runtime_error("csv: malformed row in " + path + ": " + line);
    CsvRow r;
    r.experiment = fields[0];
    r.block = std::stoi(fields[1]);
    r.class_index = std::stoi(fields[2]);
    r.trial = std::stoi(fields[3]);
    r.metric = fields[4];
    r.value = std::strtod(fields[5].c_str(), nullptr);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------- explicit instantiations ----------

template AblationResult ablate_branches<float>(network::Network<float>&, int, int,
                                               AblationSet, int, int,
                                               const network::Dataset&, Rng&,
                                               blocks::RemovalConvention);
template AblationResult ablate_branches<double>(network::Network<double>&, int, int,
                                                AblationSet, int, int,
                                                const network::Dataset&, Rng&,
                                                blocks::RemovalConvention);
template struct BinaryClassifier<float>;
template struct BinaryClassifier<double>;
template BinaryClassifier<float> extract_binary_classifier<float>(
    network::Network<float>&, int, blocks::RemovalConvention);
template BinaryClassifier<double> extract_binary_classifier<double>(
    network::Network<double>&, int, blocks::RemovalConvention);
template std::vector<double> binary_logits<float>(const BinaryClassifier<float>&,
                                                  const network::Dataset&, int);
template std::vector<double> binary_logits<double>(const BinaryClassifier<double>&,
                                                   const network::Dataset&, int);
template double calibrate_threshold<float>(const BinaryClassifier<float>&,
                                           const network::Dataset&);
template double calibrate_threshold<double>(const BinaryClassifier<double>&,
                                            const network::Dataset&);
template PRPoint precision_recall<float>(const BinaryClassifier<float>&, double,
                                         const network::Dataset&, double,
                                         std::uint64_t);
template PRPoint precision_recall<double>(const BinaryClassifier<double>&, double,
                                          const network::Dataset&, double,
                                          std::uint64_t);
template std::vector<double> early_decoder_accuracy<float>(network::Network<float>&,
                                                           const network::Dataset&,
                                                           bool);
template std::vector<double> early_decoder_accuracy<double>(network::Network<double>&,
                                                            const network::Dataset&,
                                                            bool);

}  // namespace codednet::analysis
