#include "codednet/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace codednet::network {

using nlohmann::json;

// ---------- architecture description ----------

void ArchSpec::validate() const {
  if (stages.empty()) throw std::invalid_argument("arch: no stages");
  if (k_classes < 2) throw std::invalid_argument("arch: need at least two classes");
  if (in_channels < 1) throw std::invalid_argument("arch: bad input width");
  if (stem.out_channels < 1) throw std::invalid_argument("arch: bad stem width");
  double prev_ratio = 1.0 + 1e-12;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageSpec& s = stages[i];
    if (s.c_out < 1 || s.d < 1 || s.n < 1 || s.repeat < 1)
      throw std::invalid_argument("arch: non-positive stage dimension");
    if (s.n_act < 1 || s.n_act > s.n)
      throw std::invalid_argument("arch: active count outside [1, N]");
    if (s.first_stride < 1 || s.first_stride > 2)
      throw std::invalid_argument("arch: stride must be 1 or 2");
    if (!spatial && s.first_stride != 1)
      throw std::invalid_argument("arch: dense stages cannot stride");
    const double r = static_cast<double>(s.n_act) / s.n;
    if (i == 0 && s.n_act != s.n)
      throw std::invalid_argument("arch: first stage must be uncoded (ratio 1)");
    if (r > prev_ratio)
      throw std::invalid_argument("arch: ratios must be non-increasing with depth");
    prev_ratio = r + 1e-12;
  }
  if (!spatial && stem.maxpool)
    throw std::invalid_argument("arch: dense stems cannot pool");
}

std::vector<StageSpec> ArchSpec::scheme_requests() const {
  std::vector<StageSpec> out;
  for (const StageSpec& s : stages) {
    if (s.n_act == s.n) continue;
    const bool seen = std::any_of(out.begin(), out.end(), [&](const StageSpec& o) {
      return o.n == s.n && o.n_act == s.n_act;
    });
    if (!seen) out.push_back(s);
  }
  return out;
}

ArchSpec ArchSpec::preset(const std::string& name) {
  ArchSpec a;
  a.name = name;
  if (name == "cifar10") {
    a.spatial = true;
    a.in_channels = 3;
    a.stem = {64, 3, 1, 1, false};
    a.stages = {{256, 11, 10, 10, 3, 1, 2},
                {512, 22, 10, 5, 3, 2, 4},
                {1024, 44, 10, 3, 3, 2, 4}};
    a.k_classes = 10;
  } else if (name == "cifar100") {
    a.spatial = true;
    a.in_channels = 3;
    a.stem = {64, 3, 1, 1, false};
    a.stages = {{256, 6, 20, 20, 3, 1, 2},
                {512, 12, 20, 8, 3, 2, 8},
                {1024, 24, 20, 4, 3, 2, 4}};
    a.k_classes = 100;
  } else if (name == "imagenet") {
    a.spatial = true;
    a.in_channels = 3;
    a.stem = {64, 7, 2, 3, true};
    a.stages = {{256, 4, 32, 32, 3, 1, 2},
                {512, 8, 32, 32, 4, 2, 2},
                {1024, 16, 32, 16, 6, 2, 4},
                {2048, 32, 32, 8, 3, 2, 2}};
    a.k_classes = 1000;
  } else if (name == "toy-dense") {
    a.spatial = false;
    a.in_channels = 32;
    a.stem = {16, 0, 1, 0, false};
    a.stages = {{16, 8, 8, 8, 2, 1, 2},
                {32, 16, 8, 4, 2, 1, 4},
                {64, 32, 8, 2, 2, 1, 2}};
    a.k_classes = 8;
  } else {
    throw std::invalid_argument("unknown architecture preset: " + name);
  }
  a.validate();
  return a;
}

std::vector<std::string> ArchSpec::preset_names() {
  return {"cifar10", "cifar100", "imagenet", "toy-dense"};
}

// ---------- build ----------

namespace {

template <typename T>
struct Builder {
  Network<T>& net;
  Rng& rng;

  int add_array(std::string name, std::vector<std::int64_t> shape, bool decay) {
    net.param_names.push_back(std::move(name));
    net.params.push_back(Tensor<T>::zeros(std::move(shape)));
    net.param_decay.push_back(decay ? 1 : 0);
    return static_cast<int>(net.params.size()) - 1;
  }

  int add_weight(std::string name, std::vector<std::int64_t> shape, double fan_in,
                 double gain) {
    const int idx = add_array(std::move(name), std::move(shape), true);
    const double sd = std::sqrt(gain / fan_in);
    for (auto& v : net.params[static_cast<std::size_t>(idx)].data)
      v = static_cast<T>(rng.normal(0.0, sd));
    return idx;
  }

  blocks::BnRef add_bn(const std::string& prefix, int channels) {
    blocks::BnRef bn;
    bn.gamma = add_array(prefix + ".gamma", {channels}, false);
    for (auto& v : net.params[static_cast<std::size_t>(bn.gamma)].data) v = T(1);
    bn.beta = add_array(prefix + ".beta", {channels}, false);
    net.stats.push_back(autodiff::BatchNormStats<T>::fresh(channels));
    bn.stats = static_cast<int>(net.stats.size()) - 1;
    return bn;
  }
};

}  // namespace

template <typename T>
Network<T> build_network(const ArchSpec& arch,
                         const std::vector<codebook::CodingScheme>& schemes,
                         std::uint64_t seed) {
  arch.validate();
  Network<T> net;
  net.arch = arch;
  net.schemes = schemes;
  net.seed = seed;
  Rng rng(seed);
  Builder<T> b{net, rng};

  // Stem.
  if (arch.spatial) {
    const double fan = static_cast<double>(arch.in_channels) * arch.stem.kernel * arch.stem.kernel;
    net.stem_w = b.add_weight("stem.w",
                              {arch.stem.out_channels, arch.in_channels,
                               arch.stem.kernel, arch.stem.kernel},
                              fan, 2.0);
  } else {
    net.stem_w = b.add_weight("stem.w", {arch.stem.out_channels, arch.in_channels},
                              static_cast<double>(arch.in_channels), 2.0);
  }
  net.stem_bn = b.add_bn("stem.bn", arch.stem.out_channels);

  // Stages.
  int c_in = arch.stem.out_channels;
  int block_no = 0;
  for (const StageSpec& s : arch.stages) {
    int scheme_idx = -1;
    if (s.n_act < s.n) {
      for (std::size_t j = 0; j < schemes.size(); ++j)
        if (schemes[j].N == s.n && schemes[j].N_act == s.n_act) {
          scheme_idx = static_cast<int>(j);
          break;
        }
      if (scheme_idx < 0)
        throw std::invalid_argument("build_network: no scheme for " +
                                    std::to_string(s.n_act) + "/" + std::to_string(s.n));
      if (schemes[static_cast<std::size_t>(scheme_idx)].K() != arch.k_classes)
        throw std::invalid_argument("build_network: scheme class count mismatch");
    }
    for (int rep = 0; rep < s.repeat; ++rep, ++block_no) {
      const std::string bp = "block" + std::to_string(block_no);
      blocks::CodedBlockRef ref;
      ref.c_in = c_in;
      ref.c_out = s.c_out;
      ref.d = s.d;
      ref.n = s.n;
      ref.n_act = s.n_act;
      ref.stride = rep == 0 ? s.first_stride : 1;
      ref.spatial = arch.spatial;
      ref.scheme = scheme_idx;
      ref.group_id = scheme_idx >= 0 ? "scheme-" + std::to_string(scheme_idx)
                                     : "uncoded-" + std::to_string(block_no);
      ref.denom_count = s.n;
      for (int n = 0; n < s.n; ++n) {
        ref.branch_ids.push_back(n);
        const std::string pp = bp + ".branch" + std::to_string(n);
        blocks::BranchRef br;
        if (arch.spatial) {
          br.w_in = b.add_weight(pp + ".w_in", {s.d, c_in, 1, 1}, c_in, 2.0);
          br.bn_in = b.add_bn(pp + ".bn_in", s.d);
          br.w_mid = b.add_weight(pp + ".w_mid", {s.d, s.d, 3, 3}, 9.0 * s.d, 2.0);
          br.bn_mid = b.add_bn(pp + ".bn_mid", s.d);
          br.w_out = b.add_weight(pp + ".w_out", {s.c_out, s.d, 1, 1}, s.d, 2.0);
        } else {
          br.w_in = b.add_weight(pp + ".w_in", {s.d, c_in}, c_in, 2.0);
          br.bn_in = b.add_bn(pp + ".bn_in", s.d);
          br.w_mid = b.add_weight(pp + ".w_mid", {s.d, s.d}, s.d, 2.0);
          br.bn_mid = b.add_bn(pp + ".bn_mid", s.d);
          br.w_out = b.add_weight(pp + ".w_out", {s.c_out, s.d}, s.d, 2.0);
        }
        ref.branches.push_back(br);
      }
      ref.bn3 = b.add_bn(bp + ".bn3", s.c_out);
      if (c_in != s.c_out || ref.stride > 1) {
        ref.w_proj = arch.spatial
                         ? b.add_weight(bp + ".proj.w", {s.c_out, c_in, 1, 1}, c_in, 2.0)
                         : b.add_weight(bp + ".proj.w", {s.c_out, c_in}, c_in, 2.0);
        ref.bn_proj = b.add_bn(bp + ".proj.bn", s.c_out);
      }
      net.block_refs.push_back(std::move(ref));
      c_in = s.c_out;
    }
  }

  // Classifier head: small-normal weights, zero bias.
  net.head_w = b.add_array("head.w", {arch.k_classes, c_in}, true);
  for (auto& v : net.params[static_cast<std::size_t>(net.head_w)].data)
    v = static_cast<T>(rng.normal(0.0, 0.01));
  net.head_b = b.add_array("head.b", {arch.k_classes}, false);
  return net;
}

template <typename T>
std::int64_t Network<T>::total_param_count() const {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

template <typename T>
std::vector<int> Network<T>::coded_block_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < block_refs.size(); ++i)
    if (block_refs[i].coded()) out.push_back(static_cast<int>(i));
  return out;
}

// ---------- forward ----------

template <typename T>
ForwardResult<T> forward(autodiff::Graph<T>& g, Network<T>& net,
                         const Tensor<T>& x, const ForwardOptions<T>& opt) {
  using Var = typename autodiff::Graph<T>::Var;
  const bool train = opt.mode == blocks::Mode::kTrain;

  ForwardResult<T> res;
  res.param_vars.reserve(net.params.size());
  for (const auto& p : net.params) res.param_vars.push_back(g.leaf(p, train));

  Var h = g.leaf(x, false);
  if (net.arch.spatial) {
    h = g.conv2d(h, res.param_vars[static_cast<std::size_t>(net.stem_w)], Var{},
                 net.arch.stem.stride, net.arch.stem.padding, 1);
  } else {
    h = g.affine(h, res.param_vars[static_cast<std::size_t>(net.stem_w)], Var{});
  }
  h = g.batch_norm(h, res.param_vars[static_cast<std::size_t>(net.stem_bn.gamma)],
                   res.param_vars[static_cast<std::size_t>(net.stem_bn.beta)],
                   &net.stats[static_cast<std::size_t>(net.stem_bn.stats)], train,
                   opt.bn_momentum, static_cast<T>(blocks::kBnEps));
  h = g.relu(h);
  if (net.arch.spatial && net.arch.stem.maxpool) h = g.max_pool2d(h, 3, 2, 1);

  for (std::size_t i = 0; i < net.block_refs.size(); ++i) {
    const blocks::CodedBlockRef& ref = net.block_refs[i];
    blocks::BlockInputs<T> in;
    in.params = &res.param_vars;
    in.stats = &net.stats;
    in.scheme = ref.coded() ? &net.schemes[static_cast<std::size_t>(ref.scheme)] : nullptr;
    in.mode = opt.mode;
    in.labels = opt.labels;
    in.loss_exponent = opt.loss_exponent;
    in.drop = train ? opt.drop : nullptr;
    in.bn_momentum = opt.bn_momentum;
    const blocks::BranchAblation* ab = nullptr;
    if (opt.ablations != nullptr) {
      auto it = opt.ablations->find(static_cast<int>(i));
      if (it != opt.ablations->end()) ab = &it->second;
    }
    in.ablation = ab;
    blocks::BlockAux<T> aux;
    h = blocks::coded_block_forward(g, h, ref, in, &aux);
    if (ref.coded()) {
      res.coded_blocks.push_back(static_cast<int>(i));
      if (train) res.block_losses.push_back(aux.loss);
      if (opt.record_energies) res.energies.push_back(std::move(aux.energies));
    }
  }

  if (net.arch.spatial) h = g.global_avg_pool(h);
  res.logits = g.affine(h, res.param_vars[static_cast<std::size_t>(net.head_w)],
                        res.param_vars[static_cast<std::size_t>(net.head_b)]);
  return res;
}

// ---------- losses ----------

template <typename T>
typename autodiff::Graph<T>::Var total_loss(
    autodiff::Graph<T>& g, typename autodiff::Graph<T>::Var logits,
    const std::vector<int>& labels,
    const std::vector<typename autodiff::Graph<T>::Var>& block_losses, T mu) {
  using Var = typename autodiff::Graph<T>::Var;
  Var ce = g.mean_all(g.softmax_cross_entropy(logits, labels));
  if (block_losses.empty() || mu == T(0)) return ce;
  Var code{};
  for (const Var& l : block_losses) {
    Var m = g.mean_all(l);
    code = code.valid() ? g.add(code, m) : m;
  }
  return g.add(ce, g.scale(code, mu));
}

double total_loss_value(double ce, const std::vector<double>& block_means, double mu) {
  double code = 0.0;
  for (double v : block_means) code += v;
  return ce + mu * code;
}

// ---------- training ----------

double cosine_lr(double lr, double floor, int step, int total_steps) {
  if (total_steps <= 1 || step <= 0)
    return step >= total_steps && total_steps >= 1 ? floor : lr;
  if (step >= total_steps - 1) return floor;
  const double t = static_cast<double>(step) / (total_steps - 1);
  return floor + 0.5 * (lr - floor) * (1.0 + std::cos(t * 3.14159265358979323846));
}

namespace {

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx,
                      std::size_t begin, std::size_t count) {
  std::vector<std::int64_t> shape = x.shape;
  shape[0] = static_cast<std::int64_t>(count);
  Tensor<T> out = Tensor<T>::zeros(shape);
  const std::int64_t per = x.numel() / x.dim(0);
  for (std::size_t i = 0; i < count; ++i)
    std::copy_n(x.data.begin() + idx[begin + i] * per, per,
                out.data.begin() + static_cast<std::int64_t>(i) * per);
  return out;
}

template <typename T>
int argmax_row(const Tensor<T>& logits, std::int64_t row) {
  const std::int64_t k = logits.dim(1);
  int best = 0;
  for (std::int64_t j = 1; j < k; ++j)
    if (logits.data[static_cast<std::size_t>(row * k + j)] >
        logits.data[static_cast<std::size_t>(row * k + best)])
      best = static_cast<int>(j);
  return best;
}

}  // namespace

template <typename T>
TrainResult train(Network<T>& net, const Dataset& train_set, const Dataset* val_set,
                  const TrainConfig& cfg) {
  if (train_set.size() < 2) throw std::invalid_argument("train: dataset too small");
  if (cfg.batch_size < 2) throw std::invalid_argument("train: batch size must be >= 2");
  if (cfg.mu < 0.0) throw std::invalid_argument("train: negative loss balance");
  if (cfg.p_drop < 0.0 || cfg.p_drop >= 1.0)
    throw std::invalid_argument("train: p_drop must lie in [0, 1)");
  for (int l : train_set.labels)
    if (l < 0 || l >= net.arch.k_classes)
      throw std::invalid_argument("train: label outside [0, K)");

  const Tensor<T> x_all = tensor_cast<T>(train_set.x);
  const std::size_t m = static_cast<std::size_t>(train_set.size());
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const int steps_per_epoch = static_cast<int>(m / bs);
  if (steps_per_epoch < 1)
    throw std::invalid_argument("train: batch size exceeds dataset");
  const int total_steps = cfg.epochs * steps_per_epoch;

  Rng rng(cfg.seed);
  Rng shuffle_rng = rng.spawn(1);
  Rng drop_rng = rng.spawn(2);

  std::vector<Tensor<T>> velocity;
  velocity.reserve(net.params.size());
  for (const auto& p : net.params) velocity.push_back(Tensor<T>::zeros(p.shape));

  // Last completed epoch's parameters, for divergence recovery.
  std::vector<Tensor<T>> good_params = net.params;
  std::vector<autodiff::BatchNormStats<T>> good_stats = net.stats;

  if (!cfg.checkpoint_dir.empty())
    std::filesystem::create_directories(cfg.checkpoint_dir);

  std::vector<int> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = static_cast<int>(i);

  TrainResult result;
  const int n_coded = static_cast<int>(net.coded_block_indices().size());
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs && !result.diverged; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double sum_loss = 0.0, sum_ce = 0.0, sum_code = 0.0;
    std::vector<double> sum_block(static_cast<std::size_t>(n_coded), 0.0);
    std::size_t correct = 0, seen = 0;

    for (int batch = 0; batch < steps_per_epoch; ++batch, ++step) {
      const std::size_t off = static_cast<std::size_t>(batch) * bs;
      Tensor<T> xb = gather_rows(x_all, order, off, bs);
      std::vector<int> yb(bs);
      for (std::size_t i = 0; i < bs; ++i)
        yb[i] = train_set.labels[static_cast<std::size_t>(order[off + i])];

      autodiff::Graph<T> g;
      blocks::DropMaskCache drop(cfg.p_drop, &drop_rng);
      ForwardOptions<T> opt;
      opt.mode = blocks::Mode::kTrain;
      opt.labels = &yb;
      opt.drop = cfg.p_drop > 0.0 ? &drop : nullptr;
      opt.loss_exponent = cfg.loss_exponent;
      ForwardResult<T> fw = forward(g, net, xb, opt);
      auto loss = total_loss(g, fw.logits, yb, fw.block_losses, static_cast<T>(cfg.mu));

      const double loss_v = static_cast<double>(g.value(loss).data[0]);
      if (!std::isfinite(loss_v)) {
        net.params = good_params;
        net.stats = good_stats;
        result.diverged = true;
        break;
      }

      // Diagnostics from this forward pass.
      double ce_v = 0.0;
      {
        const Tensor<T>& lg = g.value(fw.logits);
        for (std::size_t i = 0; i < bs; ++i)
          if (argmax_row(lg, static_cast<std::int64_t>(i)) == yb[i]) ++correct;
        seen += bs;
      }
      double code_v = 0.0;
      for (std::size_t bi = 0; bi < fw.block_losses.size(); ++bi) {
        const Tensor<T>& lb = g.value(fw.block_losses[bi]);
        double mean = 0.0;
        for (const T& v : lb.data) mean += static_cast<double>(v);
        mean /= static_cast<double>(lb.numel());
        sum_block[bi] += mean;
        code_v += mean;
      }
      ce_v = loss_v - cfg.mu * code_v;
      sum_loss += loss_v;
      sum_ce += ce_v;
      sum_code += code_v;

      g.backward(loss);
      const double lr = cosine_lr(cfg.lr, cfg.lr_floor, step, total_steps);
      for (std::size_t p = 0; p < net.params.size(); ++p) {
        const Tensor<T>& gp = g.grad(fw.param_vars[p]);
        Tensor<T>& w = net.params[p];
        Tensor<T>& v = velocity[p];
        const bool decay = net.param_decay[p] != 0;
        for (std::size_t j = 0; j < w.data.size(); ++j) {
          T grad = gp.data[j];
          if (decay) grad += static_cast<T>(cfg.weight_decay) * w.data[j];
          v.data[j] = static_cast<T>(cfg.momentum) * v.data[j] + grad;
          grad += static_cast<T>(cfg.momentum) * v.data[j];
          w.data[j] -= static_cast<T>(lr) * grad;
        }
      }
    }
    if (result.diverged) break;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = sum_loss / steps_per_epoch;
    rec.mean_ce = sum_ce / steps_per_epoch;
    rec.mean_code = sum_code / steps_per_epoch;
    rec.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    for (double s : sum_block) rec.per_block_code.push_back(s / steps_per_epoch);
    if (val_set != nullptr)
      rec.val_accuracy = evaluate(net, *val_set).accuracy;
    result.history.push_back(std::move(rec));

    good_params = net.params;
    good_stats = net.stats;
    if (!cfg.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
      save_checkpoint(net, cfg.checkpoint_dir + "/" + name);
    }
  }
  result.steps = step;
  return result;
}

// ---------- evaluation ----------

template <typename T>
EvalResult<T> evaluate(Network<T>& net, const Dataset& ds, int batch_size,
                       const std::map<int, blocks::BranchAblation>* ablations,
                       bool record_energies, int loss_exponent) {
  EvalResult<T> res;
  res.coded_blocks = net.coded_block_indices();
  const std::size_t n_coded = res.coded_blocks.size();
  res.per_block_code.assign(n_coded, 0.0);
  const std::size_t m = static_cast<std::size_t>(ds.size());
  if (m == 0) return res;

  const Tensor<T> x_all = tensor_cast<T>(ds.x);
  if (record_energies)
    for (std::size_t b = 0; b < n_coded; ++b) {
      const auto& ref = net.block_refs[static_cast<std::size_t>(res.coded_blocks[b])];
      res.energies.push_back(Tensor<T>::zeros({static_cast<std::int64_t>(m), ref.n}));
    }

  std::vector<int> ident(m);
  for (std::size_t i = 0; i < m; ++i) ident[i] = static_cast<int>(i);

  std::size_t correct = 0;
  std::size_t done = 0;
  const bool want_code = !net.schemes.empty();
  while (done < m) {
    const std::size_t take = std::min(static_cast<std::size_t>(batch_size), m - done);
    Tensor<T> xb = gather_rows(x_all, ident, done, take);

    autodiff::Graph<T> g;
    ForwardOptions<T> opt;
    opt.mode = blocks::Mode::kEval;
    opt.ablations = ablations;
    opt.record_energies = record_energies || want_code;
    ForwardResult<T> fw = forward(g, net, xb, opt);
    const Tensor<T>& lg = g.value(fw.logits);
    for (std::size_t i = 0; i < take; ++i)
      if (argmax_row(lg, static_cast<std::int64_t>(i)) ==
          ds.labels[done + i])
        ++correct;

    for (std::size_t b = 0; b < fw.energies.size(); ++b) {
      const Tensor<T>& e = fw.energies[b];
      const auto& ref = net.block_refs[static_cast<std::size_t>(res.coded_blocks[b])];
      if (record_energies)
        std::copy(e.data.begin(), e.data.end(),
                  res.energies[b].data.begin() +
                      static_cast<std::int64_t>(done) * ref.n);
      if (want_code) {
        const auto& scheme = net.schemes[static_cast<std::size_t>(ref.scheme)];
        for (std::size_t i = 0; i < take; ++i) {
          std::vector<double> row(static_cast<std::size_t>(ref.n));
          for (int j = 0; j < ref.n; ++j)
            row[static_cast<std::size_t>(j)] =
                static_cast<double>(e.data[i * static_cast<std::size_t>(ref.n) +
                                           static_cast<std::size_t>(j)]);
          res.per_block_code[b] += blocks::coding_loss(
              row, scheme.codewords[static_cast<std::size_t>(ds.labels[done + i])],
              ref.ratio(), loss_exponent);
        }
      }
    }
    done += take;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(m);
  for (double& v : res.per_block_code) v /= static_cast<double>(m);
  return res;
}

// ---------- parameter counting ----------

namespace {

struct BlockShapes {
  std::int64_t branch = 0;  // one branch's parameters
  std::int64_t rest = 0;    // aggregation norm + shortcut
};

BlockShapes block_shapes(bool spatial, int c_in, int c_out, int d, int stride) {
  BlockShapes s;
  const std::int64_t mid = spatial ? 9LL * d * d : static_cast<std::int64_t>(d) * d;
  s.branch = static_cast<std::int64_t>(c_in) * d + 2 * d + mid + 2 * d +
             static_cast<std::int64_t>(d) * c_out;
  s.rest = 2LL * c_out;
  if (c_in != c_out || stride > 1)
    s.rest += static_cast<std::int64_t>(c_in) * c_out + 2LL * c_out;
  return s;
}

}  // namespace

ParamCount count_parameters(const ArchSpec& arch, std::optional<int> keep_class,
                            CountMode mode) {
  arch.validate();
  if (keep_class && (*keep_class < 0 || *keep_class >= arch.k_classes))
    throw std::invalid_argument("count_parameters: class outside [0, K)");

  const std::int64_t stem =
      arch.spatial ? static_cast<std::int64_t>(arch.in_channels) * arch.stem.out_channels *
                             arch.stem.kernel * arch.stem.kernel +
                         2LL * arch.stem.out_channels
                   : static_cast<std::int64_t>(arch.in_channels) * arch.stem.out_channels +
                         2LL * arch.stem.out_channels;

  std::int64_t total = stem;
  double kept = static_cast<double>(stem);
  int c_in = arch.stem.out_channels;
  int c_last = c_in;
  for (const StageSpec& s : arch.stages) {
    for (int rep = 0; rep < s.repeat; ++rep) {
      const int stride = rep == 0 ? s.first_stride : 1;
      const BlockShapes bs = block_shapes(arch.spatial, c_in, s.c_out, s.d, stride);
      const std::int64_t block_total = bs.branch * s.n + bs.rest;
      total += block_total;
      if (!keep_class || s.n_act == s.n) {
        kept += static_cast<double>(block_total);
      } else if (mode == CountMode::kBlockScaled) {
        kept += static_cast<double>(s.n_act) / s.n * static_cast<double>(block_total);
      } else {
        kept += static_cast<double>(bs.branch * s.n_act + bs.rest);
      }
      c_in = s.c_out;
      c_last = s.c_out;
    }
  }
  const std::int64_t head = static_cast<std::int64_t>(c_last) * arch.k_classes + arch.k_classes;
  total += head;
  kept += keep_class ? static_cast<double>(c_last + 1) : static_cast<double>(head);

  ParamCount out;
  out.total = total;
  out.kept = static_cast<std::int64_t>(std::llround(kept));
  out.fraction = kept / static_cast<double>(total);
  return out;
}

// ---------- checkpoints ----------

namespace {

constexpr char kMagic[8] = {'C', 'D', 'N', 'C', 'K', 'P', 'T', '1'};

json arch_to_json(const ArchSpec& a) {
  json stages = json::array();
  for (const StageSpec& s : a.stages)
    stages.push_back({{"c_out", s.c_out},
                      {"d", s.d},
                      {"n", s.n},
                      {"n_act", s.n_act},
                      {"repeat", s.repeat},
                      {"first_stride", s.first_stride},
                      {"h_min", s.h_min}});
  return {{"name", a.name},
          {"spatial", a.spatial},
          {"in_channels", a.in_channels},
          {"stem",
           {{"out_channels", a.stem.out_channels},
            {"kernel", a.stem.kernel},
            {"stride", a.stem.stride},
            {"padding", a.stem.padding},
            {"maxpool", a.stem.maxpool}}},
          {"stages", stages},
          {"k_classes", a.k_classes}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  a.name = j.at("name").get<std::string>();
  a.spatial = j.at("spatial").get<bool>();
  a.in_channels = j.at("in_channels").get<int>();
  const json& st = j.at("stem");
  a.stem.out_channels = st.at("out_channels").get<int>();
  a.stem.kernel = st.at("kernel").get<int>();
  a.stem.stride = st.at("stride").get<int>();
  a.stem.padding = st.at("padding").get<int>();
  a.stem.maxpool = st.at("maxpool").get<bool>();
  for (const json& sj : j.at("stages")) {
    StageSpec s;
    s.c_out = sj.at("c_out").get<int>();
    s.d = sj.at("d").get<int>();
    s.n = sj.at("n").get<int>();
    s.n_act = sj.at("n_act").get<int>();
    s.repeat = sj.at("repeat").get<int>();
    s.first_stride = sj.at("first_stride").get<int>();
    s.h_min = sj.at("h_min").get<int>();
    a.stages.push_back(s);
  }
  a.k_classes = j.at("k_classes").get<int>();
  return a;
}

template <typename T>
const char* precision_tag() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

struct HeaderInfo {
  json j;
  std::uint64_t payload_offset = 0;
};

HeaderInfo read_header(std::ifstream& f, const std::string& path) {
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || len == 0 || len > (1ull << 30))
    throw std::runtime_error("checkpoint: bad header length in " + path);
  std::string header(len, '\0');
  f.read(header.data(), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("checkpoint: truncated header in " + path);
  HeaderInfo info;
  info.j = json::parse(header);
  info.payload_offset = 16 + len;
  return info;
}

}  // namespace

template <typename T>
void save_checkpoint(const Network<T>& net, const std::string& path) {
  json arrays = json::array();
  std::uint64_t offset = 0;
  auto describe = [&](const std::string& name, const auto& tensor, const char* kind) {
    json shape = json::array();
    for (auto s : tensor.shape) shape.push_back(s);
    arrays.push_back({{"name", name}, {"kind", kind}, {"shape", shape}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(tensor.numel()) * sizeof(T);
  };
  for (std::size_t i = 0; i < net.params.size(); ++i)
    describe(net.param_names[i], net.params[i], "param");
  for (std::size_t i = 0; i < net.stats.size(); ++i) {
    describe("stats." + std::to_string(i) + ".mean", net.stats[i].running_mean, "stat");
    describe("stats." + std::to_string(i) + ".var", net.stats[i].running_var, "stat");
  }

  json schemes = json::array();
  for (const auto& s : net.schemes) {
    json words = json::array();
    for (const auto& w : s.codewords) words.push_back(w.to_string());
    schemes.push_back({{"n", s.N}, {"n_act", s.N_act}, {"words", words}});
  }

  json header = {{"format", 1},
                 {"precision", precision_tag<T>()},
                 {"seed", net.seed},
                 {"arch", arch_to_json(net.arch)},
                 {"schemes", schemes},
                 {"arrays", arrays}};
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(kMagic, 8);
  const std::uint64_t len = hs.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof len);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  auto dump = [&](const Tensor<T>& t) {
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  };
  for (const auto& p : net.params) dump(p);
  for (const auto& s : net.stats) {
    dump(s.running_mean);
    dump(s.running_var);
  }
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename T>
Network<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  HeaderInfo info = read_header(f, path);
  const json& j = info.j;
  if (j.at("format").get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported format version");
  if (j.at("precision").get<std::string>() != precision_tag<T>())
    throw std::runtime_error("checkpoint: precision mismatch (file is " +
                             j.at("precision").get<std::string>() + ")");

  ArchSpec arch = arch_from_json(j.at("arch"));
  std::vector<codebook::CodingScheme> schemes;
  for (const json& sj : j.at("schemes")) {
    codebook::CodingScheme s;
    s.N = sj.at("n").get<int>();
    s.N_act = sj.at("n_act").get<int>();
    for (const json& w : sj.at("words"))
      s.codewords.push_back(codebook::Codeword::from_string(w.get<std::string>()));
    s.refresh_metadata();
    schemes.push_back(std::move(s));
  }

  Network<T> net = build_network<T>(arch, schemes, j.at("seed").get<std::uint64_t>());

  // Route named arrays back into the rebuilt skeleton.
  std::map<std::string, Tensor<T>*> slots;
  for (std::size_t i = 0; i < net.params.size(); ++i)
    slots[net.param_names[i]] = &net.params[i];
  for (std::size_t i = 0; i < net.stats.size(); ++i) {
    slots["stats." + std::to_string(i) + ".mean"] = &net.stats[i].running_mean;
    slots["stats." + std::to_string(i) + ".var"] = &net.stats[i].running_var;
  }

  for (const json& aj : j.at("arrays")) {
    const std::string name = aj.at("name").get<std::string>();
    auto it = slots.find(name);
    if (it == slots.end())
      throw std::runtime_error("checkpoint: unexpected array " + name);
    Tensor<T>* t = it->second;
    std::vector<std::int64_t> shape;
    for (const json& s : aj.at("shape")) shape.push_back(s.get<std::int64_t>());
    if (shape != t->shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    f.seekg(static_cast<std::streamoff>(info.payload_offset +
                                        aj.at("offset").get<std::uint64_t>()));
    f.read(reinterpret_cast<char*>(t->data.data()),
           static_cast<std::streamsize>(t->data.size() * sizeof(T)));
    if (!f) throw std::runtime_error("checkpoint: truncated payload for " + name);
  }
  return net;
}

std::string checkpoint_precision(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  return read_header(f, path).j.at("precision").get<std::string>();
}

// ---------- explicit instantiations ----------

template struct Network<float>;
template struct Network<double>;
template Network<float> build_network<float>(const ArchSpec&,
                                             const std::vector<codebook::CodingScheme>&,
                                             std::uint64_t);
template Network<double> build_network<double>(const ArchSpec&,
                                               const std::vector<codebook::CodingScheme>&,
                                               std::uint64_t);
template ForwardResult<float> forward<float>(autodiff::Graph<float>&, Network<float>&,
                                             const Tensor<float>&,
                                             const ForwardOptions<float>&);
template ForwardResult<double> forward<double>(autodiff::Graph<double>&, Network<double>&,
                                               const Tensor<double>&,
                                               const ForwardOptions<double>&);
template typename autodiff::Graph<float>::Var total_loss<float>(
    autodiff::Graph<float>&, typename autodiff::Graph<float>::Var,
    const std::vector<int>&, const std::vector<typename autodiff::Graph<float>::Var>&,
    float);
template typename autodiff::Graph<double>::Var total_loss<double>(
    autodiff::Graph<double>&, typename autodiff::Graph<double>::Var,
    const std::vector<int>&, const std::vector<typename autodiff::Graph<double>::Var>&,
    double);
template TrainResult train<float>(Network<float>&, const Dataset&, const Dataset*,
                                  const TrainConfig&);
template TrainResult train<double>(Network<double>&, const Dataset&, const Dataset*,
                                   const TrainConfig&);
template EvalResult<float> evaluate<float>(Network<float>&, const Dataset&, int,
                                           const std::map<int, blocks::BranchAblation>*,
                                           bool, int);
template EvalResult<double> evaluate<double>(Network<double>&, const Dataset&, int,
                                             const std::map<int, blocks::BranchAblation>*,
                                             bool, int);
template void save_checkpoint<float>(const Network<float>&, const std::string&);
template void save_checkpoint<double>(const Network<double>&, const std::string&);
template Network<float> load_checkpoint<float>(const std::string&);
template Network<double> load_checkpoint<double>(const std::string&);

}  // namespace codednet::network
