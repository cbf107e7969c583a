#include "codednet/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace codednet::blocks {

template <typename T>
double mean_energy(const Tensor<T>& t) {
  if (t.numel() == 0) throw std::invalid_argument("mean_energy: empty tensor");
  double acc = 0.0;
  for (const T& v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc / static_cast<double>(t.numel());
}

template <typename T>
std::vector<double> per_sample_energy(const Tensor<T>& t) {
  if (t.rank() < 1 || t.numel() == 0)
    throw std::invalid_argument("per_sample_energy: need a non-empty [B,...] tensor");
  const std::int64_t b = t.dim(0);
  const std::int64_t per = t.numel() / b;
  std::vector<double> out(static_cast<std::size_t>(b), 0.0);
  for (std::int64_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < per; ++j) {
      const double v = static_cast<double>(t.data[static_cast<std::size_t>(i * per + j)]);
      acc += v * v;
    }
    out[static_cast<std::size_t>(i)] = acc / static_cast<double>(per);
  }
  return out;
}

template <typename T>
NormalizeResult<T> energy_normalize(const std::vector<Tensor<T>>& branch_outputs,
                                    double eps, int denom_count) {
  if (branch_outputs.empty())
    throw std::invalid_argument("energy_normalize: no branches");
  const int n = static_cast<int>(branch_outputs.size());
  if (denom_count < 0) denom_count = n;
  if (denom_count == 0) throw std::invalid_argument("energy_normalize: zero denominator count");
  const std::int64_t b = branch_outputs[0].dim(0);
  for (const auto& t : branch_outputs)
    if (t.dim(0) != b)
      throw std::invalid_argument("energy_normalize: branches disagree on batch size");

  std::vector<std::vector<double>> raw(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) raw[static_cast<std::size_t>(i)] = per_sample_energy(branch_outputs[static_cast<std::size_t>(i)]);

  std::vector<double> denom(static_cast<std::size_t>(b), 0.0);
  for (std::int64_t s = 0; s < b; ++s) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += raw[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)];
    denom[static_cast<std::size_t>(s)] = std::sqrt(eps + acc / static_cast<double>(denom_count));
  }

  NormalizeResult<T> res;
  res.outputs.reserve(static_cast<std::size_t>(n));
  res.energies.assign(static_cast<std::size_t>(b), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) {
    const Tensor<T>& src = branch_outputs[static_cast<std::size_t>(i)];
    Tensor<T> out = src;
    const std::int64_t per = src.numel() / b;
    for (std::int64_t s = 0; s < b; ++s) {
      const double d = denom[static_cast<std::size_t>(s)];
      for (std::int64_t j = 0; j < per; ++j) {
        auto& v = out.data[static_cast<std::size_t>(s * per + j)];
        v = static_cast<T>(static_cast<double>(v) / d);
      }
    }
    const std::vector<double> post = per_sample_energy(out);
    for (std::int64_t s = 0; s < b; ++s)
      res.energies[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] = post[static_cast<std::size_t>(s)];
    res.outputs.push_back(std::move(out));
  }
  return res;
}

double coding_loss(const std::vector<double>& energies,
                   const codebook::Codeword& codeword, double r, int exponent) {
  if (static_cast<int>(energies.size()) != codeword.length)
    throw std::invalid_argument("coding_loss: energy count does not match codeword length");
  if (exponent < 1 || (exponent > 1 && exponent % 2 != 0))
    throw std::invalid_argument("coding_loss: exponent must be even or 1 (absolute value)");
  const int n = codeword.length;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double target = codeword.get(i) ? 1.0 : 0.0;
    const double diff = r * energies[static_cast<std::size_t>(i)] - target;
    if (exponent == 1) {
      acc += std::abs(diff);
    } else {
      double p = 1.0;
      for (int e = 0; e < exponent; ++e) p *= diff;
      acc += p;
    }
  }
  return acc / static_cast<double>(n);
}

DropMask draw_drop_mask(int n, double p_drop, Rng& rng, const std::string& group_id) {
  if (n <= 0) throw std::invalid_argument("draw_drop_mask: branch count must be positive");
  if (p_drop < 0.0 || p_drop >= 1.0)
    throw std::invalid_argument("draw_drop_mask: p_drop must lie in [0, 1)");
  DropMask m;
  m.group_id = group_id;
  m.keep.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    m.keep[static_cast<std::size_t>(i)] = rng.bernoulli(p_drop) ? 0 : 1;
  return m;
}

const DropMask& DropMaskCache::mask_for(const std::string& group_id, int n) {
  auto it = masks_.find(group_id);
  if (it != masks_.end()) {
    if (static_cast<int>(it->second.keep.size()) != n)
      throw std::invalid_argument("DropMaskCache: branch count mismatch for group " + group_id);
    return it->second;
  }
  if (rng_ == nullptr) throw std::invalid_argument("DropMaskCache: no generator");
  auto [ins, ok] = masks_.emplace(group_id, draw_drop_mask(n, p_drop_, *rng_, group_id));
  (void)ok;
  return ins->second;
}

void DropMaskCache::preset(DropMask mask) {
  masks_[mask.group_id] = std::move(mask);
}

namespace {

template <typename T>
using Var = typename autodiff::Graph<T>::Var;

template <typename T>
Var<T> apply_bn(autodiff::Graph<T>& g, Var<T> h, const BnRef& bn, const BlockInputs<T>& in) {
  return g.batch_norm(h, (*in.params)[static_cast<std::size_t>(bn.gamma)],
                      (*in.params)[static_cast<std::size_t>(bn.beta)],
                      &(*in.stats)[static_cast<std::size_t>(bn.stats)],
                      in.mode == Mode::kTrain, in.bn_momentum, static_cast<T>(kBnEps));
}

template <typename T>
Var<T> branch_forward(autodiff::Graph<T>& g, Var<T> x, const CodedBlockRef& block,
                      const BranchRef& br, const BlockInputs<T>& in) {
  const auto& pv = *in.params;
  Var<T> h;
  if (block.spatial) {
    h = g.conv2d(x, pv[static_cast<std::size_t>(br.w_in)], Var<T>{}, 1, 0, 1);
    h = g.relu(apply_bn(g, h, br.bn_in, in));
    h = g.conv2d(h, pv[static_cast<std::size_t>(br.w_mid)], Var<T>{}, block.stride, 1, 1);
    h = g.relu(apply_bn(g, h, br.bn_mid, in));
    h = g.conv2d(h, pv[static_cast<std::size_t>(br.w_out)], Var<T>{}, 1, 0, 1);
  } else {
    h = g.affine(x, pv[static_cast<std::size_t>(br.w_in)], Var<T>{});
    h = g.relu(apply_bn(g, h, br.bn_in, in));
    h = g.affine(h, pv[static_cast<std::size_t>(br.w_mid)], Var<T>{});
    h = g.relu(apply_bn(g, h, br.bn_mid, in));
    h = g.affine(h, pv[static_cast<std::size_t>(br.w_out)], Var<T>{});
  }
  return h;
}

template <typename T>
std::vector<std::int64_t> block_output_shape(const CodedBlockRef& block,
                                             const std::vector<std::int64_t>& in_shape) {
  if (!block.spatial) return {in_shape[0], block.c_out};
  const std::int64_t ho = (in_shape[2] + 2 - 3) / block.stride + 1;
  const std::int64_t wo = (in_shape[3] + 2 - 3) / block.stride + 1;
  return {in_shape[0], block.c_out, ho, wo};
}

}  // namespace

template <typename T>
typename autodiff::Graph<T>::Var coded_block_forward(
    autodiff::Graph<T>& g, typename autodiff::Graph<T>::Var x,
    const CodedBlockRef& block, const BlockInputs<T>& in, BlockAux<T>* aux) {
  if (in.params == nullptr || in.stats == nullptr)
    throw std::invalid_argument("coded_block_forward: missing parameter bindings");
  if (block.branches.size() != block.branch_ids.size())
    throw std::invalid_argument("coded_block_forward: branch list / id list mismatch");
  if (block.coded() != (in.scheme != nullptr))
    throw std::invalid_argument("coded_block_forward: scheme binding does not match block");
  if (!block.spatial && block.stride != 1)
    throw std::invalid_argument("coded_block_forward: dense blocks cannot stride");
  const bool train = in.mode == Mode::kTrain;
  const int present = static_cast<int>(block.branches.size());

  // Which of the present branches survive an ablation request.
  std::vector<std::uint8_t> kept(static_cast<std::size_t>(present), 1);
  int kept_count = present;
  if (in.ablation != nullptr) {
    if (static_cast<int>(in.ablation->keep.size()) != block.n)
      throw std::invalid_argument("coded_block_forward: ablation mask length != branch count");
    kept_count = 0;
    for (int j = 0; j < present; ++j) {
      kept[static_cast<std::size_t>(j)] =
          in.ablation->keep[static_cast<std::size_t>(block.branch_ids[static_cast<std::size_t>(j)])];
      kept_count += kept[static_cast<std::size_t>(j)] ? 1 : 0;
    }
  }

  // Removed branches are skipped entirely: their output (hence energy) is
  // zero either way; the conventions differ only in the denominator count.
  int denom = block.denom_count > 0 ? block.denom_count : block.n;
  if (in.ablation != nullptr &&
      in.ablation->convention == RemovalConvention::kExcludeFromBoth)
    denom = kept_count;

  std::vector<Var<T>> t(static_cast<std::size_t>(present));
  for (int j = 0; j < present; ++j)
    if (kept[static_cast<std::size_t>(j)])
      t[static_cast<std::size_t>(j)] = branch_forward(g, x, block, block.branches[static_cast<std::size_t>(j)], in);

  const std::int64_t batch = g.value(x).dim(0);
  Var<T> y{};  // branch aggregate

  if (block.coded() && kept_count > 0) {
    // Shared per-sample denominator: sqrt(eps + mean of branch energies).
    std::vector<Var<T>> e_raw(static_cast<std::size_t>(present));
    Var<T> e_sum{};
    for (int j = 0; j < present; ++j) {
      if (!kept[static_cast<std::size_t>(j)]) continue;
      e_raw[static_cast<std::size_t>(j)] = g.mean_per_sample(g.square(t[static_cast<std::size_t>(j)]));
      e_sum = e_sum.valid() ? g.add(e_sum, e_raw[static_cast<std::size_t>(j)]) : e_raw[static_cast<std::size_t>(j)];
    }
    Var<T> denom_v = g.sqrt(g.add_scalar(g.scale(e_sum, T(1) / static_cast<T>(denom)),
                                         static_cast<T>(kEnergyEps)));

    std::vector<Var<T>> e_post(static_cast<std::size_t>(present));
    for (int j = 0; j < present; ++j) {
      if (!kept[static_cast<std::size_t>(j)]) continue;
      t[static_cast<std::size_t>(j)] = g.div_rows(t[static_cast<std::size_t>(j)], denom_v);
      e_post[static_cast<std::size_t>(j)] = g.mean_per_sample(g.square(t[static_cast<std::size_t>(j)]));
    }

    if (aux != nullptr) {
      aux->energies = Tensor<T>::zeros({batch, present});
      for (int j = 0; j < present; ++j) {
        if (!e_post[static_cast<std::size_t>(j)].valid()) continue;
        const Tensor<T>& e = g.value(e_post[static_cast<std::size_t>(j)]);
        for (std::int64_t s = 0; s < batch; ++s)
          aux->energies.data[static_cast<std::size_t>(s * present + j)] = e.data[static_cast<std::size_t>(s)];
      }
    }

    if (train && block.coded()) {
      if (in.labels == nullptr || static_cast<std::int64_t>(in.labels->size()) != batch)
        throw std::invalid_argument("coded_block_forward: train mode needs one label per sample");
      if (in.loss_exponent < 1 || (in.loss_exponent > 1 && in.loss_exponent % 2 != 0))
        throw std::invalid_argument("coded_block_forward: loss exponent must be even or 1");
      const T r = static_cast<T>(block.ratio());
      Var<T> loss_acc{};
      for (int j = 0; j < present; ++j) {
        if (!e_post[static_cast<std::size_t>(j)].valid()) continue;
        const int branch = block.branch_ids[static_cast<std::size_t>(j)];
        Tensor<T> target = Tensor<T>::zeros({batch});
        for (std::int64_t s = 0; s < batch; ++s) {
          const auto& cw = in.scheme->codewords[static_cast<std::size_t>((*in.labels)[static_cast<std::size_t>(s)])];
          target.data[static_cast<std::size_t>(s)] = cw.get(branch) ? T(1) : T(0);
        }
        Var<T> diff = g.sub_const(g.scale(e_post[static_cast<std::size_t>(j)], r), std::move(target));
        Var<T> term = in.loss_exponent == 1 ? g.abs(diff) : g.pow_even(diff, in.loss_exponent);
        loss_acc = loss_acc.valid() ? g.add(loss_acc, term) : term;
      }
      if (aux != nullptr && loss_acc.valid())
        aux->loss = g.scale(loss_acc, T(1) / static_cast<T>(block.n));

      if (in.drop != nullptr) {
        const DropMask& m = in.drop->mask_for(block.group_id, block.n);
        for (int j = 0; j < present; ++j) {
          if (!kept[static_cast<std::size_t>(j)]) continue;
          if (!m.keep[static_cast<std::size_t>(block.branch_ids[static_cast<std::size_t>(j)])])
            t[static_cast<std::size_t>(j)] = g.scale(t[static_cast<std::size_t>(j)], T(0));
        }
      }
    }
  }

  for (int j = 0; j < present; ++j) {
    if (!kept[static_cast<std::size_t>(j)]) continue;
    y = y.valid() ? g.add(y, t[static_cast<std::size_t>(j)]) : t[static_cast<std::size_t>(j)];
  }
  if (!y.valid())  // every branch removed
    y = g.constant(Tensor<T>::zeros(block_output_shape<T>(block, g.value(x).shape)));

  Var<T> h = apply_bn(g, y, block.bn3, in);

  Var<T> skip = x;
  if (block.w_proj >= 0) {
    const auto& pv = *in.params;
    skip = block.spatial
               ? g.conv2d(x, pv[static_cast<std::size_t>(block.w_proj)], Var<T>{}, block.stride, 0, 1)
               : g.affine(x, pv[static_cast<std::size_t>(block.w_proj)], Var<T>{});
    skip = apply_bn(g, skip, block.bn_proj, in);
  }
  return g.relu(g.add(h, skip));
}

template double mean_energy<float>(const Tensor<float>&);
template double mean_energy<double>(const Tensor<double>&);
template std::vector<double> per_sample_energy<float>(const Tensor<float>&);
template std::vector<double> per_sample_energy<double>(const Tensor<double>&);
template NormalizeResult<float> energy_normalize<float>(const std::vector<Tensor<float>>&, double, int);
template NormalizeResult<double> energy_normalize<double>(const std::vector<Tensor<double>>&, double, int);
template typename autodiff::Graph<float>::Var coded_block_forward<float>(
    autodiff::Graph<float>&, typename autodiff::Graph<float>::Var,
    const CodedBlockRef&, const BlockInputs<float>&, BlockAux<float>*);
template typename autodiff::Graph<double>::Var coded_block_forward<double>(
    autodiff::Graph<double>&, typename autodiff::Graph<double>::Var,
    const CodedBlockRef&, const BlockInputs<double>&, BlockAux<double>*);

}  // namespace codednet::blocks
