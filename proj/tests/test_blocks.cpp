#include <cmath>
#include <string>
#include <vector>

#include "codednet/blocks.hpp"
#include "codednet/codebook.hpp"
#include "codednet/gradcheck.hpp"
#include "codednet/graph.hpp"
#include "codednet/rng.hpp"
#include "codednet/tensor.hpp"
#include "doctest.h"

namespace cb = codednet::codebook;
namespace bl = codednet::blocks;
using codednet::Rng;
using codednet::Tensor;
using codednet::autodiff::BatchNormStats;
using codednet::autodiff::Graph;
using DVar = Graph<double>::Var;

namespace {

// ---- standalone-block fixture -------------------------------------------

struct Fixture {
  std::vector<Tensor<double>> params;
  std::vector<BatchNormStats<double>> stats;
  bl::CodedBlockRef ref;
  cb::CodingScheme scheme;  // meaningful only when ref.coded()
};

int add_random(Fixture& f, std::vector<std::int64_t> shape, Rng& rng, double sd) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, sd);
  f.params.push_back(std::move(t));
  return static_cast<int>(f.params.size()) - 1;
}

int add_filled(Fixture& f, std::vector<std::int64_t> shape, double value) {
  f.params.push_back(Tensor<double>::full(std::move(shape), value));
  return static_cast<int>(f.params.size()) - 1;
}

bl::BnRef add_bn(Fixture& f, int channels) {
  bl::BnRef bn;
  bn.gamma = add_filled(f, {channels}, 1.0);
  bn.beta = add_filled(f, {channels}, 0.0);
  f.stats.push_back(BatchNormStats<double>::fresh(channels));
  bn.stats = static_cast<int>(f.stats.size()) - 1;
  return bn;
}

Fixture make_block(bool spatial, int c_in, int c_out, int d, int n, int n_act,
                   int stride, int k_classes, std::uint64_t seed) {
  Rng rng(seed);
  Fixture f;
  f.ref.c_in = c_in;
  f.ref.c_out = c_out;
  f.ref.d = d;
  f.ref.n = n;
  f.ref.n_act = n_act;
  f.ref.stride = stride;
  f.ref.spatial = spatial;
  f.ref.denom_count = n;
  f.ref.group_id = "g0";
  if (n_act < n) {
    f.scheme = cb::generate_scheme(k_classes, n, n_act, 2);
    f.ref.scheme = 0;
  }
  for (int i = 0; i < n; ++i) {
    f.ref.branch_ids.push_back(i);
    bl::BranchRef br;
    if (spatial) {
      br.w_in = add_random(f, {d, c_in, 1, 1}, rng, 0.3);
      br.bn_in = add_bn(f, d);
      br.w_mid = add_random(f, {d, d, 3, 3}, rng, 0.2);
      br.bn_mid = add_bn(f, d);
      br.w_out = add_random(f, {c_out, d, 1, 1}, rng, 0.3);
    } else {
      br.w_in = add_random(f, {d, c_in}, rng, 0.4);
      br.bn_in = add_bn(f, d);
      br.w_mid = add_random(f, {d, d}, rng, 0.4);
      br.bn_mid = add_bn(f, d);
      br.w_out = add_random(f, {c_out, d}, rng, 0.4);
    }
    f.ref.branches.push_back(br);
  }
  f.ref.bn3 = add_bn(f, c_out);
  if (c_in != c_out || stride > 1) {
    f.ref.w_proj = spatial ? add_random(f, {c_out, c_in, 1, 1}, rng, 0.3)
                           : add_random(f, {c_out, c_in}, rng, 0.4);
    f.ref.bn_proj = add_bn(f, c_out);
  }
  return f;
}

std::vector<DVar> make_leaves(Graph<double>& g, const Fixture& f, bool needs_grad) {
  std::vector<DVar> vars;
  vars.reserve(f.params.size());
  for (const auto& p : f.params) vars.push_back(g.leaf(p, needs_grad));
  return vars;
}

Tensor<double> random_input(const Fixture& f, std::int64_t b, std::int64_t hw, Rng& rng) {
  Tensor<double> x = f.ref.spatial ? Tensor<double>::zeros({b, f.ref.c_in, hw, hw})
                                   : Tensor<double>::zeros({b, f.ref.c_in});
  for (auto& v : x.data) v = rng.normal(0.0, 1.0);
  return x;
}

// ---- plain [B,C] mirrors of the training-mode layer arithmetic ----------

using Mat = Tensor<double>;

Mat mat_affine(const Mat& x, const Mat& w) {
  const std::int64_t b = x.dim(0), i = x.dim(1), o = w.dim(0);
  Mat y = Mat::zeros({b, o});
  for (std::int64_t s = 0; s < b; ++s)
    for (std::int64_t c = 0; c < o; ++c) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < i; ++j)
        acc += x.data[static_cast<std::size_t>(s * i + j)] * w.data[static_cast<std::size_t>(c * i + j)];
      y.data[static_cast<std::size_t>(s * o + c)] = acc;
    }
  return y;
}

Mat mat_bn_train(const Mat& x, const Mat& gamma, const Mat& beta, double eps = bl::kBnEps) {
  const std::int64_t b = x.dim(0), c = x.dim(1);
  Mat y = Mat::zeros({b, c});
  for (std::int64_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::int64_t s = 0; s < b; ++s) mean += x.data[static_cast<std::size_t>(s * c + j)];
    mean /= static_cast<double>(b);
    double var = 0.0;
    for (std::int64_t s = 0; s < b; ++s) {
      const double dlt = x.data[static_cast<std::size_t>(s * c + j)] - mean;
      var += dlt * dlt;
    }
    var /= static_cast<double>(b);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t s = 0; s < b; ++s)
      y.data[static_cast<std::size_t>(s * c + j)] =
          gamma.data[static_cast<std::size_t>(j)] *
              (x.data[static_cast<std::size_t>(s * c + j)] - mean) * inv +
          beta.data[static_cast<std::size_t>(j)];
  }
  return y;
}

Mat mat_relu(const Mat& x) {
  Mat y = x;
  for (auto& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

Mat mat_add(const Mat& a, const Mat& b) {
  Mat y = a;
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
  return y;
}

Mat dense_branch_train(const Mat& x, const Fixture& f, const bl::BranchRef& br) {
  Mat h = mat_affine(x, f.params[static_cast<std::size_t>(br.w_in)]);
  h = mat_relu(mat_bn_train(h, f.params[static_cast<std::size_t>(br.bn_in.gamma)],
                            f.params[static_cast<std::size_t>(br.bn_in.beta)]));
  h = mat_affine(h, f.params[static_cast<std::size_t>(br.w_mid)]);
  h = mat_relu(mat_bn_train(h, f.params[static_cast<std::size_t>(br.bn_mid.gamma)],
                            f.params[static_cast<std::size_t>(br.bn_mid.beta)]));
  return mat_affine(h, f.params[static_cast<std::size_t>(br.w_out)]);
}

}  // namespace

TEST_CASE("mean energy is the mean of squares") {
  CHECK(bl::mean_energy(Tensor<double>::full({3, 5}, 1.0)) == doctest::Approx(1.0));
  CHECK(bl::mean_energy(Tensor<double>::zeros({4})) == doctest::Approx(0.0));
  CHECK(bl::mean_energy(Tensor<double>::from({2}, {3.0, 4.0})) == doctest::Approx(12.5));

  Rng rng(11);
  Tensor<double> t = Tensor<double>::zeros({2, 7});
  for (auto& v : t.data) v = rng.normal(0.0, 2.0);
  const double base = bl::mean_energy(t);
  Tensor<double> scaled = t;
  for (auto& v : scaled.data) v *= 3.0;
  CHECK(bl::mean_energy(scaled) == doctest::Approx(9.0 * base));

  const auto per = bl::per_sample_energy(Tensor<double>::from({2, 2}, {3.0, 4.0, 1.0, 1.0}));
  REQUIRE(per.size() == 2);
  CHECK(per[0] == doctest::Approx(12.5));
  CHECK(per[1] == doctest::Approx(1.0));
}

TEST_CASE("energy normalization divides by the root mean branch energy") {
  std::vector<Tensor<double>> branches{Tensor<double>::full({1, 4}, 1.0),
                                       Tensor<double>::zeros({1, 4})};
  const auto res = bl::energy_normalize(branches);
  REQUIRE(res.energies.size() == 1);
  CHECK(res.energies[0][0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(res.energies[0][1] == doctest::Approx(0.0));
  CHECK(res.energies[0][0] + res.energies[0][1] == doctest::Approx(2.0).epsilon(1e-5));

  SUBCASE("branches with unit energy pass through unchanged") {
    std::vector<Tensor<double>> same{Tensor<double>::full({2, 3}, 1.0),
                                     Tensor<double>::full({2, 3}, -1.0)};
    const auto r2 = bl::energy_normalize(same);
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < r2.outputs[static_cast<std::size_t>(n)].data.size(); ++i)
        CHECK(r2.outputs[static_cast<std::size_t>(n)].data[i] ==
              doctest::Approx(same[static_cast<std::size_t>(n)].data[i]).epsilon(1e-7));
  }

  SUBCASE("scale invariance") {
    Rng rng(5);
    std::vector<Tensor<double>> raw;
    for (int n = 0; n < 3; ++n) {
      Tensor<double> t = Tensor<double>::zeros({2, 5});
      for (auto& v : t.data) v = rng.normal(0.0, 1.5);
      raw.push_back(std::move(t));
    }
    std::vector<Tensor<double>> scaled = raw;
    for (auto& t : scaled)
      for (auto& v : t.data) v *= 7.25;
    const auto a = bl::energy_normalize(raw);
    const auto b = bl::energy_normalize(scaled);
    for (int n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < a.outputs[static_cast<std::size_t>(n)].data.size(); ++i)
        CHECK(a.outputs[static_cast<std::size_t>(n)].data[i] ==
              doctest::Approx(b.outputs[static_cast<std::size_t>(n)].data[i]).epsilon(1e-9));
    for (std::int64_t s = 0; s < 2; ++s) {
      double sum = 0.0;
      for (int n = 0; n < 3; ++n) sum += a.energies[static_cast<std::size_t>(s)][static_cast<std::size_t>(n)];
      CHECK(sum == doctest::Approx(3.0).epsilon(1e-5));
    }
  }

  SUBCASE("explicit denominator count") {
    std::vector<Tensor<double>> two{Tensor<double>::full({1, 2}, 2.0),
                                    Tensor<double>::full({1, 2}, 2.0)};
    // Mean energy 4 per branch; denominator over 4 slots: sqrt(8/4).
    const auto r4 = bl::energy_normalize(two, bl::kEnergyEps, 4);
    CHECK(r4.outputs[0].data[0] == doctest::Approx(2.0 / std::sqrt(2.0)).epsilon(1e-7));
  }

  CHECK_THROWS(bl::energy_normalize(std::vector<Tensor<double>>{}));
  CHECK_THROWS(bl::energy_normalize(std::vector<Tensor<double>>{
      Tensor<double>::zeros({1, 2}), Tensor<double>::zeros({2, 2})}));
}

TEST_CASE("coding loss matches its closed form") {
  cb::Codeword w10 = cb::Codeword::from_string("10");
  CHECK(bl::coding_loss({2.0, 0.0}, w10, 0.5, 4) == doctest::Approx(0.0));
  CHECK(bl::coding_loss({1.0, 1.0}, w10, 0.5, 4) == doctest::Approx(0.0625));

  cb::Codeword w3 = cb::Codeword::from_string("1010010000");
  std::vector<double> ones(10, 1.0);
  const double expect = (3.0 * std::pow(0.7, 4) + 7.0 * std::pow(0.3, 4)) / 10.0;
  CHECK(bl::coding_loss(ones, w3, 0.3, 4) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(bl::coding_loss(ones, w3, 0.3, 4) == doctest::Approx(0.0777).epsilon(1e-6));

  // Exponent 2 and the absolute-value variant.
  CHECK(bl::coding_loss({1.0, 1.0}, w10, 0.5, 2) == doctest::Approx(0.25));
  CHECK(bl::coding_loss({1.0, 1.0}, w10, 0.5, 1) == doctest::Approx(0.5));

  CHECK_THROWS(bl::coding_loss({1.0, 1.0}, w10, 0.5, 3));
  CHECK_THROWS(bl::coding_loss({1.0, 1.0}, w10, 0.5, 0));
  CHECK_THROWS(bl::coding_loss({1.0, 1.0, 1.0}, w10, 0.5, 4));
}

TEST_CASE("drop masks honor the probability and the group cache") {
  Rng rng(33);
  const bl::DropMask all = bl::draw_drop_mask(6, 0.0, rng, "a");
  for (auto k : all.keep) CHECK(k == 1);

  int dropped = 0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    const bl::DropMask m = bl::draw_drop_mask(1, 0.1, rng, "a");
    dropped += m.keep[0] ? 0 : 1;
  }
  const double freq = static_cast<double>(dropped) / trials;
  CHECK(freq == doctest::Approx(0.1).epsilon(0.1));
  CHECK(std::abs(freq - 0.1) < 0.01);

  SUBCASE("cache returns the identical mask object per group") {
    Rng r2(7);
    bl::DropMaskCache cache(0.5, &r2);
    const bl::DropMask& m1 = cache.mask_for("stage1", 8);
    const bl::DropMask& m2 = cache.mask_for("stage1", 8);
    CHECK(&m1 == &m2);
    CHECK_THROWS(cache.mask_for("stage1", 4));  // branch-count mismatch
    const bl::DropMask& other = cache.mask_for("stage2", 8);
    CHECK(other.group_id == "stage2");
  }

  SUBCASE("preset masks win over random draws") {
    bl::DropMaskCache cache(0.5, nullptr);
    bl::DropMask fixed;
    fixed.group_id = "g";
    fixed.keep = {1, 0, 1};
    cache.preset(fixed);
    const bl::DropMask& got = cache.mask_for("g", 3);
    CHECK(got.keep == std::vector<std::uint8_t>{1, 0, 1});
    CHECK_THROWS(cache.mask_for("other", 3));  // no generator attached
  }

  CHECK_THROWS(bl::draw_drop_mask(0, 0.1, rng, "x"));
  CHECK_THROWS(bl::draw_drop_mask(4, 1.0, rng, "x"));
  CHECK_THROWS(bl::draw_drop_mask(4, -0.1, rng, "x"));
}

TEST_CASE("zero branch parameters reduce the block to ReLU(x)") {
  Fixture f = make_block(false, 6, 6, 3, 4, 2, 1, 4, 21);
  for (const auto& br : f.ref.branches) {
    for (int w : {br.w_in, br.w_mid, br.w_out})
      for (auto& v : f.params[static_cast<std::size_t>(w)].data) v = 0.0;
  }
  Rng rng(2);
  Tensor<double> x = random_input(f, 5, 0, rng);

  for (bl::Mode mode : {bl::Mode::kEval, bl::Mode::kTrain}) {
    Graph<double> g;
    DVar xv = g.leaf(x);
    auto leaves = make_leaves(g, f, false);
    auto stats = f.stats;
    std::vector<int> labels = {0, 1, 2, 3, 0};
    bl::BlockInputs<double> in;
    in.params = &leaves;
    in.stats = &stats;
    in.scheme = &f.scheme;
    in.mode = mode;
    in.labels = mode == bl::Mode::kTrain ? &labels : nullptr;
    bl::BlockAux<double> aux;
    DVar y = bl::coded_block_forward(g, xv, f.ref, in, &aux);
    const Tensor<double>& vy = g.value(y);
    REQUIRE(vy.same_shape(x));
    for (std::size_t i = 0; i < x.data.size(); ++i)
      CHECK(vy.data[i] == doctest::Approx(std::max(x.data[i], 0.0)).epsilon(1e-12));
    if (mode == bl::Mode::kTrain) {
      // Zero energies: per-branch loss term is just the codeword bit, so the
      // per-sample loss is N_act/N.
      REQUIRE(aux.loss.valid());
      for (std::int64_t s = 0; s < 5; ++s)
        CHECK(g.value(aux.loss).data[static_cast<std::size_t>(s)] == doctest::Approx(0.5));
    }
  }
}

TEST_CASE("train-mode block forward matches a hand-rolled pipeline") {
  const int b = 6, n = 4;
  Fixture f = make_block(false, 5, 7, 3, n, 2, 1, 4, 99);
  Rng rng(17);
  Tensor<double> x = random_input(f, b, 0, rng);
  std::vector<int> labels;
  for (int s = 0; s < b; ++s) labels.push_back(static_cast<int>(rng.uniform_int(4)));

  bl::DropMask fixed;
  fixed.group_id = f.ref.group_id;
  fixed.keep = {1, 0, 1, 1};

  Graph<double> g;
  DVar xv = g.leaf(x);
  auto leaves = make_leaves(g, f, false);
  auto stats = f.stats;
  bl::DropMaskCache cache(0.25, nullptr);
  cache.preset(fixed);
  bl::BlockInputs<double> in;
  in.params = &leaves;
  in.stats = &stats;
  in.scheme = &f.scheme;
  in.mode = bl::Mode::kTrain;
  in.labels = &labels;
  in.drop = &cache;
  bl::BlockAux<double> aux;
  DVar y = bl::coded_block_forward(g, xv, f.ref, in, &aux);

  // Mirror of the pipeline in plain loops.
  std::vector<Mat> raw;
  for (const auto& br : f.ref.branches) raw.push_back(dense_branch_train(x, f, br));
  const auto norm = bl::energy_normalize(raw);
  Mat summed = Mat::zeros({b, 7});
  for (int j = 0; j < n; ++j)
    if (fixed.keep[static_cast<std::size_t>(j)]) summed = mat_add(summed, norm.outputs[static_cast<std::size_t>(j)]);
  Mat h = mat_bn_train(summed, f.params[static_cast<std::size_t>(f.ref.bn3.gamma)],
                       f.params[static_cast<std::size_t>(f.ref.bn3.beta)]);
  Mat skip = mat_bn_train(mat_affine(x, f.params[static_cast<std::size_t>(f.ref.w_proj)]),
                          f.params[static_cast<std::size_t>(f.ref.bn_proj.gamma)],
                          f.params[static_cast<std::size_t>(f.ref.bn_proj.beta)]);
  Mat expect = mat_relu(mat_add(h, skip));

  const Tensor<double>& vy = g.value(y);
  REQUIRE(vy.same_shape(expect));
  for (std::size_t i = 0; i < expect.data.size(); ++i)
    CHECK(vy.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-9));

  // Energies recorded before the drop; loss computed from the full set.
  REQUIRE(aux.energies.same_shape(Tensor<double>::zeros({b, n})));
  for (std::int64_t s = 0; s < b; ++s) {
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = aux.energies.data[static_cast<std::size_t>(s * n + j)];
      CHECK(e == doctest::Approx(norm.energies[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]).epsilon(1e-9));
      sum += e;
    }
    CHECK(sum == doctest::Approx(static_cast<double>(n)).epsilon(1e-5));
    const double want = bl::coding_loss(norm.energies[static_cast<std::size_t>(s)],
                                        f.scheme.codewords[static_cast<std::size_t>(labels[static_cast<std::size_t>(s)])],
                                        f.ref.ratio(), 4);
    CHECK(g.value(aux.loss).data[static_cast<std::size_t>(s)] == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("scaling every branch out-projection leaves the coded pipeline unchanged") {
  const int b = 4;
  Fixture f = make_block(false, 5, 5, 3, 4, 2, 1, 4, 55);
  Rng rng(3);
  Tensor<double> x = random_input(f, b, 0, rng);
  std::vector<int> labels = {1, 3, 0, 2};

  auto run = [&](const Fixture& fx) {
    Graph<double> g;
    DVar xv = g.leaf(x);
    auto leaves = make_leaves(g, fx, false);
    auto stats = fx.stats;
    bl::BlockInputs<double> in;
    in.params = &leaves;
    in.stats = &stats;
    in.scheme = &fx.scheme;
    in.mode = bl::Mode::kTrain;
    in.labels = &labels;
    bl::BlockAux<double> aux;
    DVar y = bl::coded_block_forward(g, xv, fx.ref, in, &aux);
    return std::make_tuple(g.value(y), aux.energies, g.value(aux.loss));
  };

  Fixture scaled = f;
  for (const auto& br : scaled.ref.branches)
    for (auto& v : scaled.params[static_cast<std::size_t>(br.w_out)].data) v *= 4.2;

  const auto [y1, e1, l1] = run(f);
  const auto [y2, e2, l2] = run(scaled);
  for (std::size_t i = 0; i < y1.data.size(); ++i)
    CHECK(y1.data[i] == doctest::Approx(y2.data[i]).epsilon(1e-6));
  for (std::size_t i = 0; i < e1.data.size(); ++i)
    CHECK(e1.data[i] == doctest::Approx(e2.data[i]).epsilon(1e-6));
  for (std::size_t i = 0; i < l1.data.size(); ++i)
    CHECK(l1.data[i] == doctest::Approx(l2.data[i]).epsilon(1e-6));
}

TEST_CASE("branch removal honors both denominator conventions") {
  const int b = 3, n = 4;
  Fixture f = make_block(false, 5, 6, 3, n, 2, 1, 4, 77);
  Rng rng(9);
  Tensor<double> x = random_input(f, b, 0, rng);

  // Raw eval-mode branch outputs, reproduced manually (eval BN with fresh
  // stats is an affine map using mean 0, var 1).
  auto eval_bn = [&](const Mat& h, const bl::BnRef& bn) {
    Mat y = h;
    const Mat& gamma = f.params[static_cast<std::size_t>(bn.gamma)];
    const Mat& beta = f.params[static_cast<std::size_t>(bn.beta)];
    const std::int64_t c = h.dim(1);
    for (std::int64_t s = 0; s < h.dim(0); ++s)
      for (std::int64_t j = 0; j < c; ++j) {
        auto& v = y.data[static_cast<std::size_t>(s * c + j)];
        v = gamma.data[static_cast<std::size_t>(j)] * (v / std::sqrt(1.0 + bl::kBnEps)) +
            beta.data[static_cast<std::size_t>(j)];
      }
    return y;
  };
  std::vector<Mat> raw;
  for (const auto& br : f.ref.branches) {
    Mat h = mat_affine(x, f.params[static_cast<std::size_t>(br.w_in)]);
    h = mat_relu(eval_bn(h, br.bn_in));
    h = mat_affine(h, f.params[static_cast<std::size_t>(br.w_mid)]);
    h = mat_relu(eval_bn(h, br.bn_mid));
    raw.push_back(mat_affine(h, f.params[static_cast<std::size_t>(br.w_out)]));
  }

  auto run = [&](const bl::BranchAblation* ab) {
    Graph<double> g;
    DVar xv = g.leaf(x);
    auto leaves = make_leaves(g, f, false);
    auto stats = f.stats;
    bl::BlockInputs<double> in;
    in.params = &leaves;
    in.stats = &stats;
    in.scheme = &f.scheme;
    in.mode = bl::Mode::kEval;
    in.ablation = ab;
    bl::BlockAux<double> aux;
    bl::coded_block_forward(g, xv, f.ref, in, &aux);
    return aux.energies;
  };

  const int removed = 1;
  std::vector<Mat> kept_raw;
  for (int j = 0; j < n; ++j)
    if (j != removed) kept_raw.push_back(raw[static_cast<std::size_t>(j)]);

  bl::BranchAblation ab;
  ab.keep = {1, 0, 1, 1};

  SUBCASE("zero before normalization keeps the full denominator count") {
    ab.convention = bl::RemovalConvention::kZeroBeforeNorm;
    const Tensor<double> e = run(&ab);
    const auto expect = bl::energy_normalize(kept_raw, bl::kEnergyEps, n);
    for (std::int64_t s = 0; s < b; ++s) {
      CHECK(e.data[static_cast<std::size_t>(s * n + removed)] == doctest::Approx(0.0));
      int col = 0;
      for (int j = 0; j < n; ++j) {
        if (j == removed) continue;
        CHECK(e.data[static_cast<std::size_t>(s * n + j)] ==
              doctest::Approx(expect.energies[static_cast<std::size_t>(s)][static_cast<std::size_t>(col)]).epsilon(1e-9));
        ++col;
      }
    }
  }

  SUBCASE("exclusion averages over the kept branches only") {
    ab.convention = bl::RemovalConvention::kExcludeFromBoth;
    const Tensor<double> e = run(&ab);
    const auto expect = bl::energy_normalize(kept_raw, bl::kEnergyEps, n - 1);
    for (std::int64_t s = 0; s < b; ++s) {
      double sum = 0.0;
      int col = 0;
      for (int j = 0; j < n; ++j) {
        if (j == removed) continue;
        const double got = e.data[static_cast<std::size_t>(s * n + j)];
        CHECK(got == doctest::Approx(expect.energies[static_cast<std::size_t>(s)][static_cast<std::size_t>(col)]).epsilon(1e-9));
        sum += got;
        ++col;
      }
      // Kept energies still sum to the kept count under exclusion.
      CHECK(sum == doctest::Approx(static_cast<double>(n - 1)).epsilon(1e-5));
    }
  }

  SUBCASE("the two conventions disagree on retained branches") {
    ab.convention = bl::RemovalConvention::kZeroBeforeNorm;
    const Tensor<double> ez = run(&ab);
    ab.convention = bl::RemovalConvention::kExcludeFromBoth;
    const Tensor<double> ex = run(&ab);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < ez.data.size(); ++i)
      max_diff = std::max(max_diff, std::abs(ez.data[i] - ex.data[i]));
    CHECK(max_diff > 1e-3);
  }
}

TEST_CASE("per-sample energies sum to the branch count across random blocks") {
  Rng rng(123);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(5));       // 2..6
    const int n_act = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - 1)));
    const int k = 2 + static_cast<int>(rng.uniform_int(3));
    if (cb::binomial(n, n_act) < static_cast<std::uint64_t>(k)) continue;
    Fixture f;
    try {
      f = make_block(false, 4, 5, 8, n, n_act, 1, k, 1000 + static_cast<std::uint64_t>(trial));
    } catch (const cb::InfeasibleError&) {
      continue;
    }
    Tensor<double> x = random_input(f, 4, 0, rng);
    Graph<double> g;
    DVar xv = g.leaf(x);
    auto leaves = make_leaves(g, f, false);
    auto stats = f.stats;
    bl::BlockInputs<double> in;
    in.params = &leaves;
    in.stats = &stats;
    in.scheme = &f.scheme;
    in.mode = bl::Mode::kEval;
    bl::BlockAux<double> aux;
    bl::coded_block_forward(g, xv, f.ref, in, &aux);
    for (std::int64_t s = 0; s < 4; ++s) {
      double sum = 0.0;
      for (int j = 0; j < n; ++j) sum += aux.energies.data[static_cast<std::size_t>(s * n + j)];
      CHECK(sum == doctest::Approx(static_cast<double>(n)).epsilon(1e-5));
    }
  }
}

TEST_CASE("spatial coded block: shapes, stride, and the energy identity") {
  Fixture f = make_block(true, 3, 8, 2, 4, 2, 2, 4, 31);
  Rng rng(4);
  Tensor<double> x = random_input(f, 2, 6, rng);
  Graph<double> g;
  DVar xv = g.leaf(x);
  auto leaves = make_leaves(g, f, false);
  auto stats = f.stats;
  bl::BlockInputs<double> in;
  in.params = &leaves;
  in.stats = &stats;
  in.scheme = &f.scheme;
  in.mode = bl::Mode::kEval;
  bl::BlockAux<double> aux;
  DVar y = bl::coded_block_forward(g, xv, f.ref, in, &aux);
  const Tensor<double>& vy = g.value(y);
  REQUIRE(vy.shape == std::vector<std::int64_t>{2, 8, 3, 3});
  for (std::int64_t s = 0; s < 2; ++s) {
    double sum = 0.0;
    for (int j = 0; j < 4; ++j) sum += aux.energies.data[static_cast<std::size_t>(s * 4 + j)];
    CHECK(sum == doctest::Approx(4.0).epsilon(1e-5));
  }
}

TEST_CASE("uncoded blocks skip normalization, loss, and drop") {
  Fixture f = make_block(false, 5, 5, 3, 3, 3, 1, 4, 41);
  REQUIRE(!f.ref.coded());
  Rng rng(6);
  Tensor<double> x = random_input(f, 4, 0, rng);
  Graph<double> g;
  DVar xv = g.leaf(x);
  auto leaves = make_leaves(g, f, false);
  auto stats = f.stats;
  bl::BlockInputs<double> in;
  in.params = &leaves;
  in.stats = &stats;
  in.mode = bl::Mode::kTrain;  // no labels needed for r == 1
  bl::BlockAux<double> aux;
  DVar y = bl::coded_block_forward(g, xv, f.ref, in, &aux);
  CHECK(!aux.loss.valid());
  CHECK(aux.energies.numel() == 0);

  // Mirror: plain branch sum, batch norm, identity skip, ReLU.
  std::vector<Mat> raw;
  for (const auto& br : f.ref.branches) raw.push_back(dense_branch_train(x, f, br));
  Mat summed = Mat::zeros({4, 5});
  for (const auto& r : raw) summed = mat_add(summed, r);
  Mat expect = mat_relu(mat_add(
      mat_bn_train(summed, f.params[static_cast<std::size_t>(f.ref.bn3.gamma)],
                   f.params[static_cast<std::size_t>(f.ref.bn3.beta)]),
      x));
  const Tensor<double>& vy = g.value(y);
  for (std::size_t i = 0; i < expect.data.size(); ++i)
    CHECK(vy.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-9));
}

TEST_CASE("train forward with p_drop = 0 equals the drop-free train forward") {
  Fixture f = make_block(false, 4, 6, 3, 4, 2, 1, 4, 61);
  Rng rng(8);
  Tensor<double> x = random_input(f, 5, 0, rng);
  std::vector<int> labels = {0, 1, 2, 3, 1};

  auto run = [&](bool with_cache) {
    Graph<double> g;
    DVar xv = g.leaf(x);
    auto leaves = make_leaves(g, f, false);
    auto stats = f.stats;
    Rng drop_rng(99);
    bl::DropMaskCache cache(0.0, &drop_rng);
    bl::BlockInputs<double> in;
    in.params = &leaves;
    in.stats = &stats;
    in.scheme = &f.scheme;
    in.mode = bl::Mode::kTrain;
    in.labels = &labels;
    in.drop = with_cache ? &cache : nullptr;
    bl::BlockAux<double> aux;
    DVar y = bl::coded_block_forward(g, xv, f.ref, in, &aux);
    return g.value(y);
  };

  const Tensor<double> with = run(true);
  const Tensor<double> without = run(false);
  REQUIRE(with.same_shape(without));
  for (std::size_t i = 0; i < with.data.size(); ++i)
    CHECK(with.data[i] == without.data[i]);

  SUBCASE("eval forwards do not mutate running statistics") {
    Graph<double> g;
    DVar xv = g.leaf(x);
    auto leaves = make_leaves(g, f, false);
    auto stats = f.stats;
    bl::BlockInputs<double> in;
    in.params = &leaves;
    in.stats = &stats;
    in.scheme = &f.scheme;
    in.mode = bl::Mode::kEval;
    bl::coded_block_forward<double>(g, xv, f.ref, in, nullptr);
    for (std::size_t i = 0; i < stats.size(); ++i) {
      CHECK(stats[i].running_mean.data == f.stats[i].running_mean.data);
      CHECK(stats[i].running_var.data == f.stats[i].running_var.data);
    }
  }
}

TEST_CASE("missing labels or bad bindings are rejected") {
  Fixture f = make_block(false, 4, 4, 2, 4, 2, 1, 4, 71);
  Rng rng(10);
  Tensor<double> x = random_input(f, 3, 0, rng);
  Graph<double> g;
  DVar xv = g.leaf(x);
  auto leaves = make_leaves(g, f, false);
  auto stats = f.stats;
  bl::BlockInputs<double> in;
  in.params = &leaves;
  in.stats = &stats;
  in.scheme = &f.scheme;
  in.mode = bl::Mode::kTrain;
  CHECK_THROWS(bl::coded_block_forward<double>(g, xv, f.ref, in, nullptr));  // no labels

  std::vector<int> labels = {0, 1};  // wrong batch size
  in.labels = &labels;
  CHECK_THROWS(bl::coded_block_forward<double>(g, xv, f.ref, in, nullptr));

  std::vector<int> ok = {0, 1, 2};
  in.labels = &ok;
  in.scheme = nullptr;  // coded block without a scheme binding
  CHECK_THROWS(bl::coded_block_forward<double>(g, xv, f.ref, in, nullptr));

  in.scheme = &f.scheme;
  in.loss_exponent = 3;
  CHECK_THROWS(bl::coded_block_forward<double>(g, xv, f.ref, in, nullptr));
}

TEST_CASE("block gradients pass the finite-difference check") {
  using codednet::autodiff::grad_check;

  auto check_block = [](bool spatial, double tol) {
    Fixture f = make_block(spatial, 3, 4, 2, spatial ? 2 : 4, spatial ? 1 : 2, spatial ? 2 : 1,
                           spatial ? 2 : 4, 202);
    Rng rng(14);
    Tensor<double> x = random_input(f, 3, 4, rng);
    std::vector<int> labels = {0, 1, spatial ? 0 : 3};

    std::vector<Tensor<double>> inputs;
    inputs.push_back(x);
    for (const auto& p : f.params) inputs.push_back(p);

    const auto res = grad_check(
        [&](Graph<double>& g, const std::vector<DVar>& vars) {
          std::vector<DVar> leaves(vars.begin() + 1, vars.end());
          auto stats = f.stats;  // fresh running stats per probe
          bl::BlockInputs<double> in;
          in.params = &leaves;
          in.stats = &stats;
          in.scheme = &f.scheme;
          in.mode = bl::Mode::kTrain;
          in.labels = &labels;
          bl::BlockAux<double> aux;
          DVar y = bl::coded_block_forward(g, vars[0], f.ref, in, &aux);
          return g.add(g.mean_all(y), g.mean_all(aux.loss));
        },
        inputs);
    INFO("max rel err " << res.max_rel_err << (spatial ? " (spatial)" : " (dense)"));
    CHECK(res.max_rel_err < tol);
  };

  check_block(false, 1e-4);
  check_block(true, 1e-4);
}
