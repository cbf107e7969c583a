#include "codednet/codebook.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace codednet::codebook {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Next integer with the same popcount (Gosper's hack). Callers bound the
// iteration count by C(N, N_act), so no upper-limit check is needed here.
std::uint64_t next_same_weight(std::uint64_t v) {
  std::uint64_t c = v & (~v + 1);
  std::uint64_t r = v + c;
  return (((r ^ v) >> 2) / c) | r;
}

}  // namespace

int Codeword::weight() const { return std::popcount(bits); }

bool Codeword::get(int branch) const {
  return (bits >> (length - 1 - branch)) & 1u;
}

std::string Codeword::to_string() const {
  std::string s(static_cast<std::size_t>(length), '0');
  for (int i = 0; i < length; ++i)
    if (get(i)) s[static_cast<std::size_t>(i)] = '1';
  return s;
}

Codeword Codeword::from_string(const std::string& s) {
  require(!s.empty() && s.size() <= 64, "codeword string must have 1..64 digits");
  Codeword w;
  w.length = static_cast<int>(s.size());
  for (char ch : s) {
    require(ch == '0' || ch == '1', "codeword string must be binary");
    w.bits = (w.bits << 1) | static_cast<std::uint64_t>(ch - '0');
  }
  return w;
}

int hamming_distance(const Codeword& a, const Codeword& b) {
  require(a.length == b.length, "hamming_distance: length mismatch");
  return std::popcount(a.bits ^ b.bits);
}

void CodingScheme::refresh_metadata() {
  column_sums.assign(static_cast<std::size_t>(N), 0);
  for (const Codeword& w : codewords)
    for (int i = 0; i < N; ++i)
      if (w.get(i)) ++column_sums[static_cast<std::size_t>(i)];
  min_distance = N;
  for (std::size_t a = 0; a < codewords.size(); ++a)
    for (std::size_t b = a + 1; b < codewords.size(); ++b)
      min_distance = std::min(min_distance, hamming_distance(codewords[a], codewords[b]));
}

std::uint64_t binomial(int n, int k) {
  require(n >= 0 && n <= 64 && k >= 0 && k <= n, "binomial: need 0 <= k <= n <= 64");
  k = std::min(k, n - k);
  // Multiply-then-divide stays exact: after processing i factors the
  // accumulator equals C(n, i). Max intermediate C(64,32)*64 fits in 128 bits.
  unsigned __int128 acc = 1;
  for (int i = 1; i <= k; ++i) {
    acc = acc * static_cast<unsigned>(n - k + i) / static_cast<unsigned>(i);
  }
  return static_cast<std::uint64_t>(acc);
}

void for_each_constant_weight(int N, int N_act,
                              const std::function<bool(std::uint64_t)>& fn) {
  require(N >= 1 && N <= 64 && N_act >= 1 && N_act <= N,
          "enumeration: need 1 <= N_act <= N <= 64");
  std::uint64_t total = binomial(N, N_act);
  std::uint64_t v = (N_act == 64) ? ~0ull : ((1ull << N_act) - 1);
  for (std::uint64_t i = 0; i < total; ++i) {
    if (!fn(v)) return;
    if (i + 1 < total) v = next_same_weight(v);
  }
}

std::vector<Codeword> enumerate_constant_weight(int N, int N_act,
                                                std::uint64_t cap) {
  std::uint64_t total = binomial(N, N_act);
  if (total > cap) {
    throw std::length_error(
        "enumerate_constant_weight: C(" + std::to_string(N) + "," +
        std::to_string(N_act) + ") = " + std::to_string(total) +
        " exceeds cap " + std::to_string(cap) +
        "; use the streaming enumeration");
  }
  std::vector<Codeword> out;
  out.reserve(total);
  for_each_constant_weight(N, N_act, [&](std::uint64_t bits) {
    out.push_back(Codeword{bits, N});
    return true;
  });
  return out;
}

FeasibilityReport check_feasibility(int K, int N, int N_act) {
  require(K >= 1, "check_feasibility: K must be positive");
  require(N >= 1 && N <= 64 && N_act >= 1 && N_act <= N,
          "check_feasibility: need 1 <= N_act <= N <= 64");
  FeasibilityReport rep;
  rep.rk_integral = (static_cast<std::int64_t>(N_act) * K) % N == 0;
  rep.combinations = binomial(N, N_act);
  rep.enough_codewords = rep.combinations >= static_cast<std::uint64_t>(K);
  if (rep.rk_integral)
    rep.s_opt = static_cast<int>(static_cast<std::int64_t>(N_act) * K / N);
  return rep;
}

std::vector<Codeword> greedy_select(const std::vector<Codeword>& sorted_candidates,
                                    int H_min) {
  std::vector<Codeword> picked;
  for (const Codeword& w : sorted_candidates) {
    bool ok = true;
    for (const Codeword& p : picked) {
      if (hamming_distance(w, p) < H_min) {
        ok = false;
        break;
      }
    }
    if (ok) picked.push_back(w);
  }
  return picked;
}

int balance_score(const CodingScheme& scheme) {
  require(scheme.N >= 1, "balance_score: scheme has no columns");
  std::vector<int> cols(static_cast<std::size_t>(scheme.N), 0);
  for (const Codeword& w : scheme.codewords)
    for (int i = 0; i < scheme.N; ++i)
      if (w.get(i)) ++cols[static_cast<std::size_t>(i)];
  auto [lo, hi] = std::minmax_element(cols.begin(), cols.end());
  return *hi - *lo;
}

namespace {

struct SwapSearch {
  int N;
  int K;
  std::uint64_t budget;
  std::uint64_t evals = 0;

  std::vector<std::uint64_t> members;
  std::unordered_set<std::uint64_t> member_set;
  std::vector<int> cols;
  int score = 0;
  long long sumsq = 0;

  explicit SwapSearch(int n, int k, std::uint64_t b)
      : N(n), K(k), budget(b), cols(static_cast<std::size_t>(n), 0) {}

  int bit(std::uint64_t w, int i) const {
    return static_cast<int>((w >> (N - 1 - i)) & 1u);
  }

  void recompute_objective() {
    int lo = std::numeric_limits<int>::max(), hi = 0;
    sumsq = 0;
    for (int c : cols) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
      sumsq += static_cast<long long>(c) * c;
    }
    score = hi - lo;
  }

  // Greedy construction: each step adds the candidate minimising the running
  // max column sum, ties broken by lowest integer value (candidates arrive
  // in ascending order, so first-strict-improvement implements the tiebreak).
  void construct(const std::vector<Codeword>& G) {
    std::unordered_set<std::uint64_t> chosen;
    for (int step = 0; step < K; ++step) {
      int best_max = std::numeric_limits<int>::max();
      std::uint64_t best = 0;
      for (const Codeword& w : G) {
        if (chosen.count(w.bits)) continue;
        int m = 0;
        for (int i = 0; i < N; ++i)
          m = std::max(m, cols[static_cast<std::size_t>(i)] + bit(w.bits, i));
        if (m < best_max) {
          best_max = m;
          best = w.bits;
        }
      }
      chosen.insert(best);
      members.push_back(best);
      for (int i = 0; i < N; ++i)
        cols[static_cast<std::size_t>(i)] += bit(best, i);
    }
    member_set = std::move(chosen);
    recompute_objective();
  }

  // Objective delta of replacing members[mi] with w, without mutating state.
  std::pair<int, long long> objective_after(std::size_t mi, std::uint64_t w) const {
    std::uint64_t old = members[mi];
    int lo = std::numeric_limits<int>::max(), hi = 0;
    long long sq = 0;
    for (int i = 0; i < N; ++i) {
      int c = cols[static_cast<std::size_t>(i)] - bit(old, i) + bit(w, i);
      lo = std::min(lo, c);
      hi = std::max(hi, c);
      sq += static_cast<long long>(c) * c;
    }
    return {hi - lo, sq};
  }

  void apply_swap(std::size_t mi, std::uint64_t w) {
    std::uint64_t old = members[mi];
    for (int i = 0; i < N; ++i)
      cols[static_cast<std::size_t>(i)] += bit(w, i) - bit(old, i);
    member_set.erase(old);
    member_set.insert(w);
    members[mi] = w;
    recompute_objective();
  }

  bool member(std::uint64_t w) const { return member_set.count(w) != 0; }

  // Candidate keeps rule B when it sits at distance >= h_min from every
  // member other than the one being replaced.
  bool feasible(std::size_t mi, std::uint64_t w, int h_min) const {
    for (std::size_t j = 0; j < members.size(); ++j) {
      if (j == mi) continue;
      if (std::popcount(members[j] ^ w) < h_min) return false;
    }
    return true;
  }

  // Words ejected by recent kicks; barred from re-entry for a while.
  std::vector<std::uint64_t> tabu;
  std::size_t tabu_next = 0;
  static constexpr std::size_t kTabuSize = 16;

  bool is_tabu(std::uint64_t w) const {
    return std::find(tabu.begin(), tabu.end(), w) != tabu.end();
  }

  void push_tabu(std::uint64_t w) {
    if (tabu.size() < kTabuSize) {
      tabu.push_back(w);
    } else {
      tabu[tabu_next] = w;
      tabu_next = (tabu_next + 1) % kTabuSize;
    }
  }

  // One first-improvement sweep: scan members in index order and candidates
  // in pool order, accept the first strict sumsq improvement. Returns true
  // if a swap was applied. h_min == 0 skips feasibility checks (pool already
  // pairwise-compatible, e.g. G itself).
  template <typename Pool>
  bool sweep(const Pool& pool_for_each, int h_min) {
    for (std::size_t mi = 0; mi < members.size(); ++mi) {
      bool accepted = false;
      pool_for_each([&](std::uint64_t w) {
        if (evals >= budget) return false;
        if (member(w) || is_tabu(w)) return true;
        if (h_min > 0 && !feasible(mi, w, h_min)) return true;
        ++evals;
        auto [s, sq] = objective_after(mi, w);
        // The column-sum total is fixed (K * N_act), so driving the sum of
        // squared column sums down pushes the spread to its optimum while
        // accepting rebalancing moves a (score, sumsq) rule would reject;
        // equal-sumsq moves that tighten the spread are also taken.
        if (sq < sumsq || (sq == sumsq && s < score)) {
          apply_swap(mi, w);
          accepted = true;
          return false;
        }
        return true;
      });
      if (accepted) return true;
      if (evals >= budget) return false;
    }
    return false;
  }

  // Escape move for a stalled descent: among swaps that take a member out
  // of the currently fullest column (and do not feed that column), apply
  // the one with the best (sumsq, score) outcome even if it is worse than
  // the current state. The ejected word becomes tabu. Returns false when no
  // such swap exists.
  template <typename Pool>
  bool kick(const Pool& pool_for_each, int h_min) {
    int c_hi = 0;
    for (int c = 1; c < N; ++c)
      if (cols[static_cast<std::size_t>(c)] > cols[static_cast<std::size_t>(c_hi)])
        c_hi = c;
    bool found = false;
    long long best_sq = 0;
    int best_s = 0;
    std::size_t best_mi = 0;
    std::uint64_t best_w = 0;
    for (std::size_t mi = 0; mi < members.size(); ++mi) {
      if (!bit(members[mi], c_hi)) continue;
      pool_for_each([&](std::uint64_t w) {
        if (evals >= budget) return false;
        if (bit(w, c_hi) || member(w) || is_tabu(w)) return true;
        if (h_min > 0 && !feasible(mi, w, h_min)) return true;
        ++evals;
        auto [s, sq] = objective_after(mi, w);
        if (!found || sq < best_sq || (sq == best_sq && s < best_s)) {
          found = true;
          best_sq = sq;
          best_s = s;
          best_mi = mi;
          best_w = w;
        }
        return true;
      });
      if (evals >= budget) break;
    }
    if (!found) return false;
    push_tabu(members[best_mi]);
    apply_swap(best_mi, best_w);
    return true;
  }
};

}  // namespace

CodingScheme search_scheme(const std::vector<Codeword>& G, int K, int S_opt,
                           const SearchOptions& opts) {
  require(!G.empty(), "search_scheme: empty candidate set");
  if (static_cast<int>(G.size()) < K) {
    throw std::invalid_argument(
        "search_scheme: only " + std::to_string(G.size()) +
        " candidates for K = " + std::to_string(K) +
        "; lower H_min or widen the code");
  }
  const int N = G.front().length;
  SwapSearch st(N, K, opts.budget);
  st.construct(G);

  auto g_pool = [&](const std::function<bool(std::uint64_t)>& fn) {
    for (const Codeword& w : G)
      if (!fn(w.bits)) return;
  };

  // Phase 1: swaps within G. Rule B holds for free (G is pairwise >= H_min),
  // so each sweep costs at most |G| * K cheap evaluations.
  while (st.score > 0 && st.evals < st.budget) {
    if (!st.sweep(g_pool, /*h_min=*/0)) break;
  }

  // Phase 2: G can be too small to contain a balanced K-subset (|G| may
  // equal K). Widen the pool to the full enumeration, checking rule B per
  // candidate; only feasible candidates spend budget. Descents that stall
  // above score 0 are restarted by a "kick": the least-worsening swap that
  // drains the currently fullest column, with a tabu ring on recently
  // ejected words to prevent immediate reversal.
  if (opts.widen_h_min > 0) {
    const int N_act = G.front().weight();
    auto full_pool = [&](const std::function<bool(std::uint64_t)>& fn) {
      for_each_constant_weight(N, N_act, fn);
    };
    constexpr int kMaxKicks = 200;
    for (int kick = 0; st.score > 0 && st.evals < st.budget; ++kick) {
      while (st.score > 0 && st.evals < st.budget) {
        if (!st.sweep(full_pool, opts.widen_h_min)) break;
      }
      if (st.score == 0 || st.evals >= st.budget || kick >= kMaxKicks) break;
      if (!st.kick(full_pool, opts.widen_h_min)) break;
    }
  }

  (void)S_opt;  // implied target; score 0 is equivalent when r*K is integral
  CodingScheme scheme;
  scheme.N = N;
  scheme.N_act = G.front().weight();
  scheme.codewords.reserve(static_cast<std::size_t>(K));
  std::vector<std::uint64_t> sorted = st.members;
  std::sort(sorted.begin(), sorted.end());
  for (std::uint64_t bits : sorted) scheme.codewords.push_back(Codeword{bits, N});
  scheme.refresh_metadata();
  return scheme;
}

CodingScheme generate_scheme(int K, int N, int N_act, int H_min,
                             const GenerateOptions& opts) {
  require(H_min >= 0 && H_min <= N, "generate_scheme: need 0 <= H_min <= N");
  FeasibilityReport rep = check_feasibility(K, N, N_act);
  if (!rep.enough_codewords) {
    throw InfeasibleError(
        "generate_scheme: C(" + std::to_string(N) + "," + std::to_string(N_act) +
            ") = " + std::to_string(rep.combinations) + " < K = " + std::to_string(K),
        rep);
  }

  std::vector<Codeword> G;
  bool pool_materialised = rep.combinations <= opts.enumeration_cap;
  if (pool_materialised) {
    G = greedy_select(enumerate_constant_weight(N, N_act, opts.enumeration_cap), H_min);
  } else if (opts.allow_streaming) {
    // Stream the enumeration through the first-fit filter; equivalent to
    // materialising, but memory stays O(|G|).
    for_each_constant_weight(N, N_act, [&](std::uint64_t bits) {
      Codeword w{bits, N};
      for (const Codeword& p : G)
        if (hamming_distance(w, p) < H_min) return true;
      G.push_back(w);
      return static_cast<int>(G.size()) < K * 4;  // margin for the subset search
    });
  } else {
    enumerate_constant_weight(N, N_act, opts.enumeration_cap);  // throws with cap message
  }

  if (static_cast<int>(G.size()) < K) {
    throw InfeasibleError(
        "generate_scheme: greedy packing found only " + std::to_string(G.size()) +
            " codewords at pairwise distance >= " + std::to_string(H_min) +
            " for K = " + std::to_string(K) + "; lower H_min",
        rep);
  }

  SearchOptions sopts;
  sopts.budget = opts.budget;
  // The widened swap pool re-enumerates per sweep; that is only affordable
  // when the enumeration fits the cap.
  sopts.widen_h_min = pool_materialised ? H_min : 0;
  return search_scheme(G, K, rep.s_opt.value_or(0), sopts);
}

VerificationReport verify_scheme(const CodingScheme& scheme, int K, int N,
                                 int N_act, int H_min) {
  VerificationReport rep;

  std::unordered_set<std::uint64_t> seen;
  for (const Codeword& w : scheme.codewords) seen.insert(w.bits);
  rep.distinct.pass = scheme.K() == K && static_cast<int>(seen.size()) == K;
  rep.distinct.detail = std::to_string(seen.size()) + " distinct codewords of " +
                        std::to_string(scheme.K()) + " (expect " +
                        std::to_string(K) + ")";

  bool weights_ok = true;
  for (const Codeword& w : scheme.codewords)
    weights_ok = weights_ok && w.length == N && w.weight() == N_act;
  rep.rule_a.pass = weights_ok;
  rep.rule_a.detail = weights_ok
                          ? "every codeword has length " + std::to_string(N) +
                                " and weight " + std::to_string(N_act)
                          : "length or weight mismatch";

  rep.measured_min_distance = N;
  for (int a = 0; a < scheme.K(); ++a)
    for (int b = a + 1; b < scheme.K(); ++b)
      rep.measured_min_distance =
          std::min(rep.measured_min_distance,
                   hamming_distance(scheme.codewords[static_cast<std::size_t>(a)],
                                    scheme.codewords[static_cast<std::size_t>(b)]));
  rep.rule_b.pass = rep.measured_min_distance >= H_min;
  rep.rule_b.detail = "min pairwise distance " +
                      std::to_string(rep.measured_min_distance) + " (need >= " +
                      std::to_string(H_min) + ")";

  rep.column_sums.assign(static_cast<std::size_t>(N), 0);
  for (const Codeword& w : scheme.codewords)
    for (int i = 0; i < N; ++i)
      if (w.get(i)) ++rep.column_sums[static_cast<std::size_t>(i)];
  auto [lo, hi] = std::minmax_element(rep.column_sums.begin(), rep.column_sums.end());
  rep.measured_score = *hi - *lo;
  // "Approximately equal" column sums: a spread of 1 is the best possible
  // whenever r*K is not an integer, so treat spread <= 1 as passing.
  rep.rule_c.pass = rep.measured_score <= 1;
  rep.rule_c.detail = "column sums in [" + std::to_string(*lo) + ", " +
                      std::to_string(*hi) + "], spread " +
                      std::to_string(rep.measured_score);
  return rep;
}

void save_scheme(const CodingScheme& scheme, int H_min, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_scheme: cannot open " + path);
  out << "# N=" << scheme.N << " N_act=" << scheme.N_act << " H_min=" << H_min
      << "\n";
  for (int k = 0; k < scheme.K(); ++k)
    out << k << " " << scheme.codewords[static_cast<std::size_t>(k)].to_string()
        << "\n";
  if (!out) throw std::runtime_error("save_scheme: write failed for " + path);
}

LoadedScheme load_scheme(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_scheme: cannot open " + path);
  std::string header;
  std::getline(in, header);
  LoadedScheme out;
  int n = 0, n_act = 0, h_min = 0;
  if (std::sscanf(header.c_str(), "# N=%d N_act=%d H_min=%d", &n, &n_act,
                  &h_min) != 3) {
    throw std::runtime_error("load_scheme: bad header in " + path + ": " + header);
  }
  out.scheme.N = n;
  out.scheme.N_act = n_act;
  out.H_min = h_min;
  std::string line;
  int expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    int idx = 0;
    std::string bits;
    if (!(row >> idx >> bits))
      throw std::runtime_error("load_scheme: bad row in " + path + ": " + line);
    if (idx != expected)
      throw std::runtime_error("load_scheme: class indices must run 0..K-1; got " +
                               std::to_string(idx) + " at row " +
                               std::to_string(expected));
    Codeword w = Codeword::from_string(bits);
    if (w.length != n)
      throw std::runtime_error("load_scheme: codeword length " +
                               std::to_string(w.length) + " != N = " +
                               std::to_string(n));
    out.scheme.codewords.push_back(w);
    ++expected;
  }
  out.scheme.refresh_metadata();
  return out;
}

}  // namespace codednet::codebook
