#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace codednet::codebook {

// A constant-weight binary codeword of length N (N <= 64), stored as the
// integer obtained by reading the printed bitstring most-significant digit
// first. Branch i corresponds to printed digit i, i.e. bit (N-1-i) of the
// integer, so the sorted-by-integer order matches the sorted-string order.
struct Codeword {
  std::uint64_t bits = 0;
  int length = 0;

  int weight() const;
  bool get(int branch) const;
  std::string to_string() const;
  static Codeword from_string(const std::string& s);

  friend bool operator==(const Codeword&, const Codeword&) = default;
  friend auto operator<=>(const Codeword& a, const Codeword& b) {
    return a.bits <=> b.bits;
  }
};

// Number of differing digits. Throws std::invalid_argument on length mismatch.
int hamming_distance(const Codeword& a, const Codeword& b);

// One scheme: K classes mapped to distinct codewords of equal length and
// weight. min_distance/column_sums are cached metadata; verify_scheme and
// refresh_metadata recompute them from the raw bits.
struct CodingScheme {
  std::vector<Codeword> codewords;  // indexed by class
  int N = 0;
  int N_act = 0;
  int min_distance = 0;
  std::vector<int> column_sums;

  int K() const { return static_cast<int>(codewords.size()); }
  double ratio() const { return static_cast<double>(N_act) / N; }
  void refresh_metadata();
};

struct FeasibilityReport {
  bool rk_integral = false;
  std::uint64_t combinations = 0;  // C(N, N_act)
  bool enough_codewords = false;   // C(N, N_act) >= K
  std::optional<int> s_opt;        // r*K, present iff integral
};

class InfeasibleError : public std::runtime_error {
 public:
  InfeasibleError(const std::string& msg, FeasibilityReport report)
      : std::runtime_error(msg), report(std::move(report)) {}
  FeasibilityReport report;
};

inline constexpr std::uint64_t kDefaultEnumerationCap = 20'000'000;
inline constexpr std::uint64_t kDefaultSearchBudget = 1'000'000;

// Exact C(n, k) for n <= 64 (fits in uint64).
std::uint64_t binomial(int n, int k);

// All weight-N_act codewords of length N in ascending integer order.
// Throws if C(N, N_act) exceeds `cap`, naming the cap.
std::vector<Codeword> enumerate_constant_weight(
    int N, int N_act, std::uint64_t cap = kDefaultEnumerationCap);

// Streaming variant in the same order; `fn` returns false to stop early.
void for_each_constant_weight(int N, int N_act,
                              const std::function<bool(std::uint64_t)>& fn);

FeasibilityReport check_feasibility(int K, int N, int N_act);

// First-fit scan of a sorted candidate list: admit a word iff it is at
// distance >= H_min from every word already admitted.
std::vector<Codeword> greedy_select(const std::vector<Codeword>& sorted_candidates,
                                    int H_min);

// Max column sum minus min column sum; 0 iff every branch serves equally
// many classes.
int balance_score(const CodingScheme& scheme);

struct SearchOptions {
  std::uint64_t budget = kDefaultSearchBudget;  // scored swap evaluations
  // When > 0, a search stuck above score zero inside G widens its swap pool
  // to the full constant-weight enumeration, admitting only candidates at
  // distance >= widen_h_min from the rest of the scheme. G alone is often
  // too small to contain a perfectly balanced K-subset (it can be exactly
  // K words), so this phase is what reaches score 0 in practice.
  int widen_h_min = 0;
};

// Deterministic K-subset search: greedy construction (each step adds the
// word minimising the running max column sum, ties -> lowest integer value)
// followed by first-improvement swap local search on the lexicographic
// objective (balance score, sum of squared column sums). Early-exits on
// score 0. Throws if |G| < K.
CodingScheme search_scheme(const std::vector<Codeword>& G, int K, int S_opt,
                           const SearchOptions& opts = {});

struct GenerateOptions {
  std::uint64_t budget = kDefaultSearchBudget;
  std::uint64_t enumeration_cap = kDefaultEnumerationCap;
  // Permits C(N, N_act) beyond the cap; candidates are then streamed into
  // greedy_select instead of materialised, and the swap pool stays G-only.
  bool allow_streaming = false;
};

// enumerate -> greedy_select -> search_scheme. Output passes verify_scheme.
CodingScheme generate_scheme(int K, int N, int N_act, int H_min,
                             const GenerateOptions& opts = {});

struct RuleCheck {
  bool pass = false;
  std::string detail;
};

struct VerificationReport {
  RuleCheck distinct;  // pairwise distinct codewords, |codewords| == K
  RuleCheck rule_a;    // every weight == N_act, every length == N
  RuleCheck rule_b;    // measured min pairwise distance >= H_min
  RuleCheck rule_c;    // measured balance score <= 1
  int measured_min_distance = 0;
  int measured_score = 0;
  std::vector<int> column_sums;

  bool all_pass() const {
    return distinct.pass && rule_a.pass && rule_b.pass && rule_c.pass;
  }
};

// Recomputes every invariant from the raw bits; cached metadata is ignored.
VerificationReport verify_scheme(const CodingScheme& scheme, int K, int N,
                                 int N_act, int H_min);

// Scheme file format: header line "# N=<n> N_act=<k> H_min=<d>", then one
// line per class: "<class_index> <bitstring>", class indices 0..K-1 in
// order. Digit i of the bitstring is branch i.
void save_scheme(const CodingScheme& scheme, int H_min, const std::string& path);

struct LoadedScheme {
  CodingScheme scheme;
  int H_min = 0;
};
LoadedScheme load_scheme(const std::string& path);

}  // namespace codednet::codebook
