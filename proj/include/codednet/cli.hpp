#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace codednet::cli {

// Entry point behind main(): parses argv, runs one subcommand, and returns
// the process exit status. argv[0] is the program name. Unknown flags print
// usage and return 2; execution failures print a diagnostic and return 1.
int run(int argc, const char* const* argv);

// Test convenience: same contract, arguments given without the program name.
int run(const std::vector<std::string>& args);

// One finite-difference comparison from the gradient battery.
struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t components = 0;
};

// Checks every differentiable primitive plus the fully composed coded block
// (branches -> energy normalization -> coding loss -> drop/sum) against
// central differences at `points` random points each. Deterministic in seed.
std::vector<GradCheckEntry> run_gradcheck_battery(int points, std::uint64_t seed);

}  // namespace codednet::cli
