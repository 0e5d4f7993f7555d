#ifndef COPFORGE_ORACLES_HPP_
#define COPFORGE_ORACLES_HPP_

#include <cstdint>
#include <span>
#include <vector>

#include "copforge/cop_core.hpp"

namespace copforge {

// Size bounds of the exact oracles.
inline constexpr int kMaxHeldKarpNodes = 20;
inline constexpr int kMaxGraphOracleNodes = 20;
inline constexpr int kMaxSchedulingOracleJobs = 10;
inline constexpr int kMaxRoutingOracleCustomers = 8;

// Weight grid of the knapsack DP.
inline constexpr double kKnapsackResolution = 1e-4;

// Provably optimal solution. Throws CapabilityError above the size bounds.
Solution SolveExact(const ProblemInstance& inst);

// Held-Karp over subsets with node 0 fixed as the tour start.
std::vector<int> HeldKarpTour(std::span<const Point> coords);

struct KnapsackResult {
  std::vector<int> items;  // ascending
  double value = 0.0;
  // True when some weight or the capacity was off the 1e-4 grid. Weights are
  // then rounded up and capacity down, so the answer stays feasible but may
  // fall short of the continuous optimum by the rounding slack.
  bool discretized = false;
};
KnapsackResult KnapsackDp(std::span<const double> weights, std::span<const double> values,
                          double capacity);

// Graph oracles over adjacency bitmasks (n <= 20).
std::vector<int> MaximumIndependentSet(int n, std::span<const Edge> edges);
std::vector<int> MinimumVertexCover(int n, std::span<const Edge> edges);

// DP over job subsets: the last job of a set S completes at sum_{j in S} p_j.
std::vector<int> SmtwtpExact(const ProblemInstance& inst);

// Set-partition DP with an exact per-route path DP; VRPB routes keep
// linehauls before backhauls. Returns the sequence with 0 between routes.
std::vector<int> VehicleRoutingExact(const ProblemInstance& inst);

}  // namespace copforge

#endif  // COPFORGE_ORACLES_HPP_
