#ifndef COPFORGE_HEURISTICS_HPP_
#define COPFORGE_HEURISTICS_HPP_

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "copforge/cop_core.hpp"

namespace copforge {

// Classical constructive baselines. All return feasible sequences.

std::vector<int> NearestNeighborTour(const ProblemInstance& inst, int start = 0);
// Starts from node 0; inserts the node farthest from the tour at its
// cheapest position.
std::vector<int> FarthestInsertionTour(const ProblemInstance& inst);

// Polar-angle clusters around the depot, each routed by nearest neighbour.
std::vector<int> SweepRoutes(const ProblemInstance& inst);
// Clarke-Wright parallel savings.
std::vector<int> ParallelSavingsRoutes(const ProblemInstance& inst);

// Descending value/weight ratio; ties by index.
std::vector<int> GreedyKnapsack(const ProblemInstance& inst);

// Bar-Yehuda-Even local ratio with unit weights: any edge with both
// endpoints at positive residual cost puts both endpoints in the cover.
std::vector<int> LocalRatioCover(const ProblemInstance& inst);
// Randomized edge heuristic: pick an uncovered edge uniformly, add one
// endpoint uniformly (or both when `both_endpoints`).
std::vector<int> RandomizedEdgeCover(const ProblemInstance& inst, uint64_t seed,
                                     bool both_endpoints = false);

// Earliest due date first; ties by index.
std::vector<int> EarliestDueDate(const ProblemInstance& inst);

// Names: nearest_neighbor, farthest_insertion, sweep, parallel_savings,
// greedy_kp, mvc_approx, reh, edd.
std::vector<std::string> ApplicableHeuristics(ProblemKind kind);

// Throws InvalidArgument for unknown names or kind mismatches.
Solution RunHeuristic(const ProblemInstance& inst, std::string_view name,
                      uint64_t seed = 0);

}  // namespace copforge

#endif  // COPFORGE_HEURISTICS_HPP_
