#include "copforge/heuristics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "copforge/errors.hpp"
#include "copforge/rng.hpp"

namespace copforge {

namespace {

void RequireKind(const ProblemInstance& inst, std::string_view name,
                 std::initializer_list<ProblemKind> kinds) {
  if (std::find(kinds.begin(), kinds.end(), inst.kind) == kinds.end()) {
    throw InvalidArgument("heuristic " + std::string(name) + " does not apply to " +
                          std::string(KindName(inst.kind)));
  }
}

// Nearest-neighbour path over `nodes` starting from `from`.
std::vector<int> NearestNeighborPath(const ProblemInstance& inst, int from,
                                     std::vector<int> nodes) {
  std::vector<int> path;
  int current = from;
  while (!nodes.empty()) {
    size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < nodes.size(); ++k) {
      const double d = Distance(inst.coords[current], inst.coords[nodes[k]]);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    current = nodes[best];
    path.push_back(current);
    nodes.erase(nodes.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return path;
}

}  // namespace

std::vector<int> NearestNeighborTour(const ProblemInstance& inst, int start) {
  RequireKind(inst, "nearest_neighbor", {ProblemKind::kTsp});
  std::vector<int> rest;
  for (int i = 0; i < inst.n; ++i) {
    if (i != start) rest.push_back(i);
  }
  std::vector<int> tour{start};
  const auto path = NearestNeighborPath(inst, start, rest);
  tour.insert(tour.end(), path.begin(), path.end());
  return tour;
}

std::vector<int> FarthestInsertionTour(const ProblemInstance& inst) {
  RequireKind(inst, "farthest_insertion", {ProblemKind::kTsp});
  const int n = inst.n;
  const auto d = [&](int a, int b) { return Distance(inst.coords[a], inst.coords[b]); };
  std::vector<int> tour{0};
  std::vector<uint8_t> in_tour(n, 0);
  in_tour[0] = 1;
  std::vector<double> to_tour(n);
  for (int i = 0; i < n; ++i) to_tour[i] = d(0, i);
  for (int added = 1; added < n; ++added) {
    int next = -1;
    for (int i = 0; i < n; ++i) {
      if (!in_tour[i] && (next < 0 || to_tour[i] > to_tour[next])) next = i;
    }
    size_t pos = tour.size();
    double best = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < tour.size(); ++k) {
      const int a = tour[k];
      const int b = tour[(k + 1) % tour.size()];
      const double delta = d(a, next) + d(next, b) - (tour.size() > 1 ? d(a, b) : 0.0);
      if (delta < best) {
        best = delta;
        pos = k + 1;
      }
    }
    tour.insert(tour.begin() + static_cast<std::ptrdiff_t>(pos), next);
    in_tour[next] = 1;
    for (int i = 0; i < n; ++i) to_tour[i] = std::min(to_tour[i], d(next, i));
  }
  return tour;
}

std::vector<int> SweepRoutes(const ProblemInstance& inst) {
  RequireKind(inst, "sweep", {ProblemKind::kCvrp});
  const Point depot = inst.coords[0];
  std::vector<int> order(inst.n);
  std::iota(order.begin(), order.end(), 1);
  std::vector<double> angle(inst.n + 1, 0.0);
  for (int i = 1; i <= inst.n; ++i) {
    angle[i] = std::atan2(inst.coords[i].y - depot.y, inst.coords[i].x - depot.x);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return angle[a] < angle[b]; });
  std::vector<int> seq;
  std::vector<int> cluster;
  double load = 0.0;
  const auto flush = [&]() {
    if (cluster.empty()) return;
    if (!seq.empty()) seq.push_back(0);
    const auto route = NearestNeighborPath(inst, 0, cluster);
    seq.insert(seq.end(), route.begin(), route.end());
    cluster.clear();
    load = 0.0;
  };
  for (int i : order) {
    const double d = inst.demands[i - 1];
    if (load + d > inst.capacity + kCapacityTolerance) flush();
    cluster.push_back(i);
    load += d;
  }
  flush();
  return seq;
}

std::vector<int> ParallelSavingsRoutes(const ProblemInstance& inst) {
  RequireKind(inst, "parallel_savings", {ProblemKind::kCvrp});
  const int n = inst.n;
  const auto d = [&](int a, int b) { return Distance(inst.coords[a], inst.coords[b]); };
  struct Saving {
    double value;
    int i;
    int j;
  };
  std::vector<Saving> savings;
  for (int i = 1; i <= n; ++i) {
    for (int j = i + 1; j <= n; ++j) {
      savings.push_back({d(0, i) + d(0, j) - d(i, j), i, j});
    }
  }
  std::stable_sort(savings.begin(), savings.end(),
                   [](const Saving& a, const Saving& b) { return a.value > b.value; });

  std::vector<std::vector<int>> routes(n + 1);
  std::vector<int> route_of(n + 1);
  std::vector<double> load(n + 1);
  for (int i = 1; i <= n; ++i) {
    routes[i] = {i};
    route_of[i] = i;
    load[i] = inst.demands[i - 1];
  }
  for (const Saving& s : savings) {
    if (s.value <= 0.0) break;
    const int ra = route_of[s.i];
    const int rb = route_of[s.j];
    if (ra == rb || load[ra] + load[rb] > inst.capacity + kCapacityTolerance) continue;
    auto& a = routes[ra];
    auto& b = routes[rb];
    const bool i_end = a.back() == s.i;
    const bool i_front = a.front() == s.i;
    const bool j_front = b.front() == s.j;
    const bool j_end = b.back() == s.j;
    if (!(i_end || i_front) || !(j_front || j_end)) continue;
    if (!i_end) std::reverse(a.begin(), a.end());
    if (!j_front) std::reverse(b.begin(), b.end());
    a.insert(a.end(), b.begin(), b.end());
    load[ra] += load[rb];
    for (int c : b) route_of[c] = ra;
    b.clear();
  }
  std::vector<int> seq;
  for (int r = 1; r <= n; ++r) {
    if (routes[r].empty()) continue;
    if (!seq.empty()) seq.push_back(0);
    seq.insert(seq.end(), routes[r].begin(), routes[r].end());
  }
  return seq;
}

std::vector<int> GreedyKnapsack(const ProblemInstance& inst) {
  RequireKind(inst, "greedy_kp", {ProblemKind::kKp});
  std::vector<int> order(inst.n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return inst.values[a] * inst.weights[b] > inst.values[b] * inst.weights[a];
  });
  std::vector<int> chosen;
  double remaining = inst.capacity;
  for (int i : order) {
    if (inst.weights[i] <= remaining + kCapacityTolerance) {
      chosen.push_back(i);
      remaining -= inst.weights[i];
    }
  }
  return chosen;
}

std::vector<int> LocalRatioCover(const ProblemInstance& inst) {
  RequireKind(inst, "mvc_approx", {ProblemKind::kMvcp});
  std::vector<double> residual(inst.n, 1.0);
  std::vector<int> cover;
  for (const Edge& e : inst.edges) {
    const double eps = std::min(residual[e.u], residual[e.v]);
    if (eps <= 0.0) continue;
    for (int v : {e.u, e.v}) {
      residual[v] -= eps;
      if (residual[v] <= 0.0) cover.push_back(v);
    }
  }
  std::sort(cover.begin(), cover.end());
  return cover;
}

std::vector<int> RandomizedEdgeCover(const ProblemInstance& inst, uint64_t seed,
                                     bool both_endpoints) {
  RequireKind(inst, "reh", {ProblemKind::kMvcp});
  CountedRng rng(SubSeed(seed, "reh"));
  std::vector<uint8_t> in_cover(inst.n, 0);
  std::vector<int> cover;
  std::vector<Edge> uncovered = inst.edges;
  while (!uncovered.empty()) {
    const Edge e = uncovered[rng.Below(uncovered.size())];
    std::vector<int> added;
    if (both_endpoints) {
      added = {e.u, e.v};
    } else {
      added = {rng.Below(2) == 0 ? e.u : e.v};
    }
    for (int v : added) {
      if (!in_cover[v]) {
        in_cover[v] = 1;
        cover.push_back(v);
      }
    }
    std::erase_if(uncovered, [&](const Edge& x) { return in_cover[x.u] || in_cover[x.v]; });
  }
  return cover;
}

std::vector<int> EarliestDueDate(const ProblemInstance& inst) {
  RequireKind(inst, "edd", {ProblemKind::kSmtwtp});
  std::vector<int> order(inst.n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return inst.due_dates[a] < inst.due_dates[b]; });
  return order;
}

std::vector<std::string> ApplicableHeuristics(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::kTsp: return {"nearest_neighbor", "farthest_insertion"};
    case ProblemKind::kCvrp: return {"sweep", "parallel_savings"};
    case ProblemKind::kKp: return {"greedy_kp"};
    case ProblemKind::kMvcp: return {"mvc_approx", "reh"};
    case ProblemKind::kSmtwtp: return {"edd"};
    default: return {};
  }
}

Solution RunHeuristic(const ProblemInstance& inst, std::string_view name, uint64_t seed) {
  Solution sol;
  sol.kind = inst.kind;
  if (name == "nearest_neighbor") {
    sol.sequence = NearestNeighborTour(inst);
  } else if (name == "farthest_insertion") {
    sol.sequence = FarthestInsertionTour(inst);
  } else if (name == "sweep") {
    sol.sequence = SweepRoutes(inst);
  } else if (name == "parallel_savings") {
    sol.sequence = ParallelSavingsRoutes(inst);
  } else if (name == "greedy_kp") {
    sol.sequence = GreedyKnapsack(inst);
  } else if (name == "mvc_approx") {
    sol.sequence = LocalRatioCover(inst);
  } else if (name == "reh") {
    sol.sequence = RandomizedEdgeCover(inst, seed);
  } else if (name == "edd") {
    sol.sequence = EarliestDueDate(inst);
  } else {
    throw InvalidArgument("unknown heuristic '" + std::string(name) + "'");
  }
  sol.objective = Evaluate(inst, sol.sequence);
  return sol;
}

}  // namespace copforge
