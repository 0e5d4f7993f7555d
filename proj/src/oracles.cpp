#include "copforge/oracles.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <string>

#include "copforge/errors.hpp"

namespace copforge {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void RequireAtMost(int n, int bound, const char* what) {
  if (n > bound) {
    throw CapabilityError(std::string(what) + " oracle supports n <= " +
                          std::to_string(bound) + ", got n = " + std::to_string(n));
  }
}

std::vector<uint32_t> AdjacencyMasks(int n, std::span<const Edge> edges) {
  std::vector<uint32_t> adj(n, 0);
  for (const Edge& e : edges) {
    adj[e.u] |= 1u << e.v;
    adj[e.v] |= 1u << e.u;
  }
  return adj;
}

std::vector<int> BitsToIndices(uint32_t mask) {
  std::vector<int> out;
  while (mask) {
    out.push_back(std::countr_zero(mask));
    mask &= mask - 1;
  }
  return out;
}

void MisBranch(uint32_t candidates, uint32_t chosen, const std::vector<uint32_t>& adj,
               uint32_t& best) {
  if (std::popcount(chosen) + std::popcount(candidates) <= std::popcount(best)) return;
  if (candidates == 0) {
    best = chosen;
    return;
  }
  // Branch on the candidate with most candidate neighbours; isolated
  // candidates are always taken.
  int pivot = -1;
  int pivot_degree = -1;
  for (uint32_t rest = candidates; rest; rest &= rest - 1) {
    const int v = std::countr_zero(rest);
    const int degree = std::popcount(adj[v] & candidates);
    if (degree > pivot_degree) {
      pivot = v;
      pivot_degree = degree;
    }
  }
  if (pivot_degree == 0) {
    MisBranch(0, chosen | candidates, adj, best);
    return;
  }
  const uint32_t bit = 1u << pivot;
  MisBranch(candidates & ~bit & ~adj[pivot], chosen | bit, adj, best);
  MisBranch(candidates & ~bit, chosen, adj, best);
}

}  // namespace

std::vector<int> HeldKarpTour(std::span<const Point> coords) {
  const int n = static_cast<int>(coords.size());
  RequireAtMost(n, kMaxHeldKarpNodes, "Held-Karp");
  if (n <= 3) {
    std::vector<int> tour(n);
    for (int i = 0; i < n; ++i) tour[i] = i;
    return tour;
  }
  const int m = n - 1;  // nodes 1..n-1 mapped to bits 0..m-1
  std::vector<double> dist(n * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) dist[i * n + j] = Distance(coords[i], coords[j]);
  }
  const uint32_t full = (1u << m) - 1;
  // dp[mask * m + j]: shortest path 0 -> ... -> (j+1) visiting exactly mask.
  std::vector<double> dp(static_cast<size_t>(full + 1) * m, kInf);
  for (int j = 0; j < m; ++j) dp[(1u << j) * m + j] = dist[j + 1];
  for (uint32_t mask = 1; mask <= full; ++mask) {
    if (std::has_single_bit(mask)) continue;
    for (uint32_t rest = mask; rest; rest &= rest - 1) {
      const int j = std::countr_zero(rest);
      const uint32_t prev_mask = mask & ~(1u << j);
      const double* prev = &dp[static_cast<size_t>(prev_mask) * m];
      const double* to_j = &dist[(j + 1)];
      double best = kInf;
      for (uint32_t p = prev_mask; p; p &= p - 1) {
        const int k = std::countr_zero(p);
        const double c = prev[k] + to_j[(k + 1) * n];
        if (c < best) best = c;
      }
      dp[static_cast<size_t>(mask) * m + j] = best;
    }
  }
  // Backtrack.
  std::vector<int> reversed;
  uint32_t mask = full;
  int last = -1;
  double best = kInf;
  for (int j = 0; j < m; ++j) {
    const double c = dp[static_cast<size_t>(full) * m + j] + dist[(j + 1) * n];
    if (c < best) {
      best = c;
      last = j;
    }
  }
  while (last >= 0) {
    reversed.push_back(last + 1);
    const uint32_t prev_mask = mask & ~(1u << last);
    if (prev_mask == 0) break;
    const double target = dp[static_cast<size_t>(mask) * m + last];
    int arg = -1;
    double arg_gap = kInf;
    for (uint32_t p = prev_mask; p; p &= p - 1) {
      const int k = std::countr_zero(p);
      const double gap = std::abs(dp[static_cast<size_t>(prev_mask) * m + k] +
                                  dist[(k + 1) * n + last + 1] - target);
      if (gap < arg_gap) {
        arg_gap = gap;
        arg = k;
      }
    }
    mask = prev_mask;
    last = arg;
  }
  std::vector<int> tour{0};
  tour.insert(tour.end(), reversed.rbegin(), reversed.rend());
  return tour;
}

KnapsackResult KnapsackDp(std::span<const double> weights, std::span<const double> values,
                          double capacity) {
  const int n = static_cast<int>(weights.size());
  KnapsackResult result;
  const double scale = 1.0 / kKnapsackResolution;
  const auto to_grid = [&](double w, bool round_up) {
    const double scaled = w * scale;
    const double nearest = std::round(scaled);
    if (std::abs(scaled - nearest) <= 1e-6) return static_cast<int64_t>(nearest);
    result.discretized = true;
    return static_cast<int64_t>(round_up ? std::ceil(scaled) : std::floor(scaled));
  };
  const int64_t cap = to_grid(capacity, false);
  if (cap < 0) return result;
  std::vector<int64_t> w(n);
  for (int i = 0; i < n; ++i) w[i] = to_grid(weights[i], true);

  const size_t width = static_cast<size_t>(cap) + 1;
  std::vector<double> best(width, 0.0);
  std::vector<uint8_t> take(static_cast<size_t>(n) * width, 0);
  for (int i = 0; i < n; ++i) {
    if (w[i] > cap) continue;
    uint8_t* row = &take[static_cast<size_t>(i) * width];
    for (int64_t c = cap; c >= w[i]; --c) {
      const double with = best[c - w[i]] + values[i];
      if (with > best[c]) {
        best[c] = with;
        row[c] = 1;
      }
    }
  }
  int64_t c = cap;
  for (int i = n - 1; i >= 0; --i) {
    if (take[static_cast<size_t>(i) * width + c]) {
      result.items.push_back(i);
      c -= w[i];
    }
  }
  std::reverse(result.items.begin(), result.items.end());
  for (int i : result.items) result.value += values[i];
  return result;
}

std::vector<int> MaximumIndependentSet(int n, std::span<const Edge> edges) {
  RequireAtMost(n, kMaxGraphOracleNodes, "independent set");
  const auto adj = AdjacencyMasks(n, edges);
  uint32_t best = 0;
  const uint32_t all = n == 32 ? ~0u : (1u << n) - 1;
  MisBranch(all, 0, adj, best);
  return BitsToIndices(best);
}

std::vector<int> MinimumVertexCover(int n, std::span<const Edge> edges) {
  RequireAtMost(n, kMaxGraphOracleNodes, "vertex cover");
  const auto adj = AdjacencyMasks(n, edges);
  const uint32_t all = (1u << n) - 1;
  // A set S covers every edge iff each vertex outside S has all its
  // neighbours inside S. Enumerate by increasing size (Gosper's hack).
  const auto covers = [&](uint32_t s) {
    for (uint32_t out = all & ~s; out; out &= out - 1) {
      if (adj[std::countr_zero(out)] & ~s) return false;
    }
    return true;
  };
  if (covers(0)) return {};
  for (int k = 1; k <= n; ++k) {
    uint32_t s = (1u << k) - 1;
    while (s <= all) {
      if (covers(s)) return BitsToIndices(s);
      const uint32_t c = s & (0 - s);
      const uint32_t r = s + c;
      if (r == 0 || r > all) break;
      s = (((r ^ s) >> 2) / c) | r;
    }
  }
  return BitsToIndices(all);
}

std::vector<int> SmtwtpExact(const ProblemInstance& inst) {
  const int n = inst.n;
  RequireAtMost(n, kMaxSchedulingOracleJobs, "SMTWTP");
  const uint32_t full = (1u << n) - 1;
  std::vector<double> cost(full + 1, kInf);
  std::vector<int8_t> last(full + 1, -1);
  std::vector<double> total_time(full + 1, 0.0);
  cost[0] = 0.0;
  for (uint32_t s = 1; s <= full; ++s) {
    const int low = std::countr_zero(s);
    total_time[s] = total_time[s & (s - 1)] + inst.proc_times[low];
    for (uint32_t rest = s; rest; rest &= rest - 1) {
      const int j = std::countr_zero(rest);
      const double c = cost[s & ~(1u << j)] +
                       inst.job_weights[j] * std::max(0.0, total_time[s] - inst.due_dates[j]);
      if (c < cost[s]) {
        cost[s] = c;
        last[s] = static_cast<int8_t>(j);
      }
    }
  }
  std::vector<int> order(n);
  uint32_t s = full;
  for (int pos = n - 1; pos >= 0; --pos) {
    order[pos] = last[s];
    s &= ~(1u << last[s]);
  }
  return order;
}

std::vector<int> VehicleRoutingExact(const ProblemInstance& inst) {
  const int n = inst.n;
  RequireAtMost(n, kMaxRoutingOracleCustomers, "vehicle routing");
  const bool backhauls = inst.kind == ProblemKind::kVrpb;
  const uint32_t full = (1u << n) - 1;
  const auto dist = [&](int a, int b) { return Distance(inst.coords[a], inst.coords[b]); };
  uint32_t backhaul_mask = 0;
  for (int i = 0; i < n; ++i) {
    if (inst.demands[i] < 0.0) backhaul_mask |= 1u << i;
  }

  // path[T * n + j]: depot -> customers T ending at customer j, respecting
  // linehaul-before-backhaul.
  std::vector<double> path(static_cast<size_t>(full + 1) * n, kInf);
  std::vector<int8_t> parent(static_cast<size_t>(full + 1) * n, -1);
  for (int j = 0; j < n; ++j) path[(1u << j) * n + j] = dist(0, j + 1);
  for (uint32_t t = 1; t <= full; ++t) {
    for (uint32_t rest = t; rest; rest &= rest - 1) {
      const int j = std::countr_zero(rest);
      const uint32_t prev = t & ~(1u << j);
      if (prev == 0) continue;
      if (backhauls && !(backhaul_mask >> j & 1u) && (prev & backhaul_mask)) continue;
      for (uint32_t p = prev; p; p &= p - 1) {
        const int k = std::countr_zero(p);
        const double c = path[prev * n + k] + dist(k + 1, j + 1);
        if (c < path[t * n + j]) {
          path[t * n + j] = c;
          parent[t * n + j] = static_cast<int8_t>(k);
        }
      }
    }
  }

  std::vector<double> route_cost(full + 1, kInf);
  std::vector<int8_t> route_end(full + 1, -1);
  for (uint32_t t = 1; t <= full; ++t) {
    double linehaul = 0.0;
    double backhaul = 0.0;
    for (uint32_t rest = t; rest; rest &= rest - 1) {
      const double d = inst.demands[std::countr_zero(rest)];
      (d > 0.0 ? linehaul : backhaul) += std::abs(d);
    }
    if (linehaul > inst.capacity + kCapacityTolerance ||
        backhaul > inst.capacity + kCapacityTolerance) {
      continue;
    }
    for (uint32_t rest = t; rest; rest &= rest - 1) {
      const int j = std::countr_zero(rest);
      const double c = path[t * n + j] + dist(j + 1, 0);
      if (c < route_cost[t]) {
        route_cost[t] = c;
        route_end[t] = static_cast<int8_t>(j);
      }
    }
  }

  std::vector<double> best(full + 1, kInf);
  std::vector<uint32_t> choice(full + 1, 0);
  best[0] = 0.0;
  for (uint32_t s = 1; s <= full; ++s) {
    const uint32_t low = s & (0 - s);
    const uint32_t others = s & ~low;
    // Enumerate subsets of `others`, each joined with the lowest customer.
    for (uint32_t sub = others;; sub = (sub - 1) & others) {
      const uint32_t route = sub | low;
      const double c = route_cost[route] + best[s & ~route];
      if (c < best[s]) {
        best[s] = c;
        choice[s] = route;
      }
      if (sub == 0) break;
    }
  }

  std::vector<int> seq;
  for (uint32_t s = full; s;) {
    const uint32_t route = choice[s];
    std::vector<int> reversed;
    uint32_t t = route;
    int j = route_end[route];
    while (j >= 0) {
      reversed.push_back(j + 1);
      const int k = parent[t * n + j];
      t &= ~(1u << j);
      j = k;
    }
    if (!seq.empty()) seq.push_back(0);
    seq.insert(seq.end(), reversed.rbegin(), reversed.rend());
    s &= ~route;
  }
  return seq;
}

Solution SolveExact(const ProblemInstance& inst) {
  Solution sol;
  sol.kind = inst.kind;
  switch (inst.kind) {
    case ProblemKind::kTsp:
      sol.sequence = HeldKarpTour(inst.coords);
      break;
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      sol.sequence = VehicleRoutingExact(inst);
      break;
    case ProblemKind::kKp:
      sol.sequence = KnapsackDp(inst.weights, inst.values, inst.capacity).items;
      break;
    case ProblemKind::kMvcp:
      sol.sequence = MinimumVertexCover(inst.n, inst.edges);
      break;
    case ProblemKind::kMisp:
      sol.sequence = MaximumIndependentSet(inst.n, inst.edges);
      break;
    case ProblemKind::kSmtwtp:
      sol.sequence = SmtwtpExact(inst);
      break;
  }
  sol.objective = Evaluate(inst, sol.sequence);
  return sol;
}

}  // namespace copforge
