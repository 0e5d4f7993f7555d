#include "copforge/cop_core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "copforge/errors.hpp"
#include "copforge/rng.hpp"

namespace copforge {

namespace {

constexpr double kEdgeProbability = 0.15;
constexpr double kBackhaulProbability = 0.2;
constexpr int kWeightGrid = 10000;  // KP weights are multiples of 1e-4

std::string Str(int i) { return std::to_string(i); }

void RequireSize(const std::vector<double>& v, size_t size, const char* name) {
  if (v.size() != size) {
    throw InvalidArgument(std::string(name) + " has " + std::to_string(v.size()) +
                          " entries, expected " + std::to_string(size));
  }
}

bool AllFinite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::string_view KindName(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::kTsp: return "tsp";
    case ProblemKind::kCvrp: return "cvrp";
    case ProblemKind::kKp: return "kp";
    case ProblemKind::kMvcp: return "mvcp";
    case ProblemKind::kSmtwtp: return "smtwtp";
    case ProblemKind::kVrpb: return "vrpb";
    case ProblemKind::kMisp: return "misp";
  }
  return "unknown";
}

ProblemKind ParseKind(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (ProblemKind kind : kAllKinds) {
    if (KindName(kind) == lower) return kind;
  }
  throw InvalidArgument("unknown problem kind '" + std::string(name) + "'");
}

bool HasDepot(ProblemKind kind) {
  return kind == ProblemKind::kCvrp || kind == ProblemKind::kVrpb;
}

bool HasCoordinates(ProblemKind kind) {
  return kind == ProblemKind::kTsp || HasDepot(kind);
}

bool IsGraphKind(ProblemKind kind) {
  return kind == ProblemKind::kMvcp || kind == ProblemKind::kMisp;
}

bool IsMaximization(ProblemKind kind) {
  return kind == ProblemKind::kKp || kind == ProblemKind::kMisp;
}

double Distance(const Point& a, const Point& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

double RewardOf(ProblemKind kind, double objective) {
  return IsMaximization(kind) ? objective : -objective;
}

int CvrpRawCapacity(int n) {
  if (n < 20) return 20;
  if (n < 50) return 30;
  if (n < 100) return 40;
  return 50;
}

double KpCapacity(int n) { return std::max(1.0, n / 4.0); }

void ProblemInstance::Validate() const {
  if (n < 1) throw InvalidArgument("instance must have n >= 1");
  const auto check_coords = [&](size_t expected) {
    if (coords.size() != expected) {
      throw InvalidArgument("coords has " + std::to_string(coords.size()) +
                            " entries, expected " + std::to_string(expected));
    }
    for (const Point& p : coords) {
      if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0)) {
        throw InvalidArgument("coordinate outside [0,1]^2");
      }
    }
  };
  switch (kind) {
    case ProblemKind::kTsp:
      check_coords(n);
      break;
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      check_coords(n + 1);
      RequireSize(demands, n, "demands");
      if (!(capacity > 0.0) || !std::isfinite(capacity)) {
        throw InvalidArgument("capacity must be positive");
      }
      for (double d : demands) {
        const double magnitude = std::abs(d);
        if (!std::isfinite(d) || magnitude == 0.0 || magnitude > capacity) {
          throw InvalidArgument("demand outside (0, capacity]");
        }
        if (kind == ProblemKind::kCvrp && d < 0.0) {
          throw InvalidArgument("CVRP demand must be positive");
        }
      }
      break;
    case ProblemKind::kKp:
      RequireSize(weights, n, "weights");
      RequireSize(values, n, "values");
      if (!AllFinite(weights) || !AllFinite(values) || !(capacity > 0.0)) {
        throw InvalidArgument("KP weights, values and capacity must be finite");
      }
      for (size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0 || values[i] <= 0.0) {
          throw InvalidArgument("KP weights and values must be positive");
        }
      }
      break;
    case ProblemKind::kMvcp:
    case ProblemKind::kMisp: {
      std::vector<std::vector<uint8_t>> seen(n, std::vector<uint8_t>(n, 0));
      for (const Edge& e : edges) {
        if (e.u < 0 || e.u >= n || e.v < 0 || e.v >= n) {
          throw InvalidArgument("edge endpoint outside [0, n)");
        }
        if (e.u == e.v) throw InvalidArgument("self-loop on vertex " + Str(e.u));
        if (seen[e.u][e.v]) {
          throw InvalidArgument("duplicate edge " + Str(e.u) + "-" + Str(e.v));
        }
        seen[e.u][e.v] = seen[e.v][e.u] = 1;
      }
      break;
    }
    case ProblemKind::kSmtwtp:
      RequireSize(proc_times, n, "proc_times");
      RequireSize(job_weights, n, "job_weights");
      RequireSize(due_dates, n, "due_dates");
      if (!AllFinite(proc_times) || !AllFinite(job_weights) || !AllFinite(due_dates)) {
        throw InvalidArgument("SMTWTP attributes must be finite");
      }
      for (int i = 0; i < n; ++i) {
        if (proc_times[i] <= 0.0 || job_weights[i] <= 0.0 || due_dates[i] < 0.0) {
          throw InvalidArgument("SMTWTP job " + Str(i) + " has a non-positive attribute");
        }
      }
      break;
  }
}

ProblemInstance Generate(ProblemKind kind, int n, uint64_t seed) {
  if (n <= 1) throw InvalidArgument("generate requires n >= 2, got " + Str(n));
  CountedRng rng(SubSeed(seed, KindName(kind), static_cast<uint64_t>(n)));
  ProblemInstance inst;
  inst.kind = kind;
  inst.n = n;
  inst.seed = seed;
  const auto draw_points = [&](int count) {
    inst.coords.resize(count);
    for (Point& p : inst.coords) {
      p.x = rng.Uniform();
      p.y = rng.Uniform();
    }
  };
  switch (kind) {
    case ProblemKind::kTsp:
      draw_points(n);
      break;
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb: {
      draw_points(n + 1);
      const double raw_capacity = CvrpRawCapacity(n);
      inst.capacity = 1.0;
      inst.demands.resize(n);
      for (double& d : inst.demands) {
        d = static_cast<double>(1 + rng.Below(9)) / raw_capacity;
      }
      if (kind == ProblemKind::kVrpb) {
        for (double& d : inst.demands) {
          if (rng.Bernoulli(kBackhaulProbability)) d = -d;
        }
      }
      break;
    }
    case ProblemKind::kKp:
      inst.weights.resize(n);
      inst.values.resize(n);
      for (int i = 0; i < n; ++i) {
        inst.weights[i] = static_cast<double>(1 + rng.Below(kWeightGrid)) / kWeightGrid;
        inst.values[i] = rng.UniformOpenClosed();
      }
      inst.capacity = KpCapacity(n);
      break;
    case ProblemKind::kMvcp:
    case ProblemKind::kMisp:
      for (int u = 0; u < n; ++u) {
        for (int v = u + 1; v < n; ++v) {
          if (rng.Bernoulli(kEdgeProbability)) inst.edges.push_back({u, v});
        }
      }
      // An edgeless graph has no cover decisions to make.
      if (inst.edges.empty()) inst.edges.push_back({0, 1});
      break;
    case ProblemKind::kSmtwtp:
      inst.proc_times.resize(n);
      inst.job_weights.resize(n);
      inst.due_dates.resize(n);
      for (int i = 0; i < n; ++i) {
        inst.proc_times[i] = rng.UniformOpenClosed();
        inst.job_weights[i] = rng.UniformOpenClosed();
        inst.due_dates[i] = rng.Uniform(0.0, n / 2.0);
      }
      break;
  }
  return inst;
}

std::vector<std::vector<int>> AdjacencyLists(const ProblemInstance& inst) {
  std::vector<std::vector<int>> adj(IsGraphKind(inst.kind) ? inst.n : 0);
  if (!IsGraphKind(inst.kind)) return adj;
  for (const Edge& e : inst.edges) {
    adj[e.u].push_back(e.v);
    adj[e.v].push_back(e.u);
  }
  for (auto& row : adj) std::sort(row.begin(), row.end());
  return adj;
}

namespace {

void RequireIndex(int idx, int lo, int hi, const char* what) {
  if (idx < lo || idx >= hi) {
    throw InfeasibleSolution(std::string(what) + " index " + Str(idx) +
                             " outside [" + Str(lo) + ", " + Str(hi) + ")");
  }
}

// Checks that `seq` selects each index at most once; returns the flags.
std::vector<uint8_t> DistinctFlags(std::span<const int> seq, int lo, int hi,
                                   const char* what) {
  std::vector<uint8_t> seen(hi, 0);
  for (int idx : seq) {
    RequireIndex(idx, lo, hi, what);
    if (seen[idx]) {
      throw InfeasibleSolution(std::string(what) + " " + Str(idx) + " selected twice");
    }
    seen[idx] = 1;
  }
  return seen;
}

double EvaluateRoutes(const ProblemInstance& inst, std::span<const int> seq) {
  const int n = inst.n;
  std::vector<uint8_t> served(n + 1, 0);
  double length = 0.0;
  int prev = 0;
  double linehaul = 0.0;
  double backhaul = 0.0;
  bool in_backhaul = false;
  const auto close_route = [&]() {
    if (linehaul > inst.capacity + kCapacityTolerance) {
      throw InfeasibleSolution("vehicle capacity exceeded by deliveries on a route");
    }
    if (backhaul > inst.capacity + kCapacityTolerance) {
      throw InfeasibleSolution("vehicle capacity exceeded by pickups on a route");
    }
    linehaul = backhaul = 0.0;
    in_backhaul = false;
  };
  for (int idx : seq) {
    RequireIndex(idx, 0, n + 1, "node");
    length += Distance(inst.coords[prev], inst.coords[idx]);
    prev = idx;
    if (idx == 0) {
      close_route();
      continue;
    }
    if (served[idx]) throw InfeasibleSolution("customer " + Str(idx) + " served twice");
    served[idx] = 1;
    const double d = inst.demands[idx - 1];
    if (d > 0.0) {
      if (in_backhaul) {
        throw InfeasibleSolution("backhaul precedence: linehaul customer " + Str(idx) +
                                 " after a backhaul on the same route");
      }
      linehaul += d;
    } else {
      in_backhaul = true;
      backhaul += -d;
    }
  }
  close_route();
  length += Distance(inst.coords[prev], inst.coords[0]);
  for (int i = 1; i <= n; ++i) {
    if (!served[i]) throw InfeasibleSolution("customer " + Str(i) + " not served");
  }
  return length;
}

}  // namespace

double Evaluate(const ProblemInstance& inst, std::span<const int> seq) {
  const int n = inst.n;
  switch (inst.kind) {
    case ProblemKind::kTsp: {
      if (static_cast<int>(seq.size()) != n) {
        throw InfeasibleSolution("tour must visit all " + Str(n) + " nodes exactly once");
      }
      DistinctFlags(seq, 0, n, "node");
      double length = 0.0;
      for (int i = 0; i < n; ++i) {
        length += Distance(inst.coords[seq[i]], inst.coords[seq[(i + 1) % n]]);
      }
      return length;
    }
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      return EvaluateRoutes(inst, seq);
    case ProblemKind::kKp: {
      DistinctFlags(seq, 0, n, "item");
      double weight = 0.0;
      double value = 0.0;
      for (int i : seq) {
        weight += inst.weights[i];
        value += inst.values[i];
      }
      if (weight > inst.capacity + kCapacityTolerance) {
        throw InfeasibleSolution("knapsack capacity exceeded");
      }
      return value;
    }
    case ProblemKind::kMvcp: {
      const auto in_cover = DistinctFlags(seq, 0, n, "vertex");
      for (const Edge& e : inst.edges) {
        if (!in_cover[e.u] && !in_cover[e.v]) {
          throw InfeasibleSolution("edge " + Str(e.u) + "-" + Str(e.v) + " not covered");
        }
      }
      return static_cast<double>(seq.size());
    }
    case ProblemKind::kMisp: {
      const auto in_set = DistinctFlags(seq, 0, n, "vertex");
      for (const Edge& e : inst.edges) {
        if (in_set[e.u] && in_set[e.v]) {
          throw InfeasibleSolution("independence violated by edge " + Str(e.u) + "-" +
                                   Str(e.v));
        }
      }
      return static_cast<double>(seq.size());
    }
    case ProblemKind::kSmtwtp: {
      if (static_cast<int>(seq.size()) != n) {
        throw InfeasibleSolution("schedule must contain all " + Str(n) + " jobs");
      }
      DistinctFlags(seq, 0, n, "job");
      double t = 0.0;
      double tardiness = 0.0;
      for (int j : seq) {
        t += inst.proc_times[j];
        tardiness += inst.job_weights[j] * std::max(0.0, t - inst.due_dates[j]);
      }
      return tardiness;
    }
  }
  throw InvalidArgument("unknown problem kind");
}

bool IsFeasible(const ProblemInstance& inst, std::span<const int> seq) {
  try {
    Evaluate(inst, seq);
    return true;
  } catch (const InfeasibleSolution&) {
    return false;
  }
}

CopEnv::CopEnv(const ProblemInstance& inst)
    : inst_(&inst), adjacency_(AdjacencyLists(inst)) {}

DecodingState CopEnv::Reset() const {
  const ProblemInstance& inst = *inst_;
  DecodingState s;
  s.selected.assign(num_choices(), 0);
  switch (inst.kind) {
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      s.current = 0;
      s.remaining = inst.capacity;
      break;
    case ProblemKind::kKp:
      s.remaining = inst.capacity;
      s.done = std::none_of(inst.weights.begin(), inst.weights.end(),
                            [&](double w) { return w <= inst.capacity + kCapacityTolerance; });
      break;
    case ProblemKind::kMvcp:
      s.uncovered_edges = static_cast<int>(inst.edges.size());
      s.done = s.uncovered_edges == 0;
      break;
    case ProblemKind::kMisp:
      s.blocked.assign(inst.n, 0);
      break;
    default:
      break;
  }
  return s;
}

void CopEnv::FeasibilityMask(const DecodingState& s, std::span<uint8_t> mask) const {
  const ProblemInstance& inst = *inst_;
  const int n = inst.n;
  switch (inst.kind) {
    case ProblemKind::kTsp:
    case ProblemKind::kSmtwtp:
    case ProblemKind::kMvcp:
      for (int i = 0; i < n; ++i) mask[i] = !s.selected[i];
      break;
    case ProblemKind::kMisp:
      for (int i = 0; i < n; ++i) mask[i] = !s.selected[i] && !s.blocked[i];
      break;
    case ProblemKind::kKp:
      for (int i = 0; i < n; ++i) {
        mask[i] = !s.selected[i] && inst.weights[i] <= s.remaining + kCapacityTolerance;
      }
      break;
    case ProblemKind::kCvrp:
      mask[0] = s.current != 0;
      for (int i = 1; i <= n; ++i) {
        mask[i] = !s.selected[i] && inst.demands[i - 1] <= s.remaining + kCapacityTolerance;
      }
      break;
    case ProblemKind::kVrpb:
      mask[0] = s.current != 0;
      for (int i = 1; i <= n; ++i) {
        const double d = inst.demands[i - 1];
        bool ok = !s.selected[i];
        if (ok && d > 0.0) {
          ok = !s.backhaul_phase && d <= s.remaining + kCapacityTolerance;
        } else if (ok) {
          ok = s.backhaul_phase ? -d <= s.remaining + kCapacityTolerance
                                : -d <= inst.capacity + kCapacityTolerance;
        }
        mask[i] = ok;
      }
      break;
  }
}

std::vector<uint8_t> CopEnv::FeasibilityMask(const DecodingState& state) const {
  std::vector<uint8_t> mask(num_choices(), 0);
  FeasibilityMask(state, mask);
  return mask;
}

bool CopEnv::TerminalAfterStep(const DecodingState& s) const {
  const ProblemInstance& inst = *inst_;
  switch (inst.kind) {
    case ProblemKind::kTsp:
    case ProblemKind::kSmtwtp:
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      return s.served == inst.n;
    case ProblemKind::kMvcp:
      return s.uncovered_edges == 0;
    case ProblemKind::kKp:
      for (int i = 0; i < inst.n; ++i) {
        if (!s.selected[i] && inst.weights[i] <= s.remaining + kCapacityTolerance) {
          return false;
        }
      }
      return true;
    case ProblemKind::kMisp:
      for (int i = 0; i < inst.n; ++i) {
        if (!s.selected[i] && !s.blocked[i]) return false;
      }
      return true;
  }
  return true;
}

void CopEnv::Step(DecodingState& s, int choice) const {
  const ProblemInstance& inst = *inst_;
  if (s.done) throw MaskedChoice("step on a finished rollout");
  if (choice < 0 || choice >= num_choices()) {
    throw MaskedChoice("choice " + Str(choice) + " out of range");
  }
  const auto mask = FeasibilityMask(s);
  if (!mask[choice]) {
    throw MaskedChoice(std::string(KindName(inst.kind)) + ": choice " + Str(choice) +
                       " is masked");
  }
  s.sequence.push_back(choice);
  const bool is_depot = HasDepot(inst.kind) && choice == 0;
  if (!is_depot) {
    s.selected[choice] = 1;
    ++s.served;
    if (s.first < 0) s.first = choice;
  }
  s.current = choice;
  switch (inst.kind) {
    case ProblemKind::kCvrp:
      if (is_depot) {
        s.remaining = inst.capacity;
      } else {
        s.remaining = std::max(0.0, s.remaining - inst.demands[choice - 1]);
      }
      break;
    case ProblemKind::kVrpb:
      if (is_depot) {
        s.remaining = inst.capacity;
        s.backhaul_phase = false;
      } else {
        const double d = inst.demands[choice - 1];
        if (d < 0.0 && !s.backhaul_phase) {
          // Deliveries are complete; the vehicle is empty for pickups.
          s.backhaul_phase = true;
          s.remaining = inst.capacity;
        }
        s.remaining = std::max(0.0, s.remaining - std::abs(d));
      }
      break;
    case ProblemKind::kKp:
      s.remaining = std::max(0.0, s.remaining - inst.weights[choice]);
      break;
    case ProblemKind::kMvcp:
      for (int u : adjacency_[choice]) {
        if (!s.selected[u]) --s.uncovered_edges;
      }
      break;
    case ProblemKind::kMisp:
      for (int u : adjacency_[choice]) s.blocked[u] = 1;
      break;
    case ProblemKind::kSmtwtp:
      s.elapsed += inst.proc_times[choice];
      break;
    case ProblemKind::kTsp:
      break;
  }
  s.done = TerminalAfterStep(s);
}

double CopEnv::NormalizedDynamic(const DecodingState& s) const {
  switch (inst_->kind) {
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
    case ProblemKind::kKp:
      return s.remaining / inst_->capacity;
    default:
      return 0.0;
  }
}

std::vector<int> CopEnv::StartNodes() const {
  const DecodingState s = Reset();
  std::vector<int> starts;
  if (s.done) return starts;
  const auto mask = FeasibilityMask(s);
  const int lo = HasDepot(inst_->kind) ? 1 : 0;
  for (int i = lo; i < num_choices(); ++i) {
    if (mask[i]) starts.push_back(i);
  }
  return starts;
}

}  // namespace copforge
