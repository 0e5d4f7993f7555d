#ifndef COPFORGE_COP_CORE_HPP_
#define COPFORGE_COP_CORE_HPP_

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace copforge {

enum class ProblemKind { kTsp, kCvrp, kKp, kMvcp, kSmtwtp, kVrpb, kMisp };

inline constexpr std::array<ProblemKind, 7> kAllKinds = {
    ProblemKind::kTsp,    ProblemKind::kCvrp, ProblemKind::kKp,
    ProblemKind::kMvcp,   ProblemKind::kSmtwtp, ProblemKind::kVrpb,
    ProblemKind::kMisp};

// Lowercase identifier, e.g. "tsp", "smtwtp".
std::string_view KindName(ProblemKind kind);
ProblemKind ParseKind(std::string_view name);

bool HasDepot(ProblemKind kind);
bool HasCoordinates(ProblemKind kind);
bool IsGraphKind(ProblemKind kind);
bool IsMaximization(ProblemKind kind);

// Feasibility tolerance for capacity sums.
inline constexpr double kCapacityTolerance = 1e-9;

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct Edge {
  int u = 0;
  int v = 0;
  bool operator==(const Edge&) const = default;
};

// One COP instance. Only the fields of `kind` are populated:
//   TSP          coords[n]
//   CVRP         coords[n+1] (depot at 0), demands[n] in (0,1], capacity
//   VRPB         as CVRP, demands signed: >0 linehaul, <0 backhaul
//   KP           weights[n], values[n], capacity
//   MVCP, MISP   edges over [0,n)
//   SMTWTP       proc_times[n], job_weights[n], due_dates[n]
// For depot kinds demand i belongs to node i+1.
struct ProblemInstance {
  ProblemKind kind = ProblemKind::kTsp;
  int n = 0;
  uint64_t seed = 0;
  std::vector<Point> coords;
  std::vector<double> demands;
  std::vector<double> weights;
  std::vector<double> values;
  double capacity = 0.0;
  std::vector<Edge> edges;
  std::vector<double> proc_times;
  std::vector<double> job_weights;
  std::vector<double> due_dates;

  // Number of selectable indices: n, or n+1 with the depot.
  int num_choices() const { return HasDepot(kind) ? n + 1 : n; }

  // Throws InvalidArgument naming the first violated invariant.
  void Validate() const;

  bool operator==(const ProblemInstance&) const = default;
};

struct Solution {
  ProblemKind kind = ProblemKind::kTsp;
  std::vector<int> sequence;
  double objective = 0.0;
};

double Distance(const Point& a, const Point& b);

// Instance distributions: see README "Instance distributions".
ProblemInstance Generate(ProblemKind kind, int n, uint64_t seed);

// Vehicle capacity in demand units before normalization, per customer count.
int CvrpRawCapacity(int n);
double KpCapacity(int n);

// Objective of a feasible sequence. Throws InfeasibleSolution naming the
// violated constraint otherwise.
//   TSP/CVRP/VRPB  Euclidean length; depot routes open and close at node 0
//   KP             sum of selected values
//   MVCP, MISP     set cardinality
//   SMTWTP         total weighted tardiness
double Evaluate(const ProblemInstance& inst, std::span<const int> seq);

bool IsFeasible(const ProblemInstance& inst, std::span<const int> seq);

// Reward maximized by the trainer: -objective for minimization kinds.
double RewardOf(ProblemKind kind, double objective);

std::vector<std::vector<int>> AdjacencyLists(const ProblemInstance& inst);

// Mutable per-rollout state of the construction process.
struct DecodingState {
  std::vector<uint8_t> selected;  // per choice index; the depot never sets it
  std::vector<int> sequence;
  int current = -1;               // last position; the depot (0) at start
  int first = -1;                 // first non-forced-depot selection
  double remaining = 0.0;         // c_t: remaining load or knapsack capacity
  int uncovered_edges = 0;        // MVCP
  std::vector<uint8_t> blocked;   // MISP: adjacent to a selected vertex
  double elapsed = 0.0;           // SMTWTP completion time so far
  bool backhaul_phase = false;    // VRPB: current route has started pickups
  int served = 0;                 // customers/jobs/vertices selected
  bool done = false;
};

// Feasibility state machine over one instance. Holds derived data
// (adjacency) so repeated rollouts do not rebuild it.
class CopEnv {
 public:
  explicit CopEnv(const ProblemInstance& inst);

  const ProblemInstance& instance() const { return *inst_; }
  int num_choices() const { return inst_->num_choices(); }

  DecodingState Reset() const;

  // mask[i] true when choice i is selectable. Requires !state.done.
  void FeasibilityMask(const DecodingState& state, std::span<uint8_t> mask) const;
  std::vector<uint8_t> FeasibilityMask(const DecodingState& state) const;

  // Applies `choice`. Throws MaskedChoice when the mask forbids it.
  void Step(DecodingState& state, int choice) const;

  // c_t normalized by initial capacity; 0 for kinds without one.
  double NormalizedDynamic(const DecodingState& state) const;

  // Choices allowed as the forced first action of a multi-start rollout:
  // initially feasible, depot excluded.
  std::vector<int> StartNodes() const;

  const std::vector<std::vector<int>>& adjacency() const { return adjacency_; }

 private:
  bool TerminalAfterStep(const DecodingState& state) const;
  const ProblemInstance* inst_;
  std::vector<std::vector<int>> adjacency_;
};

}  // namespace copforge

#endif  // COPFORGE_COP_CORE_HPP_
