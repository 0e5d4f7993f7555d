#include "copforge/tai_render.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include <openssl/evp.h>

#include "copforge/errors.hpp"
#include "copforge/gap_report.hpp"

namespace copforge {

namespace {

std::string F4(double v) { return FormatFixed(v, 4); }

std::string Coordinates(const Point& p) { return "coordinates (" + F4(p.x) + ", " + F4(p.y) + ")"; }

std::string NearestHint(const ProblemInstance& inst, int node) {
  const std::vector<int> near = NearestNodes(inst, node, kNearestHints);
  if (near.empty()) return "";
  std::string s = " Nearest: ";
  for (size_t i = 0; i < near.size(); ++i) {
    if (i) s += ", ";
    s += (HasDepot(inst.kind) && near[i] == 0 ? "depot 0" : "node " + std::to_string(near[i]));
    s += " at " + F4(Distance(inst.coords[node], inst.coords[near[i]]));
  }
  return s + ".";
}

std::vector<int> RankBy(int n, const std::function<bool(int, int)>& before) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), before);
  std::vector<int> rank(n);
  for (int r = 0; r < n; ++r) rank[order[r]] = r + 1;
  return rank;
}

}  // namespace

nlohmann::json TextAttributedInstance::ToJson() const {
  return {{"kind", KindName(kind)},
          {"template_version", template_version},
          {"hints_enabled", hints_enabled},
          {"task_text", task_text},
          {"node_texts", node_texts}};
}

TextAttributedInstance TextAttributedInstance::FromJson(const nlohmann::json& j) {
  TextAttributedInstance t;
  t.kind = ParseKind(j.at("kind").get<std::string>());
  t.template_version = j.at("template_version").get<std::string>();
  t.hints_enabled = j.at("hints_enabled").get<bool>();
  t.task_text = j.at("task_text").get<std::string>();
  t.node_texts = j.at("node_texts").get<std::vector<std::string>>();
  return t;
}

std::string RenderTask(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::kTsp:
      return "Task: traveling salesman problem. Visit every node exactly once and return to the "
             "start. Objective: minimize total route length.";
    case ProblemKind::kCvrp:
      return "Task: capacitated vehicle routing problem. Vehicles start and end at the depot and "
             "each customer is visited exactly once. Constraint: the total demand of a route must "
             "not exceed the vehicle capacity. Objective: minimize total route length.";
    case ProblemKind::kKp:
      return "Task: knapsack problem. Select a subset of items. Constraint: the total weight must "
             "not exceed the knapsack capacity. Objective: maximize total value.";
    case ProblemKind::kMvcp:
      return "Task: minimum vertex cover problem. Select a set of vertices. Constraint: every edge "
             "must have at least one selected endpoint. Objective: minimize the number of "
             "selected vertices.";
    case ProblemKind::kSmtwtp:
      return "Task: single machine total weighted tardiness problem. Schedule every job once on "
             "one machine. Objective: minimize the total weighted tardiness.";
    case ProblemKind::kVrpb:
      return "Task: vehicle routing problem with backhauls. Vehicles start and end at the depot "
             "and each customer is visited exactly once. Constraint: on each route all linehaul "
             "deliveries precede backhaul pickups, and deliveries and pickups each must not "
             "exceed the vehicle capacity. Objective: minimize total route length.";
    case ProblemKind::kMisp:
      return "Task: maximum independent set problem. Select a set of vertices. Constraint: no two "
             "selected vertices may share an edge. Objective: maximize the number of selected "
             "vertices.";
  }
  throw InvalidArgument("unknown kind");
}

std::vector<int> NearestNodes(const ProblemInstance& inst, int node, int k) {
  std::vector<int> others;
  for (int j = 0; j < static_cast<int>(inst.coords.size()); ++j) {
    if (j != node) others.push_back(j);
  }
  const Point p = inst.coords[node];
  std::stable_sort(others.begin(), others.end(), [&](int a, int b) {
    return Distance(p, inst.coords[a]) < Distance(p, inst.coords[b]);
  });
  if (static_cast<int>(others.size()) > k) others.resize(k);
  return others;
}

std::vector<int> KnapsackRatioRanks(const ProblemInstance& inst) {
  return RankBy(inst.n, [&](int a, int b) {
    return inst.values[a] / inst.weights[a] > inst.values[b] / inst.weights[b];
  });
}

std::vector<int> DueDateRanks(const ProblemInstance& inst) {
  return RankBy(inst.n, [&](int a, int b) { return inst.due_dates[a] < inst.due_dates[b]; });
}

std::vector<std::string> RenderNodes(const ProblemInstance& inst, bool hints) {
  inst.Validate();
  std::vector<std::string> out;
  const std::string n_str = std::to_string(inst.n);
  switch (inst.kind) {
    case ProblemKind::kTsp:
      for (int i = 0; i < inst.n; ++i) {
        std::string s = "Node " + std::to_string(i) + ": " + Coordinates(inst.coords[i]) + ".";
        if (hints) s += NearestHint(inst, i);
        out.push_back(std::move(s));
      }
      break;
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      for (int i = 0; i <= inst.n; ++i) {
        std::string s;
        if (i == 0) {
          s = "Depot 0: " + Coordinates(inst.coords[0]) + ", vehicle capacity " +
              F4(inst.capacity) + ".";
        } else {
          const double d = inst.demands[i - 1];
          const char* label = inst.kind == ProblemKind::kCvrp ? "demand "
                              : d >= 0.0                      ? "linehaul demand "
                                                              : "backhaul demand ";
          s = "Node " + std::to_string(i) + ": " + Coordinates(inst.coords[i]) + ", " + label +
              F4(std::abs(d)) + ".";
        }
        if (hints) s += NearestHint(inst, i);
        out.push_back(std::move(s));
      }
      break;
    case ProblemKind::kKp: {
      const std::vector<int> rank = KnapsackRatioRanks(inst);
      for (int i = 0; i < inst.n; ++i) {
        std::string s = "Item " + std::to_string(i) + ": weight " + F4(inst.weights[i]) +
                        ", value " + F4(inst.values[i]) + ", knapsack capacity " +
                        F4(inst.capacity) + ".";
        if (hints) {
          s += " Value-to-weight ratio " + F4(inst.values[i] / inst.weights[i]) + ", rank " +
               std::to_string(rank[i]) + " of " + n_str + ".";
        }
        out.push_back(std::move(s));
      }
      break;
    }
    case ProblemKind::kMvcp:
    case ProblemKind::kMisp: {
      // The adjacency list is the vertex's only raw attribute, so it is
      // always present; the degree is the hint.
      const auto adj = AdjacencyLists(inst);
      for (int i = 0; i < inst.n; ++i) {
        std::vector<int> nb = adj[i];
        std::sort(nb.begin(), nb.end());
        std::string s = "Vertex " + std::to_string(i) + ": neighbors (";
        for (size_t k = 0; k < nb.size(); ++k) s += (k ? ", " : "") + std::to_string(nb[k]);
        s += ").";
        if (hints) s += " Degree " + std::to_string(nb.size()) + ".";
        out.push_back(std::move(s));
      }
      break;
    }
    case ProblemKind::kSmtwtp: {
      const std::vector<int> rank = DueDateRanks(inst);
      for (int i = 0; i < inst.n; ++i) {
        std::string s = "Job " + std::to_string(i) + ": processing time " +
                        F4(inst.proc_times[i]) + ", weight " + F4(inst.job_weights[i]) +
                        ", due date " + F4(inst.due_dates[i]) + ".";
        if (hints) {
          s += " Slack " + F4(inst.due_dates[i] - inst.proc_times[i]) + ", due-date rank " +
               std::to_string(rank[i]) + " of " + n_str + ".";
        }
        out.push_back(std::move(s));
      }
      break;
    }
  }
  return out;
}

TextAttributedInstance Render(const ProblemInstance& inst, bool hints_enabled) {
  TextAttributedInstance t;
  t.kind = inst.kind;
  t.template_version = std::string(kTemplateVersion);
  t.hints_enabled = hints_enabled;
  t.task_text = RenderTask(inst.kind);
  t.node_texts = RenderNodes(inst, hints_enabled);
  return t;
}

Digest ContentDigest(std::string_view text) {
  unsigned char full[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), full, &len, EVP_sha256(), nullptr) != 1) {
    throw CopError("hash_failed", "SHA-256 digest failed");
  }
  Digest d{};
  std::copy(full, full + d.size(), d.begin());
  return d;
}

std::string DigestHex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(32);
  for (uint8_t b : d) {
    s += kHex[b >> 4];
    s += kHex[b & 15];
  }
  return s;
}

std::string ContentHash(std::string_view text) { return DigestHex(ContentDigest(text)); }

}  // namespace copforge
