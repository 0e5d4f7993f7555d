// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any selected criterion fails. `--only k` runs criterion k.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "copforge/embedding_server.hpp"
#include "copforge/errors.hpp"
#include "copforge/gap_report.hpp"
#include "copforge/harness.hpp"
#include "copforge/heuristics.hpp"
#include "copforge/instance_io.hpp"
#include "copforge/oracles.hpp"
#include "copforge/solver_net.hpp"
#include "copforge/tai_render.hpp"
#include "copforge/text_encoder.hpp"
#include "copforge/trainer.hpp"
#include "test_util.hpp"

namespace copforge {
namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string Fmt(const char* fmt, ...) __attribute__((format(printf, 1, 2)));
std::string Fmt(const char* fmt, ...) {
  char buf[1024];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return buf;
}

double Mean(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Desk-scale training setup shared by criteria 6-8.
constexpr int kDeskDim = 256;
constexpr int kDeskSteps = 2000;

TrainConfig DeskTrain(std::vector<TaskSpec> tasks, uint64_t seed) {
  TrainConfig t;
  t.tasks = std::move(tasks);
  t.batch_size = 32;
  t.steps = kDeskSteps;
  t.adam.lr = 1e-3;
  t.seed = seed;
  return t;
}

TrainState TrainDesk(const TrainConfig& train, EmbeddingProvider& provider,
                     const TrainOptions& options = {}) {
  TrainState s = TrainState::Fresh(TinyModelConfig(kDeskDim), train, provider);
  Train(s, provider, options);
  return s;
}

double MeanGreedy(const TrainState& s, std::span<const ProblemInstance> eval,
                  EmbeddingProvider& provider) {
  return Mean(EvaluatePolicy(s, eval, provider, true, true).objectives);
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

Verdict GradientCorrectness() {
  const ModelConfig config = testing::GradCheckConfig(16);
  HashEncoder enc(16, 0);
  CountedRng rng(1);
  double worst = 0.0;
  std::string worst_where;
  for (int pair = 0; pair < 50; ++pair) {
    const ProblemKind kind = kAllKinds[pair % kAllKinds.size()];
    const ProblemInstance inst = Generate(kind, 4, 500 + pair);
    const EmbeddingMatrix emb = EmbedInstance(enc, Render(inst, true));
    const Parameters params = Parameters::Initialize(config, 900 + pair);
    PolicyPass pass(config, params, NormMode::kTrain, nullptr, false);
    pass.Encode({&inst, 1}, {&emb, 1});
    const auto starts = CopEnv(inst).StartNodes();
    const RolloutRequest req{0, starts[rng.Below(starts.size())], {}};
    CountedRng sample(SubSeed(7, "rollout", pair));
    const auto rollouts = pass.Run({&req, 1}, DecodeMode::kSample, &sample);
    const double w = rng.Uniform(0.5, 1.5);
    const auto res = testing::CheckLogProbGradient(config, params, {&inst, 1}, {&emb, 1},
                                                   rollouts, {&w, 1});
    if (res.max_rel_error > worst) {
      worst = res.max_rel_error;
      worst_where = std::string(KindName(kind)) + " " + res.worst_block;
    }
  }
  return {worst < 1e-4,
          Fmt("max relative error %.3g over 50 pairs (worst: %s), bound 1e-4", worst,
              worst_where.c_str())};
}

// ---------------------------------------------------------------------------
// 2. Feasibility closure, checked by an independent validator.

std::string CheckIndependently(const ProblemInstance& inst, const std::vector<int>& seq,
                               double* objective) {
  const int n = inst.n;
  auto dist = [&](int a, int b) {
    return std::hypot(inst.coords[a].x - inst.coords[b].x, inst.coords[a].y - inst.coords[b].y);
  };
  switch (inst.kind) {
    case ProblemKind::kTsp: {
      std::vector<int> sorted = seq;
      std::sort(sorted.begin(), sorted.end());
      for (int i = 0; i < n; ++i) {
        if (static_cast<int>(sorted.size()) != n || sorted[i] != i) return "not a permutation";
      }
      double len = 0.0;
      for (int i = 0; i < n; ++i) len += dist(seq[i], seq[(i + 1) % n]);
      *objective = len;
      return "";
    }
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb: {
      std::vector<int> seen(n + 1, 0);
      double line = 0.0, back = 0.0, len = 0.0;
      bool in_back = false;
      int prev = 0;
      for (int v : seq) {
        if (v < 0 || v > n) return "index out of range";
        len += dist(prev, v);
        prev = v;
        if (v == 0) {
          line = back = 0.0;
          in_back = false;
          continue;
        }
        if (++seen[v] > 1) return "customer visited twice";
        const double d = inst.demands[v - 1];
        if (d < 0) {
          in_back = true;
          back += -d;
        } else {
          if (in_back) return "linehaul after backhaul";
          line += d;
        }
        if (line > inst.capacity + 1e-9 || back > inst.capacity + 1e-9) return "capacity exceeded";
      }
      len += dist(prev, 0);
      for (int i = 1; i <= n; ++i) {
        if (seen[i] != 1) return "customer not served";
      }
      *objective = len;
      return "";
    }
    case ProblemKind::kKp: {
      std::set<int> items(seq.begin(), seq.end());
      if (items.size() != seq.size()) return "item taken twice";
      double w = 0.0, v = 0.0;
      for (int i : seq) {
        if (i < 0 || i >= n) return "index out of range";
        w += inst.weights[i];
        v += inst.values[i];
      }
      if (w > inst.capacity + 1e-9) return "capacity exceeded";
      *objective = v;
      return "";
    }
    case ProblemKind::kMvcp:
    case ProblemKind::kMisp: {
      std::set<int> chosen(seq.begin(), seq.end());
      if (chosen.size() != seq.size()) return "vertex chosen twice";
      for (const Edge& e : inst.edges) {
        const bool u = chosen.count(e.u) > 0, v = chosen.count(e.v) > 0;
        if (inst.kind == ProblemKind::kMvcp && !u && !v) return "edge uncovered";
        if (inst.kind == ProblemKind::kMisp && u && v) return "adjacent vertices chosen";
      }
      *objective = static_cast<double>(chosen.size());
      return "";
    }
    case ProblemKind::kSmtwtp: {
      std::vector<int> sorted = seq;
      std::sort(sorted.begin(), sorted.end());
      for (int i = 0; i < n; ++i) {
        if (static_cast<int>(sorted.size()) != n || sorted[i] != i) return "not a permutation";
      }
      double t = 0.0, tardiness = 0.0;
      for (int j : seq) {
        t += inst.proc_times[j];
        tardiness += inst.job_weights[j] * std::max(0.0, t - inst.due_dates[j]);
      }
      *objective = tardiness;
      return "";
    }
  }
  return "unknown kind";
}

Verdict FeasibilityClosure() {
  constexpr int kPerKind = 10000;
  const ModelConfig config = TinyModelConfig(32);
  HashEncoder enc(32, 0);
  std::string detail;
  bool ok = true;
  for (ProblemKind kind : kAllKinds) {
    int rollouts = 0, infeasible = 0, rejected = 0, mismatched = 0, batch = 0;
    std::string first_problem;
    while (rollouts < kPerKind) {
      const Parameters params = Parameters::Initialize(config, SubSeed(3, KindName(kind), batch));
      std::vector<ProblemInstance> insts;
      std::vector<EmbeddingMatrix> embs;
      for (int i = 0; i < 20; ++i) {
        insts.push_back(Generate(kind, 10, SubSeed(batch, "feasibility", i)));
        embs.push_back(EmbedInstance(enc, Render(insts.back(), true)));
      }
      PolicyPass pass(config, params, NormMode::kTrain, nullptr, false);
      pass.Encode(insts, embs);
      CountedRng rng(SubSeed(batch, KindName(kind)));
      std::vector<Rollout> out;
      try {
        out = pass.Run(StartRequests(insts, true, 5), DecodeMode::kSample, &rng);
      } catch (const MaskedChoice& e) {
        ++infeasible;
        first_problem = e.what();
        break;
      }
      for (const Rollout& r : out) {
        ++rollouts;
        const ProblemInstance& inst = insts[r.instance];
        double objective = 0.0;
        const std::string problem = CheckIndependently(inst, r.actions, &objective);
        if (!problem.empty()) {
          ++infeasible;
          if (first_problem.empty()) first_problem = problem;
        }
        try {
          Evaluate(inst, r.actions);
        } catch (const InfeasibleSolution& e) {
          ++rejected;
          if (first_problem.empty()) first_problem = e.what();
        }
        if (problem.empty() && std::abs(objective - r.objective) > 1e-9) ++mismatched;
      }
      ++batch;
    }
    const bool kind_ok = infeasible == 0 && rejected == 0 && mismatched == 0;
    ok = ok && kind_ok;
    detail += Fmt("%s:%d/%d/%d ", std::string(KindName(kind)).c_str(), rollouts, infeasible,
                  rejected + mismatched);
    if (!first_problem.empty()) detail += "(" + first_problem + ") ";
  }
  return {ok, "rollouts/infeasible/rejected per kind: " + detail};
}

// ---------------------------------------------------------------------------
// 3. Conflict-erasing algebra.

TaskGradient Grad(std::vector<double> g) {
  TaskGradient t;
  t.g = std::move(g);
  return t;
}

Verdict SurgeryAlgebra() {
  const std::vector<TaskGradient> example = {Grad({1.0, 0.0}), Grad({-1.0, 1.0})};
  const auto sum = EraseConflicts(example, 0);
  const bool example_ok = sum == std::vector<double>{0.5, 1.5};

  // Residuals on random vectors and on real task gradients.
  double residual = 0.0;
  int projections = 0;
  CountedRng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TaskGradient> g;
    for (int t = 0; t < 2 + trial % 5; ++t) {
      std::vector<double> v(64);
      for (double& x : v) x = rng.Uniform(-1.0, 1.0);
      g.push_back(Grad(v));
    }
    SurgeryLog log;
    EraseConflicts(g, trial, &log);
    residual = std::max(residual, log.max_residual);
    projections += log.projections;
  }
  HashEncoder enc(32, 0);
  const ModelConfig config = TinyModelConfig(32);
  const Parameters params = Parameters::Initialize(config, 5);
  std::vector<TaskGradient> real;
  for (ProblemKind kind : kAllKinds) {
    std::vector<uint64_t> seeds = {1, 2, 3, 4};
    const TaskBatch batch = MakeTaskBatch({kind, 8}, seeds, enc, true);
    CountedRng r(SubSeed(9, KindName(kind)));
    real.push_back(ComputeTaskGradient(config, params, batch, true, false, r));
  }
  for (uint64_t seed = 0; seed < 20; ++seed) {
    SurgeryLog log;
    EraseConflicts(real, seed, &log);
    residual = std::max(residual, log.max_residual);
    projections += log.projections;
  }

  bool plain_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TaskGradient> g;
    std::vector<double> plain(40, 0.0);
    for (int t = 0; t < 3; ++t) {
      std::vector<double> v(40);
      for (double& x : v) x = rng.Uniform(0.0, 1.0);
      for (size_t k = 0; k < v.size(); ++k) plain[k] += v[k];
      g.push_back(Grad(v));
    }
    const auto out = EraseConflicts(g, trial);
    plain_ok = plain_ok && std::memcmp(out.data(), plain.data(), plain.size() * sizeof(double)) == 0;
  }
  return {example_ok && residual <= 1e-9 && plain_ok,
          Fmt("example sum (%.17g, %.17g); max residual %.3g over %d projections; "
              "no-conflict bit-exact: %s",
              sum[0], sum[1], residual, projections, plain_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 4. Oracle agreement against brute force.

double BruteForceTour(const ProblemInstance& inst) {
  std::vector<int> perm(inst.n - 1);
  std::iota(perm.begin(), perm.end(), 1);
  double best = std::numeric_limits<double>::infinity();
  do {
    double len = std::hypot(inst.coords[0].x - inst.coords[perm[0]].x,
                            inst.coords[0].y - inst.coords[perm[0]].y);
    for (size_t i = 0; i + 1 < perm.size(); ++i) {
      len += std::hypot(inst.coords[perm[i]].x - inst.coords[perm[i + 1]].x,
                        inst.coords[perm[i]].y - inst.coords[perm[i + 1]].y);
    }
    len += std::hypot(inst.coords[perm.back()].x - inst.coords[0].x,
                      inst.coords[perm.back()].y - inst.coords[0].y);
    best = std::min(best, len);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double BruteForceKnapsack(const ProblemInstance& inst) {
  double best = 0.0;
  for (uint32_t mask = 0; mask < (1u << inst.n); ++mask) {
    double w = 0.0, v = 0.0;
    for (int i = 0; i < inst.n; ++i) {
      if (mask >> i & 1) {
        w += inst.weights[i];
        v += inst.values[i];
      }
    }
    if (w <= inst.capacity + 1e-9) best = std::max(best, v);
  }
  return best;
}

Verdict OracleAgreement() {
  int tsp_bad = 0, kp_bad = 0, graph_bad = 0;
  double tsp_err = 0.0, kp_err = 0.0;
  for (int seed = 0; seed < 200; ++seed) {
    const int n = 4 + seed % 6;  // 4..9
    const ProblemInstance tsp = Generate(ProblemKind::kTsp, n, 10000 + seed);
    const double hk = Evaluate(tsp, HeldKarpTour(tsp.coords));
    const double err = std::abs(hk - BruteForceTour(tsp));
    tsp_err = std::max(tsp_err, err);
    if (err > 1e-9) ++tsp_bad;

    const ProblemInstance kp = Generate(ProblemKind::kKp, 6 + seed % 13, 20000 + seed);  // 6..18
    const double dp = KnapsackDp(kp.weights, kp.values, kp.capacity).value;
    const double kerr = std::abs(dp - BruteForceKnapsack(kp));
    kp_err = std::max(kp_err, kerr);
    if (kerr > 1e-9) ++kp_bad;

    const ProblemInstance g = Generate(ProblemKind::kMvcp, 5 + seed % 12, 30000 + seed);  // 5..16
    const auto mvc = MinimumVertexCover(g.n, g.edges);
    const auto mis = MaximumIndependentSet(g.n, g.edges);
    std::vector<uint8_t> in_cover(g.n, 0), in_set(g.n, 0);
    for (int v : mvc) in_cover[v] = 1;
    for (int v : mis) in_set[v] = 1;
    bool valid = true;
    for (const Edge& e : g.edges) {
      valid = valid && (in_cover[e.u] || in_cover[e.v]) && !(in_set[e.u] && in_set[e.v]);
    }
    if (!valid || static_cast<int>(mvc.size() + mis.size()) != g.n) ++graph_bad;
  }
  return {tsp_bad == 0 && kp_bad == 0 && graph_bad == 0,
          Fmt("Held-Karp vs brute force: %d/200 disagree (max diff %.2g); KP DP vs enumeration: "
              "%d/200 (max diff %.2g); |MVC|+|MIS|!=n or invalid: %d/200",
              tsp_bad, tsp_err, kp_bad, kp_err, graph_bad)};
}

// ---------------------------------------------------------------------------
// 5. Distribution sanity against the reported values.

Verdict DistributionSanity() {
  std::vector<double> hk, kp, nn_gap;
  for (int seed = 0; seed < 100; ++seed) {
    const ProblemInstance tsp = Generate(ProblemKind::kTsp, 20, seed);
    const double opt = Evaluate(tsp, HeldKarpTour(tsp.coords));
    hk.push_back(opt);
    nn_gap.push_back(OptimalityGap(ProblemKind::kTsp, Evaluate(tsp, NearestNeighborTour(tsp, 0)), opt));
    const ProblemInstance k = Generate(ProblemKind::kKp, 20, seed);
    kp.push_back(KnapsackDp(k.weights, k.values, k.capacity).value);
  }
  const double hk_mean = Mean(hk), kp_mean = Mean(kp), gap = Mean(nn_gap);
  const bool ok = hk_mean >= 3.75 && hk_mean <= 3.95 && kp_mean >= 7.7 && kp_mean <= 8.2 &&
                  gap >= 0.12 && gap <= 0.22;
  return {ok, Fmt("TSP20 optimum mean %.4f in [3.75, 3.95] (reference 3.85); KP20 optimum mean %.4f "
                  "in [7.7, 8.2] (reference 7.948); nearest-neighbor TSP20 gap %.2f%% in [12, 22] "
                  "(reference 17.21%%)",
                  hk_mean, kp_mean, 100 * gap)};
}

// ---------------------------------------------------------------------------
// 6. Learning signal on TSP10.

Verdict LearningSignal() {
  HashEncoder enc(kDeskDim, 0);
  const TaskSpec tsp{ProblemKind::kTsp, 10};
  const auto eval = EvalInstances(tsp, 0, 200);
  std::vector<double> opt;
  for (const auto& inst : eval) opt.push_back(SolveExact(inst).objective);
  const double opt_mean = Mean(opt);

  TrainConfig on = DeskTrain({tsp}, 0);
  const TrainState with_ms = TrainDesk(on, enc);
  TrainConfig off = on;
  off.multi_start = false;
  const TrainState without_ms = TrainDesk(off, enc);

  auto gap = [&](const TrainState& s, bool multi_start) {
    const auto out = EvaluatePolicy(s, eval, enc, true, multi_start);
    return ComputeGaps(tsp.kind, tsp.n, "lncs", out.objectives, opt, out.seconds).mean_gap;
  };
  const double g_on = gap(with_ms, true);
  const double g_off = gap(without_ms, true);
  const double g_off_single = gap(without_ms, false);
  return {g_on < 0.08 && g_off >= g_on,
          Fmt("greedy multi-start gap %.2f%% (< 8%%) over 200 held-out TSP10, Held-Karp mean "
              "%.4f; trained without multi-start: %.2f%% (must not beat it; %.2f%% with "
              "single-start decoding)",
              100 * g_on, opt_mean, 100 * g_off, 100 * g_off_single)};
}

// ---------------------------------------------------------------------------
// 7. Multi-task training with conflict erasing.

Verdict MultiTask() {
  HashEncoder enc(kDeskDim, 0);
  const TaskSpec tsp{ProblemKind::kTsp, 10};
  const TaskSpec kp{ProblemKind::kKp, 20};
  bool ok = true;
  std::string detail;
  int cgerl_better = 0;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    const auto tsp_eval = EvalInstances(tsp, seed, 200);
    const auto kp_eval = EvalInstances(kp, seed, 200);

    const auto dir = testing::TempDir("acceptance_multitask_" + std::to_string(seed));
    int logged = 0;
    bool cosine_ok = true;
    TrainOptions opts;
    opts.out_dir = dir;
    opts.on_step = [&](const StepMetrics& m) {
      ++logged;
      cosine_ok = cosine_ok && m.cosine.size == 2 && std::isfinite(m.cosine.at(0, 1));
    };
    bool finite = true;
    TrainState joint;
    try {
      joint = TrainDesk(DeskTrain({tsp, kp}, seed), enc, opts);
    } catch (const NonFiniteValue&) {
      finite = false;
    }
    int lines = 0;
    {
      std::istringstream in(ReadFile(dir / "metrics.jsonl"));
      std::string line;
      while (std::getline(in, line)) {
        const auto m = nlohmann::json::parse(line);
        if (m.at("cosine").at("values").size() == 2) ++lines;
      }
    }
    if (!finite) {
      ok = false;
      detail += Fmt("seed %llu: non-finite update; ", static_cast<unsigned long long>(seed));
      continue;
    }
    const TrainState single_tsp = TrainDesk(DeskTrain({tsp}, seed), enc);
    const TrainState single_kp = TrainDesk(DeskTrain({kp}, seed), enc);
    TrainConfig plain_cfg = DeskTrain({tsp, kp}, seed);
    plain_cfg.surgery = false;
    const TrainState plain = TrainDesk(plain_cfg, enc);

    const double j_tsp = MeanGreedy(joint, tsp_eval, enc);
    const double j_kp = MeanGreedy(joint, kp_eval, enc);
    const double s_tsp = MeanGreedy(single_tsp, tsp_eval, enc);
    const double s_kp = MeanGreedy(single_kp, kp_eval, enc);
    const double p_tsp = MeanGreedy(plain, tsp_eval, enc);
    const double p_kp = MeanGreedy(plain, kp_eval, enc);
    // TSP is minimized, KP maximized.
    const bool seed_ok = logged == kDeskSteps && lines == kDeskSteps && cosine_ok &&
                         j_tsp <= 1.10 * s_tsp && j_kp >= s_kp / 1.10;
    ok = ok && seed_ok;
    // Directional comparison with plain averaging: relative advantage summed over tasks.
    if ((p_tsp - j_tsp) / s_tsp + (j_kp - p_kp) / s_kp > 0) ++cgerl_better;
    detail += Fmt("seed %llu: joint tsp %.4f vs single %.4f, joint kp %.4f vs single %.4f, "
                  "plain-avg tsp %.4f kp %.4f, cosine rows %d; ",
                  static_cast<unsigned long long>(seed), j_tsp, s_tsp, j_kp, s_kp, p_tsp, p_kp,
                  lines);
  }
  detail += Fmt("conflict erasing ahead of plain averaging in %d/3 seeds (reported only)",
                cgerl_better);
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 8. Fine-tuning transfer.

Verdict FinetuneTransfer() {
  HashEncoder enc(kDeskDim, 0);
  const TrainState pretrained = TrainDesk(DeskTrain({{ProblemKind::kTsp, 10}}, 0), enc);
  const TaskSpec vrpb{ProblemKind::kVrpb, 10};
  int wins = 0;
  std::string detail;
  for (int seed = 0; seed < 10; ++seed) {
    TrainState base = pretrained;
    base.train.seed = 100 + seed;
    const FinetuneResult ft = Finetune(base, vrpb, 1, enc);
    TrainConfig scratch_cfg = ft.state.train;
    const TrainState scratch = TrainState::Fresh(base.model, scratch_cfg, enc);
    const double s = BatchObjective(scratch, enc, vrpb, 0);
    if (ft.objectives[0] < s) ++wins;
    detail += Fmt("%.3f/%.3f ", ft.objectives[0], s);
  }
  return {wins >= 8, Fmt("fine-tuned beats scratch on the first VRPB10 batch in %d/10 seeds "
                         "(need 8); fine-tuned/scratch mean length: %s",
                         wins, detail.c_str())};
}

// ---------------------------------------------------------------------------
// 9. Determinism of whole experiments.

std::vector<std::string> ArtifactDiffs(const std::filesystem::path& a,
                                       const std::filesystem::path& b) {
  std::vector<std::string> diffs;
  std::set<std::filesystem::path> files;
  for (const auto& root : {a, b}) {
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
      if (e.is_regular_file()) files.insert(std::filesystem::relative(e.path(), root));
    }
  }
  for (const auto& rel : files) {
    if (rel.filename() == ".copforge.lock") continue;
    if (!std::filesystem::exists(a / rel) || !std::filesystem::exists(b / rel)) {
      diffs.push_back(rel.string() + " missing");
      continue;
    }
    std::string x = ReadFile(a / rel), y = ReadFile(b / rel);
    if (rel.filename() == "spec.json") {
      // The only field allowed to differ is where the run was written.
      auto j = nlohmann::json::parse(x), k = nlohmann::json::parse(y);
      j.erase("out_dir");
      k.erase("out_dir");
      x = j.dump();
      y = k.dump();
    } else if (rel.extension() == ".csv") {
      x = StripTimeColumn(x);
      y = StripTimeColumn(y);
    } else if (rel.filename() == "metrics.jsonl") {
      auto strip = [](const std::string& s) {
        std::istringstream in(s);
        std::string line, out;
        while (std::getline(in, line)) {
          auto j = nlohmann::json::parse(line);
          j.erase("wall_ms");
          out += j.dump() + "\n";
        }
        return out;
      };
      x = strip(x);
      y = strip(y);
    }
    if (x != y) diffs.push_back(rel.string());
  }
  return diffs;
}

Verdict Determinism() {
  std::vector<ExperimentSpec> specs(2);
  specs[0].name = "hash-surgery";
  specs[0].tasks = {{ProblemKind::kTsp, 6}, {ProblemKind::kKp, 8}, {ProblemKind::kMisp, 7}};
  specs[0].seed = 11;
  specs[0].eval_count = 20;
  specs[0].provider.dim = 32;
  specs[0].model = TinyModelConfig(32);
  specs[0].train.batch_size = 6;
  specs[0].train.steps = 30;
  specs[0].train.adam.lr = 1e-3;
  specs[0].train.checkpoint_every = 10;

  specs[1] = specs[0];
  specs[1].name = "cache-plain";
  specs[1].tasks = {{ProblemKind::kCvrp, 6}, {ProblemKind::kSmtwtp, 6}, {ProblemKind::kVrpb, 6}};
  specs[1].seed = 12;
  specs[1].hints = false;
  specs[1].train.surgery = false;
  specs[1].train.multi_start = false;

  const auto root = testing::TempDir("acceptance_determinism");
  // The second spec reads embeddings from a cache filled by the hash encoder.
  {
    HashEncoder fill(32, 0);
    std::vector<TextAttributedInstance> tais;
    const TrainConfig t = specs[1].EffectiveTrain();
    for (const TaskSpec& task : t.tasks) {
      for (const auto& inst : EvalInstances(task, specs[1].seed, specs[1].eval_count)) {
        tais.push_back(Render(inst, specs[1].hints));
      }
      for (int step = 0; step < t.steps; ++step) {
        for (int b = 0; b < t.batch_size; ++b) {
          tais.push_back(Render(Generate(task.kind, task.n, TrainInstanceSeed(t.seed, step, task, b)),
                                specs[1].hints));
        }
      }
    }
    FillCache(fill, tais, root / "emb.lnce");
  }
  specs[1].provider.kind = ProviderKind::kCache;
  specs[1].provider.cache_path = root / "emb.lnce";

  bool ok = true;
  std::string detail;
  for (const ExperimentSpec& base : specs) {
    std::vector<std::filesystem::path> dirs;
    for (int run = 0; run < 2; ++run) {
      ExperimentSpec spec = base;
      spec.out_dir = root / (base.name + "_run" + std::to_string(run));
      auto provider = MakeProvider(spec.provider);
      RunExperiment(spec, *provider);
      dirs.push_back(spec.out_dir);
    }
    const auto diffs = ArtifactDiffs(dirs[0], dirs[1]);
    size_t files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dirs[0])) files += e.is_regular_file();
    ok = ok && diffs.empty() && files > 10;
    detail += Fmt("%s: %zu files, %zu differ", base.name.c_str(), files, diffs.size());
    for (const auto& d : diffs) detail += " [" + d + "]";
    detail += "; ";
  }
  return {ok, detail + "wall-time fields excluded"};
}

// ---------------------------------------------------------------------------
// 10. Provider contract: hash -> cache -> http.

Verdict ProviderContract() {
  const auto dir = testing::TempDir("acceptance_provider");
  HashEncoder hash(kDeskDim, 3);
  std::vector<TextAttributedInstance> tais;
  for (ProblemKind kind : kAllKinds) {
    for (int s = 0; s < 5; ++s) {
      tais.push_back(Render(Generate(kind, 12, s), true));
      tais.push_back(Render(Generate(kind, 12, s), false));
    }
  }
  FillCache(hash, tais, dir / "stage1.lnce");
  CacheEncoder cache(dir / "stage1.lnce");
  EmbeddingServer server(cache);
  server.Start();
  HttpEncoderOptions o;
  o.endpoint = server.endpoint();
  o.dim = kDeskDim;
  o.batch_size = 16;
  o.cache_path = dir / "stage2.lnce";
  HttpEncoder http(o);

  int compared = 0, differ = 0;
  auto same = [](const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.nodes.rows() == b.nodes.rows() && a.nodes.cols() == b.nodes.cols() &&
           std::memcmp(a.nodes.data(), b.nodes.data(), sizeof(float) * a.nodes.size()) == 0 &&
           std::memcmp(a.task.data(), b.task.data(), sizeof(float) * a.task.size()) == 0;
  };
  for (const auto& tai : tais) {
    const EmbeddingMatrix h = EmbedInstance(hash, tai);
    const EmbeddingMatrix c = EmbedInstance(cache, tai);
    const EmbeddingMatrix w = EmbedInstance(http, tai);
    ++compared;
    if (!same(h, c) || !same(h, w)) ++differ;
  }
  CacheEncoder through(dir / "stage2.lnce");
  for (const auto& tai : tais) {
    if (!same(EmbedInstance(hash, tai), EmbedInstance(through, tai))) ++differ;
  }
  server.Stop();
  return {differ == 0 && compared == static_cast<int>(tais.size()),
          Fmt("%d instances x 4 paths (hash, cache, http, http write-through cache): %d differ; "
              "%d HTTP requests",
              compared, differ, http.requests_sent())};
}

const std::vector<std::pair<std::string, std::function<Verdict()>>>& Criteria() {
  static const std::vector<std::pair<std::string, std::function<Verdict()>>> kCriteria = {
      {"gradient correctness", GradientCorrectness},
      {"feasibility closure", FeasibilityClosure},
      {"conflict-erasing algebra", SurgeryAlgebra},
      {"oracle agreement", OracleAgreement},
      {"distribution sanity", DistributionSanity},
      {"learning signal", LearningSignal},
      {"multi-task training", MultiTask},
      {"fine-tuning transfer", FinetuneTransfer},
      {"determinism", Determinism},
      {"encoder-provider contract", ProviderContract},
  };
  return kCriteria;
}

}  // namespace
}  // namespace copforge

int main(int argc, char** argv) {
  using namespace copforge;
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      selected.push_back(std::atoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: %s [--only k]...\n", argv[0]);
      return 2;
    }
  }
  const auto& criteria = Criteria();
  if (selected.empty()) {
    for (size_t k = 1; k <= criteria.size(); ++k) selected.push_back(static_cast<int>(k));
  }
  bool all = true;
  for (int k : selected) {
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::fprintf(stderr, "no criterion %d\n", k);
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k - 1].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d %s: %s [%s, %.1fs]\n", k, v.pass ? "PASS" : "FAIL",
                criteria[k - 1].first.c_str(), v.detail.c_str(), secs);
    std::fflush(stdout);
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
