#include "copforge/harness.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include <gtest/gtest.h>

#include "copforge/errors.hpp"
#include "copforge/instance_io.hpp"
#include "copforge/oracles.hpp"
#include "test_util.hpp"

namespace copforge {
namespace {

ExperimentSpec SmallSpec(const std::filesystem::path& out) {
  ExperimentSpec s;
  s.name = "small";
  s.tasks = {{ProblemKind::kTsp, 5}, {ProblemKind::kKp, 6}};
  s.seed = 4;
  s.eval_count = 5;
  s.provider.dim = 16;
  s.model = testing::GradCheckConfig(16);
  s.train.batch_size = 3;
  s.train.steps = 4;
  s.train.checkpoint_every = 2;
  s.out_dir = out;
  return s;
}

const GapReport& Row(const std::vector<GapReport>& reports, const std::string& method) {
  for (const auto& r : reports) {
    if (r.method == method) return r;
  }
  throw std::runtime_error("no row " + method);
}

TEST(ExperimentSpecTest, JsonRoundTripAndValidation) {
  const ExperimentSpec s = SmallSpec("/tmp/x");
  const ExperimentSpec back = ExperimentSpec::FromJson(s.ToJson());
  EXPECT_EQ(back.ToJson(), s.ToJson());
  EXPECT_EQ(back.EffectiveTrain().tasks, s.tasks);
  EXPECT_EQ(back.EffectiveTrain().seed, 4u);
  ExperimentSpec bad = s;
  bad.provider.dim = 32;
  EXPECT_THROW(bad.Validate(), ConfigMismatch);
  bad = s;
  bad.tasks.clear();
  EXPECT_THROW(bad.Validate(), InvalidArgument);
}

TEST(ExperimentSpecTest, ShippedConfigsValidate) {
  int count = 0;
  for (const auto& e :
       std::filesystem::directory_iterator(std::filesystem::path(COPFORGE_SOURCE_DIR) / "tools/configs")) {
    const ExperimentSpec s = ExperimentSpec::FromJson(nlohmann::json::parse(ReadFile(e.path())));
    EXPECT_NO_THROW(s.Validate()) << e.path();
    EXPECT_EQ(s.model, TinyModelConfig(256)) << e.path();
    ++count;
  }
  EXPECT_GE(count, 2);
}

TEST(EvalSetTest, SeedPartitionEnforcedAtLoad) {
  const TaskSpec t{ProblemKind::kSmtwtp, 6};
  const auto eval = EvalInstances(t, 1, 10);
  for (const auto& inst : eval) EXPECT_TRUE(IsEvalSeed(inst.seed));
  EXPECT_EQ(eval, EvalInstances(t, 1, 10));
  const auto dir = testing::TempDir("evalset");
  WriteInstancesJsonl(dir / "eval.jsonl", eval);
  EXPECT_EQ(LoadEvalInstances(dir / "eval.jsonl"), eval);
  WriteInstancesJsonl(dir / "train.jsonl",
                      {Generate(t.kind, t.n, TrainInstanceSeed(1, 0, t, 0))});
  EXPECT_THROW(LoadEvalInstances(dir / "train.jsonl"), InvalidArgument);
}

TEST(EvaluateMethodsTest, TspRowsAgainstHeldKarp) {
  const auto eval = EvalInstances({ProblemKind::kTsp, 8}, 2, 30);
  const auto reports = EvaluateMethods(eval, {});
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_EQ(reports[0].method, "nearest_neighbor");
  EXPECT_EQ(reports[1].method, "farthest_insertion");
  double opt = 0.0;
  for (const auto& inst : eval) opt += Evaluate(inst, HeldKarpTour(inst.coords));
  EXPECT_NEAR(Row(reports, "exact").mean_obj, opt / 30, 1e-12);
  EXPECT_EQ(Row(reports, "exact").mean_gap, 0.0);
  for (const auto& r : reports) {
    EXPECT_EQ(r.reference, "exact");
    for (double g : r.gaps) EXPECT_GE(g, -1e-12);
  }
}

TEST(EvaluateMethodsTest, GreedyKnapsackGapNearReportedValue) {
  // Reference greedy gap at n = 20 is 0.67%.
  const auto eval = EvalInstances({ProblemKind::kKp, 20}, 0, 200);
  const auto reports = EvaluateMethods(eval, {});
  const double gap = Row(reports, "greedy_kp").mean_gap;
  EXPECT_GT(gap, 0.0);
  EXPECT_NEAR(gap, 0.0067, 0.005);
}

TEST(EvaluateMethodsTest, HeuristicReferenceAboveOracleBound) {
  const auto eval = EvalInstances({ProblemKind::kCvrp, 12}, 3, 10);
  const auto reports = EvaluateMethods(eval, {});
  ASSERT_EQ(reports.size(), 2u);
  for (size_t i = 0; i < eval.size(); ++i) {
    EXPECT_EQ(std::min(reports[0].gaps[i], reports[1].gaps[i]), 0.0);
  }
  EXPECT_EQ(reports[0].reference, "heuristic:best");
  EvalRequest exact;
  exact.exact = true;
  EXPECT_THROW(EvaluateMethods(eval, exact), CapabilityError);
}

TEST(EvaluateMethodsTest, IncludesPolicyAndRejectsMixedSets) {
  HashEncoder enc(16, 0);
  TrainConfig tc;
  tc.tasks = {{ProblemKind::kMvcp, 6}};
  tc.steps = 1;
  const TrainState s = TrainState::Fresh(testing::GradCheckConfig(16), tc, enc);
  const auto eval = EvalInstances(tc.tasks[0], 0, 5);
  EvalRequest req;
  req.policy = &s;
  req.provider = &enc;
  const auto reports = EvaluateMethods(eval, req);
  EXPECT_EQ(reports[0].method, "lncs");
  for (double g : reports[0].gaps) EXPECT_GE(g, 0.0);
  auto mixed = eval;
  mixed.push_back(EvalInstances({ProblemKind::kMvcp, 7}, 0, 1)[0]);
  EXPECT_THROW(EvaluateMethods(mixed, {}), InvalidArgument);
}

TEST(ReportTest, StripMergeAndEmptyDirectory) {
  EXPECT_EQ(StripTimeColumn("kind,n,method,mean_obj,mean_gap,total_seconds,gap_reference\n"
                            "tsp,5,x,1.0,0.1,3.2,exact\n"),
            "kind,n,method,mean_obj,mean_gap,gap_reference\ntsp,5,x,1.0,0.1,exact\n");
  const auto dir = testing::TempDir("report");
  EXPECT_EQ(MergeReports(dir), std::string(kGapCsvHeader) + "\n");
  EXPECT_EQ(MergeReports(dir / "absent"), std::string(kGapCsvHeader) + "\n");
  const std::string header = std::string(kGapCsvHeader) + "\n";
  WriteFileAtomic(dir / "b.csv", header + "kp,20,greedy_kp,7.7,0.006,0.0,exact\n");
  std::filesystem::create_directories(dir / "a");
  WriteFileAtomic(dir / "a" / "x.csv", header + "tsp,10,exact,2.8,0.0,0.1,exact\n");
  WriteFileAtomic(dir / "other.csv", "step,i,j,cosine\n1,0,1,0.5\n");
  EXPECT_EQ(MergeReports(dir), header + "tsp,10,exact,2.8,0.0,0.1,exact\n" +
                                   "kp,20,greedy_kp,7.7,0.006,0.0,exact\n");
}

TEST(DirLockTest, SecondHolderRejected) {
  const auto dir = testing::TempDir("lock");
  {
    DirLock first(dir);
    try {
      DirLock second(dir);
      FAIL() << "expected the lock to be held";
    } catch (const CopError& e) {
      EXPECT_EQ(e.code(), "locked");
    }
  }
  EXPECT_NO_THROW(DirLock again(dir));
}

TEST(RunExperimentTest, WritesEveryArtifact) {
  const auto dir = testing::TempDir("experiment");
  const ExperimentSpec spec = SmallSpec(dir);
  HashEncoder enc(16, 0);
  const ExperimentResult r = RunExperiment(spec, enc);
  EXPECT_EQ(r.state.step, 4);
  for (const char* f : {"spec.json", "instances/tsp5.jsonl", "instances/kp6.jsonl", "tais/tsp5.jsonl",
                        "train/metrics.jsonl", "train/ckpt-00000002.json", "train/ckpt-00000004.bin",
                        "train/cosine.csv", "eval/gaps.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  EXPECT_EQ(LoadEvalInstances(dir / "instances/kp6.jsonl"), EvalInstances(spec.tasks[1], 4, 5));
  const std::string cosine = ReadFile(dir / "train/cosine.csv");
  EXPECT_EQ(std::count(cosine.begin(), cosine.end(), '\n'), 1 + 4);
  const std::string gaps = ReadFile(dir / "eval/gaps.csv");
  EXPECT_NE(gaps.find("tsp,5,lncs,"), std::string::npos);
  EXPECT_NE(gaps.find("kp,6,greedy_kp,"), std::string::npos);
  // A rerun into the same directory rewrites rather than appends.
  RunExperiment(spec, enc);
  const std::string metrics = ReadFile(dir / "train/metrics.jsonl");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 4);
}

TEST(CompareFinetuneTest, CurvesAndCsv) {
  HashEncoder enc(16, 0);
  TrainConfig tc;
  tc.tasks = {{ProblemKind::kTsp, 5}};
  tc.batch_size = 3;
  tc.steps = 2;
  TrainState base = TrainState::Fresh(testing::GradCheckConfig(16), tc, enc);
  Train(base, enc);
  const auto dir = testing::TempDir("compare_ft");
  const FinetuneComparison c = CompareFinetune(base, {ProblemKind::kVrpb, 5}, 3, enc, dir);
  EXPECT_EQ(c.finetune.size(), 3u);
  EXPECT_EQ(c.scratch.size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir / "finetune" / "ckpt-00000003.json"));
  EXPECT_EQ(ReadFile(dir / "comparison.csv").rfind("step,finetune_obj,scratch_obj\n0,", 0), 0u);
}

// Runs the CLI; returns its exit status and captures both streams.
int RunCli(const std::string& args, std::string* out, std::string* err) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto out_path = dir / "copforge_cli_out.txt";
  const auto err_path = dir / "copforge_cli_err.txt";
  const std::string cmd = std::string(COPFORGE_CLI) + " " + args + " >" + out_path.string() +
                          " 2>" + err_path.string();
  const int status = std::system(cmd.c_str());
  *out = ReadFile(out_path);
  *err = ReadFile(err_path);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliTest, ReportOnEmptyDirectoryPrintsHeader) {
  const auto dir = testing::TempDir("cli_empty");
  std::string out, err;
  EXPECT_EQ(RunCli("report --in " + dir.string(), &out, &err), 0);
  EXPECT_EQ(out, std::string(kGapCsvHeader) + "\n");
}

TEST(CliTest, ErrorsAreMachineReadable) {
  std::string out, err;
  EXPECT_EQ(RunCli("eval --kind tsp --n 25 --count 2 --exact", &out, &err), 1);
  const auto rec = nlohmann::json::parse(err);
  EXPECT_EQ(rec["error"]["code"], "capability_exceeded");
  EXPECT_EQ(rec["error"]["subcommand"], "eval");

  const auto dir = testing::TempDir("cli_missing");
  EXPECT_EQ(RunCli("eval --kind tsp --n 5 --count 2 --checkpoint " + (dir / "none.json").string(),
                   &out, &err),
            1);
  EXPECT_EQ(nlohmann::json::parse(err)["error"]["code"], "io_error");
  EXPECT_EQ(RunCli("frobnicate", &out, &err), 2);
  EXPECT_EQ(nlohmann::json::parse(err)["error"]["code"], "usage");
}

TEST(CliTest, MissingEmbeddingNamesTheEmbedCommand) {
  const auto dir = testing::TempDir("cli_cache");
  std::string out, err;
  ASSERT_EQ(RunCli("embed --kind tsp --n 5 --count 1 --dim 16 --cache " + (dir / "c.lnce").string(),
                   &out, &err),
            0)
      << err;
  EXPECT_EQ(RunCli("train --kind tsp --n 5 --dim 16 --steps 1 --batch-size 2 --provider cache "
                   "--out " + (dir / "run").string() + " --cache " + (dir / "c.lnce").string(),
                   &out, &err),
            1);
  const auto rec = nlohmann::json::parse(err);
  EXPECT_EQ(rec["error"]["code"], "missing_embedding");
  const std::string hint = rec["error"]["hint"];
  EXPECT_NE(hint.find("copforge embed"), std::string::npos);
  EXPECT_NE(hint.find("--steps 1"), std::string::npos);
}

TEST(CliTest, GenerateEvalRoundTrip) {
  const auto dir = testing::TempDir("cli_roundtrip");
  std::string out, err;
  ASSERT_EQ(RunCli("generate --kind kp --n 10 --count 4 --seed 3 --out " +
                       (dir / "kp.jsonl").string(),
                   &out, &err),
            0);
  EXPECT_EQ(ReadInstances(dir / "kp.jsonl"), EvalInstances({ProblemKind::kKp, 10}, 3, 4));
  ASSERT_EQ(RunCli("eval --in " + (dir / "kp.jsonl").string() + " --out " +
                       (dir / "gaps.csv").string(),
                   &out, &err),
            0);
  EXPECT_NE(ReadFile(dir / "gaps.csv").find("kp,10,greedy_kp"), std::string::npos);
}

}  // namespace
}  // namespace copforge
