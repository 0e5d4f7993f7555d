#include "copforge/solver_net.hpp"

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "copforge/errors.hpp"
#include "test_util.hpp"

namespace copforge {
namespace {

using testing::GradCheckConfig;
using testing::RandomEmbedding;

ModelConfig SmallConfig() {
  ModelConfig c = TinyModelConfig(24);
  c.d_h = 16;
  c.d_a = 16;
  c.d_ff = 32;
  return c;
}

EmbeddingMatrix EmbeddingFor(const ProblemInstance& inst, int dim, uint64_t seed) {
  CountedRng rng(seed);
  return RandomEmbedding(inst.num_choices(), dim, rng);
}

TEST(ModelConfigTest, ValidatesDivisibilityAndRoundTrips) {
  ModelConfig c = SmallConfig();
  c.heads = 3;
  EXPECT_THROW(c.Validate(), InvalidArgument);
  c = SmallConfig();
  c.clip = 0.0;
  EXPECT_THROW(c.Validate(), InvalidArgument);
  c = SmallConfig();
  c.norm_inference = NormInference::kInstance;
  EXPECT_EQ(ModelConfig::FromJson(c.ToJson()), c);
}

TEST(ParametersTest, LayoutIsContiguousAndNamed) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 3);
  size_t expected = 0;
  for (const ParamBlock& b : p.blocks()) {
    EXPECT_EQ(b.offset, expected);
    expected += static_cast<size_t>(b.rows) * b.cols;
  }
  EXPECT_EQ(p.size(), expected);
  EXPECT_EQ(p.BlockAt(0).name, "connector.w");
  EXPECT_EQ(p.BlockAt(p.size() - 1).name, "decoder.glimpse.wo");
  EXPECT_EQ(p.View(p.layers[0].bn1_gamma).minCoeff(), 1.0);
  EXPECT_EQ(p.View(p.layers[0].bn1_beta).maxCoeff(), 0.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c.d_o));
  EXPECT_LE(p.View(p.connector_w).cwiseAbs().maxCoeff(), bound);
  EXPECT_EQ(Parameters::Initialize(c, 3).flat()[5], p.flat()[5]);
  EXPECT_NE(Parameters::Initialize(c, 4).flat()[5], p.flat()[5]);
}

TEST(EncodeTest, ZeroConnectorGivesZeroTaskState) {
  const ModelConfig c = SmallConfig();
  Parameters p = Parameters::Initialize(c, 1);
  p.View(p.connector_w).setZero();
  p.View(p.connector_b).setZero();
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 6, 1);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 2);
  PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
  pass.Encode({&inst, 1}, {&emb, 1});
  EXPECT_EQ(pass.task_states().cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(pass.node_states().allFinite());
}

TEST(EncodeTest, ShapeAndDimensionContract) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 1);
  const ProblemInstance inst = Generate(ProblemKind::kCvrp, 7, 1);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 2);
  PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
  pass.Encode({&inst, 1}, {&emb, 1});
  EXPECT_EQ(pass.node_states().rows(), 8);
  EXPECT_EQ(pass.node_states().cols(), c.d_h);
  EXPECT_TRUE(pass.node_states().allFinite());

  const EmbeddingMatrix wrong = EmbeddingFor(inst, c.d_o + 1, 2);
  PolicyPass bad(c, p, NormMode::kTrain, nullptr, false);
  EXPECT_THROW(bad.Encode({&inst, 1}, {&wrong, 1}), DimensionMismatch);
  EmbeddingMatrix nan = emb;
  nan.nodes(0, 0) = std::nanf("");
  EXPECT_THROW(bad.Encode({&inst, 1}, {&nan, 1}), NonFiniteValue);
}

TEST(EncodeTest, PermutationEquivariant) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 5);
  NormStats running = NormStats::Initial(c);
  for (auto& m : running.mean) m.setConstant(0.1);
  for (NormMode mode : {NormMode::kTrain, NormMode::kInference}) {
    const ProblemInstance inst = Generate(ProblemKind::kTsp, 9, 3);
    const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 4);
    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    CountedRng rng(8);
    for (int i = 8; i > 0; --i) std::swap(perm[i], perm[rng.Below(i + 1)]);
    EmbeddingMatrix permuted = emb;
    ProblemInstance pinst = inst;
    for (int i = 0; i < 9; ++i) {
      permuted.nodes.row(i) = emb.nodes.row(perm[i]);
      pinst.coords[i] = inst.coords[perm[i]];
    }
    PolicyPass a(c, p, mode, &running, false);
    a.Encode({&inst, 1}, {&emb, 1});
    PolicyPass b(c, p, mode, &running, false);
    b.Encode({&pinst, 1}, {&permuted, 1});
    for (int i = 0; i < 9; ++i) {
      EXPECT_LT((b.node_states().row(i) - a.node_states().row(perm[i])).cwiseAbs().maxCoeff(),
                1e-10);
    }
  }
}

// Advances a fresh state by `steps` random feasible actions.
DecodingState RandomState(const CopEnv& env, int steps, CountedRng& rng) {
  DecodingState s = env.Reset();
  const auto starts = env.StartNodes();
  env.Step(s, starts[rng.Below(starts.size())]);
  for (int t = 0; t < steps && !s.done; ++t) {
    const auto mask = env.FeasibilityMask(s);
    std::vector<int> allowed;
    for (int j = 0; j < static_cast<int>(mask.size()); ++j) {
      if (mask[j]) allowed.push_back(j);
    }
    DecodingState next = s;
    env.Step(next, allowed[rng.Below(allowed.size())]);
    if (next.done) break;
    s = std::move(next);
  }
  return s;
}

TEST(DecodeTest, ProbabilitiesNormalizeAndRespectMask) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 9);
  CountedRng rng(10);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const ProblemKind kind = kAllKinds[trial % kAllKinds.size()];
    const ProblemInstance inst = Generate(kind, 6 + trial % 5, 100 + trial);
    const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, trial);
    PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
    pass.Encode({&inst, 1}, {&emb, 1});
    const CopEnv env(inst);
    for (int k = 0; k < 50; ++k) {
      const DecodingState s = RandomState(env, static_cast<int>(rng.Below(inst.n)), rng);
      if (s.done) continue;
      const auto probs = pass.DecodeProbabilities(0, s);
      const auto mask = env.FeasibilityMask(s);
      double total = 0.0;
      for (size_t j = 0; j < probs.size(); ++j) {
        if (!mask[j]) EXPECT_EQ(probs[j], 0.0);
        total += probs[j];
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
      ++checked;
    }
  }
  EXPECT_GE(checked, 9000);
}

TEST(DecodeTest, SingleFeasibleCandidateHasProbabilityOne) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 9);
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 4, 1);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 1);
  const CopEnv env(inst);
  DecodingState s = env.Reset();
  for (int j : {2, 0, 3}) env.Step(s, j);
  PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
  pass.Encode({&inst, 1}, {&emb, 1});
  const auto probs = pass.DecodeProbabilities(0, s);
  EXPECT_EQ(probs[1], 1.0);
}

TEST(DecodeTest, EqualLogitsGiveUniformFeasibleDistribution) {
  const ModelConfig c = SmallConfig();
  Parameters p = Parameters::Initialize(c, 9);
  p.View(p.glimpse_wo).setZero();
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 7, 1);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 1);
  const CopEnv env(inst);
  DecodingState s = env.Reset();
  env.Step(s, 3);
  env.Step(s, 5);
  PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
  pass.Encode({&inst, 1}, {&emb, 1});
  const auto probs = pass.DecodeProbabilities(0, s);
  for (int j = 0; j < 7; ++j) {
    EXPECT_NEAR(probs[j], (j == 3 || j == 5) ? 0.0 : 0.2, 1e-15);
  }
}

TEST(RolloutTest, ThreeNodeTourAndForcedStart) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 2);
  const NormStats running = NormStats::Initial(c);
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 3, 7);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 7);
  const auto rollouts =
      SolveInstance(c, p, running, inst, emb, DecodeMode::kGreedy, true, nullptr);
  ASSERT_EQ(rollouts.size(), 3u);
  for (const Rollout& r : rollouts) {
    EXPECT_EQ(r.actions.size(), 3u);
    EXPECT_EQ(r.actions[0], r.start);
    ASSERT_EQ(r.step_logp.size(), 2u);
    EXPECT_EQ(r.step_logp[1], 0.0);  // last node is forced by the mask
    EXPECT_DOUBLE_EQ(r.log_prob, r.step_logp[0] + r.step_logp[1]);
    EXPECT_EQ(r.objective, Evaluate(inst, r.actions));
    EXPECT_EQ(r.reward, -r.objective);
  }
}

TEST(RolloutTest, GreedyIsDeterministicAndMultiStartNeverHurts) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 2);
  const NormStats running = NormStats::Initial(c);
  for (ProblemKind kind : kAllKinds) {
    for (int seed = 0; seed < 5; ++seed) {
      const ProblemInstance inst = Generate(kind, 8, seed);
      const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, seed);
      const auto a = SolveInstance(c, p, running, inst, emb, DecodeMode::kGreedy, true);
      const auto b = SolveInstance(c, p, running, inst, emb, DecodeMode::kGreedy, true);
      ASSERT_EQ(a.size(), b.size());
      for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].actions, b[i].actions);
        EXPECT_EQ(a[i].step_logp, b[i].step_logp);
      }
      const auto single = SolveInstance(c, p, running, inst, emb, DecodeMode::kGreedy, false);
      ASSERT_EQ(single.size(), 1u);
      const double best = BestRollout(kind, a).objective;
      if (IsMaximization(kind)) {
        EXPECT_GE(best, single[0].objective);
      } else {
        EXPECT_LE(best, single[0].objective);
      }
    }
  }
}

TEST(RolloutTest, GreedyTourLengthInvariantUnderRelabeling) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 12);
  const NormStats running = NormStats::Initial(c);
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 8, 5);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 5);
  const std::vector<int> perm = {3, 7, 0, 5, 1, 6, 2, 4};
  ProblemInstance pinst = inst;
  EmbeddingMatrix pemb = emb;
  for (int i = 0; i < 8; ++i) {
    pinst.coords[i] = inst.coords[perm[i]];
    pemb.nodes.row(i) = emb.nodes.row(perm[i]);
  }
  const auto a = SolveInstance(c, p, running, inst, emb, DecodeMode::kGreedy, true);
  const auto b = SolveInstance(c, p, running, pinst, pemb, DecodeMode::kGreedy, true);
  EXPECT_NEAR(BestRollout(ProblemKind::kTsp, a).objective,
              BestRollout(ProblemKind::kTsp, b).objective, 1e-9);
}

TEST(RolloutTest, SampledFrequenciesMatchProbabilities) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 4);
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 5, 11);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 11);
  PolicyPass probe(c, p, NormMode::kTrain, nullptr, false);
  probe.Encode({&inst, 1}, {&emb, 1});
  const CopEnv env(inst);
  DecodingState s = env.Reset();
  env.Step(s, 2);
  const auto probs = probe.DecodeProbabilities(0, s);

  constexpr int kDraws = 100000;
  constexpr int kChunk = 10000;
  std::vector<int> counts(5, 0);
  CountedRng rng(77);
  for (int done = 0; done < kDraws; done += kChunk) {
    PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
    pass.Encode({&inst, 1}, {&emb, 1});
    const std::vector<RolloutRequest> req(kChunk, RolloutRequest{0, 2, {}});
    for (const Rollout& r : pass.Run(req, DecodeMode::kSample, &rng)) ++counts[r.actions[1]];
  }
  for (int j = 0; j < 5; ++j) {
    const double expected = kDraws * probs[j];
    const double sigma = std::sqrt(kDraws * probs[j] * (1 - probs[j]));
    EXPECT_LE(std::abs(counts[j] - expected), 3 * sigma + 1e-12) << "action " << j;
  }
  EXPECT_EQ(counts[2], 0);
}

TEST(GradientTest, MatchesFiniteDifferencesOnTinyModel) {
  const ModelConfig c = GradCheckConfig();
  CountedRng rng(21);
  for (int trial = 0; trial < 4; ++trial) {
    const ProblemKind kind = kAllKinds[trial];
    const Parameters p = Parameters::Initialize(c, 30 + trial);
    const ProblemInstance inst = Generate(kind, 4, 40 + trial);
    const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 50 + trial);
    PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
    pass.Encode({&inst, 1}, {&emb, 1});
    const auto req = StartRequests({&inst, 1}, true);
    CountedRng sample(60 + trial);
    const auto rollouts = pass.Run(req, DecodeMode::kSample, &sample);
    std::vector<double> w(rollouts.size());
    for (double& x : w) x = rng.Uniform(-1.0, 1.0);
    const auto res = testing::CheckLogProbGradient(c, p, {&inst, 1}, {&emb, 1}, rollouts, w);
    EXPECT_LT(res.max_rel_error, 1e-4) << KindName(kind) << " worst block " << res.worst_block;
    EXPECT_GT(res.max_abs_gradient, 0.0);
  }
}

TEST(GradientTest, ZeroWeightsLinearityAndLength) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 5);
  std::vector<ProblemInstance> insts = {Generate(ProblemKind::kTsp, 6, 1),
                                        Generate(ProblemKind::kTsp, 6, 2)};
  std::vector<EmbeddingMatrix> embs = {EmbeddingFor(insts[0], c.d_o, 1),
                                       EmbeddingFor(insts[1], c.d_o, 2)};
  PolicyPass pass(c, p, NormMode::kTrain, nullptr, false);
  pass.Encode(insts, embs);
  CountedRng rng(3);
  const auto rollouts = pass.Run(StartRequests(insts, true), DecodeMode::kSample, &rng);
  std::vector<double> zero(rollouts.size(), 0.0), w(rollouts.size()), w2(rollouts.size());
  for (size_t i = 0; i < w.size(); ++i) {
    w[i] = rng.Uniform(-1, 1);
    w2[i] = 2 * w[i];
  }
  const auto g0 = LogProbGradient(c, p, insts, embs, rollouts, zero);
  const auto g1 = LogProbGradient(c, p, insts, embs, rollouts, w);
  const auto g2 = LogProbGradient(c, p, insts, embs, rollouts, w2);
  ASSERT_EQ(g1.size(), p.size());
  double max_g = 0.0;
  for (size_t i = 0; i < g1.size(); ++i) {
    EXPECT_EQ(g0[i], 0.0);
    EXPECT_NEAR(g2[i], 2 * g1[i], 1e-10);
    max_g = std::max(max_g, std::abs(g1[i]));
  }
  EXPECT_GT(max_g, 0.0);
}

TEST(GradientTest, ReplayRejectsInfeasibleActions) {
  const ModelConfig c = SmallConfig();
  const Parameters p = Parameters::Initialize(c, 5);
  const ProblemInstance inst = Generate(ProblemKind::kTsp, 4, 1);
  const EmbeddingMatrix emb = EmbeddingFor(inst, c.d_o, 1);
  Rollout bad;
  bad.start = 0;
  bad.actions = {0, 1, 1, 2};
  const double w = 1.0;
  EXPECT_THROW(LogProbGradient(c, p, {&inst, 1}, {&emb, 1}, {&bad, 1}, {&w, 1}), MaskedChoice);
}

TEST(NormStatsTest, UpdateUsesUnbiasedVarianceAndRoundTrips) {
  const ModelConfig c = SmallConfig();
  NormStats s = NormStats::Initial(c);
  std::vector<ad::BatchStats> batch(2 * c.n_blocks);
  for (auto& b : batch) {
    b.mean = ad::RowVector::Constant(c.d_h, 1.0);
    b.var = ad::RowVector::Constant(c.d_h, 3.0);
    b.rows = 4;
  }
  s.Update(batch, 0.1);
  EXPECT_NEAR(s.mean[0][0], 0.1, 1e-15);
  EXPECT_NEAR(s.var[0][0], 0.9 + 0.1 * 4.0, 1e-15);
  NormStats t = NormStats::Initial(c);
  t.Unflatten(s.Flatten());
  EXPECT_EQ(t.Flatten(), s.Flatten());
}

}  // namespace
}  // namespace copforge
