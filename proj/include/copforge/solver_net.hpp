#ifndef COPFORGE_SOLVER_NET_HPP_
#define COPFORGE_SOLVER_NET_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "copforge/autodiff.hpp"
#include "copforge/cop_core.hpp"
#include "copforge/embedding.hpp"
#include "copforge/rng.hpp"

namespace copforge {

// How batch norm behaves outside training.
enum class NormInference {
  kRunning,   // running statistics accumulated during training
  kInstance,  // statistics of the single instance being decoded
};

struct ModelConfig {
  int d_o = 256;
  int d_h = 128;
  int n_blocks = 6;
  int heads = 8;
  int d_ff = 512;
  int d_a = 128;
  double clip = 10.0;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  uint64_t init_seed = 0;
  NormInference norm_inference = NormInference::kRunning;

  // Throws InvalidArgument.
  void Validate() const;
  nlohmann::json ToJson() const;
  static ModelConfig FromJson(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Small configuration used by tests and desk-scale experiments.
ModelConfig TinyModelConfig(int d_o = 256);

struct ParamBlock {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
};

// All trainable weights in one flat vector with named matrix views. Row
// vector convention: a linear layer maps x (1 x in) to x W + b.
class Parameters {
 public:
  Parameters() = default;
  // Zero-filled layout for `config`.
  explicit Parameters(const ModelConfig& config);
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; batch-norm
  // scale 1 and shift 0.
  static Parameters Initialize(const ModelConfig& config, uint64_t seed);

  size_t size() const { return flat_.size(); }
  std::span<double> flat() { return flat_; }
  std::span<const double> flat() const { return flat_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  int Index(const std::string& name) const;
  ad::MatrixMap View(int block);
  ad::ConstMatrixMap View(int block) const;
  // Block containing flat index i.
  const ParamBlock& BlockAt(size_t i) const;

  struct Layer {
    int wq, wk, wv, wo, bn1_gamma, bn1_beta, w1, b1, w2, b2, bn2_gamma, bn2_beta;
  };
  int connector_w = -1;
  int connector_b = -1;
  std::vector<Layer> layers;
  int context_w = -1;
  int glimpse_wk = -1;
  int glimpse_wv = -1;
  int glimpse_wo = -1;

 private:
  int Add(const std::string& name, int rows, int cols);
  std::vector<ParamBlock> blocks_;
  std::vector<double> flat_;
};

// Running batch-norm statistics, two norms per encoder block.
struct NormStats {
  std::vector<ad::RowVector> mean;
  std::vector<ad::RowVector> var;
  static NormStats Initial(const ModelConfig& config);
  // Exponential moving average with unbiased batch variance.
  void Update(std::span<const ad::BatchStats> batch, double momentum);
  size_t FlatSize() const;
  std::vector<double> Flatten() const;
  void Unflatten(std::span<const double> flat);
};

enum class DecodeMode { kGreedy, kSample };

// Whether batch norm uses statistics of the batch being encoded.
enum class NormMode { kTrain, kInference };

struct Rollout {
  int instance = 0;
  int start = -1;
  std::vector<int> actions;       // includes the forced start
  std::vector<double> step_logp;  // one per decoded (non-forced) step
  double log_prob = 0.0;
  double objective = 0.0;
  double reward = 0.0;
};

struct RolloutRequest {
  int instance = 0;
  int start = 0;
  // When non-empty, replay these actions (after the start) instead of
  // choosing; used for gradient checks and re-scoring.
  std::vector<int> forced;
};

// Multi-start requests: every start node, or only the first when
// `multi_start` is false. `copies` repeats each start.
std::vector<RolloutRequest> StartRequests(std::span<const ProblemInstance> instances,
                                          bool multi_start, int copies = 1);

// One recorded forward pass of the solver over a batch of instances sharing
// a node count: connector, attention encoder and the masked autoregressive
// decoder. Rollouts run in lockstep; the tape records everything needed to
// differentiate sum_r w_r log p(rollout r).
class PolicyPass {
 public:
  PolicyPass(const ModelConfig& config, const Parameters& params, NormMode norm_mode,
             const NormStats* running, bool record_gradient);

  // Encoder output for instance b occupies rows [row_offset(b), +rows).
  void Encode(std::span<const ProblemInstance> instances,
              std::span<const EmbeddingMatrix> embeddings);

  std::vector<Rollout> Run(std::span<const RolloutRequest> requests, DecodeMode mode,
                           CountedRng* rng);

  // Probability vector of the next action for a single live state of
  // instance b (t > 1). Exposed for tests.
  std::vector<double> DecodeProbabilities(int instance, const DecodingState& state);

  // Gradient of sum_r weights[r] * log p(rollout r) w.r.t. every parameter.
  // Call once, after Run. Throws NonFiniteValue naming the offending block.
  std::vector<double> Gradient(std::span<const double> weights);

  const ad::Matrix& node_states() const { return tape_.value(h_); }
  const ad::Matrix& task_states() const { return tape_.value(task_h_); }
  int row_offset(int b) const { return offsets_[b]; }
  const std::vector<ad::BatchStats>& batch_stats() const { return batch_stats_; }

 private:
  struct StepRecord {
    ad::Var picked;
    std::vector<int> rollout_ids;
  };
  struct DecodeOutput {
    ad::Var log_probs;
    std::vector<uint8_t> mask;
    int count = 0;
  };
  ad::Var Param(int block);
  DecodeOutput DecodeRows(std::span<const int> instance_ids,
                          std::span<const DecodingState* const> states);

  const ModelConfig& config_;
  const Parameters& params_;
  NormMode norm_mode_;
  const NormStats* running_;
  bool record_gradient_;
  ad::Tape tape_;
  std::vector<double> grad_;
  std::vector<ad::Var> param_vars_;
  std::vector<ad::BatchStats> batch_stats_;

  std::span<const ProblemInstance> instances_;
  std::vector<CopEnv> envs_;
  std::vector<int> offsets_;
  ad::Var h_;
  ad::Var task_h_;
  ad::Var glimpse_k_;
  ad::Var glimpse_v_;
  std::vector<StepRecord> steps_;
  size_t num_rollouts_ = 0;
  bool gradient_taken_ = false;
};

// Greedy or sampled rollouts for one instance, outside any training batch.
// Batch norm follows config.norm_inference.
std::vector<Rollout> SolveInstance(const ModelConfig& config, const Parameters& params,
                                   const NormStats& running, const ProblemInstance& inst,
                                   const EmbeddingMatrix& emb, DecodeMode mode,
                                   bool multi_start, CountedRng* rng = nullptr);

// Best rollout by objective (ties: lowest start).
const Rollout& BestRollout(ProblemKind kind, std::span<const Rollout> rollouts);

// Replays `rollouts` and returns the gradient of sum_r weights[r] log p(pi_r)
// with training-mode batch statistics over `instances`.
std::vector<double> LogProbGradient(const ModelConfig& config, const Parameters& params,
                                    std::span<const ProblemInstance> instances,
                                    std::span<const EmbeddingMatrix> embeddings,
                                    std::span<const Rollout> rollouts,
                                    std::span<const double> weights);

// Sum of log-probabilities of replayed rollouts (same pass as above).
std::vector<double> ReplayLogProbs(const ModelConfig& config, const Parameters& params,
                                   std::span<const ProblemInstance> instances,
                                   std::span<const EmbeddingMatrix> embeddings,
                                   std::span<const Rollout> rollouts);

}  // namespace copforge

#endif  // COPFORGE_SOLVER_NET_HPP_
