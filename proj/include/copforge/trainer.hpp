#ifndef COPFORGE_TRAINER_HPP_
#define COPFORGE_TRAINER_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "copforge/cop_core.hpp"
#include "copforge/solver_net.hpp"
#include "copforge/text_encoder.hpp"

namespace copforge {

struct TaskSpec {
  ProblemKind kind = ProblemKind::kTsp;
  int n = 10;
  bool operator==(const TaskSpec&) const = default;
};

std::string TaskName(const TaskSpec& t);  // e.g. "tsp10"

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  std::vector<TaskSpec> tasks;
  int batch_size = 32;       // instances per task per step
  bool multi_start = true;   // false: every sample starts at the first start node
  int steps = 1000;
  AdamConfig adam;
  bool surgery = true;       // conflict erasing; false averages task gradients
  bool normalize_rewards = false;  // divide advantages by the per-task reward std
  bool hints = true;
  uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final step

  // Throws InvalidArgument.
  void Validate() const;
  nlohmann::json ToJson() const;
  // Missing fields keep their defaults.
  static TrainConfig FromJson(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

// Seeds for training instances have the top bit clear; evaluation seeds set
// it, so the two pools can never overlap.
inline constexpr uint64_t kEvalSeedBit = 1ULL << 63;
uint64_t TrainInstanceSeed(uint64_t seed, int64_t step, const TaskSpec& task, int index);
uint64_t EvalInstanceSeed(uint64_t seed, const TaskSpec& task, int index);
bool IsEvalSeed(uint64_t instance_seed);

struct TaskGradient {
  TaskSpec task;
  std::vector<double> g;
  int instances = 0;
  int rollouts = 0;
  double mean_reward = 0.0;
  double mean_objective = 0.0;
};

struct TaskBatch {
  TaskSpec task;
  std::vector<ProblemInstance> instances;
  std::vector<EmbeddingMatrix> embeddings;
};

TaskBatch MakeTaskBatch(const TaskSpec& task, std::span<const uint64_t> seeds,
                        EmbeddingProvider& provider, bool hints);

// REINFORCE gradient of one task: sampled multi-start rollouts per instance,
// shared mean baseline per instance, rollout weights -A / (rollouts * B).
// `stats` receives the training-mode batch-norm statistics.
TaskGradient ComputeTaskGradient(const ModelConfig& config, const Parameters& params,
                                 const TaskBatch& batch, bool multi_start, bool normalize_rewards,
                                 CountedRng& rng, std::vector<ad::BatchStats>* stats = nullptr,
                                 std::vector<Rollout>* rollouts = nullptr);

// Per-instance advantages r - mean(r) in rollout order.
std::vector<double> SharedBaselineAdvantages(std::span<const Rollout> rollouts);

struct SurgeryLog {
  int projections = 0;
  int skipped_zero_norm = 0;
  double max_residual = 0.0;  // |g_hat_i . g_j| right after each projection
};

// Projects each task gradient off the normal planes of the conflicting
// original gradients, visiting the other tasks in a seeded random order, and
// returns the sum of the projected gradients.
std::vector<double> EraseConflicts(std::span<const TaskGradient> grads, uint64_t seed,
                                   SurgeryLog* log = nullptr);

std::vector<double> AverageGradients(std::span<const TaskGradient> grads);

struct CosineMatrix {
  int size = 0;
  std::vector<double> values;      // row-major size x size
  std::vector<uint8_t> zero_norm;  // per task
  double at(int i, int j) const { return values[static_cast<size_t>(i) * size + j]; }
  nlohmann::json ToJson() const;
};

// Pairwise cosine similarities; zero-norm gradients get 0 off the diagonal.
CosineMatrix ConflictDiagnostics(std::span<const TaskGradient> grads);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  int64_t t = 0;
};

void AdamStep(const AdamConfig& config, AdamState& state, std::span<double> params,
              std::span<const double> grad);

// Everything needed to continue training exactly.
struct TrainState {
  ModelConfig model;
  TrainConfig train;
  Parameters params;
  NormStats norm;
  AdamState adam;
  int64_t step = 0;
  std::string provider_id;
  std::string template_version;

  static TrainState Fresh(const ModelConfig& model, const TrainConfig& train,
                          const EmbeddingProvider& provider);
};

// Checkpoint = <stem>.json metadata + <stem>.bin blob of little-endian
// float64: parameters, norm statistics, Adam m, Adam v.
void SaveCheckpoint(const TrainState& state, const std::filesystem::path& json_path);
TrainState LoadCheckpoint(const std::filesystem::path& json_path);
std::filesystem::path CheckpointPath(const std::filesystem::path& dir, int64_t step);

struct StepMetrics {
  int64_t step = 0;  // 1-based index of the completed update
  std::vector<TaskGradient> tasks;  // gradients are dropped after logging
  std::vector<double> grad_norms;
  double combined_norm = 0.0;
  CosineMatrix cosine;
  SurgeryLog surgery;
  double wall_ms = 0.0;
  nlohmann::json ToJson() const;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const StepMetrics&)> on_step;
  // When set, stop after this many steps in this call (for resume tests).
  std::optional<int64_t> stop_after;
};

// Runs state.train.steps - state.step updates. Appends metrics.jsonl and
// checkpoints under out_dir. Throws NonFiniteValue on a non-finite update,
// leaving earlier checkpoints untouched.
void Train(TrainState& state, EmbeddingProvider& provider, const TrainOptions& options = {});

// The combined gradient that the next step would apply.
std::vector<double> NextStepGradient(const TrainState& state, EmbeddingProvider& provider);

// Mean sampled objective of the batch that step `step` of `train` would draw.
double BatchObjective(const TrainState& state, EmbeddingProvider& provider, const TaskSpec& task,
                      int64_t step);

struct FinetuneResult {
  TrainState state;
  std::vector<double> objectives;  // per-batch mean sampled objective, before each update
};

// Continues training `base` on `task` only with a fresh optimizer. Throws
// ConfigMismatch when the provider dimension differs from the checkpoint.
FinetuneResult Finetune(const TrainState& base, const TaskSpec& task, int steps,
                        EmbeddingProvider& provider, const TrainOptions& options = {});

// Greedy evaluation on held-out instances.
struct EvalOutcome {
  std::vector<double> objectives;
  double seconds = 0.0;
};
EvalOutcome EvaluatePolicy(const TrainState& state, std::span<const ProblemInstance> instances,
                           EmbeddingProvider& provider, bool hints, bool multi_start);

}  // namespace copforge

#endif  // COPFORGE_TRAINER_HPP_
