#ifndef COPFORGE_HARNESS_HPP_
#define COPFORGE_HARNESS_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "copforge/gap_report.hpp"
#include "copforge/tai_render.hpp"
#include "copforge/text_encoder.hpp"
#include "copforge/trainer.hpp"

namespace copforge {

// Everything an experiment writes follows from this record. train.seed,
// train.tasks and train.hints are overwritten from the top-level fields.
struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<TaskSpec> tasks;
  uint64_t seed = 0;
  int eval_count = 200;
  bool exact = false;  // require the exact oracle as gap reference
  bool hints = true;
  ProviderConfig provider;
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path out_dir;

  void Validate() const;
  // Normalized copy with train fields synced to the top-level ones.
  TrainConfig EffectiveTrain() const;
  nlohmann::json ToJson() const;
  static ExperimentSpec FromJson(const nlohmann::json& j);
};

nlohmann::json ProviderConfigToJson(const ProviderConfig& c);
ProviderConfig ProviderConfigFromJson(const nlohmann::json& j);

// Held-out instances; their seeds carry the evaluation bit.
std::vector<ProblemInstance> EvalInstances(const TaskSpec& task, uint64_t seed, int count);

// Reads instances and rejects any drawn from the training pool.
std::vector<ProblemInstance> LoadEvalInstances(const std::filesystem::path& path);

void WriteTaisJsonl(const std::filesystem::path& path,
                    const std::vector<TextAttributedInstance>& tais);

// Whether SolveExact accepts this size.
bool ExactSupported(ProblemKind kind, int n);

struct EvalRequest {
  const TrainState* policy = nullptr;  // omit the learned solver when null
  EmbeddingProvider* provider = nullptr;
  bool hints = true;
  bool multi_start = true;
  // Exact oracle as reference; throws CapabilityError above its size bound.
  // Otherwise the oracle is used where it applies and the per-instance best
  // heuristic elsewhere.
  bool exact = false;
};

// Table-2 style rows: the learned solver, every applicable heuristic and the
// reference itself, all against the same reference objectives.
std::vector<GapReport> EvaluateMethods(std::span<const ProblemInstance> instances,
                                       const EvalRequest& request);

// Removes the wall-time column so reports can be compared across runs.
std::string StripTimeColumn(const std::string& csv);

// Cosine history "step,i,j,cosine" from a metrics.jsonl file.
std::string CosineHistoryCsv(const std::filesystem::path& metrics_path);

// Concatenates every gap CSV under `dir` (sorted by path) below one header.
std::string MergeReports(const std::filesystem::path& dir);

// Exclusive advisory lock on <dir>/.copforge.lock, released on destruction.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

struct ExperimentResult {
  TrainState state;
  std::vector<GapReport> reports;
};

// Writes spec.json, instances/<task>.jsonl, tais/<task>.jsonl,
// train/{metrics.jsonl,ckpt-*.json,ckpt-*.bin,cosine.csv} and eval/gaps.csv.
ExperimentResult RunExperiment(const ExperimentSpec& spec, EmbeddingProvider& provider);

struct FinetuneComparison {
  std::vector<double> finetune;
  std::vector<double> scratch;
  std::string ToCsv() const;  // step,finetune_obj,scratch_obj
};

// Fine-tunes `base` on `task` and trains a fresh model with the same model
// and training config on the same batches for comparison.
FinetuneComparison CompareFinetune(const TrainState& base, const TaskSpec& task, int steps,
                                   EmbeddingProvider& provider,
                                   const std::filesystem::path& out_dir = {});

}  // namespace copforge

#endif  // COPFORGE_HARNESS_HPP_
