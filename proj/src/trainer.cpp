#include "copforge/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "copforge/errors.hpp"
#include "copforge/instance_io.hpp"

namespace copforge {

namespace {

double Dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double Norm(std::span<const double> a) { return std::sqrt(Dot(a, a)); }

bool AllFinite(std::span<const double> a) {
  for (double x : a) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void CheckSameLength(std::span<const TaskGradient> grads) {
  if (grads.empty()) throw InvalidArgument("need at least one task gradient");
  for (const TaskGradient& g : grads) {
    if (g.g.size() != grads[0].g.size()) throw DimensionMismatch("task gradient lengths differ");
  }
}

CountedRng RolloutRng(uint64_t seed, int64_t step, const TaskSpec& task) {
  return CountedRng(SubSeed(SubSeed(seed, "rollouts", static_cast<uint64_t>(step)), TaskName(task)));
}

std::vector<uint64_t> StepSeeds(const TrainConfig& train, int64_t step, const TaskSpec& task) {
  std::vector<uint64_t> seeds(train.batch_size);
  for (int b = 0; b < train.batch_size; ++b) seeds[b] = TrainInstanceSeed(train.seed, step, task, b);
  return seeds;
}

nlohmann::json TaskJson(const TaskSpec& t) { return {{"kind", KindName(t.kind)}, {"n", t.n}}; }

TaskSpec TaskFromJson(const nlohmann::json& j) {
  return TaskSpec{ParseKind(j.at("kind").get<std::string>()), j.at("n").get<int>()};
}

struct StepOutput {
  std::vector<TaskGradient> grads;
  std::vector<std::vector<ad::BatchStats>> stats;
};

StepOutput TaskGradientsForStep(const TrainState& state, EmbeddingProvider& provider) {
  StepOutput out;
  for (const TaskSpec& task : state.train.tasks) {
    const TaskBatch batch =
        MakeTaskBatch(task, StepSeeds(state.train, state.step, task), provider, state.train.hints);
    CountedRng rng = RolloutRng(state.train.seed, state.step, task);
    std::vector<ad::BatchStats> stats;
    out.grads.push_back(ComputeTaskGradient(state.model, state.params, batch,
                                            state.train.multi_start, state.train.normalize_rewards,
                                            rng, &stats));
    out.stats.push_back(std::move(stats));
  }
  return out;
}

std::vector<double> Combine(const TrainState& state, std::span<const TaskGradient> grads,
                            SurgeryLog* log) {
  if (state.train.surgery) {
    return EraseConflicts(grads, SubSeed(state.train.seed, "surgery", static_cast<uint64_t>(state.step)),
                          log);
  }
  return AverageGradients(grads);
}

void AppendLine(const std::filesystem::path& path, const std::string& line) {
  std::ofstream f(path, std::ios::app | std::ios::binary);
  if (!f) throw IoError("cannot append to " + path.string());
  f << line << '\n';
}

}  // namespace

std::string TaskName(const TaskSpec& t) {
  return std::string(KindName(t.kind)) + std::to_string(t.n);
}

void TrainConfig::Validate() const {
  if (tasks.empty()) throw InvalidArgument("train config needs at least one task");
  for (const TaskSpec& t : tasks) {
    if (t.n < 2) throw InvalidArgument("task size must be at least 2");
  }
  if (batch_size < 1) throw InvalidArgument("batch_size must be at least 1");
  if (steps < 0) throw InvalidArgument("steps must be non-negative");
  if (checkpoint_every < 0) throw InvalidArgument("checkpoint_every must be non-negative");
  if (!(adam.lr > 0.0) || !(adam.eps > 0.0) || adam.beta1 < 0.0 || adam.beta1 >= 1.0 ||
      adam.beta2 < 0.0 || adam.beta2 >= 1.0) {
    throw InvalidArgument("invalid Adam hyperparameters");
  }
}

nlohmann::json TrainConfig::ToJson() const {
  nlohmann::json t = nlohmann::json::array();
  for (const TaskSpec& s : tasks) t.push_back(TaskJson(s));
  return {{"tasks", t},
          {"batch_size", batch_size},
          {"multi_start", multi_start},
          {"steps", steps},
          {"adam", {{"lr", adam.lr}, {"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
          {"surgery", surgery},
          {"normalize_rewards", normalize_rewards},
          {"hints", hints},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::FromJson(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("tasks")) {
    for (const auto& t : j["tasks"]) c.tasks.push_back(TaskFromJson(t));
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.multi_start = j.value("multi_start", c.multi_start);
  c.steps = j.value("steps", c.steps);
  if (j.contains("adam")) {
    const auto& a = j["adam"];
    c.adam.lr = a.value("lr", c.adam.lr);
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  c.surgery = j.value("surgery", c.surgery);
  c.normalize_rewards = j.value("normalize_rewards", c.normalize_rewards);
  c.hints = j.value("hints", c.hints);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  return c;
}

uint64_t TrainInstanceSeed(uint64_t seed, int64_t step, const TaskSpec& task, int index) {
  const uint64_t s = SubSeed(seed, "train:" + TaskName(task), static_cast<uint64_t>(step));
  return SubSeed(s, "instance", static_cast<uint64_t>(index)) & ~kEvalSeedBit;
}

uint64_t EvalInstanceSeed(uint64_t seed, const TaskSpec& task, int index) {
  return SubSeed(seed, "eval:" + TaskName(task), static_cast<uint64_t>(index)) | kEvalSeedBit;
}

bool IsEvalSeed(uint64_t instance_seed) { return (instance_seed & kEvalSeedBit) != 0; }

TaskBatch MakeTaskBatch(const TaskSpec& task, std::span<const uint64_t> seeds,
                        EmbeddingProvider& provider, bool hints) {
  TaskBatch batch;
  batch.task = task;
  for (uint64_t s : seeds) {
    batch.instances.push_back(Generate(task.kind, task.n, s));
    batch.embeddings.push_back(EmbedInstance(provider, Render(batch.instances.back(), hints)));
  }
  return batch;
}

std::vector<double> SharedBaselineAdvantages(std::span<const Rollout> rollouts) {
  std::vector<double> adv(rollouts.size());
  size_t begin = 0;
  while (begin < rollouts.size()) {
    size_t end = begin;
    double total = 0.0;
    while (end < rollouts.size() && rollouts[end].instance == rollouts[begin].instance) {
      total += rollouts[end].reward;
      ++end;
    }
    const double baseline = total / static_cast<double>(end - begin);
    for (size_t r = begin; r < end; ++r) adv[r] = rollouts[r].reward - baseline;
    begin = end;
  }
  return adv;
}

TaskGradient ComputeTaskGradient(const ModelConfig& config, const Parameters& params,
                                 const TaskBatch& batch, bool multi_start, bool normalize_rewards,
                                 CountedRng& rng, std::vector<ad::BatchStats>* stats,
                                 std::vector<Rollout>* rollouts_out) {
  PolicyPass pass(config, params, NormMode::kTrain, nullptr, true);
  pass.Encode(batch.instances, batch.embeddings);
  std::vector<RolloutRequest> requests;
  if (multi_start) {
    requests = StartRequests(batch.instances, true);
  } else {
    // As many samples as multi-start would draw, all from the first start.
    for (size_t b = 0; b < batch.instances.size(); ++b) {
      const auto starts = CopEnv(batch.instances[b]).StartNodes();
      for (size_t k = 0; k < starts.size(); ++k) {
        requests.push_back({static_cast<int>(b), starts[0], {}});
      }
    }
  }
  std::vector<Rollout> rollouts = pass.Run(requests, DecodeMode::kSample, &rng);
  std::vector<double> adv = SharedBaselineAdvantages(rollouts);
  if (normalize_rewards && adv.size() > 1) {
    const double sd = std::sqrt(Dot(adv, adv) / static_cast<double>(adv.size()));
    if (sd > 0.0) {
      for (double& a : adv) a /= sd;
    }
  }

  std::vector<int> per_instance(batch.instances.size(), 0);
  for (const Rollout& r : rollouts) ++per_instance[r.instance];
  const double num_instances = static_cast<double>(batch.instances.size());
  std::vector<double> weights(rollouts.size());
  TaskGradient tg;
  tg.task = batch.task;
  tg.instances = static_cast<int>(batch.instances.size());
  tg.rollouts = static_cast<int>(rollouts.size());
  for (size_t r = 0; r < rollouts.size(); ++r) {
    weights[r] = -adv[r] / (per_instance[rollouts[r].instance] * num_instances);
    tg.mean_reward += rollouts[r].reward;
    tg.mean_objective += rollouts[r].objective;
  }
  if (!rollouts.empty()) {
    tg.mean_reward /= static_cast<double>(rollouts.size());
    tg.mean_objective /= static_cast<double>(rollouts.size());
  }
  tg.g = pass.Gradient(weights);
  if (stats) *stats = pass.batch_stats();
  if (rollouts_out) *rollouts_out = std::move(rollouts);
  return tg;
}

std::vector<double> EraseConflicts(std::span<const TaskGradient> grads, uint64_t seed,
                                   SurgeryLog* log) {
  CheckSameLength(grads);
  const size_t tasks = grads.size();
  const size_t len = grads[0].g.size();
  std::vector<double> norms_sq(tasks);
  for (size_t j = 0; j < tasks; ++j) norms_sq[j] = Dot(grads[j].g, grads[j].g);
  SurgeryLog local;
  std::vector<double> total(len, 0.0);
  for (size_t i = 0; i < tasks; ++i) {
    std::vector<size_t> order;
    for (size_t j = 0; j < tasks; ++j) {
      if (j != i) order.push_back(j);
    }
    CountedRng rng(SubSeed(seed, "order", i));
    for (size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.Below(k)]);
    std::vector<double> hat = grads[i].g;
    for (size_t j : order) {
      const std::vector<double>& gj = grads[j].g;
      const double dot = Dot(hat, gj);
      if (dot >= 0.0) continue;
      if (norms_sq[j] == 0.0) {
        ++local.skipped_zero_norm;
        continue;
      }
      const double coef = dot / norms_sq[j];
      for (size_t k = 0; k < len; ++k) hat[k] -= coef * gj[k];
      ++local.projections;
      local.max_residual = std::max(local.max_residual, std::abs(Dot(hat, gj)));
    }
    for (size_t k = 0; k < len; ++k) total[k] += hat[k];
  }
  if (log) *log = local;
  return total;
}

std::vector<double> AverageGradients(std::span<const TaskGradient> grads) {
  CheckSameLength(grads);
  std::vector<double> total(grads[0].g.size(), 0.0);
  for (const TaskGradient& g : grads) {
    for (size_t k = 0; k < total.size(); ++k) total[k] += g.g[k];
  }
  for (double& x : total) x /= static_cast<double>(grads.size());
  return total;
}

nlohmann::json CosineMatrix::ToJson() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < size; ++i) {
    std::vector<double> row(values.begin() + static_cast<long>(i) * size,
                            values.begin() + static_cast<long>(i + 1) * size);
    rows.push_back(row);
  }
  std::vector<bool> flags(zero_norm.begin(), zero_norm.end());
  return {{"values", rows}, {"zero_norm", flags}};
}

CosineMatrix ConflictDiagnostics(std::span<const TaskGradient> grads) {
  CheckSameLength(grads);
  CosineMatrix c;
  c.size = static_cast<int>(grads.size());
  c.values.assign(static_cast<size_t>(c.size) * c.size, 0.0);
  std::vector<double> norms(grads.size());
  for (size_t i = 0; i < grads.size(); ++i) {
    norms[i] = Norm(grads[i].g);
    c.zero_norm.push_back(norms[i] == 0.0);
  }
  for (int i = 0; i < c.size; ++i) {
    c.values[static_cast<size_t>(i) * c.size + i] = 1.0;
    for (int j = i + 1; j < c.size; ++j) {
      double v = 0.0;
      if (norms[i] > 0.0 && norms[j] > 0.0) {
        v = std::clamp(Dot(grads[i].g, grads[j].g) / (norms[i] * norms[j]), -1.0, 1.0);
      }
      c.values[static_cast<size_t>(i) * c.size + j] = v;
      c.values[static_cast<size_t>(j) * c.size + i] = v;
    }
  }
  return c;
}

void AdamStep(const AdamConfig& config, AdamState& state, std::span<double> params,
              std::span<const double> grad) {
  if (grad.size() != params.size()) throw DimensionMismatch("gradient length");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    params[i] -= config.lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.eps);
  }
}

TrainState TrainState::Fresh(const ModelConfig& model, const TrainConfig& train,
                             const EmbeddingProvider& provider) {
  model.Validate();
  train.Validate();
  if (provider.dim() != model.d_o) {
    throw ConfigMismatch("provider dimension " + std::to_string(provider.dim()) +
                         " differs from model d_o " + std::to_string(model.d_o));
  }
  TrainState s;
  s.model = model;
  s.train = train;
  s.params = Parameters::Initialize(model, SubSeed(train.seed ^ model.init_seed, "init"));
  s.norm = NormStats::Initial(model);
  s.provider_id = provider.id();
  s.template_version = std::string(kTemplateVersion);
  return s;
}

std::filesystem::path CheckpointPath(const std::filesystem::path& dir, int64_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt-%08lld.json", static_cast<long long>(step));
  return dir / name;
}

void SaveCheckpoint(const TrainState& state, const std::filesystem::path& json_path) {
  std::vector<double> blob(state.params.flat().begin(), state.params.flat().end());
  const std::vector<double> norm = state.norm.Flatten();
  blob.insert(blob.end(), norm.begin(), norm.end());
  const std::vector<double> zeros(state.params.size(), 0.0);
  const std::vector<double>& m = state.adam.m.empty() ? zeros : state.adam.m;
  const std::vector<double>& v = state.adam.v.empty() ? zeros : state.adam.v;
  blob.insert(blob.end(), m.begin(), m.end());
  blob.insert(blob.end(), v.begin(), v.end());
  std::filesystem::path bin_path = json_path;
  bin_path.replace_extension(".bin");
  std::string bytes(blob.size() * sizeof(double), '\0');
  std::memcpy(bytes.data(), blob.data(), bytes.size());

  const nlohmann::json meta = {
      {"format", "copforge-checkpoint"},
      {"version", 1},
      {"model", state.model.ToJson()},
      {"train", state.train.ToJson()},
      {"provider_id", state.provider_id},
      {"template_version", state.template_version},
      {"step", state.step},
      {"rng", {{"seed", state.train.seed}, {"step", state.step}}},
      {"adam_t", state.adam.t},
      {"blob",
       {{"file", bin_path.filename().string()},
        {"dtype", "float64-le"},
        {"params", state.params.size()},
        {"norm", norm.size()},
        {"adam_moments", 2 * state.params.size()},
        {"bytes", bytes.size()}}}};
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  WriteFileAtomic(bin_path, bytes);
  WriteFileAtomic(json_path, meta.dump(2) + "\n");
}

TrainState LoadCheckpoint(const std::filesystem::path& json_path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ReadFile(json_path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + json_path.string() + " is not valid JSON");
  }
  if (meta.value("format", "") != "copforge-checkpoint" || meta.value("version", 0) != 1) {
    throw IoError(json_path.string() + " is not a version 1 checkpoint");
  }
  TrainState s;
  s.model = ModelConfig::FromJson(meta.at("model"));
  s.train = TrainConfig::FromJson(meta.at("train"));
  s.provider_id = meta.at("provider_id").get<std::string>();
  s.template_version = meta.at("template_version").get<std::string>();
  s.step = meta.at("step").get<int64_t>();
  s.adam.t = meta.at("adam_t").get<int64_t>();
  s.params = Parameters(s.model);
  s.norm = NormStats::Initial(s.model);
  const auto& blob = meta.at("blob");
  const size_t np = blob.at("params").get<size_t>();
  const size_t nn = blob.at("norm").get<size_t>();
  if (np != s.params.size() || nn != s.norm.FlatSize()) {
    throw ConfigMismatch("checkpoint tensor sizes do not match its model config");
  }
  const std::string bytes =
      ReadFile(json_path.parent_path() / blob.at("file").get<std::string>());
  const size_t expected = (np + nn + 2 * np) * sizeof(double);
  if (bytes.size() != expected || blob.at("bytes").get<size_t>() != expected) {
    throw IoError("checkpoint blob has " + std::to_string(bytes.size()) + " bytes, expected " +
                  std::to_string(expected));
  }
  std::vector<double> values(bytes.size() / sizeof(double));
  std::memcpy(values.data(), bytes.data(), bytes.size());
  std::copy(values.begin(), values.begin() + np, s.params.flat().begin());
  s.norm.Unflatten(std::span<const double>(values).subspan(np, nn));
  if (s.adam.t > 0) {
    s.adam.m.assign(values.begin() + np + nn, values.begin() + 2 * np + nn);
    s.adam.v.assign(values.begin() + 2 * np + nn, values.end());
  }
  if (!AllFinite(s.params.flat())) throw NonFiniteValue("checkpoint parameters are not finite");
  return s;
}

nlohmann::json StepMetrics::ToJson() const {
  nlohmann::json per_task = nlohmann::json::object();
  for (size_t t = 0; t < tasks.size(); ++t) {
    per_task[TaskName(tasks[t].task)] = {{"mean_obj", tasks[t].mean_objective},
                                         {"mean_reward", tasks[t].mean_reward},
                                         {"grad_norm", grad_norms[t]}};
  }
  return {{"step", step},
          {"tasks", per_task},
          {"cosine", cosine.ToJson()},
          {"combined_norm", combined_norm},
          {"projections", surgery.projections},
          {"skipped_zero_norm", surgery.skipped_zero_norm},
          {"wall_ms", wall_ms}};
}

std::vector<double> NextStepGradient(const TrainState& state, EmbeddingProvider& provider) {
  StepOutput out = TaskGradientsForStep(state, provider);
  return Combine(state, out.grads, nullptr);
}

void Train(TrainState& state, EmbeddingProvider& provider, const TrainOptions& options) {
  state.train.Validate();
  if (provider.dim() != state.model.d_o) {
    throw ConfigMismatch("provider dimension differs from model d_o");
  }
  const bool write = !options.out_dir.empty();
  if (write) std::filesystem::create_directories(options.out_dir);
  int64_t done_here = 0;
  while (state.step < state.train.steps) {
    if (options.stop_after && done_here >= *options.stop_after) break;
    const auto t0 = std::chrono::steady_clock::now();
    StepOutput out = TaskGradientsForStep(state, provider);
    StepMetrics metrics;
    metrics.cosine = ConflictDiagnostics(out.grads);
    for (const TaskGradient& g : out.grads) metrics.grad_norms.push_back(Norm(g.g));
    std::vector<double> combined = Combine(state, out.grads, &metrics.surgery);
    metrics.combined_norm = Norm(combined);
    if (!AllFinite(combined)) {
      throw NonFiniteValue("non-finite combined gradient at step " + std::to_string(state.step));
    }
    // Commit only a fully finite update.
    std::vector<double> params(state.params.flat().begin(), state.params.flat().end());
    AdamState adam = state.adam;
    AdamStep(state.train.adam, adam, params, combined);
    if (!AllFinite(params)) {
      throw NonFiniteValue("non-finite parameters after step " + std::to_string(state.step));
    }
    std::copy(params.begin(), params.end(), state.params.flat().begin());
    state.adam = std::move(adam);
    for (const auto& stats : out.stats) state.norm.Update(stats, state.model.bn_momentum);
    ++state.step;
    ++done_here;

    for (TaskGradient& g : out.grads) g.g.clear();
    metrics.tasks = std::move(out.grads);
    metrics.step = state.step;
    metrics.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    if (write) {
      AppendLine(options.out_dir / "metrics.jsonl", metrics.ToJson().dump());
      const bool cadence =
          state.train.checkpoint_every > 0 && state.step % state.train.checkpoint_every == 0;
      if (cadence || state.step == state.train.steps) {
        SaveCheckpoint(state, CheckpointPath(options.out_dir, state.step));
      }
    }
    if (options.on_step) options.on_step(metrics);
  }
}

double BatchObjective(const TrainState& state, EmbeddingProvider& provider, const TaskSpec& task,
                      int64_t step) {
  const TaskBatch batch =
      MakeTaskBatch(task, StepSeeds(state.train, step, task), provider, state.train.hints);
  CountedRng rng = RolloutRng(state.train.seed, step, task);
  return ComputeTaskGradient(state.model, state.params, batch, state.train.multi_start,
                             state.train.normalize_rewards, rng)
      .mean_objective;
}

FinetuneResult Finetune(const TrainState& base, const TaskSpec& task, int steps,
                        EmbeddingProvider& provider, const TrainOptions& options) {
  if (provider.dim() != base.model.d_o) {
    throw ConfigMismatch("checkpoint expects d_o " + std::to_string(base.model.d_o) +
                         " but the provider produces " + std::to_string(provider.dim()));
  }
  FinetuneResult result;
  result.state = base;
  result.state.train.tasks = {task};
  result.state.train.steps = steps;
  result.state.step = 0;
  result.state.adam = AdamState{};
  result.state.provider_id = provider.id();
  TrainOptions opts = options;
  auto user = options.on_step;
  opts.on_step = [&](const StepMetrics& m) {
    result.objectives.push_back(m.tasks[0].mean_objective);
    if (user) user(m);
  };
  Train(result.state, provider, opts);
  return result;
}

EvalOutcome EvaluatePolicy(const TrainState& state, std::span<const ProblemInstance> instances,
                           EmbeddingProvider& provider, bool hints, bool multi_start) {
  EvalOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  for (const ProblemInstance& inst : instances) {
    if (!IsEvalSeed(inst.seed)) {
      throw InvalidArgument("instance seed " + std::to_string(inst.seed) +
                            " belongs to the training pool");
    }
    const EmbeddingMatrix emb = EmbedInstance(provider, Render(inst, hints));
    const auto rollouts = SolveInstance(state.model, state.params, state.norm, inst, emb,
                                        DecodeMode::kGreedy, multi_start);
    out.objectives.push_back(BestRollout(inst.kind, rollouts).objective);
  }
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace copforge
