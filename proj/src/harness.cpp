#include "copforge/harness.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>
#include <sstream>

#include "copforge/errors.hpp"
#include "copforge/heuristics.hpp"
#include "copforge/instance_io.hpp"
#include "copforge/oracles.hpp"

namespace copforge {

namespace {

const char* ProviderKindName(ProviderKind k) {
  switch (k) {
    case ProviderKind::kHash:
      return "hash";
    case ProviderKind::kCache:
      return "cache";
    case ProviderKind::kHttp:
      return "http";
  }
  return "hash";
}

double Seconds(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

bool Better(ProblemKind kind, double a, double b) {
  return IsMaximization(kind) ? a > b : a < b;
}

}  // namespace

nlohmann::json ProviderConfigToJson(const ProviderConfig& c) {
  return {{"kind", ProviderKindName(c.kind)},
          {"dim", c.dim},
          {"seed", c.seed},
          {"cache_path", c.cache_path.string()},
          {"endpoint", c.endpoint},
          {"timeout_seconds", c.timeout_seconds},
          {"retries", c.retries}};
}

ProviderConfig ProviderConfigFromJson(const nlohmann::json& j) {
  ProviderConfig c;
  if (j.contains("kind")) c.kind = ParseProviderKind(j["kind"].get<std::string>());
  c.dim = j.value("dim", c.dim);
  c.seed = j.value("seed", c.seed);
  c.cache_path = j.value("cache_path", std::string());
  c.endpoint = j.value("endpoint", c.endpoint);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  c.retries = j.value("retries", c.retries);
  return c;
}

void ExperimentSpec::Validate() const {
  if (tasks.empty()) throw InvalidArgument("experiment needs at least one task");
  if (eval_count < 0) throw InvalidArgument("eval_count must be non-negative");
  if (provider.dim != model.d_o) {
    throw ConfigMismatch("provider dim " + std::to_string(provider.dim) + " differs from d_o " +
                         std::to_string(model.d_o));
  }
  model.Validate();
  EffectiveTrain().Validate();
}

TrainConfig ExperimentSpec::EffectiveTrain() const {
  TrainConfig t = train;
  t.tasks = tasks;
  t.seed = seed;
  t.hints = hints;
  return t;
}

nlohmann::json ExperimentSpec::ToJson() const {
  nlohmann::json t = nlohmann::json::array();
  for (const TaskSpec& s : tasks) t.push_back({{"kind", KindName(s.kind)}, {"n", s.n}});
  return {{"name", name},
          {"tasks", t},
          {"seed", seed},
          {"eval_count", eval_count},
          {"exact", exact},
          {"hints", hints},
          {"provider", ProviderConfigToJson(provider)},
          {"model", model.ToJson()},
          {"train", EffectiveTrain().ToJson()},
          {"out_dir", out_dir.string()}};
}

ExperimentSpec ExperimentSpec::FromJson(const nlohmann::json& j) {
  ExperimentSpec s;
  s.name = j.value("name", s.name);
  if (j.contains("tasks")) {
    for (const auto& t : j["tasks"]) {
      s.tasks.push_back({ParseKind(t.at("kind").get<std::string>()), t.at("n").get<int>()});
    }
  }
  s.seed = j.value("seed", s.seed);
  s.eval_count = j.value("eval_count", s.eval_count);
  s.exact = j.value("exact", s.exact);
  s.hints = j.value("hints", s.hints);
  if (j.contains("provider")) s.provider = ProviderConfigFromJson(j["provider"]);
  if (j.contains("model")) s.model = ModelConfig::FromJson(j["model"]);
  if (j.contains("train")) s.train = TrainConfig::FromJson(j["train"]);
  s.out_dir = j.value("out_dir", std::string());
  return s;
}

std::vector<ProblemInstance> EvalInstances(const TaskSpec& task, uint64_t seed, int count) {
  std::vector<ProblemInstance> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(Generate(task.kind, task.n, EvalInstanceSeed(seed, task, i)));
  return out;
}

std::vector<ProblemInstance> LoadEvalInstances(const std::filesystem::path& path) {
  std::vector<ProblemInstance> out = ReadInstances(path);
  for (size_t i = 0; i < out.size(); ++i) {
    if (!IsEvalSeed(out[i].seed)) {
      throw InvalidArgument(path.string() + ": instance " + std::to_string(i) + " has seed " +
                            std::to_string(out[i].seed) +
                            " from the training pool; evaluation sets must come from "
                            "`copforge generate`");
    }
  }
  return out;
}

void WriteTaisJsonl(const std::filesystem::path& path,
                    const std::vector<TextAttributedInstance>& tais) {
  std::string content;
  for (const auto& t : tais) content += t.ToJson().dump() + "\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  WriteFileAtomic(path, content);
}

bool ExactSupported(ProblemKind kind, int n) {
  switch (kind) {
    case ProblemKind::kTsp:
      return n <= kMaxHeldKarpNodes;
    case ProblemKind::kCvrp:
    case ProblemKind::kVrpb:
      return n <= kMaxRoutingOracleCustomers;
    case ProblemKind::kKp:
      return true;
    case ProblemKind::kMvcp:
    case ProblemKind::kMisp:
      return n <= kMaxGraphOracleNodes;
    case ProblemKind::kSmtwtp:
      return n <= kMaxSchedulingOracleJobs;
  }
  return false;
}

std::vector<GapReport> EvaluateMethods(std::span<const ProblemInstance> instances,
                                       const EvalRequest& request) {
  if (instances.empty()) throw InvalidArgument("no instances to evaluate");
  const ProblemKind kind = instances[0].kind;
  const int n = instances[0].n;
  for (const ProblemInstance& inst : instances) {
    if (inst.kind != kind || inst.n != n) {
      throw InvalidArgument("evaluation instances must share kind and size");
    }
    if (!IsEvalSeed(inst.seed)) throw InvalidArgument("evaluation instance from the training pool");
  }
  const bool use_exact = request.exact || ExactSupported(kind, n);
  const std::vector<std::string> heuristics = ApplicableHeuristics(kind);

  std::vector<std::vector<double>> heuristic_obj(heuristics.size());
  std::vector<double> heuristic_seconds(heuristics.size(), 0.0);
  for (size_t h = 0; h < heuristics.size(); ++h) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const ProblemInstance& inst : instances) {
      heuristic_obj[h].push_back(RunHeuristic(inst, heuristics[h], inst.seed).objective);
    }
    heuristic_seconds[h] = Seconds(t0);
  }

  std::vector<double> reference;
  std::string reference_name;
  double reference_seconds = 0.0;
  if (use_exact) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const ProblemInstance& inst : instances) reference.push_back(SolveExact(inst).objective);
    reference_seconds = Seconds(t0);
    reference_name = "exact";
  } else {
    for (size_t i = 0; i < instances.size(); ++i) {
      double best = heuristic_obj[0][i];
      for (size_t h = 1; h < heuristics.size(); ++h) {
        if (Better(kind, heuristic_obj[h][i], best)) best = heuristic_obj[h][i];
      }
      reference.push_back(best);
    }
    reference_name = "heuristic:best";
  }

  std::vector<GapReport> reports;
  if (request.policy) {
    if (!request.provider) throw InvalidArgument("evaluating a policy needs a provider");
    const EvalOutcome out = EvaluatePolicy(*request.policy, instances, *request.provider,
                                           request.hints, request.multi_start);
    reports.push_back(ComputeGaps(kind, n, "lncs", out.objectives, reference, out.seconds,
                                  reference_name));
  }
  for (size_t h = 0; h < heuristics.size(); ++h) {
    reports.push_back(ComputeGaps(kind, n, heuristics[h], heuristic_obj[h], reference,
                                  heuristic_seconds[h], reference_name));
  }
  if (use_exact) {
    reports.push_back(
        ComputeGaps(kind, n, "exact", reference, reference, reference_seconds, reference_name));
  }
  return reports;
}

std::string StripTimeColumn(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  int drop = -1;
  bool header = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (header) {
      for (size_t i = 0; i < cells.size(); ++i) {
        if (cells[i] == "total_seconds") drop = static_cast<int>(i);
      }
      header = false;
    }
    std::string kept;
    for (size_t i = 0; i < cells.size(); ++i) {
      if (static_cast<int>(i) == drop) continue;
      if (!kept.empty()) kept += ',';
      kept += cells[i];
    }
    out += kept + "\n";
  }
  return out;
}

std::string CosineHistoryCsv(const std::filesystem::path& metrics_path) {
  std::ifstream in(metrics_path);
  if (!in) throw IoError("cannot open " + metrics_path.string());
  std::string out = "step,i,j,cosine,zero_norm_i,zero_norm_j\n";
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw IoError(metrics_path.string() + ":" + std::to_string(line_no) + " is not JSON");
    }
    const auto& values = m.at("cosine").at("values");
    const auto& zero = m.at("cosine").at("zero_norm");
    for (size_t i = 0; i < values.size(); ++i) {
      for (size_t j = i + 1; j < values.size(); ++j) {
        out += std::to_string(m.at("step").get<int64_t>()) + "," + std::to_string(i) + "," +
               std::to_string(j) + "," + FormatFixed(values[i][j].get<double>(), 6) + "," +
               (zero[i].get<bool>() ? "1" : "0") + "," + (zero[j].get<bool>() ? "1" : "0") + "\n";
      }
    }
  }
  return out;
}

std::string MergeReports(const std::filesystem::path& dir) {
  std::string out = std::string(kGapCsvHeader) + "\n";
  if (!std::filesystem::exists(dir)) return out;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::istringstream in(ReadFile(f));
    std::string line;
    if (!std::getline(in, line) || line != kGapCsvHeader) continue;
    while (std::getline(in, line)) {
      if (!line.empty()) out += line + "\n";
    }
  }
  return out;
}

DirLock::DirLock(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path path = dir / ".copforge.lock";
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw CopError("locked", "output directory " + dir.string() +
                                 " is in use by another copforge process");
  }
}

DirLock::~DirLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

ExperimentResult RunExperiment(const ExperimentSpec& spec, EmbeddingProvider& provider) {
  spec.Validate();
  if (spec.out_dir.empty()) throw InvalidArgument("experiment needs an output directory");
  DirLock lock(spec.out_dir);
  const std::filesystem::path& out = spec.out_dir;
  WriteFileAtomic(out / "spec.json", spec.ToJson().dump(2) + "\n");

  std::vector<std::vector<ProblemInstance>> eval_sets;
  for (const TaskSpec& task : spec.tasks) {
    eval_sets.push_back(EvalInstances(task, spec.seed, spec.eval_count));
    std::filesystem::create_directories(out / "instances");
    WriteInstancesJsonl(out / "instances" / (TaskName(task) + ".jsonl"), eval_sets.back());
    std::vector<TextAttributedInstance> tais;
    for (const auto& inst : eval_sets.back()) tais.push_back(Render(inst, spec.hints));
    WriteTaisJsonl(out / "tais" / (TaskName(task) + ".jsonl"), tais);
  }

  ExperimentResult result;
  result.state = TrainState::Fresh(spec.model, spec.EffectiveTrain(), provider);
  std::filesystem::remove(out / "train" / "metrics.jsonl");
  TrainOptions opts;
  opts.out_dir = out / "train";
  Train(result.state, provider, opts);
  if (std::filesystem::exists(out / "train" / "metrics.jsonl")) {
    WriteFileAtomic(out / "train" / "cosine.csv", CosineHistoryCsv(out / "train" / "metrics.jsonl"));
  }

  EvalRequest req;
  req.policy = &result.state;
  req.provider = &provider;
  req.hints = spec.hints;
  req.exact = spec.exact;
  for (const auto& set : eval_sets) {
    if (set.empty()) continue;
    auto reports = EvaluateMethods(set, req);
    result.reports.insert(result.reports.end(), reports.begin(), reports.end());
  }
  std::filesystem::create_directories(out / "eval");
  WriteFileAtomic(out / "eval" / "gaps.csv", GapReportsToCsv(result.reports));
  return result;
}

std::string FinetuneComparison::ToCsv() const {
  std::string out = "step,finetune_obj,scratch_obj\n";
  for (size_t i = 0; i < std::max(finetune.size(), scratch.size()); ++i) {
    out += std::to_string(i) + ",";
    if (i < finetune.size()) out += FormatFixed(finetune[i], 6);
    out += ",";
    if (i < scratch.size()) out += FormatFixed(scratch[i], 6);
    out += "\n";
  }
  return out;
}

FinetuneComparison CompareFinetune(const TrainState& base, const TaskSpec& task, int steps,
                                   EmbeddingProvider& provider,
                                   const std::filesystem::path& out_dir) {
  const bool write = !out_dir.empty();
  FinetuneComparison cmp;
  TrainOptions ft_opts;
  if (write) ft_opts.out_dir = out_dir / "finetune";
  FinetuneResult ft = Finetune(base, task, steps, provider, ft_opts);
  cmp.finetune = ft.objectives;

  TrainConfig scratch_train = ft.state.train;
  TrainState scratch = TrainState::Fresh(base.model, scratch_train, provider);
  TrainOptions sc_opts;
  if (write) sc_opts.out_dir = out_dir / "scratch";
  sc_opts.on_step = [&](const StepMetrics& m) { cmp.scratch.push_back(m.tasks[0].mean_objective); };
  Train(scratch, provider, sc_opts);
  if (write) WriteFileAtomic(out_dir / "comparison.csv", cmp.ToCsv());
  return cmp;
}

}  // namespace copforge
