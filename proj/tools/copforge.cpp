// copforge: generate, render, embed, train, finetune, eval, diag, report.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "copforge/errors.hpp"
#include "copforge/gap_report.hpp"
#include "copforge/harness.hpp"
#include "copforge/instance_io.hpp"
#include "copforge/tai_render.hpp"
#include "copforge/text_encoder.hpp"
#include "copforge/trainer.hpp"

namespace copforge {
namespace {

struct Args {
  std::vector<std::string> kinds;
  std::vector<int> sizes;
  std::optional<uint64_t> seed;
  int count = 200;
  std::string provider = "hash";
  std::string endpoint;
  std::string cache;
  std::string config;
  std::string checkpoint;
  std::optional<int> steps;
  std::optional<int> dim;
  std::optional<int> batch_size;
  std::optional<double> lr;
  bool no_surgery = false;
  bool no_hints = false;
  bool no_multi_start = false;
  bool exact = false;
  std::string in;
  std::string out;
};

std::vector<TaskSpec> Tasks(const Args& a) {
  if (a.kinds.empty()) throw InvalidArgument("--kind is required");
  if (a.sizes.size() != 1 && a.sizes.size() != a.kinds.size()) {
    throw InvalidArgument("give one --n or one per --kind");
  }
  std::vector<TaskSpec> tasks;
  for (size_t i = 0; i < a.kinds.size(); ++i) {
    tasks.push_back({ParseKind(a.kinds[i]), a.sizes.size() == 1 ? a.sizes[0] : a.sizes[i]});
  }
  return tasks;
}

TaskSpec SingleTask(const Args& a) {
  const auto tasks = Tasks(a);
  if (tasks.size() != 1) throw InvalidArgument("this subcommand takes a single --kind");
  return tasks[0];
}

std::string CachePath(const Args& a) {
  if (!a.cache.empty()) return a.cache;
  if (const char* env = std::getenv("COPFORGE_CACHE")) return env;
  return "";
}

// Spec from --config (if any) with flags applied on top.
ExperimentSpec BuildSpec(const Args& a, bool need_tasks) {
  ExperimentSpec spec;
  if (!a.config.empty()) spec = ExperimentSpec::FromJson(nlohmann::json::parse(ReadFile(a.config)));
  if (!a.kinds.empty() || need_tasks) spec.tasks = Tasks(a);
  if (a.seed) spec.seed = *a.seed;
  if (a.config.empty() || a.provider != "hash") spec.provider.kind = ParseProviderKind(a.provider);
  if (!a.endpoint.empty()) spec.provider.endpoint = a.endpoint;
  const std::string cache = CachePath(a);
  if (!cache.empty()) spec.provider.cache_path = cache;
  if (a.dim) {
    spec.provider.dim = *a.dim;
    spec.model.d_o = *a.dim;
  }
  if (a.config.empty()) spec.model.d_o = spec.provider.dim;
  if (a.steps) spec.train.steps = *a.steps;
  if (a.batch_size) spec.train.batch_size = *a.batch_size;
  if (a.lr) spec.train.adam.lr = *a.lr;
  if (a.no_surgery) spec.train.surgery = false;
  if (a.no_multi_start) spec.train.multi_start = false;
  if (a.no_hints) spec.hints = false;
  if (a.exact) spec.exact = true;
  if (!a.out.empty()) spec.out_dir = a.out;
  return spec;
}

std::unique_ptr<EmbeddingProvider> Provider(const ExperimentSpec& spec) {
  return MakeProvider(spec.provider);
}

std::vector<ProblemInstance> InputInstances(const Args& a) {
  if (!a.in.empty()) return LoadEvalInstances(a.in);
  return EvalInstances(SingleTask(a), a.seed.value_or(0), a.count);
}

void WriteOrPrint(const std::string& out, const std::string& content) {
  if (out.empty() || out == "-") {
    std::cout << content;
  } else {
    const std::filesystem::path p(out);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    WriteFileAtomic(p, content);
  }
}

int GenerateCmd(const Args& a) {
  const auto insts = EvalInstances(SingleTask(a), a.seed.value_or(0), a.count);
  if (a.out.empty() || a.out == "-") {
    for (const auto& i : insts) std::cout << InstanceToJson(i).dump() << "\n";
  } else {
    WriteInstancesJsonl(a.out, insts);
  }
  return 0;
}

int RenderCmd(const Args& a) {
  std::string content;
  for (const auto& inst : InputInstances(a)) content += Render(inst, !a.no_hints).ToJson().dump() + "\n";
  WriteOrPrint(a.out, content);
  return 0;
}

int Embed(const Args& a) {
  ExperimentSpec spec = BuildSpec(a, false);
  if (spec.provider.kind == ProviderKind::kCache) {
    throw InvalidArgument("embed needs a producing provider (hash or http)");
  }
  const std::string cache = spec.provider.cache_path.string();
  if (cache.empty()) throw InvalidArgument("embed needs --cache or COPFORGE_CACHE");
  auto provider = Provider(spec);
  std::vector<TextAttributedInstance> tais;
  if (!a.in.empty() || !a.kinds.empty()) {
    if (!a.in.empty()) {
      for (const auto& inst : LoadEvalInstances(a.in)) tais.push_back(Render(inst, spec.hints));
    } else {
      for (const TaskSpec& t : spec.tasks) {
        for (const auto& inst : EvalInstances(t, spec.seed, a.count)) {
          tais.push_back(Render(inst, spec.hints));
        }
      }
    }
  }
  // With --steps, also cover every training batch those steps will draw.
  if (a.steps) {
    const TrainConfig train = spec.EffectiveTrain();
    for (int64_t step = 0; step < *a.steps; ++step) {
      for (const TaskSpec& t : train.tasks) {
        for (int b = 0; b < train.batch_size; ++b) {
          tais.push_back(Render(Generate(t.kind, t.n, TrainInstanceSeed(train.seed, step, t, b)),
                                spec.hints));
        }
      }
    }
  }
  if (tais.empty()) throw InvalidArgument("nothing to embed: give --kind/--n, --in or --steps");
  const size_t distinct = FillCache(*provider, tais, cache);
  std::cout << nlohmann::json{{"cache", cache}, {"texts", distinct}, {"dim", provider->dim()},
                              {"provider", provider->id()}}
                   .dump()
            << "\n";
  return 0;
}

int TrainCmd(const Args& a) {
  ExperimentSpec spec = BuildSpec(a, a.config.empty());
  if (spec.out_dir.empty()) throw InvalidArgument("train needs --out");
  spec.Validate();
  auto provider = Provider(spec);
  DirLock lock(spec.out_dir);
  TrainState state = a.checkpoint.empty()
                         ? TrainState::Fresh(spec.model, spec.EffectiveTrain(), *provider)
                         : LoadCheckpoint(a.checkpoint);
  if (!a.checkpoint.empty() && a.steps) state.train.steps = *a.steps;
  WriteFileAtomic(spec.out_dir / "spec.json", spec.ToJson().dump(2) + "\n");
  TrainOptions opts;
  opts.out_dir = spec.out_dir;
  Train(state, *provider, opts);
  std::cout << nlohmann::json{{"step", state.step},
                              {"checkpoint", CheckpointPath(spec.out_dir, state.step).string()}}
                   .dump()
            << "\n";
  return 0;
}

int FinetuneCmd(const Args& a) {
  if (a.checkpoint.empty()) throw InvalidArgument("finetune needs --checkpoint");
  if (a.out.empty()) throw InvalidArgument("finetune needs --out");
  const TrainState base = LoadCheckpoint(a.checkpoint);
  ExperimentSpec spec = BuildSpec(a, true);
  if (!a.dim) spec.provider.dim = base.model.d_o;
  auto provider = Provider(spec);
  DirLock lock(a.out);
  const int steps = a.steps.value_or(2000);
  const FinetuneComparison cmp = CompareFinetune(base, SingleTask(a), steps, *provider, a.out);
  std::cout << nlohmann::json{{"steps", steps},
                              {"first_batch", {{"finetune", cmp.finetune.empty() ? 0.0 : cmp.finetune[0]},
                                               {"scratch", cmp.scratch.empty() ? 0.0 : cmp.scratch[0]}}},
                              {"comparison", (std::filesystem::path(a.out) / "comparison.csv").string()}}
                   .dump()
            << "\n";
  return 0;
}

int Eval(const Args& a) {
  const auto insts = InputInstances(a);
  std::optional<TrainState> state;
  std::unique_ptr<EmbeddingProvider> provider;
  EvalRequest req;
  req.exact = a.exact;
  req.hints = !a.no_hints;
  req.multi_start = !a.no_multi_start;
  if (!a.checkpoint.empty()) {
    state = LoadCheckpoint(a.checkpoint);
    ExperimentSpec spec = BuildSpec(a, false);
    if (!a.dim) spec.provider.dim = state->model.d_o;
    provider = Provider(spec);
    req.policy = &*state;
    req.provider = provider.get();
  }
  const auto reports = EvaluateMethods(insts, req);
  WriteOrPrint(a.out, GapReportsToCsv(reports));
  return 0;
}

int Diag(const Args& a) {
  if (a.in.empty()) throw InvalidArgument("diag needs --in <metrics.jsonl>");
  WriteOrPrint(a.out, CosineHistoryCsv(a.in));
  return 0;
}

int Report(const Args& a) {
  if (a.in.empty()) throw InvalidArgument("report needs --in <directory>");
  WriteOrPrint(a.out, MergeReports(a.in));
  return 0;
}

void PrintError(const std::string& subcommand, const std::string& code, const std::string& message,
                const std::string& hint = "") {
  nlohmann::json rec = {{"error", {{"code", code}, {"message", message}, {"subcommand", subcommand}}}};
  if (!hint.empty()) rec["error"]["hint"] = hint;
  std::cerr << rec.dump() << "\n";
}

std::string EmbedHint(const Args& a) {
  std::string cmd = "copforge embed --provider hash";
  const std::string cache = CachePath(a);
  cmd += " --cache " + (cache.empty() ? std::string("<path>") : cache);
  if (!a.kinds.empty()) {
    cmd += " --kind " + a.kinds[0];
    for (size_t i = 1; i < a.kinds.size(); ++i) cmd += "," + a.kinds[i];
    cmd += " --n " + std::to_string(a.sizes.empty() ? 0 : a.sizes[0]);
    for (size_t i = 1; i < a.sizes.size(); ++i) cmd += "," + std::to_string(a.sizes[i]);
    cmd += " --seed " + std::to_string(a.seed.value_or(0)) + " --count " + std::to_string(a.count);
  }
  if (!a.in.empty()) cmd += " --in " + a.in;
  if (a.dim) cmd += " --dim " + std::to_string(*a.dim);
  if (a.steps) cmd += " --steps " + std::to_string(*a.steps);
  if (a.batch_size) cmd += " --batch-size " + std::to_string(*a.batch_size);
  if (!a.config.empty()) cmd += " --config " + a.config;
  if (a.no_hints) cmd += " --no-hints";
  return "run `" + cmd + "` first";
}

}  // namespace
}  // namespace copforge

int main(int argc, char** argv) {
  using namespace copforge;
  CLI::App app{"copforge: learned solvers for combinatorial optimization"};
  app.require_subcommand(1);
  Args a;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--kind", a.kinds, "problem kind(s): tsp,cvrp,vrpb,kp,mvcp,misp,smtwtp")
        ->delimiter(',');
    c->add_option("--n", a.sizes, "problem size(s)")->delimiter(',');
    c->add_option("--seed", a.seed, "experiment seed");
    c->add_option("--count", a.count, "number of evaluation instances");
    c->add_option("--in", a.in, "input file or directory");
    c->add_option("--out", a.out, "output file or directory");
    c->add_flag("--no-hints", a.no_hints, "render texts without hint tokens");
  };
  auto add_provider = [&](CLI::App* c) {
    c->add_option("--provider", a.provider, "embedding provider: hash|cache|http");
    c->add_option("--endpoint", a.endpoint, "http provider endpoint");
    c->add_option("--cache", a.cache, "embedding cache (default: $COPFORGE_CACHE)");
    c->add_option("--dim", a.dim, "embedding dimension");
    c->add_option("--config", a.config, "experiment spec JSON");
  };
  auto add_train = [&](CLI::App* c) {
    c->add_option("--steps", a.steps, "training steps");
    c->add_option("--batch-size", a.batch_size, "instances per task per step");
    c->add_option("--lr", a.lr, "Adam learning rate");
    c->add_flag("--no-surgery", a.no_surgery, "average task gradients instead of erasing conflicts");
    c->add_flag("--no-multi-start", a.no_multi_start, "sample every rollout from the first start");
  };

  auto* gen = app.add_subcommand("generate", "write held-out instances as JSON lines");
  add_common(gen);
  auto* ren = app.add_subcommand("render", "write text-attributed instances");
  add_common(ren);
  auto* emb = app.add_subcommand("embed", "fill the embedding cache");
  add_common(emb);
  add_provider(emb);
  add_train(emb);
  auto* trn = app.add_subcommand("train", "train a solver");
  add_common(trn);
  add_provider(trn);
  add_train(trn);
  trn->add_option("--checkpoint", a.checkpoint, "resume from this checkpoint");
  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint on a new task");
  add_common(ft);
  add_provider(ft);
  add_train(ft);
  ft->add_option("--checkpoint", a.checkpoint, "pretrained checkpoint")->required();
  auto* ev = app.add_subcommand("eval", "gap report against oracles and heuristics");
  add_common(ev);
  add_provider(ev);
  ev->add_option("--checkpoint", a.checkpoint, "learned solver to include");
  ev->add_flag("--exact", a.exact, "require the exact oracle as reference");
  ev->add_flag("--no-multi-start", a.no_multi_start, "greedy decoding from one start only");
  auto* dg = app.add_subcommand("diag", "export the cosine-similarity history");
  add_common(dg);
  auto* rep = app.add_subcommand("report", "merge gap CSVs into one summary");
  add_common(rep);

  std::string sub = "";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    PrintError("", "usage", e.what());
    return 2;
  }
  sub = app.get_subcommands().front()->get_name();
  try {
    if (sub == "generate") return GenerateCmd(a);
    if (sub == "render") return RenderCmd(a);
    if (sub == "embed") return Embed(a);
    if (sub == "train") return TrainCmd(a);
    if (sub == "finetune") return FinetuneCmd(a);
    if (sub == "eval") return Eval(a);
    if (sub == "diag") return Diag(a);
    if (sub == "report") return Report(a);
  } catch (const MissingEmbedding& e) {
    PrintError(sub, e.code(), e.what(), EmbedHint(a));
    return 1;
  } catch (const CopError& e) {
    PrintError(sub, e.code(), e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    PrintError(sub, "bad_json", e.what());
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    PrintError(sub, "io_error", e.what());
    return 1;
  } catch (const std::exception& e) {
    PrintError(sub, "internal", e.what());
    return 1;
  }
  return 1;
}
