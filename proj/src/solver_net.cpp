#include "copforge/solver_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "copforge/errors.hpp"

namespace copforge {

namespace {

using ad::Matrix;
using ad::Var;

std::string_view NormInferenceName(NormInference m) {
  return m == NormInference::kRunning ? "running" : "instance";
}

NormInference ParseNormInference(std::string_view s) {
  if (s == "running") return NormInference::kRunning;
  if (s == "instance") return NormInference::kInstance;
  throw InvalidArgument("unknown norm_inference '" + std::string(s) + "'");
}

void RequirePositive(int v, const char* name) {
  if (v <= 0) throw InvalidArgument(std::string(name) + " must be positive");
}

}  // namespace

void ModelConfig::Validate() const {
  RequirePositive(d_o, "d_o");
  RequirePositive(d_h, "d_h");
  RequirePositive(n_blocks, "n_blocks");
  RequirePositive(heads, "heads");
  RequirePositive(d_ff, "d_ff");
  RequirePositive(d_a, "d_a");
  if (d_h % heads != 0) throw InvalidArgument("d_h must be divisible by heads");
  if (d_a % heads != 0) throw InvalidArgument("d_a must be divisible by heads");
  if (!(clip > 0.0)) throw InvalidArgument("clip must be positive");
  if (!(bn_eps > 0.0)) throw InvalidArgument("bn_eps must be positive");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) {
    throw InvalidArgument("bn_momentum must be in (0, 1]");
  }
}

nlohmann::json ModelConfig::ToJson() const {
  return {{"d_o", d_o},         {"d_h", d_h},
          {"n_blocks", n_blocks}, {"heads", heads},
          {"d_ff", d_ff},       {"d_a", d_a},
          {"clip", clip},       {"bn_eps", bn_eps},
          {"bn_momentum", bn_momentum}, {"init_seed", init_seed},
          {"norm_inference", NormInferenceName(norm_inference)}};
}

ModelConfig ModelConfig::FromJson(const nlohmann::json& j) {
  ModelConfig c;
  c.d_o = j.value("d_o", c.d_o);
  c.d_h = j.value("d_h", c.d_h);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.heads = j.value("heads", c.heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.d_a = j.value("d_a", c.d_a);
  c.clip = j.value("clip", c.clip);
  c.bn_eps = j.value("bn_eps", c.bn_eps);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.norm_inference =
      ParseNormInference(j.value("norm_inference", std::string(NormInferenceName(c.norm_inference))));
  c.Validate();
  return c;
}

ModelConfig TinyModelConfig(int d_o) {
  ModelConfig c;
  c.d_o = d_o;
  c.d_h = 32;
  c.n_blocks = 2;
  c.heads = 4;
  c.d_ff = 64;
  c.d_a = 32;
  return c;
}

Parameters::Parameters(const ModelConfig& config) {
  config.Validate();
  const int dh = config.d_h;
  connector_w = Add("connector.w", config.d_o, dh);
  connector_b = Add("connector.b", 1, dh);
  for (int l = 0; l < config.n_blocks; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Layer layer{};
    layer.wq = Add(p + "attn.wq", dh, dh);
    layer.wk = Add(p + "attn.wk", dh, dh);
    layer.wv = Add(p + "attn.wv", dh, dh);
    layer.wo = Add(p + "attn.wo", dh, dh);
    layer.bn1_gamma = Add(p + "bn1.gamma", 1, dh);
    layer.bn1_beta = Add(p + "bn1.beta", 1, dh);
    layer.w1 = Add(p + "ff.w1", dh, config.d_ff);
    layer.b1 = Add(p + "ff.b1", 1, config.d_ff);
    layer.w2 = Add(p + "ff.w2", config.d_ff, dh);
    layer.b2 = Add(p + "ff.b2", 1, dh);
    layer.bn2_gamma = Add(p + "bn2.gamma", 1, dh);
    layer.bn2_beta = Add(p + "bn2.beta", 1, dh);
    layers.push_back(layer);
  }
  context_w = Add("decoder.context.w", 1 + 3 * dh, config.d_a);
  glimpse_wk = Add("decoder.glimpse.wk", dh, config.d_a);
  glimpse_wv = Add("decoder.glimpse.wv", dh, config.d_a);
  glimpse_wo = Add("decoder.glimpse.wo", config.d_a, dh);
  flat_.assign(flat_.size(), 0.0);
}

int Parameters::Add(const std::string& name, int rows, int cols) {
  ParamBlock b{name, rows, cols, flat_.size()};
  blocks_.push_back(b);
  flat_.resize(flat_.size() + static_cast<size_t>(rows) * cols, 0.0);
  return static_cast<int>(blocks_.size()) - 1;
}

Parameters Parameters::Initialize(const ModelConfig& config, uint64_t seed) {
  Parameters p(config);
  CountedRng rng(SubSeed(seed, "params"));
  // Biases share the fan-in of the weight they accompany.
  auto fill = [&](int block, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto v = p.View(block);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.Uniform(-bound, bound);
  };
  auto ones = [&](int block) { p.View(block).setOnes(); };
  fill(p.connector_w, config.d_o);
  fill(p.connector_b, config.d_o);
  for (const Layer& l : p.layers) {
    fill(l.wq, config.d_h);
    fill(l.wk, config.d_h);
    fill(l.wv, config.d_h);
    fill(l.wo, config.d_h);
    ones(l.bn1_gamma);
    fill(l.w1, config.d_h);
    fill(l.b1, config.d_h);
    fill(l.w2, config.d_ff);
    fill(l.b2, config.d_ff);
    ones(l.bn2_gamma);
  }
  fill(p.context_w, 1 + 3 * config.d_h);
  fill(p.glimpse_wk, config.d_h);
  fill(p.glimpse_wv, config.d_h);
  fill(p.glimpse_wo, config.d_a);
  return p;
}

int Parameters::Index(const std::string& name) const {
  for (size_t i = 0; i < blocks_.size(); ++i) {
    if (blocks_[i].name == name) return static_cast<int>(i);
  }
  throw InvalidArgument("no parameter block '" + name + "'");
}

ad::MatrixMap Parameters::View(int block) {
  const ParamBlock& b = blocks_.at(block);
  return ad::MatrixMap(flat_.data() + b.offset, b.rows, b.cols);
}

ad::ConstMatrixMap Parameters::View(int block) const {
  const ParamBlock& b = blocks_.at(block);
  return ad::ConstMatrixMap(flat_.data() + b.offset, b.rows, b.cols);
}

const ParamBlock& Parameters::BlockAt(size_t i) const {
  auto it = std::upper_bound(blocks_.begin(), blocks_.end(), i,
                             [](size_t x, const ParamBlock& b) { return x < b.offset; });
  if (it == blocks_.begin() || i >= flat_.size()) {
    throw InvalidArgument("flat index out of range");
  }
  return *std::prev(it);
}

NormStats NormStats::Initial(const ModelConfig& config) {
  NormStats s;
  for (int i = 0; i < 2 * config.n_blocks; ++i) {
    s.mean.push_back(ad::RowVector::Zero(config.d_h));
    s.var.push_back(ad::RowVector::Ones(config.d_h));
  }
  return s;
}

void NormStats::Update(std::span<const ad::BatchStats> batch, double momentum) {
  if (batch.size() != mean.size()) throw DimensionMismatch("norm statistics count mismatch");
  for (size_t i = 0; i < batch.size(); ++i) {
    const double m = batch[i].rows;
    const double correction = m > 1 ? m / (m - 1) : 1.0;
    mean[i] = (1.0 - momentum) * mean[i] + momentum * batch[i].mean;
    var[i] = (1.0 - momentum) * var[i] + momentum * correction * batch[i].var;
  }
}

size_t NormStats::FlatSize() const {
  size_t total = 0;
  for (size_t i = 0; i < mean.size(); ++i) total += mean[i].size() + var[i].size();
  return total;
}

std::vector<double> NormStats::Flatten() const {
  std::vector<double> out;
  out.reserve(FlatSize());
  for (size_t i = 0; i < mean.size(); ++i) {
    out.insert(out.end(), mean[i].data(), mean[i].data() + mean[i].size());
    out.insert(out.end(), var[i].data(), var[i].data() + var[i].size());
  }
  return out;
}

void NormStats::Unflatten(std::span<const double> flat) {
  if (flat.size() != FlatSize()) throw DimensionMismatch("norm statistics length mismatch");
  size_t k = 0;
  for (size_t i = 0; i < mean.size(); ++i) {
    for (Eigen::Index j = 0; j < mean[i].size(); ++j) mean[i][j] = flat[k++];
    for (Eigen::Index j = 0; j < var[i].size(); ++j) var[i][j] = flat[k++];
  }
}

std::vector<RolloutRequest> StartRequests(std::span<const ProblemInstance> instances,
                                          bool multi_start, int copies) {
  std::vector<RolloutRequest> out;
  for (size_t b = 0; b < instances.size(); ++b) {
    const CopEnv env(instances[b]);
    std::vector<int> starts = env.StartNodes();
    if (!multi_start && !starts.empty()) starts.resize(1);
    for (int s : starts) {
      for (int c = 0; c < copies; ++c) out.push_back({static_cast<int>(b), s, {}});
    }
  }
  return out;
}

PolicyPass::PolicyPass(const ModelConfig& config, const Parameters& params, NormMode norm_mode,
                       const NormStats* running, bool record_gradient)
    : config_(config),
      params_(params),
      norm_mode_(norm_mode),
      running_(running),
      record_gradient_(record_gradient) {
  if (record_gradient_) grad_.assign(params.size(), 0.0);
  param_vars_.reserve(params.blocks().size());
  for (size_t i = 0; i < params.blocks().size(); ++i) {
    Matrix value = params.View(static_cast<int>(i));
    param_vars_.push_back(record_gradient_
                              ? tape_.Parameter(value, grad_.data() + params.blocks()[i].offset)
                              : tape_.Constant(std::move(value)));
  }
}

Var PolicyPass::Param(int block) { return param_vars_[block]; }

void PolicyPass::Encode(std::span<const ProblemInstance> instances,
                        std::span<const EmbeddingMatrix> embeddings) {
  if (instances.empty()) throw InvalidArgument("empty batch");
  if (instances.size() != embeddings.size()) {
    throw DimensionMismatch("instance and embedding counts differ");
  }
  instances_ = instances;
  const int rows_per = instances[0].num_choices();
  const int batch = static_cast<int>(instances.size());
  Matrix x(static_cast<Eigen::Index>(batch) * rows_per, config_.d_o);
  Matrix t(batch, config_.d_o);
  envs_.clear();
  offsets_.clear();
  for (int b = 0; b < batch; ++b) {
    if (instances[b].num_choices() != rows_per) {
      throw InvalidArgument("instances in a batch must share the node count");
    }
    embeddings[b].Validate(config_.d_o, rows_per);
    x.middleRows(static_cast<Eigen::Index>(b) * rows_per, rows_per) =
        embeddings[b].nodes.cast<double>();
    t.row(b) = embeddings[b].task.cast<double>();
    envs_.emplace_back(instances[b]);
    offsets_.push_back(b * rows_per);
  }

  const Var xv = tape_.Constant(std::move(x));
  const Var tv = tape_.Constant(std::move(t));
  Var h = tape_.AddRowBroadcast(tape_.MatMul(xv, Param(params_.connector_w)),
                                Param(params_.connector_b));
  task_h_ = tape_.AddRowBroadcast(tape_.MatMul(tv, Param(params_.connector_w)),
                                  Param(params_.connector_b));

  ad::AttentionLayout self;
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < rows_per; ++i) {
      self.key_begin.push_back(offsets_[b]);
      self.key_count.push_back(rows_per);
    }
  }

  batch_stats_.clear();
  int norm_index = 0;
  auto norm = [&](Var in, int gamma, int beta) {
    const int idx = norm_index++;
    if (norm_mode_ == NormMode::kTrain) {
      ad::BatchStats stats;
      Var out = tape_.BatchNorm(in, Param(gamma), Param(beta), config_.bn_eps, &stats);
      batch_stats_.push_back(std::move(stats));
      return out;
    }
    if (config_.norm_inference == NormInference::kInstance || running_ == nullptr) {
      return tape_.BatchNorm(in, Param(gamma), Param(beta), config_.bn_eps, nullptr);
    }
    return tape_.BatchNormFixed(in, Param(gamma), Param(beta), running_->mean[idx],
                                running_->var[idx], config_.bn_eps);
  };

  for (const Parameters::Layer& l : params_.layers) {
    const Var q = tape_.MatMul(h, Param(l.wq));
    const Var k = tape_.MatMul(h, Param(l.wk));
    const Var v = tape_.MatMul(h, Param(l.wv));
    const Var att = tape_.MatMul(tape_.MultiHeadAttention(q, k, v, config_.heads, self),
                                 Param(l.wo));
    const Var hhat = norm(tape_.Add(h, att), l.bn1_gamma, l.bn1_beta);
    const Var ff1 =
        tape_.Relu(tape_.AddRowBroadcast(tape_.MatMul(hhat, Param(l.w1)), Param(l.b1)));
    const Var ff2 = tape_.AddRowBroadcast(tape_.MatMul(ff1, Param(l.w2)), Param(l.b2));
    h = norm(tape_.Add(hhat, ff2), l.bn2_gamma, l.bn2_beta);
  }
  h_ = h;
  glimpse_k_ = tape_.MatMul(h_, Param(params_.glimpse_wk));
  glimpse_v_ = tape_.MatMul(h_, Param(params_.glimpse_wv));

  for (const auto& m : {std::cref(tape_.value(h_)), std::cref(tape_.value(task_h_))}) {
    if (!m.get().allFinite()) throw NonFiniteValue("encoder produced non-finite states");
  }
}

PolicyPass::DecodeOutput PolicyPass::DecodeRows(std::span<const int> instance_ids,
                                                std::span<const DecodingState* const> states) {
  const int rows = static_cast<int>(instance_ids.size());
  const int count = instances_[0].num_choices();
  Matrix c(rows, 1);
  std::vector<int> first_rows(rows), last_rows(rows), begins(rows);
  DecodeOutput out;
  out.count = count;
  out.mask.resize(static_cast<size_t>(rows) * count);
  ad::AttentionLayout layout;
  layout.key_begin.resize(rows);
  layout.key_count.assign(rows, count);
  layout.mask_offset.resize(rows);
  for (int r = 0; r < rows; ++r) {
    const int b = instance_ids[r];
    const DecodingState& s = *states[r];
    if (s.done || s.first < 0) throw InvalidArgument("decode requires a started, live state");
    c(r, 0) = envs_[b].NormalizedDynamic(s);
    first_rows[r] = offsets_[b] + s.first;
    last_rows[r] = offsets_[b] + s.current;
    begins[r] = offsets_[b];
    envs_[b].FeasibilityMask(
        s, std::span<uint8_t>(out.mask.data() + static_cast<size_t>(r) * count, count));
    layout.key_begin[r] = offsets_[b];
    layout.mask_offset[r] = r * count;
  }
  layout.mask = out.mask;
  const Var parts[] = {tape_.Constant(std::move(c)),
                       tape_.GatherRows(task_h_, {instance_ids.begin(), instance_ids.end()}),
                       tape_.GatherRows(h_, std::move(first_rows)),
                       tape_.GatherRows(h_, std::move(last_rows))};
  const Var query = tape_.MatMul(tape_.ConcatCols(parts), Param(params_.context_w));
  const Var glimpse = tape_.MatMul(
      tape_.MultiHeadAttention(query, glimpse_k_, glimpse_v_, config_.heads, std::move(layout)),
      Param(params_.glimpse_wo));
  const Var logits =
      tape_.ClippedCompatibility(glimpse, h_, std::move(begins), count,
                                 1.0 / std::sqrt(static_cast<double>(config_.d_a)), config_.clip);
  out.log_probs = tape_.MaskedLogSoftmax(logits, out.mask);
  return out;
}

std::vector<double> PolicyPass::DecodeProbabilities(int instance, const DecodingState& state) {
  const int ids[] = {instance};
  const DecodingState* states[] = {&state};
  const DecodeOutput d = DecodeRows(ids, states);
  const Matrix& lp = tape_.value(d.log_probs);
  std::vector<double> p(d.count);
  for (int j = 0; j < d.count; ++j) p[j] = d.mask[j] ? std::exp(lp(0, j)) : 0.0;
  return p;
}

std::vector<Rollout> PolicyPass::Run(std::span<const RolloutRequest> requests, DecodeMode mode,
                                     CountedRng* rng) {
  if (envs_.empty()) throw InvalidArgument("Encode must precede Run");
  if (mode == DecodeMode::kSample && rng == nullptr) {
    throw InvalidArgument("sampling requires an rng");
  }
  const size_t total = requests.size();
  num_rollouts_ = total;
  std::vector<Rollout> out(total);
  std::vector<DecodingState> states(total);
  std::vector<int> active;
  for (size_t r = 0; r < total; ++r) {
    const RolloutRequest& req = requests[r];
    if (req.instance < 0 || req.instance >= static_cast<int>(envs_.size())) {
      throw InvalidArgument("rollout request names an unknown instance");
    }
    const CopEnv& env = envs_[req.instance];
    states[r] = env.Reset();
    if (HasDepot(env.instance().kind) && req.start == 0) {
      throw MaskedChoice("the depot cannot be a start node");
    }
    env.Step(states[r], req.start);
    out[r].instance = req.instance;
    out[r].start = req.start;
    if (!states[r].done) active.push_back(static_cast<int>(r));
  }

  std::vector<int> ids;
  std::vector<const DecodingState*> ptrs;
  for (size_t t = 0; !active.empty(); ++t) {
    ids.clear();
    ptrs.clear();
    for (int r : active) {
      ids.push_back(requests[r].instance);
      ptrs.push_back(&states[r]);
    }
    const DecodeOutput d = DecodeRows(ids, ptrs);
    const Matrix& lp = tape_.value(d.log_probs);
    std::vector<int> rows(active.size()), cols(active.size());
    for (size_t i = 0; i < active.size(); ++i) {
      const int r = active[i];
      const uint8_t* m = &d.mask[i * d.count];
      int choice = -1;
      if (!requests[r].forced.empty()) {
        if (t >= requests[r].forced.size()) {
          throw InvalidArgument("forced action sequence ended before termination");
        }
        choice = requests[r].forced[t];
        if (choice < 0 || choice >= d.count || !m[choice]) {
          throw MaskedChoice("forced action " + std::to_string(choice) + " is masked");
        }
      } else if (mode == DecodeMode::kGreedy) {
        double best = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < d.count; ++j) {
          if (m[j] && lp(i, j) > best) {
            best = lp(i, j);
            choice = j;
          }
        }
      } else {
        const double u = rng->Uniform();
        double cum = 0.0;
        for (int j = 0; j < d.count; ++j) {
          if (!m[j]) continue;
          choice = j;
          cum += std::exp(lp(i, j));
          if (u < cum) break;
        }
      }
      rows[i] = static_cast<int>(i);
      cols[i] = choice;
      out[r].step_logp.push_back(lp(i, choice));
      out[r].log_prob += lp(i, choice);
      envs_[requests[r].instance].Step(states[r], choice);
    }
    if (record_gradient_) {
      steps_.push_back({tape_.Pick(d.log_probs, std::move(rows), std::move(cols)), active});
    }
    std::erase_if(active, [&](int r) { return states[r].done; });
  }

  for (size_t r = 0; r < total; ++r) {
    const ProblemInstance& inst = instances_[requests[r].instance];
    if (!requests[r].forced.empty() && requests[r].forced.size() != out[r].step_logp.size()) {
      throw InvalidArgument("forced action sequence longer than the rollout");
    }
    out[r].actions = std::move(states[r].sequence);
    out[r].objective = Evaluate(inst, out[r].actions);
    out[r].reward = RewardOf(inst.kind, out[r].objective);
    if (!std::isfinite(out[r].log_prob)) throw NonFiniteValue("rollout log-probability");
  }
  return out;
}

std::vector<double> PolicyPass::Gradient(std::span<const double> weights) {
  if (!record_gradient_) throw InvalidArgument("pass was not recorded for gradients");
  if (gradient_taken_) throw InvalidArgument("gradient already taken");
  if (weights.size() != num_rollouts_) throw DimensionMismatch("one weight per rollout");
  gradient_taken_ = true;
  std::vector<Var> terms;
  for (const StepRecord& s : steps_) {
    std::vector<double> w(s.rollout_ids.size());
    for (size_t i = 0; i < w.size(); ++i) w[i] = weights[s.rollout_ids[i]];
    terms.push_back(tape_.WeightedSum(s.picked, std::move(w)));
  }
  if (!terms.empty()) tape_.Backward(tape_.SumScalars(terms));
  for (size_t i = 0; i < grad_.size(); ++i) {
    if (!std::isfinite(grad_[i])) {
      throw NonFiniteValue("non-finite gradient in parameter block '" +
                           params_.BlockAt(i).name + "'");
    }
  }
  return std::move(grad_);
}

std::vector<Rollout> SolveInstance(const ModelConfig& config, const Parameters& params,
                                   const NormStats& running, const ProblemInstance& inst,
                                   const EmbeddingMatrix& emb, DecodeMode mode,
                                   bool multi_start, CountedRng* rng) {
  PolicyPass pass(config, params, NormMode::kInference, &running, false);
  pass.Encode(std::span<const ProblemInstance>(&inst, 1),
              std::span<const EmbeddingMatrix>(&emb, 1));
  const auto requests = StartRequests(std::span<const ProblemInstance>(&inst, 1), multi_start);
  return pass.Run(requests, mode, rng);
}

const Rollout& BestRollout(ProblemKind kind, std::span<const Rollout> rollouts) {
  if (rollouts.empty()) throw InvalidArgument("no rollouts");
  const Rollout* best = &rollouts[0];
  for (const Rollout& r : rollouts) {
    const bool better = IsMaximization(kind) ? r.objective > best->objective
                                             : r.objective < best->objective;
    if (better || (r.objective == best->objective && r.start < best->start)) best = &r;
  }
  return *best;
}

namespace {

std::vector<RolloutRequest> ReplayRequests(std::span<const Rollout> rollouts) {
  std::vector<RolloutRequest> req;
  req.reserve(rollouts.size());
  for (const Rollout& r : rollouts) {
    if (r.actions.empty()) throw InvalidArgument("rollout without actions");
    std::vector<int> forced(r.actions.begin() + 1, r.actions.end());
    req.push_back({r.instance, r.start, std::move(forced)});
  }
  return req;
}

}  // namespace

std::vector<double> LogProbGradient(const ModelConfig& config, const Parameters& params,
                                    std::span<const ProblemInstance> instances,
                                    std::span<const EmbeddingMatrix> embeddings,
                                    std::span<const Rollout> rollouts,
                                    std::span<const double> weights) {
  PolicyPass pass(config, params, NormMode::kTrain, nullptr, true);
  pass.Encode(instances, embeddings);
  const auto req = ReplayRequests(rollouts);
  pass.Run(req, DecodeMode::kGreedy, nullptr);
  return pass.Gradient(weights);
}

std::vector<double> ReplayLogProbs(const ModelConfig& config, const Parameters& params,
                                   std::span<const ProblemInstance> instances,
                                   std::span<const EmbeddingMatrix> embeddings,
                                   std::span<const Rollout> rollouts) {
  PolicyPass pass(config, params, NormMode::kTrain, nullptr, false);
  pass.Encode(instances, embeddings);
  const auto req = ReplayRequests(rollouts);
  const auto replayed = pass.Run(req, DecodeMode::kGreedy, nullptr);
  std::vector<double> out;
  for (const Rollout& r : replayed) out.push_back(r.log_prob);
  return out;
}

}  // namespace copforge
