#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gate/error.hpp"
#include "gate/graph.hpp"
#include "gate/kb_ingest.hpp"
#include "gate/neural.hpp"
#include "gate/selector.hpp"

namespace gate {

// ---------------------------------------------------------------------------
// Rewards

struct RewardConfig {
  double alpha = 0.2;
  double r_node_pos = 1.0;
  double r_node_neg = -1.0;

  void validate() const {
    if (!(alpha > 0)) throw ConfigError("reward alpha must be > 0");
  }
};

struct Rewards {
  double r_node = 0;
  double r_gold = 0;
  double r_pool = 0;
  double total = 0;
  bool operator==(const Rewards&) const = default;
};

inline double reward_node(const std::string& halt, const std::vector<std::string>& gold_path, const RewardConfig& cfg) {
  if (gold_path.empty()) return 0.0;
  return halt == gold_path.back() ? cfg.r_node_pos : cfg.r_node_neg;
}

// Falls back to the gold knowledge's owner on document graphs when the sample
// carries no path; triple samples without a path earn nothing.
inline double reward_node(const std::string& halt, const DialogueSample& sample, const UnifiedGraph& g,
                          const RewardConfig& cfg) {
  if (sample.gold_path && !sample.gold_path->empty()) return reward_node(halt, *sample.gold_path, cfg);
  if (g.kind() != KbKind::document) return 0.0;
  for (const auto& gold : sample.gold_knowledge) {
    auto k = g.knowledge_index(gold);
    if (k != UnifiedGraph::npos && g.knowledge_nodes()[k].owner == halt) return cfg.r_node_pos;
  }
  return cfg.r_node_neg;
}

// Max(1 - alpha * r, -1) with r the best 1-indexed rank of any gold in the
// pool; -1 when no gold made it into the pool.
inline double reward_gold(const std::vector<std::string>& pool, const std::vector<std::string>& gold,
                          const RewardConfig& cfg) {
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (std::find(gold.begin(), gold.end(), pool[i]) != gold.end())
      return std::max(1.0 - cfg.alpha * static_cast<double>(i + 1), -1.0);
  return -1.0;
}

inline double reward_pool(double r_gold, std::size_t pool_size) {
  if (pool_size < 1) throw ValidationError("pool size must be >= 1");
  return r_gold / static_cast<double>(pool_size);
}

inline Rewards compute_rewards(const SelectionResult& r, const DialogueSample& sample, const UnifiedGraph& g,
                               const RewardConfig& cfg) {
  std::vector<std::string> pool;
  for (const auto& k : r.pool()) pool.push_back(k.id);
  Rewards out;
  out.r_node = reward_node(r.halt_node, sample, g, cfg);
  out.r_gold = reward_gold(pool, sample.gold_knowledge, cfg);
  out.r_pool = reward_pool(out.r_gold, r.pool_size);
  out.total = out.r_node + out.r_gold + out.r_pool;
  return out;
}

// ---------------------------------------------------------------------------
// Traces and losses

struct TraversalTrace {
  std::vector<TraceStep> steps;
  std::string halt_node;
  Rewards rewards;
  std::size_t pool_size = 0;
  std::size_t candidates = 0;
};

// Sampled traversal with rewards filled in.
inline TraversalTrace rollout(const Selector& selector, const ModelParams& params, const DialogueSample& sample,
                              std::mt19937_64& rng, const RewardConfig& rcfg = {}) {
  ad::Tape tape;
  ParamBinding bind(tape, params, false);
  Matrix enc = selector.refreshed(params);
  Var graph_enc = tape.reference(enc, false);
  SelectionResult r = selector.to_result(selector.run(bind, graph_enc, params.dims, sample, &rng));
  TraversalTrace t;
  t.steps = r.trace;
  t.halt_node = r.halt_node;
  t.rewards = compute_rewards(r, sample, selector.graph(), rcfg);
  t.pool_size = r.pool_size;
  t.candidates = r.candidates;
  return t;
}

// L_Walk = -(1/N) sum_traces total_reward * sum_steps logp, by value.
inline double reinforce_loss(const std::vector<TraversalTrace>& traces) {
  if (traces.empty()) throw ValidationError("reinforce_loss: no traces");
  double acc = 0;
  for (const auto& t : traces) {
    double logp = 0;
    for (const auto& s : t.steps) logp += s.logp;
    acc += t.rewards.total * logp;
  }
  return -acc / static_cast<double>(traces.size());
}

// Differentiable form: rewards are constants, gradients flow through logp.
struct WalkTerm {
  double reward;
  std::vector<Var> log_probs;  // 1x1 each, one per step
};

inline Var reinforce_loss(ad::Tape& tape, const std::vector<WalkTerm>& terms) {
  if (terms.empty()) throw ValidationError("reinforce_loss: no traces");
  std::vector<Var> parts;
  for (const auto& t : terms)
    for (const auto& lp : t.log_probs) parts.push_back(ad::scale(lp, t.reward));
  if (parts.empty()) return tape.constant(Matrix::Zero(1, 1));
  return ad::scale(ad::add_all(parts), -1.0 / static_cast<double>(terms.size()));
}

// Log-probability of each step's chosen action.
inline std::vector<Var> step_log_probs(const Episode& ep) {
  std::vector<Var> out;
  for (const auto& s : ep.steps) {
    auto pick = static_cast<Eigen::Index>(std::find(s.adj.begin(), s.adj.end(), s.chosen) - s.adj.begin());
    out.push_back(ad::element(s.scores.log_probs, pick));
  }
  return out;
}

struct SupervisedLosses {
  std::optional<Var> node;       // absent when no step has a gold target
  std::optional<Var> knowledge;  // absent when no gold is reachable
  bool gold_unreachable = false;
};

// Gold next node for a traversal standing on `node`: the following gold-path
// entry, or the node itself (halt) at the path's end.
inline std::optional<std::size_t> gold_target(const UnifiedGraph& g, const DialogueSample& sample, std::size_t node) {
  if (!sample.gold_path) return std::nullopt;
  const auto& path = *sample.gold_path;
  const std::string& id = g.process_nodes()[node].id;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (path[i] != id) continue;
    return i + 1 < path.size() ? g.process_index(path[i + 1]) : node;
  }
  return std::nullopt;
}

// `temperature` divides the knowledge scores inside the cross-entropy only;
// rankings are unaffected.
inline SupervisedLosses supervised_losses(const Episode& ep, const DialogueSample& sample, const UnifiedGraph& g,
                                          double temperature = 1.0) {
  SupervisedLosses out;
  std::vector<Var> node_terms;
  for (const auto& s : ep.steps) {
    auto target = gold_target(g, sample, s.node);
    if (!target || *target == UnifiedGraph::npos) continue;
    auto it = std::find(s.adj.begin(), s.adj.end(), *target);
    if (it == s.adj.end()) continue;
    node_terms.push_back(ad::scale(ad::element(s.scores.log_probs, it - s.adj.begin()), -1.0));
  }
  if (!node_terms.empty()) out.node = ad::mean(node_terms);

  std::vector<Var> know_terms;
  Var log_probs = ad::log_softmax(temperature == 1.0 ? ep.knowledge.scores : ad::scale(ep.knowledge.scores, 1.0 / temperature));
  for (const auto& gold : sample.gold_knowledge) {
    auto k = g.knowledge_index(gold);
    auto it = std::find(ep.knowledge.candidates.begin(), ep.knowledge.candidates.end(), k);
    if (k == UnifiedGraph::npos || it == ep.knowledge.candidates.end()) continue;
    know_terms.push_back(ad::scale(ad::element(log_probs, it - ep.knowledge.candidates.begin()), -1.0));
  }
  if (know_terms.empty())
    out.gold_unreachable = true;
  else
    out.knowledge = ad::mean(know_terms);
  return out;
}

// Cross-entropy of a softmax over `logits` against one target index.
inline double cross_entropy(const Eigen::VectorXd& logits, std::size_t target) {
  double m = logits.maxCoeff();
  double lse = m + std::log((logits.array() - m).exp().sum());
  return lse - logits[static_cast<Eigen::Index>(target)];
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

// One-cycle: cosine warm-up from max_lr/div_factor to max_lr over the first
// `warmup_fraction` of steps, then cosine anneal to initial/final_div_factor.
struct OneCycleSchedule {
  double max_lr = 2e-3;
  double warmup_fraction = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  std::size_t total_steps = 1;

  double initial_lr() const { return max_lr / div_factor; }
  double final_lr() const { return initial_lr() / final_div_factor; }
  std::size_t peak_step() const {
    if (total_steps <= 1) return 0;
    return static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(total_steps - 1)));
  }

  double lr(std::size_t step) const {
    auto cosine = [](double from, double to, double frac) {
      return to + (from - to) * 0.5 * (1.0 + std::cos(M_PI * frac));
    };
    step = std::min(step, total_steps > 0 ? total_steps - 1 : 0);
    std::size_t peak = peak_step();
    if (step <= peak) {
      if (peak == 0) return max_lr;
      return cosine(initial_lr(), max_lr, static_cast<double>(step) / static_cast<double>(peak));
    }
    std::size_t rest = total_steps - 1 - peak;
    return cosine(max_lr, final_lr(), static_cast<double>(step - peak) / static_cast<double>(rest));
  }
};

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(double weight_decay = 0.12, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ModelParams& params, const Gradients& grads, double lr) {
    if (m_.tensors.empty()) {
      m_ = params.zeros_like();
      v_ = params.zeros_like();
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, w] : params.tensors) {
      const Matrix& g = grads.at(name);
      Matrix& m = m_.at(name);
      Matrix& v = v_.at(name);
      m = b1_ * m + (1 - b1_) * g;
      v = b2_ * v + (1 - b2_) * g.cwiseProduct(g);
      w *= (1.0 - lr * wd_);
      w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
    params.quantize();
  }

  std::size_t steps() const { return t_; }

 private:
  double wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  TensorMap m_, v_;
};

// ---------------------------------------------------------------------------
// Training

struct LossToggles {
  bool walk = true;
  bool node = true;
  bool knowledge = true;
  bool any() const { return walk || node || knowledge; }
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 5;
  std::size_t rollouts = 4;
  double max_lr = 2e-3;
  double warmup_fraction = 0.3;
  double weight_decay = 0.12;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  LossToggles losses;
  Precision precision = Precision::f64;
  std::optional<double> baseline;  // constant subtracted from rewards; off by default
  double knowledge_temperature = 0.01;
  Dims dims;
  RewardConfig rewards;

  void validate() const {
    if (!losses.any()) throw ConfigError("at least one loss component must be enabled");
    if (epochs < 1 || batch_size < 1 || rollouts < 1) throw ConfigError("epochs, batch size and rollouts must be >= 1");
    if (!(max_lr > 0)) throw ConfigError("max_lr must be > 0");
    if (!(knowledge_temperature > 0)) throw ConfigError("knowledge temperature must be > 0");
    dims.validate();
    rewards.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double l_walk = 0, l_node = 0, l_knowledge = 0;
  double reward_mean = 0;
  std::optional<double> r_at_1;
  double pool_mean = 0;
  double gold_unreachable_rate = 0;
  double lr = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"l_walk", r.l_walk},
          {"l_node", r.l_node},
          {"l_knowledge", r.l_knowledge},
          {"reward_mean", r.reward_mean},
          {"r_at_1", r.r_at_1 ? nlohmann::json(*r.r_at_1) : nlohmann::json(nullptr)},
          {"pool_mean", r.pool_mean},
          {"gold_unreachable_rate", r.gold_unreachable_rate},
          {"lr", r.lr}};
}

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double max_lr_seen = 0;

  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) out += to_json(e).dump() + '\n';
    return out;
  }
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(ModelParams last_good, TrainReport report)
      : Error("training diverged (non-finite loss or gradient)"),
        last_good_(std::move(last_good)),
        report_(std::move(report)) {}
  const ModelParams& last_good() const { return last_good_; }
  const TrainReport& report() const { return report_; }

 private:
  ModelParams last_good_;
  TrainReport report_;
};

struct BatchLosses {
  double l_walk = 0, l_node = 0, l_knowledge = 0;
  double reward_sum = 0;
  double pool_sum = 0;
  std::size_t traces = 0;
  std::size_t unreachable = 0;
};

// Loss for one batch on `tape`. Every component is computed for reporting;
// only enabled ones enter the returned objective.
inline Var batch_objective(ParamBinding& p, const Selector& selector, const std::vector<const DialogueSample*>& batch,
                           const TrainConfig& cfg, std::mt19937_64& rng, BatchLosses& stats) {
  ad::Tape& tape = p.tape();
  Var graph_enc = selector.refresh(p, cfg.dims);
  std::vector<WalkTerm> walk;
  std::vector<Var> node_terms, know_terms;
  for (const auto* sample : batch) {
    for (std::size_t r = 0; r < cfg.rollouts; ++r) {
      Episode ep = selector.run(p, graph_enc, cfg.dims, *sample, &rng);
      SelectionResult res = selector.to_result(ep);
      Rewards rw = compute_rewards(res, *sample, selector.graph(), cfg.rewards);
      walk.push_back({rw.total - cfg.baseline.value_or(0.0), step_log_probs(ep)});
      auto sup = supervised_losses(ep, *sample, selector.graph(), cfg.knowledge_temperature);
      if (sup.node) node_terms.push_back(*sup.node);
      if (sup.knowledge) know_terms.push_back(*sup.knowledge);
      stats.unreachable += sup.gold_unreachable ? 1 : 0;
      stats.reward_sum += rw.total;
      stats.pool_sum += static_cast<double>(res.pool_size);
      ++stats.traces;
    }
  }
  Var l_walk = reinforce_loss(tape, walk);
  Var zero = tape.constant(Matrix::Zero(1, 1));
  Var l_node = node_terms.empty() ? zero : ad::mean(node_terms);
  Var l_know = know_terms.empty() ? zero : ad::mean(know_terms);
  stats.l_walk = l_walk.scalar();
  stats.l_node = l_node.scalar();
  stats.l_knowledge = l_know.scalar();
  std::vector<Var> enabled;
  if (cfg.losses.walk) enabled.push_back(l_walk);
  if (cfg.losses.node) enabled.push_back(l_node);
  if (cfg.losses.knowledge) enabled.push_back(l_know);
  return ad::add_all(enabled);
}

// Fraction of samples whose top-ranked knowledge is a gold item.
inline double top1_accuracy(const Selector& selector, const ModelParams& params,
                            const std::vector<DialogueSample>& samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    auto r = selector.select(params, s);
    if (!r.ranked.empty() &&
        std::find(s.gold_knowledge.begin(), s.gold_knowledge.end(), r.ranked.front().id) != s.gold_knowledge.end())
      ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

inline TrainResult train(const Selector& selector, const std::vector<DialogueSample>& corpus, const TrainConfig& cfg,
                         const std::vector<DialogueSample>& heldout = {},
                         const std::function<void(const EpochRecord&)>& on_epoch = nullptr) {
  cfg.validate();
  if (corpus.empty()) throw ValidationError("training corpus is empty");
  if (cfg.dims.d_in != selector.provider().dimension())
    throw ShapeError("model d_in " + std::to_string(cfg.dims.d_in) + " differs from embedding dimension " +
                     std::to_string(selector.provider().dimension()));

  ModelParams params = init_params(cfg.dims, cfg.seed, cfg.precision);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  const std::size_t batches = (corpus.size() + cfg.batch_size - 1) / cfg.batch_size;
  OneCycleSchedule schedule;
  schedule.max_lr = cfg.max_lr;
  schedule.warmup_fraction = cfg.warmup_fraction;
  schedule.total_steps = cfg.epochs * batches;
  AdamW opt(cfg.weight_decay, 0.9, 0.999, cfg.adam_eps);

  TrainResult result;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t traces = 0, unreachable = 0;
    double reward_sum = 0, pool_sum = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<const DialogueSample*> batch;
      for (std::size_t i = b * cfg.batch_size; i < std::min(corpus.size(), (b + 1) * cfg.batch_size); ++i)
        batch.push_back(&corpus[order[i]]);
      ad::Tape tape;
      ParamBinding bind(tape, params);
      BatchLosses stats;
      Var loss = batch_objective(bind, selector, batch, cfg, rng, stats);
      tape.backward(loss);
      Gradients grads = bind.gradients();
      if (!std::isfinite(loss.scalar()) || !grads.all_finite()) {
        result.report.epochs.push_back(rec);
        throw TrainingDiverged(params, result.report);
      }
      double lr = schedule.lr(step++);
      result.report.max_lr_seen = std::max(result.report.max_lr_seen, lr);
      opt.step(params, grads, lr);
      rec.lr = lr;
      rec.l_walk += stats.l_walk / static_cast<double>(batches);
      rec.l_node += stats.l_node / static_cast<double>(batches);
      rec.l_knowledge += stats.l_knowledge / static_cast<double>(batches);
      traces += stats.traces;
      unreachable += stats.unreachable;
      reward_sum += stats.reward_sum;
      pool_sum += stats.pool_sum;
    }
    rec.reward_mean = reward_sum / static_cast<double>(traces);
    rec.pool_mean = pool_sum / static_cast<double>(traces);
    rec.gold_unreachable_rate = static_cast<double>(unreachable) / static_cast<double>(traces);
    if (!heldout.empty()) rec.r_at_1 = top1_accuracy(selector, params, heldout);
    result.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace gate
