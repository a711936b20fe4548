#pragma once

// Knowledge selection: context encoding, graph refresh, scored traversal,
// node-attention knowledge scoring, and adaptive pool sizing.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <mutex>
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
#include "gate/text_encode.hpp"

namespace gate {

enum class PoolMode { adaptive, fixed };

struct SelectorConfig {
  std::size_t t_max = 3;
  PoolMode pool_mode = PoolMode::adaptive;
  std::size_t fixed_k = 10;
  double m_min = 0.05;
  bool sampled = false;
  bool use_node_attention = true;
  std::size_t keywords = 8;

  void validate() const {
    if (t_max < 1) throw ConfigError("t_max must be >= 1");
    if (pool_mode == PoolMode::fixed && fixed_k < 1) throw ConfigError("fixed pool size must be >= 1");
    if (!(m_min > 0.0 && m_min <= 1.0)) throw ConfigError("m_min must lie in (0, 1]");
    if (keywords < 1) throw ConfigError("keyword count must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Pool sizing

inline double population_variance(const Eigen::VectorXd& v) {
  if (v.size() == 0) return 0.0;
  double mean = v.mean();
  return (v.array() - mean).square().mean();
}

// Maps x = 1 / (1 - Var) in [1, 4/3] onto [m_min, 1], decreasing: peaked node
// scores shrink the pool, flat ones keep everything.
inline double pool_fraction(double variance, double m_min) {
  double x = 1.0 / (1.0 - variance);
  double m = m_min + (1.0 - m_min) * ((4.0 / 3.0 - x) / (1.0 / 3.0));
  return std::clamp(m, m_min, 1.0);
}

inline std::size_t adapt_pool(const Eigen::VectorXd& node_scores, std::size_t candidates, const SelectorConfig& cfg) {
  if (candidates == 0) return 0;
  if (cfg.pool_mode == PoolMode::fixed) return std::min(cfg.fixed_k, candidates);
  double m = pool_fraction(population_variance(node_scores), cfg.m_min);
  auto size = static_cast<std::size_t>(std::llround(static_cast<double>(candidates) * m));
  return std::clamp<std::size_t>(size, 1, candidates);
}

// ---------------------------------------------------------------------------
// Differentiable pieces

struct ContextEncoding {
  Var vector;
  Eigen::VectorXd history;
  Eigen::VectorXd utterance;
  Eigen::VectorXd keywords;
  KeywordSet keyword_set;
  std::vector<Eigen::VectorXd> attention;  // per head, over {history, utterance, keywords}
};

// Modality summaries: mean history-turn embedding, utterance embedding and the
// weight-weighted mean keyword embedding; attended with the utterance as query.
// The attended vector is added to the utterance (residual form).
inline ContextEncoding encode_context(ParamBinding& p, const EmbeddingProvider& provider,
                                      const KeywordExtractor& keywords, const std::vector<std::string>& history,
                                      const std::string& utterance, std::size_t n_keywords, std::size_t heads) {
  if (detail::is_blank(utterance)) throw ValidationError("utterance must not be empty");
  const auto d = static_cast<Eigen::Index>(provider.dimension());
  ContextEncoding ctx;
  ctx.history = Eigen::VectorXd::Zero(d);
  for (const auto& h : history) ctx.history += provider.embed_text(h);
  if (!history.empty()) ctx.history /= static_cast<double>(history.size());
  ctx.utterance = provider.embed_text(utterance);
  ctx.keyword_set = keywords.extract(history, utterance, n_keywords);
  ctx.keywords = Eigen::VectorXd::Zero(d);
  double total = 0;
  for (const auto& kw : ctx.keyword_set) {
    ctx.keywords += kw.weight * provider.embed_text(kw.term);
    total += kw.weight;
  }
  if (total > 0) ctx.keywords /= total;

  ad::Tape& t = p.tape();
  Var utt = t.constant(ctx.utterance);
  auto att = mha_forward(p, "modality_attn", utt, {t.constant(ctx.history), utt, t.constant(ctx.keywords)}, heads);
  ctx.vector = ad::add(utt, att.vector);
  ctx.attention = std::move(att.weights);
  return ctx;
}

// Static node encodings, one column per process node.
inline Matrix static_node_features(const UnifiedGraph& g, const EmbeddingProvider& provider) {
  Matrix x(static_cast<Eigen::Index>(provider.dimension()), static_cast<Eigen::Index>(g.process_nodes().size()));
  for (std::size_t i = 0; i < g.process_nodes().size(); ++i) x.col(static_cast<Eigen::Index>(i)) = encode_node(g, provider, i);
  return x;
}

inline Matrix static_knowledge_features(const UnifiedGraph& g, const EmbeddingProvider& provider) {
  Matrix x(static_cast<Eigen::Index>(provider.dimension()), static_cast<Eigen::Index>(g.knowledge_nodes().size()));
  for (std::size_t i = 0; i < g.knowledge_nodes().size(); ++i) {
    const auto& k = g.knowledge_nodes()[i];
    x.col(static_cast<Eigen::Index>(i)) = provider.embed_item(k.id, k.text);
  }
  return x;
}

// Full-graph GAT pass over the static node encodings (d_hidden x nodes).
inline Var refresh_graph(ParamBinding& p, const UnifiedGraph& g, const Matrix& static_features, const Dims& dims) {
  std::vector<std::vector<std::size_t>> adj(g.process_nodes().size());
  for (std::size_t i = 0; i < adj.size(); ++i) adj[i] = g.neighbor_indices(i);
  Var x = p.tape().reference(static_features, false);
  for (std::size_t l = 0; l < dims.gat_layers; ++l) {
    if (l > 0) x = ad::leaky_relu(x, kLeakySlope);
    x = gat_forward(p, "graph_gat." + std::to_string(l), x, adj, dims.heads);
  }
  return x;
}

// S_t = S_{t-1} + Attention(query S_{t-1}; inputs x_bar, S_{t-1}, e_node).
inline Var update_state(ParamBinding& p, Var prev, Var context, Var node_state, std::size_t heads) {
  return ad::add(prev, mha_forward(p, "state_attn", prev, {context, prev, node_state}, heads).vector);
}

struct NodeScores {
  Var logits;
  Var probs;
  Var log_probs;
};

// Scores the star subgraph around `center` (position `center_pos` in
// `node_encs`): GAT over [S_t ; e_n] features, score MLP to a logit per node,
// softmax over the action space.
inline NodeScores score_subgraph(ParamBinding& p, Var state, const std::vector<Var>& node_encs, std::size_t center_pos,
                                 std::size_t heads) {
  if (node_encs.empty()) throw SelectionError("empty action space");
  std::vector<Var> feats;
  for (const auto& e : node_encs) feats.push_back(ad::concat_rows({state, e}));
  std::vector<std::vector<std::size_t>> star(node_encs.size());
  for (std::size_t i = 0; i < node_encs.size(); ++i) {
    if (i == center_pos) continue;
    star[center_pos].push_back(i);
    star[i].push_back(center_pos);
  }
  Var h = gat_forward(p, "score_gat", ad::concat_cols(feats), star, heads);
  std::vector<Var> logits;
  for (std::size_t i = 0; i < node_encs.size(); ++i)
    logits.push_back(mlp_forward(p, "score_mlp", ad::col(h, static_cast<Eigen::Index>(i)), 2));
  NodeScores s;
  s.logits = ad::stack(logits);
  s.probs = ad::softmax(s.logits);
  s.log_probs = ad::log_softmax(s.logits);
  return s;
}

// Per-node attention weights from the node score distribution: MLP over
// [p_n, p_n - 1/|Adj|], softmax across the action space.
inline Var node_attention(ParamBinding& p, Var node_probs) {
  ad::Tape& t = p.tape();
  const auto n = node_probs.rows();
  Matrix shift = Matrix::Constant(n, 1, -1.0 / static_cast<double>(n));
  Var centered = ad::add(node_probs, t.constant(shift));
  std::vector<Var> logits;
  for (Eigen::Index i = 0; i < n; ++i)
    logits.push_back(
        mlp_forward(p, "node_attn_mlp", ad::concat_rows({ad::element(node_probs, i), ad::element(centered, i)}), 2));
  return ad::softmax(ad::stack(logits));
}

struct KnowledgeScores {
  std::vector<std::size_t> candidates;  // knowledge indices in K_t
  Var scores;                           // one per candidate
  std::optional<Var> node_weights;
};

// K_t = knowledge owned by the action-space nodes. score(k) = w_owner * (S_t . e_k),
// or the bare dot product when node attention is off.
inline KnowledgeScores score_knowledge(ParamBinding& p, Var state, Var node_probs, const std::vector<std::size_t>& adj,
                                       const UnifiedGraph& g, const Matrix& knowledge_features,
                                       bool use_node_attention) {
  KnowledgeScores ks;
  std::vector<std::size_t> owner_pos;
  for (std::size_t a = 0; a < adj.size(); ++a)
    for (auto k : g.owned_knowledge(adj[a])) {
      ks.candidates.push_back(k);
      owner_pos.push_back(a);
    }
  if (ks.candidates.empty()) throw SelectionError("no candidate knowledge reachable");
  ad::Tape& t = p.tape();
  Matrix emb(knowledge_features.rows(), static_cast<Eigen::Index>(ks.candidates.size()));
  for (std::size_t i = 0; i < ks.candidates.size(); ++i)
    emb.col(static_cast<Eigen::Index>(i)) = knowledge_features.col(static_cast<Eigen::Index>(ks.candidates[i]));
  if (emb.rows() != state.rows())
    throw ShapeError("knowledge encodings have " + std::to_string(emb.rows()) + " rows, state has " +
                     std::to_string(state.rows()));
  Var dots = ad::matmul(t.constant(Matrix(emb.transpose())), state);
  if (!use_node_attention) {
    ks.scores = dots;
    return ks;
  }
  Var w = node_attention(p, node_probs);
  Matrix expand = Matrix::Zero(static_cast<Eigen::Index>(ks.candidates.size()), static_cast<Eigen::Index>(adj.size()));
  for (std::size_t i = 0; i < owner_pos.size(); ++i)
    expand(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(owner_pos[i])) = 1.0;
  ks.scores = ad::cwise_mul(ad::matmul(t.constant(expand), w), dots);
  ks.node_weights = w;
  return ks;
}

// Indices into `scores` ordered by descending score, ties by knowledge id.
inline std::vector<std::size_t> rank_candidates(const Eigen::VectorXd& scores, const std::vector<std::size_t>& candidates,
                                                const UnifiedGraph& g) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double sa = scores[static_cast<Eigen::Index>(a)], sb = scores[static_cast<Eigen::Index>(b)];
    if (sa != sb) return sa > sb;
    return g.knowledge_nodes()[candidates[a]].id < g.knowledge_nodes()[candidates[b]].id;
  });
  return order;
}

// ---------------------------------------------------------------------------
// Traversal

struct EpisodeStep {
  std::size_t node;
  std::size_t chosen;
  std::vector<std::size_t> adj;
  NodeScores scores;
};

struct Episode {
  ContextEncoding context;
  std::size_t start = 0;
  std::vector<EpisodeStep> steps;
  std::size_t halt = 0;
  std::vector<std::size_t> final_adj;
  Var final_probs;
  Var final_state;
  KnowledgeScores knowledge;
  std::vector<std::size_t> ranking;  // positions into knowledge.candidates
  std::size_t pool_size = 0;
  double variance = 0.0;
};

struct ScoredKnowledge {
  std::string id;
  std::string text;
  double score;
  bool operator==(const ScoredKnowledge&) const = default;
};

struct TraceStep {
  std::string node;
  std::string chosen;
  double logp;
  std::vector<std::string> candidates;
  bool operator==(const TraceStep&) const = default;
};

struct SelectionResult {
  std::vector<ScoredKnowledge> ranked;  // full ranking over K_t
  std::size_t pool_size = 0;
  std::size_t candidates = 0;
  std::string halt_node;
  std::vector<TraceStep> trace;
  double variance = 0.0;

  std::vector<ScoredKnowledge> pool() const {
    return {ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(pool_size)};
  }
  bool operator==(const SelectionResult&) const = default;
};

inline nlohmann::json to_json(const SelectionResult& r) {
  nlohmann::json pool = nlohmann::json::array(), trace = nlohmann::json::array();
  for (const auto& k : r.pool()) pool.push_back({{"id", k.id}, {"text", k.text}, {"score", k.score}});
  for (const auto& s : r.trace) trace.push_back({{"node", s.node}, {"chosen", s.chosen}, {"logp", s.logp}});
  return {{"pool", std::move(pool)}, {"pool_size", r.pool_size}, {"candidates", r.candidates},
          {"halt_node", r.halt_node}, {"variance", r.variance},     {"trace", std::move(trace)}};
}

// Binds a graph and an embedding provider; static encodings are computed once.
// Parameter-dependent work happens per call, so one Selector serves any number
// of parameter snapshots and threads.
class Selector {
 public:
  Selector(const UnifiedGraph& graph, const EmbeddingProvider& provider, SelectorConfig cfg = {})
      : Selector(graph, provider, cfg, KeywordExtractor::for_graph(graph)) {}

  Selector(const UnifiedGraph& graph, const EmbeddingProvider& provider, SelectorConfig cfg, KeywordExtractor keywords)
      : graph_(&graph),
        provider_(&provider),
        cfg_(cfg),
        keywords_(std::move(keywords)),
        node_features_(static_node_features(graph, provider)),
        knowledge_features_(static_knowledge_features(graph, provider)) {
    cfg_.validate();
    if (graph.empty()) throw SelectionError("graph has no process nodes");
  }

  const UnifiedGraph& graph() const { return *graph_; }
  const EmbeddingProvider& provider() const { return *provider_; }
  const SelectorConfig& config() const { return cfg_; }
  SelectorConfig& config() { return cfg_; }
  const KeywordExtractor& keywords() const { return keywords_; }
  const Matrix& node_features() const { return node_features_; }
  const Matrix& knowledge_features() const { return knowledge_features_; }

  Var refresh(ParamBinding& p, const Dims& dims) const { return refresh_graph(p, *graph_, node_features_, dims); }

  // Refreshed encodings by value, cached on the parameter fingerprint.
  Matrix refreshed(const ModelParams& params) const {
    auto key = fingerprint(params);
    {
      std::lock_guard lock(cache_mutex_);
      if (cache_key_ && *cache_key_ == key) return cache_value_;
    }
    ad::Tape tape;
    ParamBinding bind(tape, params, false);
    Matrix value = refresh(bind, params.dims).value();
    ++refresh_count_;
    std::lock_guard lock(cache_mutex_);
    cache_key_ = key;
    cache_value_ = value;
    return value;
  }

  std::size_t refresh_count() const { return refresh_count_.load(); }

  // One traversal on `p`'s tape. `graph_enc` is the refreshed graph
  // (d_hidden x nodes) on the same tape. With `rng` set, actions are sampled
  // from the policy; otherwise the argmax is taken.
  Episode run(ParamBinding& p, Var graph_enc, const Dims& dims, const DialogueSample& sample,
              std::mt19937_64* rng = nullptr) const {
    const UnifiedGraph& g = *graph_;
    Episode ep;
    ep.context = encode_context(p, *provider_, keywords_, sample.history, sample.utterance, cfg_.keywords, dims.heads);
    Var context = ep.context.vector;

    std::vector<std::optional<Var>> enc_cache(g.process_nodes().size()), state_cache(g.process_nodes().size());
    auto enc = [&](std::size_t n) -> Var {
      if (!enc_cache[n]) enc_cache[n] = ad::col(graph_enc, static_cast<Eigen::Index>(n));
      return *enc_cache[n];
    };
    auto node_state = [&](std::size_t n) -> Var {
      if (!state_cache[n]) state_cache[n] = ad::matmul(p("node_proj"), enc(n));
      return *state_cache[n];
    };

    ep.start = resolve_start(p, graph_enc, context, sample);
    std::size_t current = ep.start;
    Var state = context;
    bool halted = false;
    for (std::size_t step = 0; step < cfg_.t_max; ++step) {
      auto adj = action_space(current);
      if (adj.size() == 1) break;
      auto center = static_cast<std::size_t>(std::find(adj.begin(), adj.end(), current) - adj.begin());
      std::vector<Var> encs;
      for (auto n : adj) encs.push_back(enc(n));
      NodeScores scores = score_subgraph(p, state, encs, center, dims.heads);
      std::size_t pick = rng ? sample_index(scores.probs.value().col(0), *rng) : argmax(scores.probs.value().col(0));
      ep.steps.push_back({current, adj[pick], adj, scores});
      if (adj[pick] == current) {
        halted = true;
        break;
      }
      current = adj[pick];
      state = update_state(p, state, context, node_state(current), dims.heads);
    }

    ep.halt = current;
    ep.final_state = state;
    if (halted) {
      ep.final_adj = ep.steps.back().adj;
      ep.final_probs = ep.steps.back().scores.probs;
    } else {
      ep.final_adj = action_space(current);
      if (ep.final_adj.size() == 1) {
        ep.final_probs = p.tape().constant(Matrix::Ones(1, 1));
      } else {
        auto center = static_cast<std::size_t>(std::find(ep.final_adj.begin(), ep.final_adj.end(), current) -
                                               ep.final_adj.begin());
        std::vector<Var> encs;
        for (auto n : ep.final_adj) encs.push_back(enc(n));
        ep.final_probs = score_subgraph(p, state, encs, center, dims.heads).probs;
      }
    }

    ep.knowledge = score_knowledge(p, state, ep.final_probs, ep.final_adj, g, knowledge_features_,
                                   cfg_.use_node_attention);
    ep.ranking = rank_candidates(ep.knowledge.scores.value().col(0), ep.knowledge.candidates, g);
    Eigen::VectorXd probs = ep.final_probs.value().col(0);
    ep.variance = population_variance(probs);
    ep.pool_size = adapt_pool(probs, ep.knowledge.candidates.size(), cfg_);
    return ep;
  }

  SelectionResult to_result(const Episode& ep) const {
    const UnifiedGraph& g = *graph_;
    SelectionResult r;
    Eigen::VectorXd scores = ep.knowledge.scores.value().col(0);
    for (auto pos : ep.ranking) {
      const auto& k = g.knowledge_nodes()[ep.knowledge.candidates[pos]];
      r.ranked.push_back({k.id, k.text, scores[static_cast<Eigen::Index>(pos)]});
    }
    r.pool_size = ep.pool_size;
    r.candidates = ep.knowledge.candidates.size();
    r.halt_node = g.process_nodes()[ep.halt].id;
    r.variance = ep.variance;
    for (const auto& s : ep.steps) {
      TraceStep ts;
      ts.node = g.process_nodes()[s.node].id;
      ts.chosen = g.process_nodes()[s.chosen].id;
      auto pick = static_cast<Eigen::Index>(std::find(s.adj.begin(), s.adj.end(), s.chosen) - s.adj.begin());
      ts.logp = s.scores.log_probs.value()(pick, 0);
      for (auto n : s.adj) ts.candidates.push_back(g.process_nodes()[n].id);
      r.trace.push_back(std::move(ts));
    }
    return r;
  }

  // Greedy (or sampled, when configured and an rng is given) selection.
  SelectionResult select(const ModelParams& params, const DialogueSample& sample,
                         std::mt19937_64* rng = nullptr) const {
    ad::Tape tape;
    ParamBinding bind(tape, params, false);
    Matrix enc = refreshed(params);
    Var graph_enc = tape.reference(enc, false);
    return to_result(run(bind, graph_enc, params.dims, sample, cfg_.sampled ? rng : nullptr));
  }

  SelectionResult select(const ModelParams& params, const std::vector<std::string>& history,
                         const std::string& utterance) const {
    DialogueSample s;
    s.history = history;
    s.utterance = utterance;
    return select(params, s);
  }

  // Adj_t: neighbors plus the node itself, id-sorted.
  std::vector<std::size_t> action_space(std::size_t node) const {
    std::vector<std::size_t> adj = graph_->neighbor_indices(node);
    if (std::find(adj.begin(), adj.end(), node) == adj.end()) adj.push_back(node);
    std::sort(adj.begin(), adj.end(), [this](std::size_t a, std::size_t b) {
      return graph_->process_nodes()[a].id < graph_->process_nodes()[b].id;
    });
    return adj;
  }

 private:
  std::size_t resolve_start(ParamBinding& p, Var graph_enc, Var context, const DialogueSample& sample) const {
    if (sample.start_node) {
      auto i = graph_->process_index(*sample.start_node);
      if (i == UnifiedGraph::npos) throw ValidationError("unknown start node \"" + *sample.start_node + "\"");
      return i;
    }
    (void)p;
    (void)graph_enc;
    Eigen::VectorXd sims = node_features_.transpose() * context.value().col(0);
    return argmax(sims);
  }

  static std::size_t argmax(const Eigen::VectorXd& v) {
    std::size_t best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
    return best;
  }

  static std::size_t sample_index(const Eigen::VectorXd& probs, std::mt19937_64& rng) {
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<std::size_t>(i);
    }
    return static_cast<std::size_t>(probs.size() - 1);
  }

  static std::uint64_t fingerprint(const ModelParams& params) {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& [name, m] : params.tensors) {
      h = (h ^ fnv1a64(name)) * 1099511628211ull;
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        std::uint64_t word;
        std::memcpy(&word, m.data() + i, sizeof word);
        h = (h ^ word) * 1099511628211ull;
        h ^= h >> 29;
      }
    }
    return h;
  }

  const UnifiedGraph* graph_;
  const EmbeddingProvider* provider_;
  SelectorConfig cfg_;
  KeywordExtractor keywords_;
  Matrix node_features_;
  Matrix knowledge_features_;

  mutable std::mutex cache_mutex_;
  mutable std::optional<std::uint64_t> cache_key_;
  mutable Matrix cache_value_;
  mutable std::atomic<std::size_t> refresh_count_{0};
};

}  // namespace gate
