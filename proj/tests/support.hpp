#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gate/eval.hpp"
#include "gate/graph.hpp"
#include "gate/kb_ingest.hpp"
#include "gate/neural.hpp"
#include "gate/rl_train.hpp"
#include "gate/selector.hpp"
#include "gate/text_encode.hpp"

namespace gate::testing {

// Fixed vectors per text; unknown texts embed to zero.
class MapProvider final : public EmbeddingProvider {
 public:
  MapProvider(std::size_t dim, std::map<std::string, std::vector<double>> table) : dim_(dim) {
    for (auto& [k, v] : table) table_[k] = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  std::size_t dimension() const override { return dim_; }
  Embedding embed_text(std::string_view text) const override {
    auto it = table_.find(std::string(text));
    return it == table_.end() ? Embedding::Zero(static_cast<Eigen::Index>(dim_)) : it->second;
  }

 private:
  std::size_t dim_;
  std::map<std::string, Embedding> table_;
};

inline Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

inline Matrix column(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Topic t0 with titles a0 (two sentences) and a1 (one sentence).
inline DocumentKB small_document_kb() {
  DocumentKB kb;
  kb.topics.push_back({"Animals", {{"Dogs", {"dogs bark loudly", "dogs chase cats"}}, {"Cats", {"cats purr softly"}}}});
  return kb;
}

// Knowledge around one film, with the writer's triple as the expected pick.
inline TripleKB film_kb() {
  TripleKB kb;
  kb.triples = {{"Mark Boal", "wrote", "Zero Dark Thirty"},
                {"Zero Dark Thirty", "directed_by", "Kathryn Bigelow"},
                {"Zero Dark Thirty", "starring", "Jessica Chastain"},
                {"Kathryn Bigelow", "directed", "The Hurt Locker"},
                {"Mark Boal", "wrote", "The Hurt Locker"},
                {"Jessica Chastain", "starred_in", "Interstellar"}};
  return kb;
}

inline std::vector<DialogueSample> film_dialogues() {
  const std::vector<std::string> path{ids::entity("Zero Dark Thirty"), ids::entity("Mark Boal")};
  std::vector<DialogueSample> out;
  const std::vector<std::string> asks{"who wrote Zero Dark Thirty", "I wonder who wrote Zero Dark Thirty",
                                      "Zero Dark Thirty was great, who wrote it", "who was the writer who wrote Zero Dark Thirty"};
  for (std::size_t i = 0; i < asks.size(); ++i) {
    DialogueSample s;
    s.id = "film" + std::to_string(i);
    s.history = {"I watched a film about a manhunt last night"};
    s.utterance = asks[i];
    s.gold_knowledge = {ids::triple(0)};
    s.gold_path = path;
    s.start_node = ids::entity("Zero Dark Thirty");
    out.push_back(std::move(s));
  }
  return out;
}

inline Dims tiny_dims(std::size_t d_in) {
  Dims d;
  d.d_in = d_in;
  d.d_state = d_in;
  d.d_hidden = 4;
  d.heads = 2;
  d.d_attn = 4;
  d.score_hidden = 4;
  d.node_attn_hidden = 3;
  return d;
}

// The planted benchmark: 150 dialogues, first 100 train, last 50 held out.
struct Benchmark {
  SyntheticCorpus corpus;
  UnifiedGraph graph;
  std::vector<DialogueSample> train;
  std::vector<DialogueSample> test;
};

inline Benchmark planted_benchmark() {
  SynthConfig sc;
  sc.n_dialogues = 150;
  Benchmark b;
  b.corpus = gen_synthetic(sc);
  b.graph = unify(b.corpus.kb);
  b.train.assign(b.corpus.dialogues.begin(), b.corpus.dialogues.begin() + 100);
  b.test.assign(b.corpus.dialogues.begin() + 100, b.corpus.dialogues.end());
  return b;
}

// REINFORCE on the 3-node star t0 -> {a0, a1} with one step from t0. The
// library estimate averages the walk-loss gradient over seeded rollouts; the
// exact value enumerates the three trajectories: -sum_a pi_a R_a grad log pi_a.
struct ReinforceCheck {
  Gradients exact;
  Gradients estimate;
  std::vector<double> probs;    // per action in action-space order
  std::vector<double> rewards;  // per action
  double max_relative_error = 0;  // |est - exact| / max(|exact|, 0.1 max|exact|)
  double max_sigmas = 0;          // |est - exact| / analytic standard error
  std::string worst;
};

inline ReinforceCheck reinforce_check(std::size_t rollouts, std::uint64_t seed, std::size_t chunk = 500) {
  auto graph = unify_documents(small_document_kb());
  HashedBowProvider provider(8);
  SelectorConfig scfg;
  scfg.t_max = 1;
  Selector sel(graph, provider, scfg);
  TrainConfig cfg;
  cfg.dims = tiny_dims(8);
  cfg.losses = {true, false, false};
  ModelParams params = init_params(cfg.dims, 3);
  DialogueSample s;
  s.id = "star";
  s.history = {"we were talking about pets"};
  s.utterance = "do dogs bark loudly";
  s.gold_knowledge = {ids::sentence(0, 0, 0)};
  s.start_node = ids::topic(0);

  const std::size_t start = graph.process_index(ids::topic(0));
  const auto adj = sel.action_space(start);
  const auto center = static_cast<std::size_t>(std::find(adj.begin(), adj.end(), start) - adj.begin());
  auto log_prob_of = [&](std::size_t a) -> LossFn {
    return [&, a](ad::Tape&, ParamBinding& b) {
      Var genc = sel.refresh(b, cfg.dims);
      auto ctx = encode_context(b, provider, sel.keywords(), s.history, s.utterance, scfg.keywords, cfg.dims.heads);
      std::vector<Var> encs;
      for (auto n : adj) encs.push_back(ad::col(genc, static_cast<Eigen::Index>(n)));
      return ad::element(score_subgraph(b, ctx.vector, encs, center, cfg.dims.heads).log_probs, static_cast<Eigen::Index>(a));
    };
  };

  ReinforceCheck out;
  // Trajectory rewards are fixed per action; read them off sampled rollouts.
  std::vector<std::optional<double>> reward(adj.size());
  std::mt19937_64 probe(seed + 1);
  for (std::size_t i = 0; i < 10000; ++i) {
    auto t = rollout(sel, params, s, probe, cfg.rewards);
    auto a = static_cast<std::size_t>(std::find(adj.begin(), adj.end(), graph.process_index(t.steps.at(0).chosen)) - adj.begin());
    if (reward[a] && *reward[a] != t.rewards.total) throw Error("trajectory reward is not a function of the action");
    reward[a] = t.rewards.total;
    if (std::all_of(reward.begin(), reward.end(), [](const auto& r) { return r.has_value(); })) break;
  }
  std::vector<Gradients> grad_logp;
  out.exact = params.zeros_like();
  for (std::size_t a = 0; a < adj.size(); ++a) {
    if (!reward[a]) throw Error("an action was never sampled");
    double pi = std::exp(evaluate_loss(log_prob_of(a), params));
    out.probs.push_back(pi);
    out.rewards.push_back(*reward[a]);
    grad_logp.push_back(analytic_gradients(log_prob_of(a), params));
    for (auto& [name, m] : out.exact.tensors) m -= pi * *reward[a] * grad_logp.back().at(name);
  }

  out.estimate = params.zeros_like();
  std::mt19937_64 rng(seed);
  std::size_t done = 0;
  while (done < rollouts) {
    TrainConfig c = cfg;
    c.rollouts = std::min(chunk, rollouts - done);
    ad::Tape tape;
    ParamBinding bind(tape, params);
    BatchLosses stats;
    Var loss = batch_objective(bind, sel, {&s}, c, rng, stats);
    tape.backward(loss);
    auto g = bind.gradients();
    for (auto& [name, m] : out.estimate.tensors) m += static_cast<double>(c.rollouts) * g.at(name);
    done += c.rollouts;
  }
  for (auto& [_, m] : out.estimate.tensors) m /= static_cast<double>(rollouts);

  double scale = 0;
  for (const auto& [_, m] : out.exact.tensors) scale = std::max(scale, m.cwiseAbs().maxCoeff());
  for (const auto& [name, m] : out.exact.tensors) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      double ex = m.data()[i], est = out.estimate.at(name).data()[i];
      double diff = std::abs(est - ex);
      double rel = diff / std::max(std::abs(ex), 0.1 * scale);
      // Single-rollout term is -R_a g_a with probability pi_a.
      double second = 0;
      for (std::size_t a = 0; a < adj.size(); ++a) {
        double term = out.rewards[a] * grad_logp[a].at(name).data()[i];
        second += out.probs[a] * term * term;
      }
      double sd = std::sqrt(std::max(second - ex * ex, 0.0) / static_cast<double>(rollouts));
      double sig = diff <= 1e-12 ? 0.0 : diff / std::max(sd, 1e-300);
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
      out.max_sigmas = std::max(out.max_sigmas, sig);
    }
  }
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gate_test_" + name + "_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace gate::testing
