// Acceptance run: one PASS/FAIL line per criterion.
//
//   gate_acceptance [--expect-fail NAME]...
//
// Exit status is nonzero when a criterion fails that was not named with
// --expect-fail. Expected failures still print FAIL.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "gate/eval.hpp"
#include "gate/prompt.hpp"
#include "gate/rl_train.hpp"
#include "gate/selector.hpp"
#include "support.hpp"

using namespace gate;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// --- gradient oracle -------------------------------------------------------

Outcome gradient_oracle() {
  auto g = unify_triples(gate::testing::film_kb());
  HashedBowProvider provider(8);
  SelectorConfig scfg;
  scfg.t_max = 2;
  Selector sel(g, provider, scfg);
  TrainConfig cfg;
  cfg.dims = gate::testing::tiny_dims(8);
  cfg.rollouts = 2;
  auto params = init_params(cfg.dims, 5);
  auto corpus = gate::testing::film_dialogues();
  std::vector<const DialogueSample*> batch{&corpus[0], &corpus[1]};
  LossFn fn = [&](ad::Tape&, ParamBinding& b) {
    std::mt19937_64 rng(4);
    BatchLosses stats;
    return batch_objective(b, sel, batch, cfg, rng, stats);
  };
  GradCheckOptions opt;
  opt.fraction = 1.0;
  opt.epsilon = 1e-6;
  auto r = grad_check(fn, params, opt);
  return {g.process_nodes().size() <= 6 && r.max_relative_error <= 1e-4,
          std::to_string(g.process_nodes().size()) + " nodes, " + std::to_string(r.coordinates) +
              " coordinates, max rel err " + fmt("%.2e", r.max_relative_error) + " at " + r.worst};
}

// --- REINFORCE oracle ------------------------------------------------------

Outcome reinforce_oracle() {
  auto r = gate::testing::reinforce_check(100000, 2024);
  bool ok = r.max_relative_error <= 0.02;
  return {ok, "100000 rollouts, pi = (" + fmt("%.4f", r.probs[0]) + ", " + fmt("%.4f", r.probs[1]) + ", " +
                  fmt("%.4f", r.probs[2]) + "), R = (" + fmt("%.3f", r.rewards[0]) + ", " + fmt("%.3f", r.rewards[1]) +
                  ", " + fmt("%.3f", r.rewards[2]) + "), max rel err " + fmt("%.4f", r.max_relative_error) + " at " +
                  r.worst + ", max " + fmt("%.2f", r.max_sigmas) + " sigma"};
}

// --- reward law ------------------------------------------------------------

Outcome reward_law() {
  RewardConfig cfg;
  std::mt19937_64 rng(99);
  std::size_t bad = 0, absent = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::size_t n = 1 + rng() % 30;
    std::vector<std::string> pool;
    for (std::size_t i = 0; i < n; ++i) pool.push_back("k" + std::to_string(rng() % 60));
    std::vector<std::string> gold;
    for (std::size_t i = 0, m = 1 + rng() % 3; i < m; ++i) gold.push_back("k" + std::to_string(rng() % 60));
    double rg = reward_gold(pool, gold, cfg);
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < pool.size() && !best; ++i)
      if (std::find(gold.begin(), gold.end(), pool[i]) != gold.end()) best = i + 1;
    double expect = best ? std::max(1.0 - 0.2 * static_cast<double>(*best), -1.0) : -1.0;
    if (!best) ++absent;
    if (rg < -1.0 || rg > 1.0 || rg != expect) ++bad;
    if (reward_pool(rg, n) != rg / static_cast<double>(n)) ++bad;
  }
  return {bad == 0, "10000 pools (" + std::to_string(absent) + " without gold), " + std::to_string(bad) + " violations"};
}

// --- unification invariants ------------------------------------------------

std::size_t document_violations(const DocumentKB& kb, const UnifiedGraph& g) {
  std::size_t bad = validate(g).size();
  std::size_t titles = 0, sentences = 0;
  for (std::size_t t = 0; t < kb.topics.size(); ++t) {
    for (std::size_t a = 0; a < kb.topics[t].articles.size(); ++a) {
      ++titles;
      const auto& art = kb.topics[t].articles[a];
      auto owned = g.owned_knowledge(g.require_process(ids::title(t, a)));
      bad += owned.size() != art.sentences.size();
      for (std::size_t s = 0; s < art.sentences.size(); ++s, ++sentences) {
        auto k = g.knowledge_index(ids::sentence(t, a, s));
        bad += k == UnifiedGraph::npos || g.knowledge_nodes()[k].owner != ids::title(t, a) ||
               g.knowledge_nodes()[k].text != art.sentences[s];
      }
    }
    bad += !g.owned_knowledge(g.require_process(ids::topic(t))).empty();
  }
  bad += g.knowledge_nodes().size() != sentences;
  bad += g.process_nodes().size() != kb.topics.size() + titles;
  // two-layer forest: every edge is topic -> own title, every title has exactly one
  bad += g.edges().size() != titles;
  std::map<std::string, int> parents;
  for (const auto& e : g.edges()) {
    ++parents[e.to];
    bad += e.from.find(".a") != std::string::npos || e.to.rfind(e.from + ".a", 0) != 0;
  }
  for (const auto& [_, n] : parents) bad += n != 1;
  return bad;
}

std::size_t triple_violations(const TripleKB& kb, const UnifiedGraph& g) {
  std::size_t bad = validate(g).size();
  bad += g.knowledge_nodes().size() != kb.triples.size();
  std::set<std::string> entities;
  for (std::size_t i = 0; i < kb.triples.size(); ++i) {
    const auto& t = kb.triples[i];
    entities.insert(t.head);
    entities.insert(t.tail);
    auto k = g.knowledge_index(ids::triple(i));
    bad += k == UnifiedGraph::npos || g.knowledge_nodes()[k].owner != ids::entity(t.head);
  }
  bad += g.process_nodes().size() != entities.size();
  std::size_t owned = 0;
  for (std::size_t p = 0; p < g.process_nodes().size(); ++p) owned += g.owned_knowledge(p).size();
  bad += owned != kb.triples.size();
  return bad;
}

Outcome unification_invariants() {
  std::mt19937_64 rng(31);
  std::size_t bad = 0, kbs = 0, largest = 0;
  for (int trial = 0; trial < 25; ++trial) {
    DocumentKB kb;
    std::size_t budget = 1 + rng() % 1000;
    std::size_t t = 0;
    while (budget > 0) {
      Topic topic{"Topic " + std::to_string(t++), {}};
      for (std::size_t a = 0, na = 1 + rng() % 5; a < na && budget > 0; ++a) {
        Article art{"Title " + std::to_string(t) + "/" + std::to_string(a), {}};
        for (std::size_t s = 0, ns = std::min<std::size_t>(budget, 1 + rng() % 12); s < ns; ++s, --budget)
          art.sentences.push_back("sentence " + std::to_string(rng() % 100000));
        topic.articles.push_back(std::move(art));
      }
      kb.topics.push_back(std::move(topic));
    }
    largest = std::max(largest, kb.sentence_count());
    bad += document_violations(kb, unify_documents(kb));
    ++kbs;
  }
  for (int trial = 0; trial < 25; ++trial) {
    TripleKB kb;
    std::set<Triple> seen;
    std::size_t ents = 2 + rng() % 200, n = std::min<std::size_t>(1 + rng() % 1000, ents * ents * 7 / 2);
    while (kb.triples.size() < n) {
      Triple tr{"E" + std::to_string(rng() % ents), "r" + std::to_string(rng() % 7), "E" + std::to_string(rng() % ents)};
      if (seen.insert(tr).second) kb.triples.push_back(tr);
    }
    largest = std::max(largest, kb.triples.size());
    bad += triple_violations(kb, unify_triples(kb));
    ++kbs;
  }
  return {bad == 0, std::to_string(kbs) + " random KBs up to " + std::to_string(largest) + " items, " +
                        std::to_string(bad) + " violations"};
}

// --- adaptive pool ---------------------------------------------------------

Outcome adaptive_pool() {
  SelectorConfig cfg;
  std::mt19937_64 rng(5);
  std::size_t bad = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::size_t n = 1 + rng() % 12, cands = 1 + rng() % 80;
    // softmax of random logits: a valid node-score distribution
    Eigen::VectorXd logits(static_cast<Eigen::Index>(n));
    std::normal_distribution<double> z(0.0, 0.5 + static_cast<double>(rng() % 40) / 4);
    for (auto& v : logits) v = z(rng);
    Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
    p /= p.sum();
    auto size = adapt_pool(p, cands, cfg);
    bad += size < 1 || size > cands;
  }
  // fixed |K_t|, variance swept over its whole range
  for (std::size_t cands : {1u, 4u, 20u, 75u}) {
    std::size_t prev = cands + 1;
    for (int i = 0; i <= 250; ++i) {
      double var = 0.25 * i / 250.0;
      // two-point distribution (a, 1 - a) has population variance (a - 1/2)^2
      double a = 0.5 + std::sqrt(var);
      Eigen::Vector2d p(a, 1 - a);
      auto size = adapt_pool(p, cands, cfg);
      bad += size > prev;
      prev = size;
    }
  }
  bad += adapt_pool(Eigen::VectorXd::Constant(6, 1.0 / 6), 33, cfg) != 33;
  Eigen::VectorXd one_hot = Eigen::VectorXd::Zero(4);
  one_hot[0] = 1;
  auto hand = adapt_pool(one_hot, 4, cfg);
  bad += hand != 1;
  return {bad == 0, "2000 random bounds checks, monotone sweeps, Var=0 full pool, one-hot over 4 gives " +
                        std::to_string(hand) + "; " + std::to_string(bad) + " violations"};
}

// --- benchmark runs --------------------------------------------------------

struct Bench {
  gate::testing::Benchmark data = gate::testing::planted_benchmark();
  HashedBowProvider provider{kDefaultEmbeddingDim};
  Selector selector{data.graph, provider};
};

struct Trained {
  ModelParams params;
  double r_at_1 = 0;
  double seconds = 0;
};

Trained train_variant(Bench& b, LossToggles losses) {
  TrainConfig cfg;
  cfg.losses = losses;
  auto t0 = Clock::now();
  auto res = train(b.selector, b.data.train, cfg);
  Trained out;
  out.params = std::move(res.params);
  out.r_at_1 = top1_accuracy(b.selector, out.params, b.data.test);
  out.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

struct RandomStats {
  double r_at_1 = 0;
  double expected = 0;
  double sigma = 0;
  double mean_candidates = 0;
};

RandomStats random_stats(Bench& b) {
  auto r = baseline_random(b.selector, b.data.test, 1, {1});
  RandomStats s;
  s.r_at_1 = r.recall.at(1);
  s.mean_candidates = r.mean_candidates;
  double var = 0;
  for (const auto& d : b.data.test) {
    double p = 1.0 / static_cast<double>(baseline_candidates(b.selector, d).size());
    var += p * (1 - p);
  }
  auto n = static_cast<double>(b.data.test.size());
  s.expected = 1.0 / s.mean_candidates;
  s.sigma = std::sqrt(var) / n;
  return s;
}

// --- determinism -----------------------------------------------------------

Outcome determinism(Bench& b, const ModelParams& trained) {
  std::vector<std::string> problems;
  Selector again(b.data.graph, b.provider);
  for (const auto& s : b.data.test)
    if (!(b.selector.select(trained, s) == again.select(trained, s)) ||
        !(b.selector.select(trained, s) == b.selector.select(trained, s))) {
      problems.push_back("select differs on " + s.id);
      break;
    }

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.dims = gate::testing::tiny_dims(kDefaultEmbeddingDim);
  std::vector<DialogueSample> subset(b.data.train.begin(), b.data.train.begin() + 20);
  auto r1 = train(b.selector, subset, cfg), r2 = train(b.selector, subset, cfg);
  if (to_json(r1.params).dump() != to_json(r2.params).dump() || r1.report.to_jsonl() != r2.report.to_jsonl())
    problems.push_back("train differs");

  auto input = nlohmann::json::parse(slurp(std::string(GATE_GOLDEN_DIR) + "/prompt_input.json"));
  auto history = input.at("history").get<std::vector<std::string>>();
  auto pool = input.at("pool").get<std::vector<std::string>>();
  if (render_prompt(history, pool, PromptMode::with_knowledge) != slurp(std::string(GATE_GOLDEN_DIR) + "/with_knowledge.txt"))
    problems.push_back("with_knowledge prompt differs from golden");
  if (render_prompt(history, pool, PromptMode::internal_only) != slurp(std::string(GATE_GOLDEN_DIR) + "/internal_only.txt"))
    problems.push_back("internal_only prompt differs from golden");

  std::string detail = "greedy select x" + std::to_string(b.data.test.size()) + ", train twice, 2 golden prompts";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> expect_fail;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--expect-fail" && i + 1 < argc) {
      expect_fail.insert(argv[++i]);
    } else {
      std::cerr << "usage: gate_acceptance [--expect-fail NAME]...\n";
      return 2;
    }
  }

  int unexpected = 0;
  auto report = [&](const std::string& name, const Outcome& o, double seconds, double limit = 0) {
    bool pass = o.pass && (limit == 0 || seconds < limit);
    std::string timing = fmt("%.1f s", seconds) + (limit > 0 ? fmt(" (limit %.0f s)", limit) : "");
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << o.detail << "; " << timing;
    if (!pass && expect_fail.count(name)) std::cout << " [expected failure]";
    std::cout << std::endl;
    if (!pass && !expect_fail.count(name)) ++unexpected;
  };
  auto timed = [&](const std::string& name, const std::function<Outcome()>& fn, double limit = 0) {
    auto t0 = Clock::now();
    auto o = fn();
    report(name, o, std::chrono::duration<double>(Clock::now() - t0).count(), limit);
  };

  timed("gradient_oracle", gradient_oracle, 30);
  timed("reinforce_oracle", reinforce_oracle, 120);
  timed("reward_law", reward_law);
  timed("unification_invariants", unification_invariants);
  timed("adaptive_pool", adaptive_pool);

  Bench bench;
  auto t0 = Clock::now();
  auto full = train_variant(bench, {true, true, true});
  auto rnd = random_stats(bench);
  double learn_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  bool random_ok = std::abs(rnd.r_at_1 - rnd.expected) <= 3 * rnd.sigma;
  report("learning_benchmark",
         {full.r_at_1 >= 0.8 && full.r_at_1 >= 5 * rnd.r_at_1 && random_ok && bench.data.test.size() == 50 &&
              rnd.mean_candidates >= 20,
          "held-out R@1 " + fmt("%.2f", full.r_at_1) + " (need >= 0.80 and >= 5x Random " + fmt("%.2f", rnd.r_at_1) +
              "); Random " + fmt("%.3f", rnd.r_at_1) + " vs 1/mean|K_t| " + fmt("%.3f", rnd.expected) + " +- 3 x " +
              fmt("%.3f", rnd.sigma) + "; mean |K_t| " + fmt("%.1f", rnd.mean_candidates)},
         learn_seconds, 600);

  auto sem = baseline_semantic(bench.selector, bench.data.test, bench.provider, {1});
  double sem1 = sem.recall.at(1);
  report("baseline_ordering",
         {rnd.r_at_1 < sem1 && sem1 < full.r_at_1,
          "Random " + fmt("%.2f", rnd.r_at_1) + " < Semantic " + fmt("%.2f", sem1) + " < selector " + fmt("%.2f", full.r_at_1)},
         0);

  t0 = Clock::now();
  auto no_walk = train_variant(bench, {false, true, true});
  auto no_node = train_variant(bench, {true, false, true});
  auto no_know = train_variant(bench, {true, true, false});
  bool changed = no_walk.r_at_1 != full.r_at_1 && no_node.r_at_1 != full.r_at_1 && no_know.r_at_1 != full.r_at_1;
  bool collapsed = no_know.r_at_1 < 3 * rnd.r_at_1;
  report("ablation_sensitivity",
         {changed && collapsed, "R@1 full " + fmt("%.2f", full.r_at_1) + ", w/o L_Walk " + fmt("%.2f", no_walk.r_at_1) +
                                    ", w/o L_Node " + fmt("%.2f", no_node.r_at_1) + ", w/o L_Knowledge " +
                                    fmt("%.2f", no_know.r_at_1) + " (collapse needs < " + fmt("%.2f", 3 * rnd.r_at_1) + ")"},
         std::chrono::duration<double>(Clock::now() - t0).count());

  timed("determinism", [&] { return determinism(bench, full.params); });

  if (unexpected) std::cout << unexpected << " unexpected failure(s)" << std::endl;
  return unexpected ? 1 : 0;
}
