#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gate/error.hpp"
#include "gate/graph.hpp"
#include "gate/kb_ingest.hpp"
#include "gate/neural.hpp"
#include "gate/selector.hpp"
#include "gate/text_encode.hpp"

namespace gate {

using Recall = std::map<std::size_t, double>;

// A full ranking for one sample, keyed by the sample's id.
struct RankedResult {
  std::string sample_id;
  std::vector<std::string> ranking;
  std::size_t pool_size = 0;
};

inline RankedResult ranked_result(const std::string& sample_id, const SelectionResult& r) {
  RankedResult out{sample_id, {}, r.pool_size};
  for (const auto& k : r.ranked) out.ranking.push_back(k.id);
  return out;
}

// Best 1-indexed rank of any gold id, if present.
inline std::optional<std::size_t> gold_rank(const std::vector<std::string>& ranking,
                                            const std::vector<std::string>& gold) {
  for (std::size_t i = 0; i < ranking.size(); ++i)
    if (std::find(gold.begin(), gold.end(), ranking[i]) != gold.end()) return i + 1;
  return std::nullopt;
}

inline Recall recall_at_k(const std::vector<RankedResult>& results, const std::vector<DialogueSample>& samples,
                          const std::vector<std::size_t>& ks) {
  if (results.size() != samples.size())
    throw ValidationError("recall_at_k: " + std::to_string(results.size()) + " results for " +
                          std::to_string(samples.size()) + " samples");
  Recall out;
  for (auto k : ks) {
    if (k < 1) throw ConfigError("recall cut-off must be >= 1");
    out[k] = 0.0;
  }
  if (results.empty()) return out;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].sample_id != samples[i].id)
      throw ValidationError("recall_at_k: result \"" + results[i].sample_id + "\" does not match sample \"" +
                            samples[i].id + "\"");
    auto rank = gold_rank(results[i].ranking, samples[i].gold_knowledge);
    if (!rank) continue;
    for (auto k : ks)
      if (*rank <= k) out[k] += 1.0;
  }
  for (auto& [k, v] : out) v /= static_cast<double>(results.size());
  return out;
}

// Candidate scope for the baselines: K_t at the gold knowledge's owner, i.e.
// what a walk halting on the right node would see.
inline std::vector<std::size_t> baseline_candidates(const Selector& selector, const DialogueSample& sample) {
  const UnifiedGraph& g = selector.graph();
  if (sample.gold_knowledge.empty()) throw ValidationError("sample \"" + sample.id + "\" has no gold knowledge");
  auto k = g.knowledge_index(sample.gold_knowledge.front());
  if (k == UnifiedGraph::npos)
    throw ValidationError("sample \"" + sample.id + "\": unknown gold knowledge \"" + sample.gold_knowledge.front() +
                          "\"");
  auto owner = g.owner_index(k);
  if (owner == UnifiedGraph::npos) throw ValidationError("gold knowledge \"" + sample.gold_knowledge.front() + "\" has no owner");
  std::vector<std::size_t> out;
  for (auto n : selector.action_space(owner))
    for (auto kk : g.owned_knowledge(n)) out.push_back(kk);
  return out;
}

struct BaselineResult {
  std::vector<RankedResult> results;
  Recall recall;
  double mean_candidates = 0;
};

inline BaselineResult baseline_random(const Selector& selector, const std::vector<DialogueSample>& samples,
                                      std::uint64_t seed, const std::vector<std::size_t>& ks) {
  std::mt19937_64 rng(seed);
  BaselineResult out;
  for (const auto& s : samples) {
    auto cands = baseline_candidates(selector, s);
    std::shuffle(cands.begin(), cands.end(), rng);
    RankedResult r{s.id, {}, cands.size()};
    for (auto k : cands) r.ranking.push_back(selector.graph().knowledge_nodes()[k].id);
    out.mean_candidates += static_cast<double>(cands.size());
    out.results.push_back(std::move(r));
  }
  if (!samples.empty()) out.mean_candidates /= static_cast<double>(samples.size());
  out.recall = recall_at_k(out.results, samples, ks);
  return out;
}

// Dot product between the mean dialogue embedding and each candidate.
inline BaselineResult baseline_semantic(const Selector& selector, const std::vector<DialogueSample>& samples,
                                        const EmbeddingProvider& provider, const std::vector<std::size_t>& ks) {
  const UnifiedGraph& g = selector.graph();
  BaselineResult out;
  for (const auto& s : samples) {
    Embedding q = provider.embed_text(s.utterance);
    for (const auto& h : s.history) q += provider.embed_text(h);
    q /= static_cast<double>(s.history.size() + 1);
    auto cands = baseline_candidates(selector, s);
    Eigen::VectorXd scores(static_cast<Eigen::Index>(cands.size()));
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto& k = g.knowledge_nodes()[cands[i]];
      scores[static_cast<Eigen::Index>(i)] = q.dot(provider.embed_item(k.id, k.text));
    }
    RankedResult r{s.id, {}, cands.size()};
    for (auto pos : rank_candidates(scores, cands, g)) r.ranking.push_back(g.knowledge_nodes()[cands[pos]].id);
    out.mean_candidates += static_cast<double>(cands.size());
    out.results.push_back(std::move(r));
  }
  if (!samples.empty()) out.mean_candidates /= static_cast<double>(samples.size());
  out.recall = recall_at_k(out.results, samples, ks);
  return out;
}

inline std::vector<RankedResult> selector_results(const Selector& selector, const ModelParams& params,
                                                  const std::vector<DialogueSample>& samples) {
  std::vector<RankedResult> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(ranked_result(s.id, selector.select(params, s)));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MethodReport {
  std::vector<Recall> per_seed;
  Recall mean;
  Recall std;  // sample standard deviation
  double mean_pool_size = 0;
  bool operator==(const MethodReport&) const = default;
};

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> ks;
  std::map<std::string, MethodReport> methods;
  double mean_candidates = 0;
  bool operator==(const EvalReport&) const = default;
};

inline void aggregate(MethodReport& m) {
  m.mean.clear();
  m.std.clear();
  if (m.per_seed.empty()) return;
  const auto n = static_cast<double>(m.per_seed.size());
  for (const auto& [k, _] : m.per_seed.front()) {
    double sum = 0;
    for (const auto& r : m.per_seed) sum += r.at(k);
    double mean = sum / n;
    double ss = 0;
    for (const auto& r : m.per_seed) ss += (r.at(k) - mean) * (r.at(k) - mean);
    m.mean[k] = mean;
    m.std[k] = m.per_seed.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  }
}

inline std::string recall_key(std::size_t k) { return "R@" + std::to_string(k); }

inline nlohmann::json to_json(const Recall& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : r) j[recall_key(k)] = v;
  return j;
}

inline Recall recall_from_json(const nlohmann::json& j) {
  Recall r;
  for (const auto& [key, v] : j.items()) {
    if (key.rfind("R@", 0) != 0) throw ValidationError("bad recall key \"" + key + "\"");
    r[std::stoul(key.substr(2))] = v.get<double>();
  }
  return r;
}

inline nlohmann::json to_json(const EvalReport& rep) {
  nlohmann::json methods = nlohmann::json::object();
  for (const auto& [name, m] : rep.methods) {
    nlohmann::json per_seed = nlohmann::json::array();
    for (const auto& r : m.per_seed) per_seed.push_back(to_json(r));
    methods[name] = {{"per_seed", per_seed},
                     {"mean", to_json(m.mean)},
                     {"std", to_json(m.std)},
                     {"mean_pool_size", m.mean_pool_size}};
  }
  return {{"seeds", rep.seeds}, {"ks", rep.ks}, {"mean_candidates", rep.mean_candidates}, {"methods", methods}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport rep;
  try {
    rep.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    rep.ks = j.at("ks").get<std::vector<std::size_t>>();
    rep.mean_candidates = j.at("mean_candidates").get<double>();
    for (const auto& [name, m] : j.at("methods").items()) {
      MethodReport mr;
      for (const auto& r : m.at("per_seed")) mr.per_seed.push_back(recall_from_json(r));
      mr.mean = recall_from_json(m.at("mean"));
      mr.std = recall_from_json(m.at("std"));
      mr.mean_pool_size = m.at("mean_pool_size").get<double>();
      rep.methods[name] = std::move(mr);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("eval report: ") + e.what());
  }
  return rep;
}

struct RankRow {
  std::string sample_id;
  std::string method;
  std::uint64_t seed;
  std::optional<std::size_t> rank;
  std::size_t candidates;
};

struct EvalRun {
  EvalReport report;
  std::vector<RankRow> ranks;
};

inline EvalRun run_eval(const Selector& selector, const std::vector<DialogueSample>& corpus, const ModelParams& params,
                        const std::vector<std::uint64_t>& seeds, const std::vector<std::size_t>& ks = {1, 5, 10}) {
  if (seeds.empty()) throw ConfigError("run_eval needs at least one seed");
  EvalRun run;
  run.report.seeds = seeds;
  run.report.ks = ks;
  auto& methods = run.report.methods;
  auto record = [&](const std::string& method, std::uint64_t seed, const std::vector<RankedResult>& results) {
    double pool = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      run.ranks.push_back({results[i].sample_id, method, seed, gold_rank(results[i].ranking, corpus[i].gold_knowledge),
                           results[i].ranking.size()});
      pool += static_cast<double>(results[i].pool_size);
    }
    methods[method].per_seed.push_back(recall_at_k(results, corpus, ks));
    methods[method].mean_pool_size += results.empty() ? 0.0 : pool / static_cast<double>(results.size());
  };
  // Greedy selection and Semantic do not depend on the seed; they are
  // re-run per seed so every method reports the same number of observations.
  auto greedy = selector_results(selector, params, corpus);
  auto semantic = baseline_semantic(selector, corpus, selector.provider(), ks);
  for (auto seed : seeds) {
    record("selector", seed, greedy);
    record("semantic", seed, semantic.results);
    auto random = baseline_random(selector, corpus, seed, ks);
    record("random", seed, random.results);
    run.report.mean_candidates = random.mean_candidates;
  }
  for (auto& [_, m] : methods) {
    m.mean_pool_size /= static_cast<double>(seeds.size());
    aggregate(m);
  }
  return run;
}

inline std::string ranks_csv(const std::vector<RankRow>& rows) {
  std::ostringstream out;
  out << "sample_id,method,seed,gold_rank,candidates\n";
  for (const auto& r : rows) {
    out << r.sample_id << ',' << r.method << ',' << r.seed << ',';
    if (r.rank) out << *r.rank;
    out << ',' << r.candidates << '\n';
  }
  return out.str();
}

}  // namespace gate
