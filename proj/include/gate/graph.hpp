#pragma once

// The unified knowledge graph: process nodes are traversed by the agent,
// knowledge nodes hold the selectable text and hang off exactly one owner.

#include <algorithm>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gate/error.hpp"
#include "gate/ids.hpp"
#include "gate/kb_ingest.hpp"

namespace gate {

enum class NodeKind { topic, title, entity };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::topic: return "topic";
    case NodeKind::title: return "title";
    case NodeKind::entity: return "entity";
  }
  return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  if (s == "topic") return NodeKind::topic;
  if (s == "title") return NodeKind::title;
  if (s == "entity") return NodeKind::entity;
  throw ValidationError("unknown process node kind \"" + s + "\"");
}

struct ProcessNode {
  std::string id;
  std::string label;
  NodeKind kind;
  bool operator==(const ProcessNode&) const = default;
};

struct KnowledgeNode {
  std::string id;
  std::string text;
  std::string owner;
  bool operator==(const KnowledgeNode&) const = default;
};

// `label` keeps edge provenance: the relation for triple graphs, empty for
// containment edges.
struct ProcessEdge {
  std::string from;
  std::string to;
  std::string label;
  bool operator==(const ProcessEdge&) const = default;
};

class UnifiedGraph {
 public:
  static constexpr int kCacheVersion = 1;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  UnifiedGraph() = default;

  // Builds indexes without checking invariants; call validate() for that.
  UnifiedGraph(KbKind kind, std::vector<ProcessNode> process, std::vector<KnowledgeNode> knowledge,
               std::vector<ProcessEdge> edges)
      : kind_(kind), process_(std::move(process)), knowledge_(std::move(knowledge)), edges_(std::move(edges)) {
    index();
  }

  KbKind kind() const noexcept { return kind_; }
  const std::vector<ProcessNode>& process_nodes() const noexcept { return process_; }
  const std::vector<KnowledgeNode>& knowledge_nodes() const noexcept { return knowledge_; }
  const std::vector<ProcessEdge>& edges() const noexcept { return edges_; }
  bool empty() const noexcept { return process_.empty(); }

  std::size_t process_index(const std::string& id) const {
    auto it = process_by_id_.find(id);
    return it == process_by_id_.end() ? npos : it->second;
  }
  std::size_t knowledge_index(const std::string& id) const {
    auto it = knowledge_by_id_.find(id);
    return it == knowledge_by_id_.end() ? npos : it->second;
  }
  bool has_process(const std::string& id) const { return process_index(id) != npos; }

  std::size_t require_process(const std::string& id) const {
    auto i = process_index(id);
    if (i == npos) throw ValidationError("unknown process node \"" + id + "\"");
    return i;
  }

  // One-hop neighbors, id-sorted, edges followed in both directions.
  std::vector<std::string> neighbors(const std::string& node) const {
    std::vector<std::string> out;
    for (auto j : neighbor_indices(require_process(node))) out.push_back(process_[j].id);
    return out;
  }
  const std::vector<std::size_t>& neighbor_indices(std::size_t node) const { return adjacency_.at(node); }

  // Knowledge-node indices owned by a process node, in id order.
  const std::vector<std::size_t>& owned_knowledge(std::size_t node) const { return owned_.at(node); }

  std::size_t owner_index(std::size_t knowledge) const { return owner_of_.at(knowledge); }

 private:
  void index() {
    process_by_id_.clear();
    knowledge_by_id_.clear();
    for (std::size_t i = 0; i < process_.size(); ++i) process_by_id_.emplace(process_[i].id, i);
    for (std::size_t i = 0; i < knowledge_.size(); ++i) knowledge_by_id_.emplace(knowledge_[i].id, i);

    auto by_id = [this](std::size_t a, std::size_t b) { return process_[a].id < process_[b].id; };
    std::vector<std::set<std::size_t>> adj(process_.size());
    for (const auto& e : edges_) {
      auto a = process_index(e.from), b = process_index(e.to);
      if (a == npos || b == npos) continue;
      adj[a].insert(b);
      adj[b].insert(a);
    }
    adjacency_.assign(process_.size(), {});
    for (std::size_t i = 0; i < process_.size(); ++i) {
      adjacency_[i].assign(adj[i].begin(), adj[i].end());
      std::sort(adjacency_[i].begin(), adjacency_[i].end(), by_id);
    }

    owned_.assign(process_.size(), {});
    owner_of_.assign(knowledge_.size(), npos);
    for (std::size_t k = 0; k < knowledge_.size(); ++k) {
      auto o = process_index(knowledge_[k].owner);
      owner_of_[k] = o;
      if (o != npos) owned_[o].push_back(k);
    }
    for (auto& list : owned_)
      std::sort(list.begin(), list.end(),
                [this](std::size_t a, std::size_t b) { return knowledge_[a].id < knowledge_[b].id; });
  }

  KbKind kind_ = KbKind::document;
  std::vector<ProcessNode> process_;
  std::vector<KnowledgeNode> knowledge_;
  std::vector<ProcessEdge> edges_;
  std::unordered_map<std::string, std::size_t> process_by_id_;
  std::unordered_map<std::string, std::size_t> knowledge_by_id_;
  std::vector<std::vector<std::size_t>> adjacency_;
  std::vector<std::vector<std::size_t>> owned_;
  std::vector<std::size_t> owner_of_;
};

inline UnifiedGraph unify_documents(const DocumentKB& kb) {
  if (kb.topics.empty()) throw ValidationError("cannot unify an empty document KB");
  std::vector<ProcessNode> process;
  std::vector<KnowledgeNode> knowledge;
  std::vector<ProcessEdge> edges;
  for (std::size_t t = 0; t < kb.topics.size(); ++t) {
    const auto& topic = kb.topics[t];
    process.push_back({ids::topic(t), topic.label, NodeKind::topic});
    for (std::size_t a = 0; a < topic.articles.size(); ++a) {
      const auto& art = topic.articles[a];
      process.push_back({ids::title(t, a), art.title, NodeKind::title});
      edges.push_back({ids::topic(t), ids::title(t, a), ""});
      for (std::size_t s = 0; s < art.sentences.size(); ++s)
        knowledge.push_back({ids::sentence(t, a, s), art.sentences[s], ids::title(t, a)});
    }
  }
  return {KbKind::document, std::move(process), std::move(knowledge), std::move(edges)};
}

inline UnifiedGraph unify_triples(const TripleKB& kb) {
  if (kb.triples.empty()) throw ValidationError("cannot unify an empty triple KB");
  std::vector<ProcessNode> process;
  std::vector<KnowledgeNode> knowledge;
  std::vector<ProcessEdge> edges;
  std::set<std::string> entities;
  auto add_entity = [&](const std::string& label) {
    if (entities.insert(label).second) process.push_back({ids::entity(label), label, NodeKind::entity});
  };
  for (std::size_t i = 0; i < kb.triples.size(); ++i) {
    const auto& t = kb.triples[i];
    add_entity(t.head);
    add_entity(t.tail);
    knowledge.push_back({ids::triple(i), t.head + " " + t.relation + " " + t.tail, ids::entity(t.head)});
    edges.push_back({ids::entity(t.head), ids::entity(t.tail), t.relation});
  }
  return {KbKind::triple, std::move(process), std::move(knowledge), std::move(edges)};
}

// Every violated invariant as a human-readable line; empty iff the graph is valid.
inline std::vector<std::string> validate(const UnifiedGraph& g) {
  std::vector<std::string> report;
  std::set<std::string> seen;
  for (const auto& p : g.process_nodes()) {
    if (!seen.insert(p.id).second) report.push_back("duplicate node id \"" + p.id + "\"");
    bool kind_ok = g.kind() == KbKind::document ? p.kind != NodeKind::entity : p.kind == NodeKind::entity;
    if (!kind_ok) report.push_back("process node \"" + p.id + "\" has kind " + to_string(p.kind) + " foreign to this graph");
  }
  for (const auto& k : g.knowledge_nodes()) {
    if (!seen.insert(k.id).second) report.push_back("duplicate node id \"" + k.id + "\"");
    if (!g.has_process(k.owner))
      report.push_back("knowledge node \"" + k.id + "\" has dangling owner \"" + k.owner + "\"");
  }

  std::map<std::string, std::size_t> parents;
  for (const auto& e : g.edges()) {
    auto a = g.process_index(e.from), b = g.process_index(e.to);
    if (a == UnifiedGraph::npos || b == UnifiedGraph::npos) {
      report.push_back("edge " + e.from + " -> " + e.to + " references a missing node");
      continue;
    }
    if (g.kind() == KbKind::document) {
      auto ka = g.process_nodes()[a].kind, kb = g.process_nodes()[b].kind;
      if (ka != NodeKind::topic || kb != NodeKind::title)
        report.push_back("layering violation: edge " + e.from + " (" + to_string(ka) + ") -> " + e.to + " (" +
                         to_string(kb) + ") is not topic -> title");
      else if (++parents[e.to] > 1)
        report.push_back("title \"" + e.to + "\" has more than one parent topic");
    }
  }
  if (g.kind() == KbKind::document) {
    for (const auto& k : g.knowledge_nodes()) {
      auto o = g.process_index(k.owner);
      if (o != UnifiedGraph::npos && g.process_nodes()[o].kind != NodeKind::title)
        report.push_back("knowledge node \"" + k.id + "\" is not owned by a title node");
    }
  } else if (g.edges().size() != g.knowledge_nodes().size()) {
    report.push_back("triple graph has " + std::to_string(g.edges().size()) + " edges but " +
                     std::to_string(g.knowledge_nodes().size()) + " knowledge nodes");
  }
  return report;
}

// ---------------------------------------------------------------------------
// Graph cache file

inline nlohmann::json to_json(const UnifiedGraph& g) {
  nlohmann::json pn = nlohmann::json::array(), kn = nlohmann::json::array(), ed = nlohmann::json::array();
  for (const auto& p : g.process_nodes()) pn.push_back({{"id", p.id}, {"label", p.label}, {"kind", to_string(p.kind)}});
  for (const auto& k : g.knowledge_nodes()) kn.push_back({{"id", k.id}, {"text", k.text}, {"owner", k.owner}});
  for (const auto& e : g.edges()) ed.push_back({{"from", e.from}, {"to", e.to}, {"label", e.label}});
  return {{"version", UnifiedGraph::kCacheVersion},
          {"kind", g.kind() == KbKind::document ? "document" : "triple"},
          {"process_nodes", std::move(pn)},
          {"knowledge_nodes", std::move(kn)},
          {"edges", std::move(ed)}};
}

inline UnifiedGraph graph_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != UnifiedGraph::kCacheVersion)
      throw ValidationError("unsupported graph cache version " + j.at("version").dump());
    auto kind_s = j.at("kind").get<std::string>();
    if (kind_s != "document" && kind_s != "triple") throw ValidationError("unknown graph kind \"" + kind_s + "\"");
    std::vector<ProcessNode> process;
    std::vector<KnowledgeNode> knowledge;
    std::vector<ProcessEdge> edges;
    for (const auto& p : j.at("process_nodes"))
      process.push_back({p.at("id").get<std::string>(), p.at("label").get<std::string>(),
                         node_kind_from_string(p.at("kind").get<std::string>())});
    for (const auto& k : j.at("knowledge_nodes"))
      knowledge.push_back(
          {k.at("id").get<std::string>(), k.at("text").get<std::string>(), k.at("owner").get<std::string>()});
    for (const auto& e : j.at("edges"))
      edges.push_back({e.at("from").get<std::string>(), e.at("to").get<std::string>(), e.value("label", "")});
    return {kind_s == "document" ? KbKind::document : KbKind::triple, std::move(process), std::move(knowledge),
            std::move(edges)};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed graph cache: ") + e.what());
  }
}

inline UnifiedGraph unify(const std::variant<DocumentKB, TripleKB>& kb) {
  if (const auto* doc = std::get_if<DocumentKB>(&kb)) return unify_documents(*doc);
  return unify_triples(std::get<TripleKB>(kb));
}

}  // namespace gate
