#include <gtest/gtest.h>

#include <map>
#include <set>

#include "gate/graph.hpp"
#include "support.hpp"

using namespace gate;

TEST(UnifyDocuments, OneTitleTwoSentences) {
  DocumentKB kb;
  kb.topics.push_back({"Veterinary physician",
                       {{"Veterinary physician",
                         {"A veterinary physician, colloquially called a vet, is a professional who practices "
                          "veterinary medicine by treating diseases, disorders, and injuries in animals.",
                          "Veterinarians diagnose and provide treatment of illness or surgery for animals."}}}});
  auto g = unify_documents(kb);
  EXPECT_EQ(g.process_nodes().size(), 2u);
  ASSERT_EQ(g.knowledge_nodes().size(), 2u);
  EXPECT_EQ(g.edges().size(), 1u);
  for (const auto& k : g.knowledge_nodes()) EXPECT_EQ(k.owner, ids::title(0, 0));
  EXPECT_EQ(g.knowledge_nodes()[1].text, kb.topics[0].articles[0].sentences[1]);
  EXPECT_TRUE(validate(g).empty());
}

TEST(UnifyDocuments, ForestCountsMatchEnumeration) {
  SynthConfig cfg;
  cfg.n_topics = 3;
  cfg.n_titles_per_topic = 2;
  cfg.n_sentences_per_title = 2;
  cfg.n_dialogues = 4;
  auto kb = std::get<DocumentKB>(gen_synthetic(cfg).kb);
  auto g = unify_documents(kb);
  EXPECT_EQ(g.process_nodes().size(), 9u);
  EXPECT_EQ(g.knowledge_nodes().size(), 12u);
  EXPECT_EQ(g.edges().size(), 6u);
  // forest: every title has exactly one parent, no cycles among 9 nodes with 6 edges and 3 roots
  std::map<std::string, int> parents;
  for (const auto& e : g.edges()) ++parents[e.to];
  for (const auto& [_, n] : parents) EXPECT_EQ(n, 1);
  EXPECT_TRUE(validate(g).empty());
}

TEST(UnifyTriples, SingleTriple) {
  TripleKB kb{{{"Paper Towns", "written_by", "John Green"}}};
  auto g = unify_triples(kb);
  ASSERT_EQ(g.process_nodes().size(), 2u);
  ASSERT_EQ(g.knowledge_nodes().size(), 1u);
  EXPECT_EQ(g.knowledge_nodes()[0].text, "Paper Towns written_by John Green");
  EXPECT_EQ(g.knowledge_nodes()[0].owner, ids::entity("Paper Towns"));
  EXPECT_EQ(g.edges().size(), 1u);
}

TEST(UnifyTriples, SelfLoop) {
  auto g = unify_triples(TripleKB{{{"A", "rel", "A"}}});
  EXPECT_EQ(g.process_nodes().size(), 1u);
  EXPECT_EQ(g.knowledge_nodes().size(), 1u);
  EXPECT_EQ(g.edges().size(), 1u);
  EXPECT_TRUE(validate(g).empty());
}

TEST(UnifyTriples, StarDegree) {
  TripleKB kb;
  for (int i = 0; i < 5; ++i) kb.triples.push_back({"H", "r", "S" + std::to_string(i)});
  auto g = unify_triples(kb);
  auto h = g.require_process(ids::entity("H"));
  EXPECT_EQ(g.owned_knowledge(h).size(), 5u);
  EXPECT_EQ(g.neighbors(ids::entity("H")).size(), 5u);
}

TEST(Neighbors, SortedSymmetricAndErrors) {
  auto g = unify_triples(gate::testing::film_kb());
  for (const auto& p : g.process_nodes()) {
    auto nb = g.neighbors(p.id);
    EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end()));
    for (const auto& q : nb) {
      auto back = g.neighbors(q);
      EXPECT_NE(std::find(back.begin(), back.end(), p.id), back.end());
    }
  }
  EXPECT_THROW(g.neighbors("e:Nobody"), ValidationError);
}

TEST(Neighbors, TitleSeesOnlyParentAndIsolatedNodeNone) {
  auto g = unify_documents(gate::testing::small_document_kb());
  EXPECT_EQ(g.neighbors(ids::title(0, 1)), std::vector<std::string>{ids::topic(0)});
  UnifiedGraph lone(KbKind::triple, {{"e:A", "A", NodeKind::entity}}, {}, {});
  EXPECT_TRUE(lone.neighbors("e:A").empty());
}

TEST(Validate, DanglingOwnerAndLayering) {
  auto g = unify_documents(gate::testing::small_document_kb());
  auto knowledge = g.knowledge_nodes();
  knowledge[0].owner = "t9.a9";
  UnifiedGraph dangling(g.kind(), g.process_nodes(), knowledge, g.edges());
  auto report = validate(dangling);
  ASSERT_EQ(report.size(), 1u);
  EXPECT_NE(report[0].find(knowledge[0].id), std::string::npos);

  auto edges = g.edges();
  edges.push_back({ids::title(0, 0), ids::title(0, 1), ""});
  UnifiedGraph layered(g.kind(), g.process_nodes(), g.knowledge_nodes(), edges);
  report = validate(layered);
  ASSERT_FALSE(report.empty());
  EXPECT_NE(report[0].find("layering"), std::string::npos);
}

TEST(GraphCache, RoundTripPreservesEverything) {
  auto g = unify_triples(gate::testing::film_kb());
  auto back = graph_from_json(nlohmann::json::parse(to_json(g).dump()));
  EXPECT_EQ(back.process_nodes(), g.process_nodes());
  EXPECT_EQ(back.knowledge_nodes(), g.knowledge_nodes());
  EXPECT_EQ(back.edges(), g.edges());
  EXPECT_EQ(back.kind(), g.kind());
  auto bad = to_json(g);
  bad["version"] = 99;
  EXPECT_THROW(graph_from_json(bad), ValidationError);
}

TEST(UnifyInvariants, RandomizedKbs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    TripleKB kb;
    std::set<Triple> seen;
    std::size_t n = 1 + rng() % 1000;
    while (kb.triples.size() < n) {
      Triple t{"E" + std::to_string(rng() % 60), "r" + std::to_string(rng() % 5), "E" + std::to_string(rng() % 60)};
      if (seen.insert(t).second) kb.triples.push_back(t);
    }
    auto g = unify_triples(kb);
    ASSERT_EQ(g.knowledge_nodes().size(), kb.triples.size());
    for (std::size_t i = 0; i < kb.triples.size(); ++i)
      EXPECT_EQ(g.knowledge_nodes()[i].owner, ids::entity(kb.triples[i].head));
    EXPECT_TRUE(validate(g).empty());
  }
}
