#pragma once

// Knowledge-base and dialogue-corpus readers/writers, plus the deterministic
// synthetic corpus generator used for desk-scale training and tests.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "gate/error.hpp"
#include "gate/ids.hpp"
#include "gate/json_util.hpp"

namespace gate {

using json = nlohmann::json;

struct Article {
  std::string title;
  std::vector<std::string> sentences;
  bool operator==(const Article&) const = default;
};

struct Topic {
  std::string label;
  std::vector<Article> articles;
  bool operator==(const Topic&) const = default;
};

struct DocumentKB {
  std::vector<Topic> topics;

  std::size_t title_count() const {
    std::size_t n = 0;
    for (const auto& t : topics) n += t.articles.size();
    return n;
  }
  std::size_t sentence_count() const {
    std::size_t n = 0;
    for (const auto& t : topics)
      for (const auto& a : t.articles) n += a.sentences.size();
    return n;
  }
  bool operator==(const DocumentKB&) const = default;
};

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;
  bool operator==(const Triple&) const = default;
  auto operator<=>(const Triple&) const = default;
};

struct TripleKB {
  std::vector<Triple> triples;
  bool operator==(const TripleKB&) const = default;
};

struct DialogueSample {
  std::string id;
  std::vector<std::string> history;
  std::string utterance;
  std::vector<std::string> gold_knowledge;
  std::optional<std::vector<std::string>> gold_path;
  std::optional<std::string> start_node;
  bool operator==(const DialogueSample&) const = default;
};

namespace detail {

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(std::move(cur));
  for (auto& l : lines)
    if (!l.empty() && l.back() == '\r') l.pop_back();
  return lines;
}

inline bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

inline const json& require(const json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ValidationError("line " + std::to_string(line) + ": missing field \"" + field + "\"");
  return *it;
}

inline std::string require_string(const json& obj, const char* field, std::size_t line) {
  const json& v = require(obj, field, line);
  if (!v.is_string())
    throw ValidationError("line " + std::to_string(line) + ": field \"" + field + "\" must be a string");
  return v.get<std::string>();
}

inline std::vector<std::string> string_list(const json& v, const char* field, std::size_t line) {
  if (!v.is_array())
    throw ValidationError("line " + std::to_string(line) + ": field \"" + field + "\" must be an array");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string())
      throw ValidationError("line " + std::to_string(line) + ": field \"" + field + "\" must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Document KB (JSON)

inline DocumentKB document_kb_from_json(const json& root) {
  if (!root.is_object() || !root.contains("topics") || !root["topics"].is_array())
    throw ValidationError("document KB must be an object with a \"topics\" array");
  DocumentKB kb;
  std::set<std::string> labels;
  for (const auto& jt : root["topics"]) {
    Topic topic;
    topic.label = detail::require_string(jt, "topic", 1);
    if (!labels.insert(topic.label).second) throw ValidationError("duplicate topic \"" + topic.label + "\"");
    std::set<std::string> titles;
    if (!jt.contains("articles") || !jt["articles"].is_array())
      throw ValidationError("topic \"" + topic.label + "\" has no \"articles\" array");
    for (const auto& ja : jt["articles"]) {
      Article art;
      art.title = detail::require_string(ja, "title", 1);
      if (!titles.insert(art.title).second)
        throw ValidationError("duplicate title \"" + art.title + "\" under topic \"" + topic.label + "\"");
      if (ja.contains("sentences")) art.sentences = detail::string_list(ja["sentences"], "sentences", 1);
      bool any = false;
      for (const auto& s : art.sentences) {
        if (s.empty()) throw ValidationError("empty sentence in article \"" + art.title + "\"");
        any = true;
      }
      if (!any) throw ValidationError("article \"" + art.title + "\" has no sentences");
      topic.articles.push_back(std::move(art));
    }
    kb.topics.push_back(std::move(topic));
  }
  return kb;
}

inline DocumentKB parse_document_kb(std::istream& in) {
  std::string text = detail::read_all(in);
  return document_kb_from_json(detail::parse_json_text(text));
}

inline json to_json(const DocumentKB& kb) {
  json topics = json::array();
  for (const auto& t : kb.topics) {
    json arts = json::array();
    for (const auto& a : t.articles) arts.push_back({{"title", a.title}, {"sentences", a.sentences}});
    topics.push_back({{"topic", t.label}, {"articles", std::move(arts)}});
  }
  return {{"topics", std::move(topics)}};
}

// ---------------------------------------------------------------------------
// Triple KB (TSV)

inline TripleKB parse_triple_kb(std::istream& in) {
  TripleKB kb;
  std::map<Triple, std::size_t> seen;
  auto lines = detail::split_lines(detail::read_all(in));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    const std::string& line = lines[i];
    if (detail::is_blank(line)) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3)
      throw ParseError("expected 3 tab-separated fields, got " + std::to_string(fields.size()), lineno);
    for (const auto& f : fields)
      if (f.empty()) throw ParseError("empty triple component", lineno);
    Triple t{fields[0], fields[1], fields[2]};
    auto [it, inserted] = seen.emplace(t, lineno);
    if (!inserted)
      throw ParseError("duplicate triple (first seen on line " + std::to_string(it->second) + ")", lineno);
    kb.triples.push_back(std::move(t));
  }
  return kb;
}

inline std::string to_tsv(const TripleKB& kb) {
  std::string out;
  for (const auto& t : kb.triples) out += t.head + '\t' + t.relation + '\t' + t.tail + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Dialogue corpus (JSONL)

inline DialogueSample dialogue_from_json(const json& obj, std::size_t line) {
  if (!obj.is_object()) throw ValidationError("line " + std::to_string(line) + ": expected a JSON object");
  DialogueSample s;
  s.id = detail::require_string(obj, "id", line);
  if (obj.contains("history")) s.history = detail::string_list(obj["history"], "history", line);
  s.utterance = detail::require_string(obj, "utterance", line);
  s.gold_knowledge = detail::string_list(detail::require(obj, "gold_knowledge", line), "gold_knowledge", line);
  if (s.gold_knowledge.empty())
    throw ValidationError("line " + std::to_string(line) + ": field \"gold_knowledge\" is empty");
  if (obj.contains("gold_path") && !obj["gold_path"].is_null())
    s.gold_path = detail::string_list(obj["gold_path"], "gold_path", line);
  if (obj.contains("start_node") && !obj["start_node"].is_null())
    s.start_node = detail::require_string(obj, "start_node", line);
  return s;
}

inline json to_json(const DialogueSample& s) {
  json j = {{"id", s.id}, {"history", s.history}, {"utterance", s.utterance}, {"gold_knowledge", s.gold_knowledge}};
  if (s.gold_path) j["gold_path"] = *s.gold_path;
  if (s.start_node) j["start_node"] = *s.start_node;
  return j;
}

inline std::vector<DialogueSample> parse_dialogue_corpus(std::istream& in) {
  std::vector<DialogueSample> out;
  std::set<std::string> ids;
  auto lines = detail::split_lines(detail::read_all(in));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::is_blank(lines[i])) continue;
    auto sample = dialogue_from_json(detail::parse_json_text(lines[i], i + 1), i + 1);
    if (!ids.insert(sample.id).second)
      throw ValidationError("line " + std::to_string(i + 1) + ": duplicate dialogue id \"" + sample.id + "\"");
    out.push_back(std::move(sample));
  }
  return out;
}

inline std::string to_jsonl(const std::vector<DialogueSample>& corpus) {
  std::string out;
  for (const auto& s : corpus) out += to_json(s).dump() + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class KbKind { document, triple };

struct SynthConfig {
  std::uint64_t seed = 7;
  KbKind kind = KbKind::document;
  // document mode
  std::size_t n_topics = 5;
  std::size_t n_titles_per_topic = 2;
  std::size_t n_sentences_per_title = 20;
  // private vocabulary per title, and how many of each sentence's words come from it
  std::size_t title_vocab = 12;
  std::size_t title_words_per_sentence = 3;
  // private title words every utterance is guaranteed to mention
  std::size_t utterance_cues = 1;
  // triple mode
  std::size_t n_entities = 30;
  std::size_t n_relations = 6;
  std::size_t branching = 3;
  std::size_t path_length = 2;
  // shared
  std::size_t n_dialogues = 100;
  std::size_t vocab_size = 160;
  std::size_t words_per_sentence = 6;
  // content words an utterance borrows from its gold knowledge
  std::size_t overlap_words = 3;
  // history turns, each borrowing words from a distractor in the same scope
  std::size_t history_turns = 2;
  std::size_t history_overlap_words = 3;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string("synthetic config: ") + name + " must be >= 1");
    };
    positive(n_dialogues, "n_dialogues");
    positive(vocab_size, "vocab_size");
    positive(words_per_sentence, "words_per_sentence");
    positive(overlap_words, "overlap_words");
    if (overlap_words > words_per_sentence)
      throw ConfigError("synthetic config: overlap_words exceeds words_per_sentence");
    if (kind == KbKind::document) {
      positive(n_topics, "n_topics");
      positive(n_titles_per_topic, "n_titles_per_topic");
      positive(n_sentences_per_title, "n_sentences_per_title");
      if (title_vocab > 0 && title_words_per_sentence > std::min(title_vocab, words_per_sentence))
        throw ConfigError("synthetic config: title_words_per_sentence exceeds title_vocab or words_per_sentence");
      std::size_t shared = words_per_sentence - (title_vocab > 0 ? title_words_per_sentence : 0);
      if (vocab_size < shared) throw ConfigError("synthetic config: vocab_size smaller than words_per_sentence");
    } else {
      positive(n_entities, "n_entities");
      positive(n_relations, "n_relations");
      positive(branching, "branching");
      positive(path_length, "path_length");
      if (n_entities < 2) throw ConfigError("synthetic config: n_entities must be >= 2");
    }
  }
};

struct SyntheticCorpus {
  std::variant<DocumentKB, TripleKB> kb;
  std::vector<DialogueSample> dialogues;
};

namespace detail {

inline const std::vector<std::string>& chatter() {
  static const std::vector<std::string> phrases = {
      "tell me about", "what do you know about", "i was wondering about", "have you heard of",
      "can you say more on", "i really like", "do you think about", "what about"};
  return phrases;
}

class SynthRng {
 public:
  explicit SynthRng(std::uint64_t seed) : eng_(seed) {}
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_); }
  template <class T>
  const T& pick(const std::vector<T>& v) { return v[below(v.size())]; }
  // k distinct indices from [0, n), in draw order
  std::vector<std::size_t> distinct(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < k && i < n; ++i) std::swap(idx[i], idx[i + below(n - i)]);
    idx.resize(std::min(k, n));
    return idx;
  }

 private:
  std::mt19937_64 eng_;
};

inline std::vector<std::string> make_vocab(SynthRng& rng, std::size_t n) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::set<std::string> seen;
  std::vector<std::string> vocab;
  while (vocab.size() < n) {
    std::string w;
    for (int s = 0; s < 3; ++s) {
      w.push_back(consonants[rng.below(consonants.size())]);
      w.push_back(vowels[rng.below(vowels.size())]);
    }
    if (seen.insert(w).second) vocab.push_back(w);
  }
  return vocab;
}

inline std::string capitalize(std::string w) {
  if (!w.empty()) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

inline std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    while (!w.empty() && !std::isalnum(static_cast<unsigned char>(w.back()))) w.pop_back();
    if (!w.empty()) out.push_back(w);
  }
  return out;
}

// Like mention(), but the first `cues` words come from `preferred` when the
// sentence has them.
inline std::string mention_with_cues(SynthRng& rng, const std::vector<std::string>& content, std::size_t k,
                                     const std::set<std::string>& preferred, std::size_t cues) {
  std::vector<std::string> hits, rest;
  for (const auto& w : content) (preferred.count(w) ? hits : rest).push_back(w);
  std::string out = rng.pick(chatter());
  std::vector<std::string> chosen;
  for (std::size_t i : rng.distinct(hits.size(), std::min(cues, k))) chosen.push_back(hits[i]);
  for (std::size_t i = chosen.size(); i < hits.size(); ++i) rest.push_back(hits[i]);
  std::vector<std::string> pool;
  for (const auto& w : rest)
    if (std::find(chosen.begin(), chosen.end(), w) == chosen.end()) pool.push_back(w);
  for (std::size_t i : rng.distinct(pool.size(), k - chosen.size())) chosen.push_back(pool[i]);
  for (std::size_t i : rng.distinct(chosen.size(), chosen.size())) out += " " + chosen[i];
  return out;
}

inline std::string mention(SynthRng& rng, const std::vector<std::string>& content, std::size_t k) {
  std::string out = rng.pick(chatter());
  for (std::size_t i : rng.distinct(content.size(), k)) out += " " + content[i];
  return out;
}

inline SyntheticCorpus synth_documents(const SynthConfig& cfg, SynthRng& rng) {
  const std::size_t n_titles = cfg.n_topics * cfg.n_titles_per_topic;
  auto vocab = make_vocab(rng, cfg.vocab_size + n_titles * cfg.title_vocab + cfg.n_topics * (1 + cfg.n_titles_per_topic));
  std::vector<std::string> content(vocab.begin(), vocab.begin() + static_cast<std::ptrdiff_t>(cfg.vocab_size));
  std::size_t label_cursor = cfg.vocab_size + n_titles * cfg.title_vocab;
  const std::size_t private_words = cfg.title_vocab == 0 ? 0 : cfg.title_words_per_sentence;
  std::vector<std::vector<std::string>> title_words;

  DocumentKB kb;
  for (std::size_t t = 0; t < cfg.n_topics; ++t) {
    Topic topic{capitalize(vocab[label_cursor++]), {}};
    for (std::size_t a = 0; a < cfg.n_titles_per_topic; ++a) {
      Article art{topic.label + " " + vocab[label_cursor++], {}};
      auto own = vocab.begin() + static_cast<std::ptrdiff_t>(cfg.vocab_size + (t * cfg.n_titles_per_topic + a) * cfg.title_vocab);
      title_words.emplace_back(own, own + static_cast<std::ptrdiff_t>(cfg.title_vocab));
      const auto& private_pool = title_words.back();
      std::set<std::string> used;
      for (std::size_t attempt = 0; art.sentences.size() < cfg.n_sentences_per_title; ++attempt) {
        if (attempt > 1000 * cfg.n_sentences_per_title)
          throw ConfigError("synthetic config: vocabulary too small for distinct sentences");
        std::vector<std::string> words;
        for (std::size_t i : rng.distinct(private_pool.size(), private_words)) words.push_back(private_pool[i]);
        for (std::size_t i : rng.distinct(content.size(), cfg.words_per_sentence - private_words)) words.push_back(content[i]);
        std::string s;
        for (std::size_t i : rng.distinct(words.size(), words.size())) {
          if (!s.empty()) s += ' ';
          s += words[i];
        }
        s = capitalize(s) + ".";
        if (used.insert(s).second) art.sentences.push_back(std::move(s));
      }
      topic.articles.push_back(std::move(art));
    }
    kb.topics.push_back(std::move(topic));
  }

  std::vector<DialogueSample> dialogues;
  for (std::size_t d = 0; d < cfg.n_dialogues; ++d) {
    std::size_t t = rng.below(cfg.n_topics);
    std::size_t a = rng.below(cfg.n_titles_per_topic);
    std::size_t s = rng.below(cfg.n_sentences_per_title);
    const auto& art = kb.topics[t].articles[a];
    DialogueSample sample;
    sample.id = "d" + std::to_string(d);
    for (std::size_t h = 0; h < cfg.history_turns && art.sentences.size() > 1; ++h) {
      std::size_t other = rng.below(art.sentences.size() - 1);
      if (other >= s) ++other;
      sample.history.push_back(mention(rng, words_of(art.sentences[other]), cfg.history_overlap_words));
    }
    std::set<std::string> cues(title_words[t * cfg.n_titles_per_topic + a].begin(),
                               title_words[t * cfg.n_titles_per_topic + a].end());
    sample.utterance = mention_with_cues(rng, words_of(art.sentences[s]), cfg.overlap_words, cues, cfg.utterance_cues);
    sample.gold_knowledge = {ids::sentence(t, a, s)};
    sample.gold_path = std::vector<std::string>{ids::topic(t), ids::title(t, a)};
    sample.start_node = ids::topic(t);
    dialogues.push_back(std::move(sample));
  }
  return {std::move(kb), std::move(dialogues)};
}

inline SyntheticCorpus synth_triples(const SynthConfig& cfg, SynthRng& rng) {
  auto vocab = make_vocab(rng, cfg.vocab_size + 2 * cfg.n_entities + cfg.n_relations);
  std::size_t cursor = cfg.vocab_size;
  std::vector<std::string> entities, relations;
  for (std::size_t e = 0; e < cfg.n_entities; ++e) {
    entities.push_back(capitalize(vocab[cursor]) + " " + capitalize(vocab[cursor + 1]));
    cursor += 2;
  }
  for (std::size_t r = 0; r < cfg.n_relations; ++r) relations.push_back(vocab[cursor++] + "_of");

  TripleKB kb;
  std::set<Triple> seen;
  std::vector<std::vector<std::size_t>> owned(cfg.n_entities);      // triple indices by head
  std::vector<std::set<std::size_t>> adjacent(cfg.n_entities);     // undirected entity adjacency
  for (std::size_t h = 0; h < cfg.n_entities; ++h) {
    std::size_t made = 0, attempts = 0;
    while (made < cfg.branching && attempts++ < 50 * cfg.branching) {
      std::size_t tl = rng.below(cfg.n_entities - 1);
      if (tl >= h) ++tl;
      Triple t{entities[h], relations[rng.below(relations.size())], entities[tl]};
      if (!seen.insert(t).second) continue;
      owned[h].push_back(kb.triples.size());
      adjacent[h].insert(tl);
      adjacent[tl].insert(h);
      kb.triples.push_back(std::move(t));
      ++made;
    }
  }

  std::vector<DialogueSample> dialogues;
  for (std::size_t d = 0; d < cfg.n_dialogues; ++d) {
    std::vector<std::size_t> path;
    // re-draw until the walk ends on an entity that owns knowledge
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ConfigError("synthetic config: no entity path of the requested length");
      path = {rng.below(cfg.n_entities)};
      while (path.size() < cfg.path_length) {
        const auto& nb = adjacent[path.back()];
        std::vector<std::size_t> options;
        for (std::size_t n : nb)
          if (std::find(path.begin(), path.end(), n) == path.end()) options.push_back(n);
        if (options.empty()) break;
        path.push_back(rng.pick(options));
      }
      if (path.size() == cfg.path_length && !owned[path.back()].empty()) break;
    }
    const auto& candidates = owned[path.back()];
    std::size_t gold = rng.pick(candidates);
    const Triple& g = kb.triples[gold];
    DialogueSample sample;
    sample.id = "d" + std::to_string(d);
    for (std::size_t h = 0; h < cfg.history_turns && candidates.size() > 1; ++h) {
      std::size_t other = gold;
      while (other == gold) other = rng.pick(candidates);
      const Triple& o = kb.triples[other];
      sample.history.push_back(mention(rng, words_of(o.relation + " " + o.tail), cfg.history_overlap_words));
    }
    sample.utterance = mention(rng, words_of(g.relation + " " + g.tail), cfg.overlap_words) + " " +
                       words_of(entities[path.front()]).front();
    sample.gold_knowledge = {ids::triple(gold)};
    std::vector<std::string> gp;
    for (std::size_t e : path) gp.push_back(ids::entity(entities[e]));
    sample.start_node = gp.front();
    sample.gold_path = std::move(gp);
    dialogues.push_back(std::move(sample));
  }
  return {std::move(kb), std::move(dialogues)};
}

}  // namespace detail

inline SyntheticCorpus gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  detail::SynthRng rng(cfg.seed);
  return cfg.kind == KbKind::document ? detail::synth_documents(cfg, rng) : detail::synth_triples(cfg, rng);
}

// Serialized KB bytes: JSON for documents, TSV for triples.
inline std::string serialize_kb(const std::variant<DocumentKB, TripleKB>& kb) {
  if (const auto* doc = std::get_if<DocumentKB>(&kb)) return to_json(*doc).dump(2) + "\n";
  return to_tsv(std::get<TripleKB>(kb));
}

}  // namespace gate
