#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <openssl/evp.h>

#include "gate/error.hpp"
#include "gate/graph.hpp"

namespace gate {

using Embedding = Eigen::VectorXd;

inline constexpr std::size_t kDefaultEmbeddingDim = 384;

// Lowercased tokens, split on ASCII non-alphanumerics. Bytes >= 0x80 are kept
// as word characters so UTF-8 words stay whole.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string sha256_hex(std::string_view text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline Embedding l2_normalized(Embedding v) {
  double n = v.norm();
  if (n > 0) v /= n;
  return v;
}

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dimension() const = 0;
  // Free text (dialogue turns, keywords).
  virtual Embedding embed_text(std::string_view text) const = 0;
  // A graph node with a stable id; providers that key on ids use `id`.
  virtual Embedding embed_item(std::string_view id, std::string_view text) const {
    (void)id;
    return embed_text(text);
  }
};

class HashedBowProvider final : public EmbeddingProvider {
 public:
  explicit HashedBowProvider(std::size_t dim = kDefaultEmbeddingDim) : dim_(dim) {
    if (dim_ == 0) throw ConfigError("embedding dimension must be >= 1");
  }

  std::size_t dimension() const override { return dim_; }

  Embedding embed_text(std::string_view text) const override {
    Embedding v = Embedding::Zero(static_cast<Eigen::Index>(dim_));
    for (const auto& tok : tokenize(text)) v[static_cast<Eigen::Index>(fnv1a64(tok) % dim_)] += 1.0;
    return l2_normalized(std::move(v));
  }

 private:
  std::size_t dim_;
};

// Precomputed vectors keyed by node id, or by sha256 of the raw text for
// dialogue turns and keywords.
class FileEmbeddingProvider final : public EmbeddingProvider {
 public:
  static FileEmbeddingProvider load(std::istream& in) {
    FileEmbeddingProvider p;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (detail::is_blank(line)) continue;
      auto j = detail::parse_json_text(line, lineno);
      auto id = detail::require_string(j, "id", lineno);
      const auto& arr = detail::require(j, "vector", lineno);
      if (!arr.is_array() || arr.empty()) throw ValidationError("line " + std::to_string(lineno) + ": empty vector");
      if (p.dim_ == 0) p.dim_ = arr.size();
      if (arr.size() != p.dim_)
        throw ValidationError("line " + std::to_string(lineno) + ": vector dimension " + std::to_string(arr.size()) +
                              " differs from " + std::to_string(p.dim_));
      Embedding v(static_cast<Eigen::Index>(p.dim_));
      for (std::size_t i = 0; i < p.dim_; ++i) {
        double x = arr[i].get<double>();
        if (!std::isfinite(x)) throw ValidationError("line " + std::to_string(lineno) + ": non-finite entry");
        v[static_cast<Eigen::Index>(i)] = x;
      }
      p.table_[id] = l2_normalized(std::move(v));
    }
    if (p.dim_ == 0) throw ValidationError("embedding file holds no vectors");
    return p;
  }

  static FileEmbeddingProvider load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open embedding file " + path);
    return load(in);
  }

  std::size_t dimension() const override { return dim_; }

  Embedding embed_text(std::string_view text) const override { return lookup(sha256_hex(text)); }
  Embedding embed_item(std::string_view id, std::string_view) const override { return lookup(std::string(id)); }

  std::size_t size() const noexcept { return table_.size(); }

 private:
  Embedding lookup(const std::string& id) const {
    auto it = table_.find(id);
    if (it == table_.end()) throw ValidationError("no precomputed embedding for id \"" + id + "\"");
    return it->second;
  }

  std::size_t dim_ = 0;
  std::unordered_map<std::string, Embedding> table_;
};

// Mean of the owned knowledge embeddings, re-normalized. Nodes that own no
// knowledge (document topics) encode their label.
inline Embedding encode_node(const UnifiedGraph& g, const EmbeddingProvider& provider, std::size_t node) {
  const auto& owned = g.owned_knowledge(node);
  const auto& p = g.process_nodes().at(node);
  if (owned.empty()) return l2_normalized(provider.embed_item(p.id, p.label));
  Embedding sum = Embedding::Zero(static_cast<Eigen::Index>(provider.dimension()));
  for (auto k : owned) {
    const auto& kn = g.knowledge_nodes()[k];
    sum += provider.embed_item(kn.id, kn.text);
  }
  return l2_normalized(sum / static_cast<double>(owned.size()));
}

inline Embedding encode_node(const UnifiedGraph& g, const EmbeddingProvider& provider, const std::string& id) {
  return encode_node(g, provider, g.require_process(id));
}

// ---------------------------------------------------------------------------
// Keywords

struct Keyword {
  std::string term;
  double weight;
  bool operator==(const Keyword&) const = default;
};

using KeywordSet = std::vector<Keyword>;

inline const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> words = {
      "a",     "about", "above", "after", "again", "against", "all",   "am",    "an",    "and",   "any",
      "are",   "as",    "at",    "be",    "because", "been",  "before", "being", "below", "between", "both",
      "but",   "by",    "can",   "could", "did",   "do",      "does",  "doing", "don",   "down",  "during",
      "each",  "few",   "for",   "from",  "further", "had",   "has",   "have",  "having", "he",   "her",
      "here",  "hers",  "herself", "him", "himself", "his",   "how",   "i",     "if",    "in",    "into",
      "is",    "it",    "its",   "itself", "just", "know",    "like",  "me",    "more",  "most",  "my",
      "myself", "no",   "nor",   "not",   "now",   "of",      "off",   "on",    "once",  "only",  "or",
      "other", "our",   "ours",  "ourselves", "out", "over",  "own",   "really", "s",    "same",  "say",
      "she",   "should", "so",   "some",  "such",  "t",       "tell",  "than",  "that",  "the",   "their",
      "theirs", "them", "themselves", "then", "there", "these", "they", "think", "this", "those", "through",
      "to",    "too",   "under", "until", "up",    "very",    "was",   "we",    "were",  "what",  "when",
      "where", "which", "while", "who",   "whom",  "why",     "will",  "with",  "wondering", "would", "you",
      "your",  "yours", "yourself", "yourselves", "heard", "hi", "hello", "yes", "yeah", "oh", "well", "also"};
  return words;
}

inline std::set<std::string> load_stopwords(std::istream& in) {
  std::set<std::string> out;
  std::string line;
  while (std::getline(in, line))
    for (auto& t : tokenize(line)) out.insert(std::move(t));
  return out;
}

// TF-IDF keyword extraction. IDF comes from a reference corpus (the KB's
// knowledge texts): idf = ln((1 + N) / (1 + df)) + 1.
class KeywordExtractor {
 public:
  KeywordExtractor() : stopwords_(default_stopwords()) {}

  explicit KeywordExtractor(const std::vector<std::string>& corpus,
                            std::set<std::string> stopwords = default_stopwords())
      : stopwords_(std::move(stopwords)), n_docs_(corpus.size()) {
    for (const auto& doc : corpus) {
      auto toks = tokenize(doc);
      std::set<std::string> uniq(toks.begin(), toks.end());
      for (const auto& t : uniq) ++df_[t];
    }
  }

  static KeywordExtractor for_graph(const UnifiedGraph& g, std::set<std::string> stopwords = default_stopwords()) {
    std::vector<std::string> corpus;
    corpus.reserve(g.knowledge_nodes().size());
    for (const auto& k : g.knowledge_nodes()) corpus.push_back(k.text);
    return KeywordExtractor(corpus, std::move(stopwords));
  }

  double idf(const std::string& term) const {
    auto it = df_.find(term);
    double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
    return std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + df)) + 1.0;
  }

  KeywordSet extract(const std::vector<std::string>& history, std::string_view utterance, std::size_t k) const {
    if (k < 1) throw ConfigError("keyword count must be >= 1");
    std::map<std::string, std::size_t> tf;
    auto count = [&](std::string_view text) {
      for (auto& t : tokenize(text))
        if (!stopwords_.count(t)) ++tf[t];
    };
    for (const auto& h : history) count(h);
    count(utterance);
    KeywordSet out;
    for (const auto& [term, n] : tf) out.push_back({term, static_cast<double>(n) * idf(term)});
    std::sort(out.begin(), out.end(), [](const Keyword& a, const Keyword& b) {
      return a.weight != b.weight ? a.weight > b.weight : a.term < b.term;
    });
    if (out.size() > k) out.resize(k);
    return out;
  }

 private:
  std::set<std::string> stopwords_;
  std::size_t n_docs_ = 0;
  std::unordered_map<std::string, std::size_t> df_;
};

}  // namespace gate
