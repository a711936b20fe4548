#pragma once

#include <cstddef>
#include <string>

// Stable identifier scheme shared by the unifier and every corpus that refers
// to graph nodes. Document ids are positional; triple entity ids are derived
// from the entity label so hand-written corpora can name them directly.
namespace gate::ids {

inline std::string topic(std::size_t t) { return "t" + std::to_string(t); }

inline std::string title(std::size_t t, std::size_t a) {
  return topic(t) + ".a" + std::to_string(a);
}

inline std::string sentence(std::size_t t, std::size_t a, std::size_t s) {
  return title(t, a) + ".s" + std::to_string(s);
}

inline std::string entity(const std::string& label) { return "e:" + label; }

inline std::string triple(std::size_t index) { return "k" + std::to_string(index); }

}  // namespace gate::ids
