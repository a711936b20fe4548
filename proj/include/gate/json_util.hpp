#pragma once

#include <cstddef>
#include <istream>
#include <iterator>
#include <string>
#include <utility>

#include <json.hpp>

#include "gate/error.hpp"

namespace gate {
using json = nlohmann::json;
}  // namespace gate

namespace gate::detail {

inline std::string read_all(std::istream& in) {
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 1-based line and column of a byte position.
inline std::pair<std::size_t, std::size_t> locate(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

inline json parse_json_text(const std::string& text, std::size_t base_line = 1) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    auto [line, col] = locate(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ParseError(std::string("malformed JSON: ") + e.what(), base_line + line - 1, col);
  }
}

}  // namespace gate::detail
