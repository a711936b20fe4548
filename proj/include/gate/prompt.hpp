#pragma once

#include <string>
#include <vector>

#include "gate/error.hpp"

namespace gate {

enum class PromptMode { with_knowledge, internal_only };

inline const char* to_string(PromptMode m) {
  return m == PromptMode::with_knowledge ? "with_knowledge" : "internal_only";
}

inline PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "with_knowledge") return PromptMode::with_knowledge;
  if (s == "internal_only") return PromptMode::internal_only;
  throw ValidationError("unknown prompt mode \"" + s + "\" (expected with_knowledge or internal_only)");
}

namespace prompt_text {

inline constexpr const char* kPreamble =
    "Assuming there is a seeker of knowledge who engages in a conversation (named \"apprentice\" / \"user\") "
    "with a wise person who has access to knowledge (named \"wizard\" / \"assistant\"), I will provide the "
    "history of their conversation and the available reference knowledge as follows:";
inline constexpr const char* kHistoryHeader = "History of conversation:";
inline constexpr const char* kKnowledgeHeader = "Reference knowledge:";
inline constexpr const char* kInstruction =
    "As the wizard/assistant, please continue the dialogue with the apprentice/user, keeping in mind the history "
    "of their conversation";
inline constexpr const char* kWithKnowledge = " and the available reference knowledge.";
inline constexpr const char* kInternalOnly = " and leveraging your knowledge.";
inline constexpr const char* kLength = " Provide a response of less than 20 words.";

}  // namespace prompt_text

namespace detail {

// One entry per line: embedded line breaks become spaces.
inline std::string one_line(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == '\r') {
      if (i + 1 < s.size() && s[i + 1] == '\n') ++i;
      c = ' ';
    } else if (c == '\n') {
      c = ' ';
    }
    out += c;
  }
  return out;
}

}  // namespace detail

inline std::string render_prompt(const std::vector<std::string>& history, const std::vector<std::string>& pool,
                                 PromptMode mode) {
  namespace pt = prompt_text;
  if (mode == PromptMode::with_knowledge && pool.empty())
    throw ValidationError("with_knowledge prompt needs a non-empty knowledge pool");
  std::string out = pt::kPreamble;
  out += "\n\n";
  out += pt::kHistoryHeader;
  out += '\n';
  for (const auto& h : history) out += detail::one_line(h) + '\n';
  if (mode == PromptMode::with_knowledge) {
    out += '\n';
    out += pt::kKnowledgeHeader;
    out += '\n';
    for (const auto& k : pool) out += detail::one_line(k) + '\n';
  }
  out += '\n';
  out += pt::kInstruction;
  out += mode == PromptMode::with_knowledge ? pt::kWithKnowledge : pt::kInternalOnly;
  out += pt::kLength;
  out += '\n';
  return out;
}

}  // namespace gate
