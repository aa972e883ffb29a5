#pragma once

// Caption and instruction filters driven by an ordered rule list.
//
// Rule file layout, one pattern per line under a section header:
//
//   [keyword_block animal]
//   rat
//   [min_words]
//   12
//
// Keyword patterns are literal words matched on word boundaries; generic,
// trivial and failure patterns are regular expressions. All matching ignores
// case. The first failing rule names the rejection.

#include <filesystem>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "mmchat/records.hpp"

namespace mmchat {

enum class RuleKind { kMinWords, kGenericCaption, kKeywordBlock, kTrivialQuestion, kFailedResponse };

std::string_view rule_kind_name(RuleKind kind);

struct CurationRule {
  RuleKind kind = RuleKind::kMinWords;
  std::string label;  // optional section suffix, e.g. "animal"
  std::size_t threshold = 0;
  std::vector<std::string> patterns;
  std::vector<std::regex> compiled;
};

struct Verdict {
  bool keep = true;
  std::string reason;  // empty when kept
};

class CurationRules {
 public:
  static CurationRules defaults();
  // Throws ParseError on unknown sections, empty keyword lists or bad regexes.
  static CurationRules parse(std::string_view text);
  static CurationRules load(const std::filesystem::path& path);
  std::string to_text() const;

  void add(RuleKind kind, std::string label, std::vector<std::string> patterns,
           std::size_t threshold = 0);
  const std::vector<CurationRule>& rules() const { return rules_; }

 private:
  std::vector<CurationRule> rules_;
};

std::size_t word_count(std::string_view text);

// Keyword, generic-caption and minimum-length rules.
Verdict filter_caption(std::string_view caption, const CurationRules& rules);
// Trivial-question rules on every instruction, failure rules on every answer.
Verdict filter_instruction(const InstructionRecord& record, const CurationRules& rules);
// Caption rules on description answers, then instruction rules.
Verdict filter_record(const InstructionRecord& record, const CurationRules& rules);

}  // namespace mmchat
