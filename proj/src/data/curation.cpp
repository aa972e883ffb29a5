#include "mmchat/curation.hpp"

#include <fstream>
#include <sstream>

#include "mmchat/errors.hpp"

namespace mmchat {

namespace {

constexpr std::string_view kDefaultRules = R"(# Rules run top to bottom; the first failure names the rejection.
[keyword_block animal]
rat
rats
mouse
mice
murine
pig
pigs
porcine
canine
feline
bovine
rabbit
hamster
zebrafish
primate

[keyword_block experimental]
experimental
positive control
negative control
xenograft
knockout
transgenic
in vitro

[generic_caption]
^(an? )?(h&e |he |histology |histological |microscopy |microscopic )?(image|photo|picture|micrograph|slide|section)s? (of|showing) (an? |the )?[a-z]+( [a-z]+)?\.?$

[min_words]
12

[trivial_question]
\bmagnification\b
\bscale bar\b

[failed_response]
^sorry, i cannot answer your request
\bi cannot answer your request based on the information provided\b
)";

std::string escape_regex(std::string_view word) {
  static const std::string special = R"(\^$.|?*+()[]{})";
  std::string out;
  for (char c : word) {
    if (special.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

RuleKind parse_kind(std::string_view name) {
  for (auto k : {RuleKind::kMinWords, RuleKind::kGenericCaption, RuleKind::kKeywordBlock,
                 RuleKind::kTrivialQuestion, RuleKind::kFailedResponse}) {
    if (rule_kind_name(k) == name) return k;
  }
  throw ParseError("unknown curation section '" + std::string(name) + "'");
}

std::string reason_of(const CurationRule& rule, std::string_view detail) {
  std::string r(rule_kind_name(rule.kind));
  if (!rule.label.empty()) r += " " + rule.label;
  if (!detail.empty()) r += ": " + std::string(detail);
  return r;
}

const std::string* first_match(const CurationRule& rule, const std::string& text) {
  for (std::size_t i = 0; i < rule.compiled.size(); ++i) {
    if (std::regex_search(text, rule.compiled[i])) return &rule.patterns[i];
  }
  return nullptr;
}

}  // namespace

std::string_view rule_kind_name(RuleKind kind) {
  switch (kind) {
    case RuleKind::kMinWords:
      return "min_words";
    case RuleKind::kGenericCaption:
      return "generic_caption";
    case RuleKind::kKeywordBlock:
      return "keyword_block";
    case RuleKind::kTrivialQuestion:
      return "trivial_question";
    case RuleKind::kFailedResponse:
      return "failed_response";
  }
  return "unknown";
}

void CurationRules::add(RuleKind kind, std::string label, std::vector<std::string> patterns,
                        std::size_t threshold) {
  CurationRule rule;
  rule.kind = kind;
  rule.label = std::move(label);
  rule.threshold = threshold;
  if (kind != RuleKind::kMinWords && patterns.empty()) {
    throw ParseError("curation rule " + std::string(rule_kind_name(kind)) + " has no patterns");
  }
  const auto flags = std::regex::ECMAScript | std::regex::icase | std::regex::optimize;
  for (const auto& p : patterns) {
    const std::string source =
        kind == RuleKind::kKeywordBlock ? "\\b" + escape_regex(p) + "\\b" : p;
    try {
      rule.compiled.emplace_back(source, flags);
    } catch (const std::regex_error& e) {
      throw ParseError("bad curation pattern '" + p + "': " + e.what());
    }
  }
  rule.patterns = std::move(patterns);
  rules_.push_back(std::move(rule));
}

CurationRules CurationRules::defaults() { return parse(kDefaultRules); }

CurationRules CurationRules::parse(std::string_view text) {
  CurationRules out;
  std::istringstream in{std::string(text)};
  std::string line;
  bool open = false;
  RuleKind kind = RuleKind::kMinWords;
  std::string label;
  std::vector<std::string> patterns;
  auto flush = [&] {
    if (!open) return;
    if (kind == RuleKind::kMinWords) {
      if (patterns.size() != 1) throw ParseError("[min_words] needs exactly one threshold line");
      std::size_t threshold = 0;
      try {
        threshold = std::stoul(patterns[0]);
      } catch (const std::exception&) {
        throw ParseError("[min_words] threshold '" + patterns[0] + "' is not a number");
      }
      out.add(kind, label, {}, threshold);
    } else {
      out.add(kind, label, patterns);
    }
    patterns.clear();
  };
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[' && t.back() == ']') {
      flush();
      const std::string header = trim(std::string_view(t).substr(1, t.size() - 2));
      const auto space = header.find(' ');
      kind = parse_kind(header.substr(0, space));
      label = space == std::string::npos ? "" : trim(header.substr(space + 1));
      open = true;
      continue;
    }
    if (!open) throw ParseError("curation pattern '" + t + "' before any section header");
    patterns.push_back(t);
  }
  flush();
  return out;
}

CurationRules CurationRules::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string CurationRules::to_text() const {
  std::string out;
  for (const auto& r : rules_) {
    out += "[" + std::string(rule_kind_name(r.kind));
    if (!r.label.empty()) out += " " + r.label;
    out += "]\n";
    if (r.kind == RuleKind::kMinWords) out += std::to_string(r.threshold) + "\n";
    for (const auto& p : r.patterns) out += p + "\n";
    out += "\n";
  }
  return out;
}

std::size_t word_count(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

Verdict filter_caption(std::string_view caption, const CurationRules& rules) {
  const std::string text = trim(caption);
  for (const auto& rule : rules.rules()) {
    switch (rule.kind) {
      case RuleKind::kMinWords:
        if (word_count(text) < rule.threshold) {
          return {false, reason_of(rule, std::to_string(word_count(text)) + " words")};
        }
        break;
      case RuleKind::kGenericCaption:
      case RuleKind::kKeywordBlock:
        if (const auto* hit = first_match(rule, text)) return {false, reason_of(rule, *hit)};
        break;
      default:
        break;
    }
  }
  return {};
}

Verdict filter_instruction(const InstructionRecord& record, const CurationRules& rules) {
  for (const auto& rule : rules.rules()) {
    if (rule.kind != RuleKind::kTrivialQuestion && rule.kind != RuleKind::kFailedResponse) continue;
    for (const auto& turn : record.turns) {
      const std::string& text =
          rule.kind == RuleKind::kTrivialQuestion ? turn.instruction : turn.answer;
      if (const auto* hit = first_match(rule, text)) return {false, reason_of(rule, *hit)};
    }
  }
  return {};
}

Verdict filter_record(const InstructionRecord& record, const CurationRules& rules) {
  if (record.category == Category::kDescription) {
    for (const auto& turn : record.turns) {
      auto v = filter_caption(turn.answer, rules);
      if (!v.keep) return v;
    }
  }
  return filter_instruction(record, rules);
}

}  // namespace mmchat
