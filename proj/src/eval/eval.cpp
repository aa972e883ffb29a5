#include "mmchat/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <regex>

#include "json.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/image.hpp"

namespace mmchat {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Trailing punctuation a model tends to add after an option.
std::string strip_tail(std::string s) {
  while (!s.empty() && (s.back() == '.' || s.back() == ' ')) s.pop_back();
  return s;
}

std::optional<std::size_t> letter_slot(char c, std::size_t count) {
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (up < 'A' || static_cast<std::size_t>(up - 'A') >= count) return std::nullopt;
  return static_cast<std::size_t>(up - 'A');
}

}  // namespace

std::string_view setting_name(Setting s) {
  return s == Setting::kImageOnly ? "image_only" : "with_context";
}

Setting parse_setting(std::string_view name) {
  if (name == "image_only") return Setting::kImageOnly;
  if (name == "with_context" || name == "image_with_context") return Setting::kWithContext;
  throw InputError("unknown setting '" + std::string(name) + "'");
}

BenchPrompt build_prompt(const BenchmarkItem& item, Setting setting, std::uint64_t seed) {
  std::string question = item.question;
  if (setting == Setting::kWithContext) {
    if (item.clinical_context.empty()) {
      throw InputError("item '" + item.id + "' has no clinical context");
    }
    question = item.clinical_context + "\n" + question;
  }
  BenchPrompt p;
  if (item.kind == ItemKind::kOpen) {
    p.text = question;
    return p;
  }
  p.order = presentation_order(item, seed);
  std::vector<std::string> presented;
  for (auto i : p.order) presented.push_back(item.options[i]);
  p.text = format_mcq(question, presented);
  return p;
}

std::optional<std::size_t> extract_choice(const std::string& response,
                                          const std::vector<std::string>& presented) {
  if (presented.empty()) throw InputError("extract_choice: no options");
  const std::string text = trim(response);
  const std::size_t n = presented.size();

  // Bare letter, optionally bracketed or followed by '.' or ')'.
  {
    static const std::regex bare(R"(^[\(\[]?([A-Za-z])[\)\]\.]?$)");
    std::smatch m;
    if (std::regex_match(text, m, bare)) {
      if (auto slot = letter_slot(m[1].str()[0], n)) return slot;
    }
  }
  // Letter-dot-text: the letter decides even when the text disagrees.
  {
    static const std::regex lettered(R"(^([A-Z])\s*[\.\)]\s+\S[\s\S]*$)");
    std::smatch m;
    if (std::regex_match(text, m, lettered)) {
      if (auto slot = letter_slot(m[1].str()[0], n)) return slot;
    }
  }
  // Dash-text equal to one option.
  if (text.size() > 1 && text[0] == '-') {
    const std::string body = lower(strip_tail(trim(std::string_view(text).substr(1))));
    for (std::size_t i = 0; i < n; ++i) {
      if (lower(presented[i]) == body) return i;
    }
  }
  // Exactly one option mentioned.
  const std::string haystack = lower(text);
  std::optional<std::size_t> found;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string needle = lower(presented[i]);
    if (needle.empty() || haystack.find(needle) == std::string::npos) continue;
    if (found) return std::nullopt;
    found = i;
  }
  return found;
}

std::string outcome_to_json(const EvalOutcome& o) {
  nlohmann::ordered_json j;
  j["item_id"] = o.item_id;
  j["model_id"] = o.model_id;
  j["setting"] = setting_name(o.setting);
  j["stratum"] = o.stratum;
  j["response"] = o.response;
  j["choice"] = o.choice ? nlohmann::ordered_json(*o.choice) : nlohmann::ordered_json(nullptr);
  j["correct"] = o.correct;
  j["attempts"] = o.attempts;
  j["unsuccessful"] = o.unsuccessful;
  return j.dump();
}

EvalOutcome outcome_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    EvalOutcome o;
    o.item_id = j.at("item_id").get<std::string>();
    o.model_id = j.value("model_id", "");
    o.setting = parse_setting(j.value("setting", "image_only"));
    o.stratum = j.value("stratum", "");
    o.response = j.value("response", "");
    if (j.contains("choice") && !j.at("choice").is_null()) o.choice = j.at("choice").get<std::size_t>();
    o.correct = j.at("correct").get<bool>();
    o.attempts = j.value("attempts", std::size_t{1});
    o.unsuccessful = j.value("unsuccessful", false);
    if (o.unsuccessful && o.correct) throw ParseError("outcome '" + o.item_id + "' is unsuccessful yet correct");
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed outcome: ") + e.what());
  }
}

void write_outcomes(const std::filesystem::path& path, const std::vector<EvalOutcome>& outcomes) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& o : outcomes) out << outcome_to_json(o) << '\n';
}

std::vector<EvalOutcome> read_outcomes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<EvalOutcome> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    out.push_back(outcome_from_json(line));
  }
  return out;
}

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InputError("percentile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

Accuracy bootstrap_accuracy(const std::vector<bool>& correct, std::uint64_t seed,
                            std::size_t iterations) {
  if (correct.empty()) throw InputError("bootstrap over an empty outcome set");
  Accuracy a;
  a.total = correct.size();
  a.correct = static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true));
  a.point = static_cast<double>(a.correct) / static_cast<double>(a.total);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, a.total - 1);
  std::vector<double> stats(iterations);
  for (auto& s : stats) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < a.total; ++i) hits += correct[pick(rng)] ? 1 : 0;
    s = static_cast<double>(hits) / static_cast<double>(a.total);
  }
  std::sort(stats.begin(), stats.end());
  a.lo = percentile(stats, 0.025);
  a.hi = percentile(stats, 0.975);
  return a;
}

std::map<std::string, Accuracy> accuracy_with_ci(const std::vector<EvalOutcome>& outcomes,
                                                 std::uint64_t seed) {
  std::map<std::string, std::vector<bool>> groups;
  for (const auto& o : outcomes) {
    groups["overall"].push_back(o.correct);
    if (!o.stratum.empty()) groups[o.stratum].push_back(o.correct);
  }
  std::map<std::string, Accuracy> out;
  for (const auto& [name, flags] : groups) out.emplace(name, bootstrap_accuracy(flags, seed));
  return out;
}

std::optional<Accuracy> score_remote(const std::vector<EvalOutcome>& outcomes,
                                     Restriction restriction, std::uint64_t seed) {
  std::vector<bool> flags;
  for (const auto& o : outcomes) {
    if (o.unsuccessful && restriction == Restriction::kSuccessfulOnly) continue;
    flags.push_back(!o.unsuccessful && o.correct);
  }
  if (flags.empty()) return std::nullopt;
  return bootstrap_accuracy(flags, seed);
}

std::string format3(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", value);
  return buf;
}

std::string format_accuracy(const Accuracy& a) {
  return format3(a.point) + " (" + format3(a.lo) + ", " + format3(a.hi) + ")";
}

Responder local_responder(std::shared_ptr<const ModelBundle> bundle, std::size_t max_new_tokens) {
  return [bundle, max_new_tokens](const BenchmarkItem&, const ChatRequest& request) {
    ChatRequest r = request;
    r.max_new_tokens = max_new_tokens;
    RetryOutcome out;
    out.attempts = 1;
    out.success = true;
    out.answer = chat(*bundle, r).text;
    out.transcripts.push_back({AttemptKind::kAnswer, out.answer});
    return out;
  };
}

Responder remote_responder(const RemoteEndpoint& endpoint, std::size_t max_new_tokens) {
  const Transport transport = http_transport(endpoint);
  return [endpoint, transport, max_new_tokens](const BenchmarkItem&, const ChatRequest& request) {
    ChatRequest r = request;
    r.max_new_tokens = max_new_tokens;
    return query_with_retry(endpoint, chat_request_to_json(r, endpoint.send_decode_params),
                            transport);
  };
}

std::vector<EvalOutcome> run_mcq(const std::vector<BenchmarkItem>& items,
                                 const std::filesystem::path& image_root, const Responder& respond,
                                 Setting setting, std::uint64_t seed, const std::string& model_id) {
  std::vector<EvalOutcome> outcomes;
  for (const auto& item : items) {
    if (item.kind != ItemKind::kMcq) continue;
    const auto prompt = build_prompt(item, setting, seed);
    ChatRequest request;
    ChatMessage msg{Role::kUser, prompt.text, {}};
    if (!item.image.empty()) msg.images.push_back(read_png(image_root / item.image));
    request.messages.push_back(std::move(msg));

    const auto reply = respond(item, request);
    EvalOutcome o;
    o.item_id = item.id;
    o.model_id = model_id;
    o.setting = setting;
    o.stratum = item.organ;
    o.attempts = reply.attempts;
    o.unsuccessful = !reply.success;
    o.response = reply.success ? reply.answer
                               : (reply.transcripts.empty() ? "" : reply.transcripts.back().text);
    if (reply.success) {
      std::vector<std::string> presented;
      for (auto i : prompt.order) presented.push_back(item.options[i]);
      if (auto slot = extract_choice(reply.answer, presented)) o.choice = prompt.order[*slot];
    }
    o.correct = !o.unsuccessful && o.choice && *o.choice == item.key;
    outcomes.push_back(std::move(o));
  }
  return outcomes;
}

HeadToHead head_to_head_counts(std::size_t wins, std::size_t ties, std::size_t losses) {
  HeadToHead h;
  h.wins = wins;
  h.ties = ties;
  h.losses = losses;
  const double n = static_cast<double>(wins + ties + losses);
  if (n > 0) {
    h.win = static_cast<double>(wins) / n;
    h.tie = static_cast<double>(ties) / n;
    h.lose = static_cast<double>(losses) / n;
  }
  return h;
}

HeadToHead head_to_head(const std::vector<RankedItem>& items, const std::string& subject,
                        const std::string& rival) {
  std::size_t wins = 0, ties = 0, losses = 0, excluded = 0;
  for (const auto& item : items) {
    const RankedResponse* s = nullptr;
    const RankedResponse* r = nullptr;
    int worst = 0;
    for (const auto& resp : item.responses) {
      worst = std::max(worst, resp.rank);
      if (resp.model == subject) s = &resp;
      if (resp.model == rival) r = &resp;
    }
    if (!s || !r || s->rank <= 0 || r->rank <= 0) {
      ++excluded;
      continue;
    }
    const int sr = s->unsuccessful ? worst : s->rank;
    const int rr = r->unsuccessful ? worst : r->rank;
    if (sr < rr) {
      ++wins;
    } else if (sr == rr) {
      ++ties;
    } else {
      ++losses;
    }
  }
  auto h = head_to_head_counts(wins, ties, losses);
  h.excluded = excluded;
  return h;
}

const std::vector<TaxonomyEntry>& taxonomy_preset() {
  static const std::vector<TaxonomyEntry> preset{
      {"Microscopy", 47, {{"Microscopic Description", 27}, {"Differentiation", 20}, {"Grading", 20}}},
      {"Diagnosis", 23, {{"Diagnosis", 23}}},
      {"Clinical", 26, {{"Risk Factors", 4}, {"Prognosis", 20}, {"Treatment", 22}}},
      {"Ancillary Testing", 40, {{"IHC", 17}, {"Molecular", 21}, {"Other Testing", 4}}},
  };
  return preset;
}

std::map<std::string, std::size_t> taxonomy_counts(const std::vector<BenchmarkItem>& items) {
  std::map<std::string, std::size_t> counts;
  for (const auto& item : items) {
    if (item.kind != ItemKind::kOpen) continue;
    for (const auto& c : item.categories) ++counts[c];
    for (const auto& s : item.subcategories) ++counts[s];
  }
  return counts;
}

std::vector<std::string> check_taxonomy(const std::map<std::string, std::size_t>& counts,
                                        const std::vector<TaxonomyEntry>& preset) {
  std::vector<std::string> problems;
  auto expect = [&](const std::string& key, std::size_t want) {
    const auto it = counts.find(key);
    const std::size_t got = it == counts.end() ? 0 : it->second;
    if (got != want) {
      problems.push_back(key + ": expected " + std::to_string(want) + ", found " + std::to_string(got));
    }
  };
  std::map<std::string, bool> known;
  for (const auto& entry : preset) {
    expect(entry.category, entry.count);
    known[entry.category] = true;
    for (const auto& [sub, n] : entry.subcategories) {
      const std::string key = entry.category + "/" + sub;
      expect(key, n);
      known[key] = true;
    }
  }
  for (const auto& [key, n] : counts) {
    if (!known.count(key)) problems.push_back(key + ": not in the taxonomy");
  }
  return problems;
}

}  // namespace mmchat
