#include "mmchat/records.hpp"

#include <fstream>
#include "json.hpp"

#include "mmchat/errors.hpp"

namespace mmchat {

namespace {

constexpr std::array<std::string_view, 6> kNames{"conversation", "description", "multiple_choice",
                                                 "free_response", "text_only",   "guardrail"};

}  // namespace

std::string_view category_name(Category c) { return kNames[static_cast<std::size_t>(c)]; }

Category parse_category(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<Category>(i);
  }
  throw ParseError("unknown category '" + std::string(name) + "'");
}

void validate_record(const InstructionRecord& r) {
  auto fail = [&](const std::string& why) {
    throw InputError("record '" + r.id + "': " + why);
  };
  if (r.id.empty()) throw InputError("record with empty id");
  if (r.turns.empty()) fail("no turns");
  for (const auto& t : r.turns) {
    if (t.instruction.empty()) fail("empty instruction");
    if (t.answer.empty()) fail("empty answer");
  }
  if (r.category == Category::kTextOnly && !r.images.empty()) fail("text_only record has images");
  if (r.category != Category::kTextOnly && r.category != Category::kGuardrail && r.images.empty()) {
    fail(std::string(category_name(r.category)) + " record has no image");
  }
  for (const auto& img : r.images) {
    if (img.empty()) fail("empty image reference");
  }
}

std::string record_to_json(const InstructionRecord& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["category"] = category_name(r.category);
  j["images"] = r.images;
  auto turns = nlohmann::ordered_json::array();
  for (const auto& t : r.turns) {
    turns.push_back({{"instruction", t.instruction}, {"answer", t.answer}});
  }
  j["turns"] = std::move(turns);
  j["source"] = r.source;
  return j.dump();
}

InstructionRecord record_from_json(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    InstructionRecord r;
    r.id = j.at("id").get<std::string>();
    r.category = parse_category(j.at("category").get<std::string>());
    if (j.contains("images")) r.images = j.at("images").get<std::vector<std::string>>();
    for (const auto& t : j.at("turns")) {
      r.turns.push_back({t.at("instruction").get<std::string>(), t.at("answer").get<std::string>()});
    }
    r.source = j.value("source", "");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed record: ") + e.what());
  }
}

void write_records(const std::filesystem::path& path,
                   const std::vector<InstructionRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<InstructionRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<InstructionRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(line));
      validate_record(out.back());
    } catch (const Error& e) {
      throw ParseError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

std::vector<ChatTurn> record_chat_turns(const InstructionRecord& r) {
  std::vector<ChatTurn> turns;
  for (std::size_t i = 0; i < r.turns.size(); ++i) {
    turns.push_back({Role::kUser, r.turns[i].instruction, i == 0 ? r.images.size() : 0});
    turns.push_back({Role::kAssistant, r.turns[i].answer, 0});
  }
  return turns;
}

}  // namespace mmchat
