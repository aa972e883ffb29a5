#pragma once

// Instruction records and their line-delimited JSON storage.

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mmchat/tokenizer.hpp"

namespace mmchat {

enum class Category {
  kConversation,
  kDescription,
  kMultipleChoice,
  kFreeResponse,
  kTextOnly,
  kGuardrail,
};

inline constexpr std::array<Category, 6> kAllCategories{
    Category::kConversation, Category::kDescription, Category::kMultipleChoice,
    Category::kFreeResponse, Category::kTextOnly,    Category::kGuardrail};

std::string_view category_name(Category c);
// Throws ParseError for anything outside the six names.
Category parse_category(std::string_view name);

struct Turn {
  std::string instruction;
  std::string answer;
  friend bool operator==(const Turn&, const Turn&) = default;
};

struct InstructionRecord {
  std::string id;
  Category category = Category::kDescription;
  std::vector<std::string> images;  // paths relative to the dataset root
  std::vector<Turn> turns;
  std::string source;
  friend bool operator==(const InstructionRecord&, const InstructionRecord&) = default;
};

// Throws InputError on an empty id, no turns, an empty instruction or answer,
// images on a text_only record, or no image on an image-bearing category.
// Guardrail records may go either way.
void validate_record(const InstructionRecord& record);

std::string record_to_json(const InstructionRecord& record);
InstructionRecord record_from_json(std::string_view line);

// One record per line. Reading validates every record and reports the line
// number of the first defect.
void write_records(const std::filesystem::path& path, const std::vector<InstructionRecord>& records);
std::vector<InstructionRecord> read_records(const std::filesystem::path& path);

// Chat turns for the template, with all images attached to the first user turn.
std::vector<ChatTurn> record_chat_turns(const InstructionRecord& record);

}  // namespace mmchat
