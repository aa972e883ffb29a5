#pragma once

// Benchmark items and the multiple-choice prompt layout shared by training
// data and evaluation.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mmchat {

enum class ItemKind { kMcq, kOpen };

struct BenchmarkItem {
  std::string id;
  std::string image;  // relative to the benchmark file's directory
  std::string organ;
  std::string clinical_context;
  std::string question;
  ItemKind kind = ItemKind::kMcq;
  std::vector<std::string> options;  // canonical order; presentation order is derived
  std::size_t key = 0;
  std::vector<std::string> categories;
  std::vector<std::string> subcategories;
  friend bool operator==(const BenchmarkItem&, const BenchmarkItem&) = default;
};

inline constexpr std::size_t kMcqOptionCount = 10;

// Throws InputError unless mcq items have exactly 10 distinct options and a
// key inside them.
void validate_item(const BenchmarkItem& item);

std::string item_to_json(const BenchmarkItem& item);
BenchmarkItem item_from_json(std::string_view line);
void write_items(const std::filesystem::path& path, const std::vector<BenchmarkItem>& items);
std::vector<BenchmarkItem> read_items(const std::filesystem::path& path);

// Seeded per-item permutation: presented slot i shows options[order[i]].
std::vector<std::size_t> presentation_order(const BenchmarkItem& item, std::uint64_t seed);

char option_letter(std::size_t slot);
// "<question>\nA. opt\nB. opt\n...\nAnswer with the best option."
std::string format_mcq(std::string_view question, const std::vector<std::string>& presented);
// "- <option>"
std::string format_mcq_answer(std::string_view option);

}  // namespace mmchat
