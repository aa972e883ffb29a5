#include "mmchat/bench_item.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include "json.hpp"
#include <random>
#include <set>

#include "mmchat/errors.hpp"

namespace mmchat {

void validate_item(const BenchmarkItem& item) {
  auto fail = [&](const std::string& why) { throw InputError("item '" + item.id + "': " + why); };
  if (item.id.empty()) throw InputError("benchmark item with empty id");
  if (item.question.empty()) fail("empty question");
  if (item.kind != ItemKind::kMcq) return;
  if (item.options.size() != kMcqOptionCount) {
    fail("has " + std::to_string(item.options.size()) + " options, expected 10");
  }
  if (std::set<std::string>(item.options.begin(), item.options.end()).size() != item.options.size()) {
    fail("duplicate options");
  }
  if (item.key >= item.options.size()) fail("key outside the option list");
}

std::string item_to_json(const BenchmarkItem& item) {
  nlohmann::ordered_json j;
  j["id"] = item.id;
  j["image"] = item.image;
  j["organ"] = item.organ;
  j["clinical_context"] = item.clinical_context;
  j["question"] = item.question;
  j["kind"] = item.kind == ItemKind::kMcq ? "mcq" : "open";
  if (item.kind == ItemKind::kMcq) {
    j["options"] = item.options;
    j["key"] = item.key;
  } else {
    j["categories"] = item.categories;
    j["subcategories"] = item.subcategories;
  }
  return j.dump();
}

BenchmarkItem item_from_json(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    BenchmarkItem item;
    item.id = j.at("id").get<std::string>();
    item.image = j.value("image", "");
    item.organ = j.value("organ", "");
    item.clinical_context = j.value("clinical_context", "");
    item.question = j.at("question").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "mcq") {
      item.kind = ItemKind::kMcq;
      item.options = j.at("options").get<std::vector<std::string>>();
      item.key = j.at("key").get<std::size_t>();
    } else if (kind == "open") {
      item.kind = ItemKind::kOpen;
      item.categories = j.value("categories", std::vector<std::string>{});
      item.subcategories = j.value("subcategories", std::vector<std::string>{});
    } else {
      throw ParseError("unknown item kind '" + kind + "'");
    }
    return item;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed benchmark item: ") + e.what());
  }
}

void write_items(const std::filesystem::path& path, const std::vector<BenchmarkItem>& items) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& item : items) out << item_to_json(item) << '\n';
}

std::vector<BenchmarkItem> read_items(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<BenchmarkItem> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(item_from_json(line));
      validate_item(out.back());
    } catch (const Error& e) {
      throw ParseError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::size_t> presentation_order(const BenchmarkItem& item, std::uint64_t seed) {
  std::vector<std::size_t> order(item.options.size());
  std::iota(order.begin(), order.end(), 0);
  // FNV-1a over the id keeps the permutation independent of file order.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : item.id) h = (h ^ c) * 1099511628211ull;
  std::mt19937_64 rng(seed ^ h);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

char option_letter(std::size_t slot) {
  if (slot >= 26) throw RangeError("option slot " + std::to_string(slot) + " has no letter");
  return static_cast<char>('A' + slot);
}

std::string format_mcq(std::string_view question, const std::vector<std::string>& presented) {
  std::string out(question);
  for (std::size_t i = 0; i < presented.size(); ++i) {
    out += '\n';
    out += option_letter(i);
    out += ". " + presented[i];
  }
  out += "\nAnswer with the best option.";
  return out;
}

std::string format_mcq_answer(std::string_view option) { return "- " + std::string(option); }

}  // namespace mmchat
