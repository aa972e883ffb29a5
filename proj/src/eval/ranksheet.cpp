#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "mmchat/checkpoint.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/eval.hpp"

namespace mmchat {

namespace {

constexpr std::string_view kSheetHeader =
    "# mmchat rank sheet 1\n"
    "# Rank every response with 1 as best; equal ranks mark ties.\n"
    "# Criteria, in order of importance:\n"
    "#   1. prompt following\n"
    "#   2. completeness\n"
    "#   3. succinctness\n"
    "#   4. terminology\n"
    "# Label every response correct or incorrect.\n";

std::string digest(const std::string& text) { return sha256_hex(text).substr(0, 16); }

std::uint64_t id_hash(const std::string& id) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : id) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct SheetSlot {
  std::string rank;
  std::string label;
  std::string text;
};

struct Sheet {
  std::string item_id;
  std::vector<SheetSlot> slots;
};

Sheet parse_sheet(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  Sheet sheet;
  std::string line;
  SheetSlot* current = nullptr;
  bool in_text = false;
  std::size_t declared = 0;
  auto field = [](const std::string& l, std::string_view key) -> std::optional<std::string> {
    if (l.rfind(key, 0) != 0) return std::nullopt;
    std::string v = l.substr(key.size());
    const auto b = v.find_first_not_of(' ');
    return b == std::string::npos ? std::string() : v.substr(b);
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("#", 0) == 0) continue;
    if (line.rfind("=== response ", 0) == 0) {
      sheet.slots.emplace_back();
      current = &sheet.slots.back();
      in_text = false;
      continue;
    }
    if (line == "=== end ===") {
      current = nullptr;
      in_text = false;
      continue;
    }
    if (!current) {
      if (auto v = field(line, "item:")) sheet.item_id = *v;
      if (auto v = field(line, "responses:")) declared = std::stoul(*v);
      continue;
    }
    if (in_text) {
      if (line.rfind("| ", 0) == 0 || line == "|") {
        if (!current->text.empty()) current->text += '\n';
        current->text += line.size() > 2 ? line.substr(2) : "";
        continue;
      }
      in_text = false;
    }
    if (auto v = field(line, "rank:")) {
      current->rank = *v;
    } else if (auto v = field(line, "label:")) {
      current->label = *v;
    } else if (line == "text:") {
      in_text = true;
    }
  }
  if (sheet.item_id.empty()) throw ParseError(path.string() + ": no item line");
  if (declared != sheet.slots.size()) {
    throw ParseError(path.string() + ": declares " + std::to_string(declared) + " responses, lists " +
                     std::to_string(sheet.slots.size()));
  }
  return sheet;
}

}  // namespace

void export_rank_sheets(const std::vector<BenchmarkItem>& items, const ResponseTable& responses,
                        std::uint64_t seed, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "sheets");
  std::ofstream key(dir / "key.tsv", std::ios::trunc);
  if (!key) throw IoError("cannot write " + (dir / "key.tsv").string());
  key << "item\tslot\tmodel\tunsuccessful\tdigest\n";
  for (const auto& item : items) {
    std::vector<std::pair<std::string, const ModelResponse*>> entries;
    for (const auto& [model, table] : responses) {
      auto it = table.find(item.id);
      if (it != table.end()) entries.emplace_back(model, &it->second);
    }
    if (entries.size() < 2) {
      throw InputError("item '" + item.id + "' needs at least two model responses to rank");
    }
    std::mt19937_64 rng(seed ^ id_hash(item.id));
    std::shuffle(entries.begin(), entries.end(), rng);

    std::ostringstream sheet;
    sheet << kSheetHeader << "item: " << item.id << "\n"
          << "question: " << one_line(item.question) << "\n"
          << "responses: " << entries.size() << "\n";
    for (std::size_t slot = 0; slot < entries.size(); ++slot) {
      const auto& text = entries[slot].second->text;
      sheet << "\n=== response " << slot + 1 << " ===\nrank:\nlabel:\ntext:\n";
      std::istringstream lines(text);
      std::string l;
      while (std::getline(lines, l)) sheet << "| " << l << "\n";
      sheet << "=== end ===\n";
      key << item.id << '\t' << slot + 1 << '\t' << entries[slot].first << '\t'
          << (entries[slot].second->unsuccessful ? 1 : 0) << '\t' << digest(text) << '\n';
    }
    std::ofstream out(dir / "sheets" / (item.id + ".txt"), std::ios::trunc);
    if (!out) throw IoError("cannot write sheet for " + item.id);
    out << sheet.str();
  }
}

void fill_rank_sheet(const std::filesystem::path& path, const std::vector<int>& ranks,
                     const std::vector<bool>& correct) {
  std::istringstream in(read_file(path));
  std::ostringstream out;
  std::string line;
  std::size_t slot = 0;
  bool seen_response = false;
  while (std::getline(in, line)) {
    if (line.rfind("=== response ", 0) == 0) {
      if (seen_response) ++slot;
      seen_response = true;
    }
    if (seen_response && line.rfind("rank:", 0) == 0) {
      if (slot >= ranks.size()) throw InputError("fill_rank_sheet: too few ranks");
      line = "rank: " + std::to_string(ranks[slot]);
    } else if (seen_response && line.rfind("label:", 0) == 0) {
      if (slot >= correct.size()) throw InputError("fill_rank_sheet: too few labels");
      line = std::string("label: ") + (correct[slot] ? "correct" : "incorrect");
    }
    out << line << "\n";
  }
  std::ofstream(path, std::ios::trunc) << out.str();
}

std::vector<RankedItem> ingest_rank_sheets(const std::filesystem::path& dir) {
  struct KeyRow {
    std::string model;
    bool unsuccessful = false;
    std::string digest;
  };
  std::map<std::string, std::map<std::size_t, KeyRow>> keys;
  {
    std::istringstream in(read_file(dir / "key.tsv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::string item, slot, model, unsuccessful, dig;
      if (!std::getline(fields, item, '\t') || !std::getline(fields, slot, '\t') ||
          !std::getline(fields, model, '\t') || !std::getline(fields, unsuccessful, '\t') ||
          !std::getline(fields, dig, '\t')) {
        throw ParseError("key.tsv: malformed row '" + line + "'");
      }
      keys[item][std::stoul(slot)] = {model, unsuccessful == "1", dig};
    }
  }

  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir / "sheets")) {
    if (e.path().extension() == ".txt") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());

  std::vector<RankedItem> out;
  std::size_t matched = 0;
  for (const auto& path : paths) {
    const auto sheet = parse_sheet(path);
    const auto key_it = keys.find(sheet.item_id);
    if (key_it == keys.end()) throw ParseError(path.string() + ": item not in key");
    const auto& rows = key_it->second;
    if (rows.size() != sheet.slots.size()) throw ParseError(path.string() + ": slot count differs from key");
    ++matched;
    RankedItem item;
    item.item_id = sheet.item_id;
    const int count = static_cast<int>(sheet.slots.size());
    for (std::size_t s = 0; s < sheet.slots.size(); ++s) {
      const auto& slot = sheet.slots[s];
      const auto row = rows.find(s + 1);
      if (row == rows.end()) throw ParseError(path.string() + ": slot " + std::to_string(s + 1) + " not in key");
      if (row->second.digest != digest(slot.text)) {
        throw ParseError(path.string() + ": response " + std::to_string(s + 1) + " text does not match the key");
      }
      int rank = 0;
      try {
        rank = std::stoi(slot.rank);
      } catch (const std::exception&) {
        throw ParseError(path.string() + ": response " + std::to_string(s + 1) + " has no rank");
      }
      if (rank < 1 || rank > count) {
        throw ParseError(path.string() + ": rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(count) + "]");
      }
      if (slot.label != "correct" && slot.label != "incorrect") {
        throw ParseError(path.string() + ": response " + std::to_string(s + 1) + " is not labelled");
      }
      item.responses.push_back(
          {row->second.model, slot.text, rank, slot.label == "correct", row->second.unsuccessful});
    }
    out.push_back(std::move(item));
  }
  if (matched != keys.size()) throw ParseError("key lists items with no sheet");
  return out;
}

}  // namespace mmchat
