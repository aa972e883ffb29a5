#include "mmchat/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mmchat/errors.hpp"
#include "mmchat/image.hpp"

namespace mmchat {

std::vector<InstructionRecord> make_guardrails(std::span<const std::string> instructions,
                                               std::span<const std::string> image_pool,
                                               std::size_t n_per_kind, std::uint64_t seed,
                                               std::string_view id_prefix) {
  std::vector<InstructionRecord> out;
  if (n_per_kind == 0) return out;
  if (instructions.empty()) throw InputError("make_guardrails: no instructions to draw from");
  if (image_pool.empty()) throw InputError("make_guardrails: empty out-of-domain image pool");

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(instructions.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto instruction = [&](std::size_t i) { return instructions[order[i % order.size()]]; };

  for (std::size_t i = 0; i < n_per_kind; ++i) {
    InstructionRecord r;
    r.id = std::string(id_prefix) + "-noimg-" + std::to_string(i);
    r.category = Category::kGuardrail;
    r.turns.push_back({instruction(i), std::string(kNoImageRefusal)});
    r.source = "guardrail:no_image";
    out.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < n_per_kind; ++i) {
    InstructionRecord r;
    r.id = std::string(id_prefix) + "-domain-" + std::to_string(i);
    r.category = Category::kGuardrail;
    r.images.push_back(image_pool[i % image_pool.size()]);
    r.turns.push_back({instruction(i + n_per_kind), std::string(kWrongDomainRefusal)});
    r.source = "guardrail:wrong_domain";
    out.push_back(std::move(r));
  }
  return out;
}

DatasetStats dataset_stats(const std::vector<InstructionRecord>& records,
                           const std::filesystem::path& root) {
  DatasetStats s;
  for (auto c : kAllCategories) s.per_category[c] = 0;
  std::set<std::string> images;
  for (const auto& r : records) {
    ++s.records;
    ++s.per_category[r.category];
    s.turns += r.turns.size();
    images.insert(r.images.begin(), r.images.end());
  }
  s.unique_images = images.size();
  std::size_t readable = 0;
  double w = 0, h = 0;
  for (const auto& ref : images) {
    try {
      const auto [iw, ih] = png_dimensions(root / ref);
      w += static_cast<double>(iw);
      h += static_cast<double>(ih);
      ++readable;
    } catch (const Error&) {
      s.dangling.push_back(ref);
    }
  }
  if (readable > 0) {
    s.mean_width = w / static_cast<double>(readable);
    s.mean_height = h / static_cast<double>(readable);
  }
  return s;
}

std::string format_stats(const DatasetStats& s) {
  std::ostringstream out;
  out << "records " << s.records << "\n";
  for (const auto& [c, n] : s.per_category) out << "  " << category_name(c) << " " << n << "\n";
  out << "turns " << s.turns << "\n";
  out << "unique_images " << s.unique_images << "\n";
  out.setf(std::ios::fixed);
  out.precision(1);
  out << "mean_image_size " << s.mean_width << " x " << s.mean_height << "\n";
  out << "dangling " << s.dangling.size() << "\n";
  for (const auto& d : s.dangling) out << "  " << d << "\n";
  return out.str();
}

}  // namespace mmchat
