#pragma once

// Guardrail synthesis and dataset statistics.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmchat/records.hpp"

namespace mmchat {

inline constexpr std::string_view kNoImageRefusal =
    "Sorry, I cannot assist you since you have not uploaded any image.";
inline constexpr std::string_view kWrongDomainRefusal =
    "Sorry I can only assist you with queries related to pathology.";

// Kind A: `n_per_kind` image-referential instructions with no image attached.
// Kind B: `n_per_kind` instructions paired with images drawn from
// `image_pool`. Instructions cycle through `instructions` in a seeded order.
// Throws InputError when kind B is requested from an empty pool or when
// `instructions` is empty and n_per_kind > 0.
std::vector<InstructionRecord> make_guardrails(std::span<const std::string> instructions,
                                               std::span<const std::string> image_pool,
                                               std::size_t n_per_kind, std::uint64_t seed,
                                               std::string_view id_prefix = "guard");

struct DatasetStats {
  std::map<Category, std::size_t> per_category;  // all six keys, zeros included
  std::size_t records = 0;
  std::size_t turns = 0;
  std::size_t unique_images = 0;
  double mean_width = 0.0;   // over readable unique images
  double mean_height = 0.0;
  std::vector<std::string> dangling;  // references that could not be read
};

// Image references resolve against `root`.
DatasetStats dataset_stats(const std::vector<InstructionRecord>& records,
                           const std::filesystem::path& root);

std::string format_stats(const DatasetStats& stats);

}  // namespace mmchat
