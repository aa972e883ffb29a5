#pragma once

// Desk-scale stand-in corpus: coloured geometric shapes on white backgrounds.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mmchat/bench_item.hpp"
#include "mmchat/image.hpp"
#include "mmchat/records.hpp"

namespace mmchat {

struct SynthSizes {
  std::size_t conversation = 192;
  std::size_t description = 256;
  std::size_t multiple_choice = 320;
  std::size_t free_response = 128;
  std::size_t text_only = 64;
  std::size_t guardrail = 64;  // split evenly between the two refusal kinds

  std::size_t total() const {
    return conversation + description + multiple_choice + free_response + text_only + guardrail;
  }
};

using NamedImages = std::vector<std::pair<std::string, Image>>;

struct SynthCorpus {
  std::vector<InstructionRecord> records;
  NamedImages images;  // names match the records' image references
};

struct SynthBench {
  std::vector<BenchmarkItem> items;
  NamedImages images;
};

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();

// Canvas between 64 and 80 px per side; `shape` and `color` index the name lists.
Image render_shape(std::size_t shape, std::size_t color, std::uint64_t seed);
// Full-frame stripes or checkerboards, the out-of-domain guardrail pool.
Image render_pattern(std::uint64_t seed);

// The ten options for a shape/colour key: the key, the other seven colours of
// the same shape and the same colour on the other two shapes.
std::vector<std::string> mcq_options(std::size_t shape, std::size_t color);

// Deterministic under `seed`. Image references are "images/<name>.png".
SynthCorpus generate_synthetic_corpus(std::uint64_t seed, const SynthSizes& sizes);
// Held-out multiple-choice items drawn with a seed stream disjoint from the corpus.
SynthBench generate_synthetic_bench(std::uint64_t seed, std::size_t count);

// Writes records.jsonl (or bench.jsonl) and images/ under `dir`.
void write_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus);
void write_bench(const std::filesystem::path& dir, const SynthBench& bench);

}  // namespace mmchat
