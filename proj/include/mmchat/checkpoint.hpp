#pragma once

// Single-file checkpoint container.
//
//   "MMF1" | u32 version | u32 tensor count
//   per tensor: u16 name length, name, u8 dtype (0 = f32), u8 rank,
//               u64 extents[rank], u64 absolute data offset
//   u64 config length | key=value config text
//   zero padding, then each tensor's little-endian data at a 64-byte boundary
//
// Tensors are written in name order so equal contents give equal bytes.

#include <filesystem>
#include <map>
#include <string>

#include "mmchat/keyvalue.hpp"
#include "mmchat/stack.hpp"
#include "mmchat/tensor.hpp"
#include "mmchat/tokenizer.hpp"

namespace mmchat {

struct CheckpointContents {
  KeyValues config;
  std::map<std::string, Tensor> tensors;
};

// Writes to a sibling temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const CheckpointContents& contents);
// Throws IoError when unreadable and ParseError on any structural defect.
CheckpointContents read_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
// Hash over shape and raw float bytes.
std::string tensor_hash(const Tensor& t);

// Everything a server needs to answer requests.
struct ModelBundle {
  Stack stack;
  Vocab vocab;
};

// Merges stored as "a,b a,b ...".
std::string encode_merges(const Vocab& vocab);
Vocab decode_merges(const std::string& text);

CheckpointContents bundle_contents(const ModelBundle& bundle);
ModelBundle bundle_from_contents(const CheckpointContents& contents);
void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::filesystem::path& path);

}  // namespace mmchat
