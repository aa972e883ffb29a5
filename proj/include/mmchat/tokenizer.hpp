#pragma once

// Byte-level vocabulary with optional learned merges, plus the chat template
// that turns a conversation into token ids and an answer-only loss mask.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mmchat {

using TokenId = std::int32_t;

class Vocab {
 public:
  static constexpr TokenId kByteCount = 256;
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr TokenId kImage = 259;
  static constexpr TokenId kNewlineSep = 260;
  static constexpr TokenId kUser = 261;
  static constexpr TokenId kAssistant = 262;
  static constexpr TokenId kFirstMerge = 263;

  using Merge = std::pair<TokenId, TokenId>;

  Vocab();
  explicit Vocab(std::vector<Merge> merges);

  // Learns up to `merge_count` byte-pair merges from `texts`, most frequent
  // pair first, ties broken by the smaller pair.
  static Vocab train(std::span<const std::string> texts, std::size_t merge_count);

  static Vocab parse(std::string_view text);
  std::string serialize() const;
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return pieces_.size(); }
  const std::vector<Merge>& merges() const { return merges_; }
  static bool is_special(TokenId id) { return id >= kBos && id < kFirstMerge; }
  static std::string_view special_name(TokenId id);

  // Greedy longest match over byte pieces; never emits special ids.
  std::vector<TokenId> encode(std::string_view text) const;
  // Special ids render as their literal names, e.g. "<|eos|>".
  std::string decode(std::span<const TokenId> ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.merges_ == b.merges_; }

 private:
  void build();

  std::vector<Merge> merges_;
  std::vector<std::string> pieces_;
  // Byte trie over pieces: node -> child per byte (0 = none), token at node.
  std::vector<std::array<std::int32_t, 256>> trie_;
  std::vector<TokenId> trie_token_;
};

enum class Role { kUser, kAssistant };

struct ChatTurn {
  Role role = Role::kUser;
  std::string text;
  std::size_t image_count = 0;
};

struct TokenizedSample {
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> image_slots;
  // [begin, end) token range of each user/assistant exchange.
  std::vector<std::pair<std::size_t, std::size_t>> turn_boundaries;

  // Length once every IMAGE placeholder expands to `tokens_per_image` tokens.
  std::size_t expanded_length(std::size_t tokens_per_image) const {
    return ids.size() + image_slots.size() * tokens_per_image - image_slots.size();
  }
};

// Renders alternating user/assistant turns, starting with the user:
//
//   BOS USER [IMAGE (NEWLINE_SEP IMAGE)*] text ASSISTANT answer EOS   (per exchange)
//
// A trailing user turn ends with ASSISTANT, ready for generation. The loss
// mask covers answer tokens and their EOS only. Throws RoleError on bad role
// order or assistant images, InputError on an empty answer, and
// ContextLengthError when the expanded length exceeds `ctx_limit`.
TokenizedSample render_chat(const Vocab& vocab, std::span<const ChatTurn> turns,
                            std::size_t ctx_limit, std::size_t tokens_per_image);

}  // namespace mmchat
