#include "mmchat/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "mmchat/errors.hpp"

namespace mmchat {

namespace {

constexpr std::array<std::string_view, 7> kSpecialNames = {
    "BOS", "EOS", "PAD", "IMAGE", "NEWLINE_SEP", "USER", "ASSISTANT"};
constexpr std::array<std::string_view, 7> kSpecialLiterals = {
    "<|bos|>", "<|eos|>", "<|pad|>", "<|image|>", "<|sep|>", "<|user|>", "<|assistant|>"};

constexpr std::string_view kHeader = "mmchat-vocab 1";

}  // namespace

Vocab::Vocab() { build(); }

Vocab::Vocab(std::vector<Merge> merges) : merges_(std::move(merges)) { build(); }

void Vocab::build() {
  pieces_.clear();
  pieces_.reserve(kFirstMerge + merges_.size());
  for (int b = 0; b < kByteCount; ++b) pieces_.emplace_back(1, static_cast<char>(b));
  for (TokenId id = kBos; id < kFirstMerge; ++id) pieces_.emplace_back();
  for (const auto& [left, right] : merges_) {
    const auto next = static_cast<TokenId>(pieces_.size());
    auto valid = [&](TokenId id) { return id >= 0 && id < next && !is_special(id); };
    if (!valid(left) || !valid(right)) {
      throw ParseError("merge (" + std::to_string(left) + ", " + std::to_string(right) +
                       ") refers to an unknown or special id");
    }
    pieces_.push_back(pieces_[left] + pieces_[right]);
  }

  trie_.assign(1, {});
  trie_token_.assign(1, -1);
  for (TokenId id = 0; id < static_cast<TokenId>(pieces_.size()); ++id) {
    if (is_special(id)) continue;
    std::int32_t node = 0;
    for (unsigned char c : pieces_[id]) {
      if (trie_[node][c] == 0) {
        trie_[node][c] = static_cast<std::int32_t>(trie_.size());
        trie_.emplace_back();
        trie_.back().fill(0);
        trie_token_.push_back(-1);
      }
      node = trie_[node][c];
    }
    // A merge can reproduce an existing piece; keep the earliest id.
    if (trie_token_[node] < 0) trie_token_[node] = id;
  }
}

std::string_view Vocab::special_name(TokenId id) {
  if (!is_special(id)) throw RangeError("token " + std::to_string(id) + " is not special");
  return kSpecialNames[id - kBos];
}

Vocab Vocab::train(std::span<const std::string> texts, std::size_t merge_count) {
  // Distinct texts with multiplicities keep the pair counts cheap on
  // repetitive corpora.
  std::map<std::string, std::size_t> distinct;
  for (const auto& t : texts) ++distinct[t];
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> weight;
  for (const auto& [text, n] : distinct) {
    std::vector<TokenId> s;
    s.reserve(text.size());
    for (unsigned char c : text) s.push_back(c);
    seqs.push_back(std::move(s));
    weight.push_back(n);
  }

  std::vector<Merge> merges;
  TokenId next = kFirstMerge;
  for (std::size_t m = 0; m < merge_count; ++m) {
    std::unordered_map<std::uint64_t, std::size_t> counts;
    auto key = [](TokenId a, TokenId b) {
      return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
             static_cast<std::uint32_t>(b);
    };
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const auto& seq = seqs[s];
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) counts[key(seq[i], seq[i + 1])] += weight[s];
    }
    std::uint64_t best_key = 0;
    std::size_t best_count = 1;  // a pair seen once gives no compression
    for (const auto& [k, count] : counts) {
      if (count > best_count || (count == best_count && best_count > 1 && k < best_key)) {
        best_key = k;
        best_count = count;
      }
    }
    Merge best{-1, -1};
    if (best_count > 1) {
      best = {static_cast<TokenId>(best_key >> 32), static_cast<TokenId>(best_key & 0xffffffffu)};
    }
    if (best.first < 0) break;
    for (auto& seq : seqs) {
      std::vector<TokenId> out;
      out.reserve(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == best.first && seq[i + 1] == best.second) {
          out.push_back(next);
          ++i;
        } else {
          out.push_back(seq[i]);
        }
      }
      seq = std::move(out);
    }
    merges.push_back(best);
    ++next;
  }
  return Vocab(std::move(merges));
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::int32_t node = 0;
    TokenId best = -1;
    std::size_t best_len = 0;
    for (std::size_t i = pos; i < text.size(); ++i) {
      node = trie_[node][static_cast<unsigned char>(text[i])];
      if (node == 0) break;
      if (trie_token_[node] >= 0) {
        best = trie_token_[node];
        best_len = i - pos + 1;
      }
    }
    ids.push_back(best);
    pos += best_len;
  }
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw RangeError("cannot decode unknown token id " + std::to_string(id));
    }
    if (is_special(id)) {
      out += kSpecialLiterals[id - kBos];
    } else {
      out += pieces_[id];
    }
  }
  return out;
}

std::string Vocab::serialize() const {
  std::ostringstream os;
  os << kHeader << '\n';
  for (TokenId id = kBos; id < kFirstMerge; ++id) {
    os << "special " << special_name(id) << ' ' << id << '\n';
  }
  os << "merges " << merges_.size() << '\n';
  for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
  return os.str();
}

Vocab Vocab::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line) || line != kHeader) throw ParseError("vocab: missing header");
  for (TokenId id = kBos; id < kFirstMerge; ++id) {
    std::string tag, name;
    TokenId value = -1;
    if (!std::getline(is, line)) throw ParseError("vocab: truncated special block");
    std::istringstream ls(line);
    ls >> tag >> name >> value;
    if (tag != "special" || name != special_name(id) || value != id) {
      throw ParseError("vocab: special block mismatch at line '" + line + "'");
    }
  }
  std::string tag;
  std::size_t count = 0;
  if (!std::getline(is, line)) throw ParseError("vocab: missing merges line");
  {
    std::istringstream ls(line);
    ls >> tag >> count;
    if (tag != "merges" || ls.fail()) throw ParseError("vocab: bad merges line '" + line + "'");
  }
  std::vector<Merge> merges;
  merges.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw ParseError("vocab: expected " + std::to_string(count) +
                                                  " merges, got " + std::to_string(i));
    std::istringstream ls(line);
    Merge m{-1, -1};
    ls >> m.first >> m.second;
    if (ls.fail()) throw ParseError("vocab: bad merge line '" + line + "'");
    merges.push_back(m);
  }
  return Vocab(std::move(merges));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocab file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file " + path.string());
  out << serialize();
}

TokenizedSample render_chat(const Vocab& vocab, std::span<const ChatTurn> turns,
                            std::size_t ctx_limit, std::size_t tokens_per_image) {
  if (turns.empty()) throw InputError("render_chat: no turns");
  TokenizedSample out;
  auto push = [&](TokenId id, bool loss) {
    out.ids.push_back(id);
    out.loss_mask.push_back(loss ? 1 : 0);
  };

  for (std::size_t i = 0; i < turns.size(); ++i) {
    const ChatTurn& turn = turns[i];
    const Role expected = i % 2 == 0 ? Role::kUser : Role::kAssistant;
    if (turn.role != expected) {
      throw RoleError("render_chat: turn " + std::to_string(i) + " should be " +
                      (expected == Role::kUser ? "user" : "assistant"));
    }
    if (turn.role == Role::kUser) {
      const std::size_t begin = out.ids.size();
      push(Vocab::kBos, false);
      push(Vocab::kUser, false);
      for (std::size_t img = 0; img < turn.image_count; ++img) {
        if (img > 0) push(Vocab::kNewlineSep, false);
        out.image_slots.push_back(out.ids.size());
        push(Vocab::kImage, false);
      }
      for (auto id : vocab.encode(turn.text)) push(id, false);
      push(Vocab::kAssistant, false);
      out.turn_boundaries.emplace_back(begin, out.ids.size());
    } else {
      if (turn.image_count != 0) {
        throw RoleError("render_chat: images attached to assistant turn " + std::to_string(i));
      }
      if (turn.text.empty()) {
        throw InputError("render_chat: empty answer in turn " + std::to_string(i));
      }
      for (auto id : vocab.encode(turn.text)) push(id, true);
      push(Vocab::kEos, true);
      out.turn_boundaries.back().second = out.ids.size();
    }
  }

  const std::size_t length = out.expanded_length(tokens_per_image);
  if (length > ctx_limit) {
    throw ContextLengthError("render_chat: " + std::to_string(length) +
                             " tokens exceed the context limit of " + std::to_string(ctx_limit));
  }
  return out;
}

}  // namespace mmchat
