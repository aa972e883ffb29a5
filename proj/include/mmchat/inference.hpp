#pragma once

// Greedy decoding, chat assembly and the HTTP chat service.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmchat/checkpoint.hpp"
#include "mmchat/image.hpp"

namespace mmchat {

struct DecodeResult {
  std::vector<TokenId> tokens;  // EOS excluded
  bool stopped_at_eos = false;
  bool truncated = false;  // context filled before EOS or max_new
};

// Argmax of one logits row; ties go to the lowest id.
TokenId argmax_token(const Tensor& logits, std::size_t row);

// Appends argmax tokens after `prefix` ([T, lm_dim] embeddings) until EOS or
// `max_new` tokens. The cached path reuses rotated keys and values; the
// uncached path re-runs the whole sequence each step.
DecodeResult greedy_decode(const Stack& stack, const Tensor& prefix, std::size_t max_new,
                           bool use_cache = true);

// Seeded temperature sampling; the same seed gives the same tokens.
DecodeResult sample_decode(const Stack& stack, const Tensor& prefix, std::size_t max_new,
                           double temperature, std::uint64_t seed);

struct ChatMessage {
  Role role = Role::kUser;
  std::string text;
  std::vector<Image> images;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  std::size_t max_new_tokens = 64;
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct ChatReply {
  std::string text;
  std::size_t prompt_tokens = 0;  // after image expansion
  std::size_t completion_tokens = 0;
  bool truncated = false;
};

// Body: {messages:[{role, text, images?:[base64 PNG]}], max_new_tokens?, greedy?,
// temperature?, seed?}. Throws InputError on malformed payloads.
ChatRequest parse_chat_request(const std::string& body);
std::string chat_request_to_json(const ChatRequest& request, bool include_decode_params = true);
std::string chat_reply_to_json(const ChatReply& reply);

// Renders the whole history, which must end with a user message, and decodes
// the next assistant message. Throws RoleError, InputError or ContextLengthError.
ChatReply chat(const ModelBundle& bundle, const ChatRequest& request);

// Stateless HTTP front end: POST /v1/chat and GET /healthz.
class ChatServer {
 public:
  explicit ChatServer(std::shared_ptr<const ModelBundle> bundle);
  ~ChatServer();
  ChatServer(const ChatServer&) = delete;
  ChatServer& operator=(const ChatServer&) = delete;

  // Binds and returns the port; port 0 picks a free one.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mmchat
