#include "mmchat/inference.hpp"

#include <cmath>
#include <random>

#include "json.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/ops.hpp"

namespace mmchat {

TokenId argmax_token(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.extent(1);
  const float* p = logits.data().data() + row * v;
  std::size_t best = 0;
  for (std::size_t i = 1; i < v; ++i) {
    if (p[i] > p[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

namespace {

using Picker = std::function<TokenId(const Tensor&, std::size_t)>;

DecodeResult decode(const Stack& stack, const Tensor& prefix, std::size_t max_new, bool use_cache,
                    const Picker& pick) {
  NoGradGuard no_grad;
  DecodeResult out;
  if (max_new == 0) return out;
  const std::size_t ctx = stack.config().ctx_limit;
  const std::size_t t0 = prefix.extent(0);
  if (t0 == 0) throw InputError("decode: empty prefix");

  KvCache<float> cache;
  Tensor sequence = prefix;
  Tensor logits = use_cache ? stack.lm_forward_cached(cache, prefix) : stack.lm_forward(prefix);
  std::size_t row = logits.extent(0) - 1;
  for (;;) {
    const TokenId tok = pick(logits, row);
    if (tok == Vocab::kEos) {
      out.stopped_at_eos = true;
      break;
    }
    out.tokens.push_back(tok);
    if (out.tokens.size() >= max_new) break;
    if (t0 + out.tokens.size() > ctx) {
      out.truncated = true;
      break;
    }
    const std::vector<TokenId> next{tok};
    const auto emb = stack.embed_tokens(next);
    if (use_cache) {
      logits = stack.lm_forward_cached(cache, emb);
      row = 0;
    } else {
      sequence = ops::concat<float>({sequence, emb}, 0);
      logits = stack.lm_forward(sequence);
      row = logits.extent(0) - 1;
    }
  }
  return out;
}

}  // namespace

DecodeResult greedy_decode(const Stack& stack, const Tensor& prefix, std::size_t max_new,
                           bool use_cache) {
  return decode(stack, prefix, max_new, use_cache, argmax_token);
}

DecodeResult sample_decode(const Stack& stack, const Tensor& prefix, std::size_t max_new,
                           double temperature, std::uint64_t seed) {
  if (!(temperature > 0.0)) throw InputError("sampling temperature must be positive");
  std::mt19937_64 rng(seed);
  const Picker pick = [&](const Tensor& logits, std::size_t row) {
    const std::size_t v = logits.extent(1);
    const float* p = logits.data().data() + row * v;
    double top = p[0];
    for (std::size_t i = 1; i < v; ++i) top = std::max(top, static_cast<double>(p[i]));
    std::vector<double> weights(v);
    for (std::size_t i = 0; i < v; ++i) weights[i] = std::exp((p[i] - top) / temperature);
    std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
    return static_cast<TokenId>(dist(rng));
  };
  return decode(stack, prefix, max_new, true, pick);
}

ChatRequest parse_chat_request(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("request is not valid JSON: ") + e.what());
  }
  try {
    ChatRequest req;
    for (const auto& m : j.at("messages")) {
      ChatMessage msg;
      const auto role = m.at("role").get<std::string>();
      if (role == "user") {
        msg.role = Role::kUser;
      } else if (role == "assistant") {
        msg.role = Role::kAssistant;
      } else {
        throw InputError("unknown role '" + role + "'");
      }
      msg.text = m.at("text").get<std::string>();
      if (m.contains("images")) {
        for (const auto& img : m.at("images")) {
          const auto bytes = base64_decode(img.get<std::string>());
          msg.images.push_back(decode_png(bytes));
        }
      }
      req.messages.push_back(std::move(msg));
    }
    req.max_new_tokens = j.value("max_new_tokens", req.max_new_tokens);
    req.greedy = j.value("greedy", req.greedy);
    req.temperature = j.value("temperature", req.temperature);
    req.seed = j.value("seed", req.seed);
    return req;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed chat request: ") + e.what());
  }
}

std::string chat_request_to_json(const ChatRequest& request, bool include_decode_params) {
  nlohmann::ordered_json j;
  auto messages = nlohmann::ordered_json::array();
  for (const auto& m : request.messages) {
    nlohmann::ordered_json msg;
    msg["role"] = m.role == Role::kUser ? "user" : "assistant";
    msg["text"] = m.text;
    if (!m.images.empty()) {
      auto images = nlohmann::ordered_json::array();
      for (const auto& img : m.images) images.push_back(base64_encode(encode_png(img)));
      msg["images"] = std::move(images);
    }
    messages.push_back(std::move(msg));
  }
  j["messages"] = std::move(messages);
  if (include_decode_params) {
    j["max_new_tokens"] = request.max_new_tokens;
    j["greedy"] = request.greedy;
  }
  return j.dump();
}

std::string chat_reply_to_json(const ChatReply& reply) {
  nlohmann::ordered_json j;
  j["text"] = reply.text;
  j["prompt_tokens"] = reply.prompt_tokens;
  j["completion_tokens"] = reply.completion_tokens;
  j["truncated"] = reply.truncated;
  // Byte-level decoding can split a multi-byte character; send U+FFFD instead.
  return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

ChatReply chat(const ModelBundle& bundle, const ChatRequest& request) {
  NoGradGuard no_grad;
  if (request.messages.empty()) throw InputError("chat: no messages");
  if (request.messages.back().role != Role::kUser) {
    throw RoleError("chat: the last message must come from the user");
  }
  const auto& stack = bundle.stack;
  const auto& config = stack.config();
  std::vector<ChatTurn> turns;
  std::vector<Tensor> image_tokens;
  for (const auto& m : request.messages) {
    turns.push_back({m.role, m.text, m.images.size()});
    if (m.role != Role::kUser) continue;
    for (const auto& img : m.images) {
      image_tokens.push_back(
          stack.pool_and_project(stack.encode_image(preprocess_image(img, config.image_size))));
    }
  }
  const auto sample = render_chat(bundle.vocab, turns, config.ctx_limit, config.pool_latents);
  const auto assembled = stack.assemble_multimodal(sample, image_tokens);
  const auto result = request.greedy
                          ? greedy_decode(stack, assembled.embeddings, request.max_new_tokens)
                          : sample_decode(stack, assembled.embeddings, request.max_new_tokens,
                                          request.temperature, request.seed);
  ChatReply reply;
  reply.text = bundle.vocab.decode(result.tokens);
  reply.prompt_tokens = assembled.ids.size();
  reply.completion_tokens = result.tokens.size();
  reply.truncated = result.truncated;
  return reply;
}

}  // namespace mmchat
