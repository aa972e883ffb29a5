#pragma once

// Remote chat client with resubmission after refusals.

#include <functional>
#include <optional>
#include <regex>
#include <string>
#include <vector>

namespace mmchat {

struct RemoteEndpoint {
  std::string url;        // http://host:port/path
  std::string token_env;  // environment variable holding the bearer token
  std::size_t max_attempts = 3;
  std::vector<std::string> refusal_patterns{"cannot provide", "consult a .* professional",
                                            "I['’]m sorry, I can['’]t"};
  bool send_decode_params = false;
};

enum class AttemptKind { kAnswer, kRefusal, kTransportFailure };

struct Attempt {
  AttemptKind kind = AttemptKind::kAnswer;
  std::string text;  // response text or transport error
};

struct RetryOutcome {
  bool success = false;
  std::string answer;
  std::size_t attempts = 0;
  std::vector<Attempt> transcripts;
};

// Returns the reply text or throws on transport failure.
using Transport = std::function<std::string(const std::string& body)>;

bool is_refusal(const std::string& text, const std::vector<std::string>& patterns);

// Resubmits the identical body after each refusal or transport failure, up to
// max_attempts. Throws InputError when max_attempts is 0.
RetryOutcome query_with_retry(const RemoteEndpoint& endpoint, const std::string& body,
                              const Transport& transport);

// POSTs JSON to endpoint.url and returns the "text" field of the reply.
Transport http_transport(const RemoteEndpoint& endpoint);

}  // namespace mmchat
