#include "mmchat/remote.hpp"

#include <cstdlib>

#include "httplib.h"
#include "json.hpp"
#include "mmchat/errors.hpp"

namespace mmchat {

bool is_refusal(const std::string& text, const std::vector<std::string>& patterns) {
  for (const auto& p : patterns) {
    if (std::regex_search(text, std::regex(p, std::regex::ECMAScript | std::regex::icase))) {
      return true;
    }
  }
  return false;
}

RetryOutcome query_with_retry(const RemoteEndpoint& endpoint, const std::string& body,
                              const Transport& transport) {
  if (endpoint.max_attempts == 0) throw InputError("max_attempts must be at least 1");
  RetryOutcome out;
  while (out.attempts < endpoint.max_attempts) {
    ++out.attempts;
    Attempt attempt;
    try {
      attempt.text = transport(body);
      attempt.kind = is_refusal(attempt.text, endpoint.refusal_patterns) ? AttemptKind::kRefusal
                                                                          : AttemptKind::kAnswer;
    } catch (const std::exception& e) {
      attempt.kind = AttemptKind::kTransportFailure;
      attempt.text = e.what();
    }
    out.transcripts.push_back(attempt);
    if (attempt.kind == AttemptKind::kAnswer) {
      out.success = true;
      out.answer = attempt.text;
      break;
    }
  }
  return out;
}

Transport http_transport(const RemoteEndpoint& endpoint) {
  const std::string& url = endpoint.url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos || url.substr(0, scheme_end) != "http") {
    throw InputError("remote url must look like http://host:port/path, got '" + url + "'");
  }
  const auto path_begin = url.find('/', scheme_end + 3);
  const std::string origin = url.substr(0, path_begin);
  const std::string path = path_begin == std::string::npos ? "/v1/chat" : url.substr(path_begin);
  std::string token;
  if (!endpoint.token_env.empty()) {
    const char* value = std::getenv(endpoint.token_env.c_str());
    if (!value) throw InputError("environment variable " + endpoint.token_env + " is not set");
    token = value;
  }
  return [origin, path, token](const std::string& body) {
    httplib::Client client(origin);
    client.set_read_timeout(120, 0);
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    const auto res = client.Post(path, headers, body, "application/json");
    if (!res) throw IoError("transport failure: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      throw IoError("remote returned HTTP " + std::to_string(res->status));
    }
    try {
      return nlohmann::json::parse(res->body).at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("unreadable remote reply: ") + e.what());
    }
  };
}

}  // namespace mmchat
