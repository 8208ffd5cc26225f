#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <thread>

#include "nback/json_util.hpp"
#include "nback/subjects.hpp"

namespace nback {

using json = nlohmann::json;
using jsonutil::field;
using jsonutil::field_or;

json to_json(const RemoteConfig& c) {
  // The key itself is never recorded, only where it comes from.
  return {{"type", "remote"},
          {"url", c.url},
          {"model", c.model},
          {"api_key_env", c.api_key_env},
          {"decoding", to_json(c.decoding)},
          {"max_attempts", c.max_attempts},
          {"backoff_ms", c.backoff_ms},
          {"timeout_s", c.timeout_s}};
}

RemoteConfig remote_from_json(const json& j) {
  RemoteConfig c;
  c.url = field<std::string>(j, "url", "subject");
  c.model = field<std::string>(j, "model", "subject");
  c.api_key_env = field_or<std::string>(j, "api_key_env", c.api_key_env, "subject");
  c.decoding = decoding_from_json(j.value("decoding", json()));
  c.max_attempts = field_or<int>(j, "max_attempts", c.max_attempts, "subject");
  c.backoff_ms = field_or<int>(j, "backoff_ms", c.backoff_ms, "subject");
  c.timeout_s = field_or<int>(j, "timeout_s", c.timeout_s, "subject");
  if (c.max_attempts < 1) throw ValidationError("subject.max_attempts must be >= 1");
  return c;
}

namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

Endpoint split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("remote url needs a scheme: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  if (path_begin == std::string::npos) return {url, "/"};
  return {url.substr(0, path_begin), url.substr(path_begin)};
}

}  // namespace

RemoteSubject::RemoteSubject(RemoteConfig config) : config_(std::move(config)) { split_url(config_.url); }

json RemoteSubject::describe() const { return to_json(config_); }

std::string RemoteSubject::request_body(const Transcript& t) const {
  json body{{"model", config_.model},
            {"messages", messages_json(t)},
            {"temperature", config_.decoding.temperature},
            {"max_tokens", config_.decoding.max_tokens},
            {"logprobs", config_.decoding.logprobs}};
  if (config_.decoding.seed) body["seed"] = *config_.decoding.seed;
  return body.dump();
}

std::string RemoteSubject::generate(const Transcript& t) {
  if (!t.ends_with_user()) throw InvariantViolation("transcript must end with a user turn");
  const Endpoint ep = split_url(config_.url);
  const std::string body = request_body(t);

  httplib::Client client(ep.origin);
  client.set_connection_timeout(config_.timeout_s, 0);
  client.set_read_timeout(config_.timeout_s, 0);
  client.set_write_timeout(config_.timeout_s, 0);
  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
    headers.emplace("Authorization", std::string("Bearer ") + key);

  std::string last_error;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    if (attempt > 1)
      std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long>(config_.backoff_ms) << (attempt - 2)));
    auto res = client.Post(ep.path, headers, body, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200)
      throw TransportError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200), attempt);
    try {
      const json doc = json::parse(res->body);
      return doc.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw TransportError(std::string("malformed completion response: ") + e.what(), attempt);
    }
  }
  throw TransportError(last_error, config_.max_attempts);
}

}  // namespace nback
