#include <netdb.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>

#include "nback/json_util.hpp"
#include "nback/subjects.hpp"

namespace nback {

using json = nlohmann::json;
using jsonutil::field;
using jsonutil::field_or;

json to_json(const BridgeConfig& c) {
  return {{"type", "bridge"},
          {"host", c.host},
          {"port", c.port},
          {"decoding", to_json(c.decoding)},
          {"timeout_s", c.timeout_s}};
}

BridgeConfig bridge_from_json(const json& j) {
  BridgeConfig c;
  c.host = field_or<std::string>(j, "host", c.host, "subject");
  c.port = field_or<int>(j, "port", c.port, "subject");
  c.decoding = decoding_from_json(j.value("decoding", json()));
  c.timeout_s = field_or<int>(j, "timeout_s", c.timeout_s, "subject");
  return c;
}

BridgeConnection::BridgeConnection(BridgeConfig config) : config_(std::move(config)) {}

BridgeConnection::~BridgeConnection() {
  if (fd_ >= 0) ::close(fd_);
}

void BridgeConnection::connect_locked() {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const std::string port = std::to_string(config_.port);
  if (int rc = ::getaddrinfo(config_.host.c_str(), port.c_str(), &hints, &found); rc != 0)
    throw TransportError("bridge address " + config_.host + ": " + ::gai_strerror(rc), 1);
  std::string error = "no usable address";
  for (addrinfo* a = found; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
      timeval tv{config_.timeout_s, 0};
      ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
      fd_ = fd;
      break;
    }
    error = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(found);
  if (fd_ < 0) throw TransportError("cannot connect to bridge at " + config_.host + ":" + port + ": " + error, 1);
}

json BridgeConnection::call(json request) {
  std::lock_guard lock(mutex_);
  const auto fail = [&](const std::string& what) {
    ::close(fd_);
    fd_ = -1;
    buffer_.clear();
    return TransportError("bridge " + what, 1);
  };
  if (fd_ < 0) connect_locked();

  const std::uint64_t id = next_id_++;
  request["id"] = id;
  const std::string line = request.dump() + "\n";
  for (std::size_t sent = 0; sent < line.size();) {
    const ssize_t k = ::send(fd_, line.data() + sent, line.size() - sent, MSG_NOSIGNAL);
    if (k <= 0) throw fail(std::string("send failed: ") + std::strerror(errno));
    sent += static_cast<std::size_t>(k);
  }

  std::size_t eol;
  while ((eol = buffer_.find('\n')) == std::string::npos) {
    char chunk[65536];
    const ssize_t k = ::recv(fd_, chunk, sizeof chunk, 0);
    if (k == 0) throw fail("closed the connection");
    if (k < 0) throw fail(std::string("receive failed: ") + std::strerror(errno));
    buffer_.append(chunk, static_cast<std::size_t>(k));
  }
  const std::string reply = buffer_.substr(0, eol);
  buffer_.erase(0, eol + 1);

  json doc;
  try {
    doc = json::parse(reply);
  } catch (const json::parse_error& e) {
    throw fail(std::string("sent malformed JSON: ") + e.what());
  }
  if (doc.value("id", std::uint64_t{0}) != id) throw fail("answered out of order");
  if (!doc.value("ok", false)) {
    const json err = doc.value("error", json::object());
    const std::string type = err.value("type", "error");
    const std::string message = err.value("message", "unspecified bridge error");
    if (type == "unsupported") throw UnsupportedOperation("bridge: " + message);
    throw TransportError("bridge " + type + ": " + message, 1);
  }
  return doc;
}

double sum_span_logprobs(const json& tokens, std::string_view reply, CharRange span) {
  if (!tokens.is_array() || tokens.empty()) throw AlignmentError("no tokens cover the scored span", -1);
  const auto boundaries = [](std::size_t b, std::size_t e) {
    return "[" + std::to_string(b) + ", " + std::to_string(e) + ")";
  };
  double sum = 0;
  std::size_t first = 0, last = 0;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const auto b = field<std::size_t>(tokens[k], "begin", "tokens[" + std::to_string(k) + "]");
    const auto e = field<std::size_t>(tokens[k], "end", "tokens[" + std::to_string(k) + "]");
    const auto lp = field<double>(tokens[k], "logprob", "tokens[" + std::to_string(k) + "]");
    if (b >= e || e > reply.size())
      throw AlignmentError("token " + boundaries(b, e) + " lies outside the reply", static_cast<long>(k));
    if (k == 0) first = b;
    else if (b != last)
      throw AlignmentError("token " + boundaries(b, e) + " does not continue at " + std::to_string(last),
                           static_cast<long>(k));
    for (std::size_t c = b; c < e; ++c) {
      const bool inside = c >= span.begin && c < span.end;
      if (!inside && !std::isspace(static_cast<unsigned char>(reply[c])))
        throw AlignmentError("token " + boundaries(b, e) + " extends beyond span " +
                                 boundaries(span.begin, span.end) + " over non-space text",
                             static_cast<long>(k));
    }
    if (!std::isfinite(lp) || lp > 0) throw ValidationError("bridge returned logprob " + std::to_string(lp));
    last = e;
    sum += lp;
  }
  if (first > span.begin || last < span.end)
    throw AlignmentError("tokens " + boundaries(first, last) + " do not cover span " +
                             boundaries(span.begin, span.end),
                         static_cast<long>(first > span.begin ? 0 : tokens.size() - 1));
  return sum;
}

BridgeSubject::BridgeSubject(std::shared_ptr<BridgeConnection> connection) : connection_(std::move(connection)) {}

json BridgeSubject::describe() const { return to_json(connection_->config()); }

std::string BridgeSubject::generate(const Transcript& t) {
  if (!t.ends_with_user()) throw InvariantViolation("transcript must end with a user turn");
  const json res = connection_->call(
      {{"kind", "generate"}, {"turns", messages_json(t)}, {"decoding", to_json(connection_->config().decoding)}});
  return field<std::string>(res, "text", "bridge");
}

double BridgeSubject::score(const Transcript& t, std::string_view reply, CharRange span) {
  if (!t.ends_with_user()) throw InvariantViolation("transcript must end with a user turn");
  if (span.begin >= span.end || span.end > reply.size())
    throw AlignmentError("scored span is not inside the forced reply", static_cast<long>(span.begin));
  const json res = connection_->call({{"kind", "score"},
                                      {"turns", messages_json(t)},
                                      {"forced_reply", std::string(reply)},
                                      {"span", {span.begin, span.end}}});
  if (!res.contains("tokens")) throw ParseError("bridge.tokens", "missing field");
  return sum_span_logprobs(res.at("tokens"), reply, span);
}

AttentionArtifacts BridgeSubject::dump_attention(const Transcript& t, const std::filesystem::path& out_dir) {
  const json res =
      connection_->call({{"kind", "dump_attention"}, {"turns", messages_json(t)}, {"out_dir", out_dir.string()}});
  return {field<std::string>(res, "dump", "bridge"), field<std::string>(res, "token_table", "bridge")};
}

}  // namespace nback
