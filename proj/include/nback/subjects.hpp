#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "nback/dialogue.hpp"

namespace nback {

struct SubjectCapabilities {
  bool can_generate = false;
  bool can_score = false;
  bool can_dump_attention = false;
};

/// Half-open character range [begin, end) inside a forced reply.
struct CharRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const CharRange&) const = default;
};

struct StepScore {
  int step = 0;
  double logprob = 0.0;  // <= 0, finite
  bool operator==(const StepScore&) const = default;
};

/// Decoding settings sent to model subjects and recorded with every run.
struct DecodingSettings {
  double temperature = 0.0;
  int max_tokens = 256;
  std::optional<std::uint64_t> seed;
  bool logprobs = false;
  bool operator==(const DecodingSettings&) const = default;
};
nlohmann::json to_json(const DecodingSettings& d);
DecodingSettings decoding_from_json(const nlohmann::json& j);

/// Files written by a dump_attention call.
struct AttentionArtifacts {
  std::filesystem::path dump;
  std::filesystem::path token_table;
};

/// Anything that can answer the next turn of a transcript. One instance is
/// one session; a session is used by one trial at a time.
class Subject {
 public:
  virtual ~Subject() = default;
  virtual SubjectCapabilities capabilities() const = 0;

  /// Next assistant message. The transcript must end with a user turn.
  virtual std::string generate(const Transcript& transcript);

  /// Log-probability of the characters in `span` of `forced_reply`, given the
  /// transcript and the reply prefix before the span.
  virtual double score(const Transcript& transcript, std::string_view forced_reply, CharRange span);

  virtual AttentionArtifacts dump_attention(const Transcript& transcript, const std::filesystem::path& out_dir);

  /// Provenance description stored in run records.
  virtual nlohmann::json describe() const = 0;
};

/// Opens independent per-trial sessions of a configured subject.
class SubjectFactory {
 public:
  virtual ~SubjectFactory() = default;
  virtual SubjectCapabilities capabilities() const = 0;
  virtual std::unique_ptr<Subject> open(std::uint64_t session_seed) const = 0;
  virtual nlohmann::json describe() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted agents

struct ScriptedAgentConfig {
  /// Lag actually performed; unset means "follow the instructed lag".
  std::optional<int> behavior_lag;
  std::optional<int> drift_to;
  std::optional<int> drift_step;
  /// Probability of replacing the retrieval with a uniform letter a-z.
  double retrieval_noise = 0.0;
  /// Probability of copying the lag of a uniformly chosen earlier test reply.
  double imitation = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const ScriptedAgentConfig&) const = default;
};
nlohmann::json to_json(const ScriptedAgentConfig& c);
ScriptedAgentConfig scripted_from_json(const nlohmann::json& j);

/// Rule-following agent with an exactly known response distribution.
///
/// At test step i with stimuli s: the lag is behavior_lag (or the instructed
/// lag), switching to drift_to once i >= drift_step. With probability
/// `imitation` it instead reuses the lag of the reply at a uniformly chosen
/// earlier test step (the smallest lag that reply was consistent with). The
/// retrieval is s[i - lag] or none; with probability `retrieval_noise` it is
/// replaced by a uniform letter. The label follows from the retrieval.
///
/// Outside a test section (no begin_test() yet) it answers interactive
/// questions: every letter of the last "given the sequence ..." list, one
/// line each.
class ScriptedAgent : public Subject {
 public:
  ScriptedAgent(ScriptedAgentConfig config, std::uint64_t session_seed);

  SubjectCapabilities capabilities() const override { return {true, true, false}; }
  std::string generate(const Transcript& transcript) override;
  double score(const Transcript& transcript, std::string_view forced_reply, CharRange span) override;
  nlohmann::json describe() const override;

  /// Exact probability that the next test reply retrieves `x`.
  double retrieval_probability(const Transcript& transcript, MaybeLetter x) const;
  /// Lag in force at test step i before imitation.
  int base_lag(int step, int instructed_lag) const;

 private:
  ScriptedAgentConfig config_;
  std::uint64_t session_seed_;
};

std::unique_ptr<Subject> make_scripted(const ScriptedAgentConfig& config, std::uint64_t session_seed);

/// Assigns probability one to any forced reply. Scoring only.
class CertaintySubject : public Subject {
 public:
  SubjectCapabilities capabilities() const override { return {false, true, false}; }
  double score(const Transcript& transcript, std::string_view forced_reply, CharRange span) override;
  nlohmann::json describe() const override { return {{"type", "certainty"}}; }
};

/// Each answer line is fully correct with probability p, independently;
/// otherwise its retrieval is a uniformly chosen wrong letter.
class BernoulliAgent : public Subject {
 public:
  BernoulliAgent(double p, std::uint64_t session_seed);
  SubjectCapabilities capabilities() const override { return {true, false, false}; }
  std::string generate(const Transcript& transcript) override;
  nlohmann::json describe() const override { return {{"type", "bernoulli"}, {"p", p_}}; }

 private:
  double p_;
  std::uint64_t session_seed_;
};

/// Letters of the last "given the sequence a, b, c," question in `text`.
std::optional<LetterSeq> find_question_sequence(std::string_view text);

// ---------------------------------------------------------------------------
// Remote chat-completions subject

struct RemoteConfig {
  std::string url;  // full endpoint, e.g. http://127.0.0.1:8000/v1/chat/completions
  std::string model;
  std::string api_key_env = "NBACK_API_KEY";
  DecodingSettings decoding;
  int max_attempts = 3;
  int backoff_ms = 500;
  int timeout_s = 120;
};
nlohmann::json to_json(const RemoteConfig& c);
RemoteConfig remote_from_json(const nlohmann::json& j);

/// Role-tagged message list for a transcript.
nlohmann::json messages_json(const Transcript& transcript);

class RemoteSubject : public Subject {
 public:
  explicit RemoteSubject(RemoteConfig config);
  SubjectCapabilities capabilities() const override { return {true, false, false}; }
  std::string generate(const Transcript& transcript) override;
  nlohmann::json describe() const override;

  /// Exact request body for a transcript. Stable for identical inputs, so
  /// retries resend the same bytes.
  std::string request_body(const Transcript& transcript) const;

 private:
  RemoteConfig config_;
};

// ---------------------------------------------------------------------------
// Local model bridge client (newline-delimited JSON over TCP)

struct BridgeConfig {
  std::string host = "127.0.0.1";
  int port = 7878;
  DecodingSettings decoding;
  int timeout_s = 600;
};
nlohmann::json to_json(const BridgeConfig& c);
BridgeConfig bridge_from_json(const nlohmann::json& j);

/// One TCP connection to the bridge. Requests are serialized; the bridge
/// serves a single model and answers strictly in order.
class BridgeConnection {
 public:
  explicit BridgeConnection(BridgeConfig config);
  ~BridgeConnection();
  BridgeConnection(const BridgeConnection&) = delete;
  BridgeConnection& operator=(const BridgeConnection&) = delete;

  /// Sends one request and returns the matching response payload. Error
  /// responses are rethrown as TransportError or UnsupportedOperation.
  nlohmann::json call(nlohmann::json request);
  const BridgeConfig& config() const { return config_; }

 private:
  void connect_locked();
  BridgeConfig config_;
  std::mutex mutex_;
  int fd_ = -1;
  std::string buffer_;
  std::uint64_t next_id_ = 1;
};

/// Sum of per-token log-probabilities covering `span`. Tokens are
/// {begin, end, logprob} over the forced reply; they must tile a range that
/// contains the span, and any covered character outside the span must be
/// whitespace. Throws AlignmentError otherwise.
double sum_span_logprobs(const nlohmann::json& tokens, std::string_view forced_reply, CharRange span);

class BridgeSubject : public Subject {
 public:
  explicit BridgeSubject(std::shared_ptr<BridgeConnection> connection);
  SubjectCapabilities capabilities() const override { return {true, true, true}; }
  std::string generate(const Transcript& transcript) override;
  double score(const Transcript& transcript, std::string_view forced_reply, CharRange span) override;
  AttentionArtifacts dump_attention(const Transcript& transcript, const std::filesystem::path& out_dir) override;
  nlohmann::json describe() const override;

 private:
  std::shared_ptr<BridgeConnection> connection_;
};

// ---------------------------------------------------------------------------

/// Factory from a subject spec, e.g. {"type": "scripted", "behavior_lag": 2}.
/// Types: scripted, bernoulli, certainty, remote, bridge.
std::shared_ptr<SubjectFactory> make_subject_factory(const nlohmann::json& spec);

}  // namespace nback
