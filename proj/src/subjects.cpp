#include "nback/subjects.hpp"

#include <cctype>
#include <cmath>

#include "nback/json_util.hpp"
#include "nback/rng.hpp"

namespace nback {

using json = nlohmann::json;
using jsonutil::field;
using jsonutil::field_or;

std::string Subject::generate(const Transcript&) { throw UnsupportedOperation("subject cannot generate replies"); }

double Subject::score(const Transcript&, std::string_view, CharRange) {
  throw UnsupportedOperation("subject cannot score forced continuations");
}

AttentionArtifacts Subject::dump_attention(const Transcript&, const std::filesystem::path&) {
  throw UnsupportedOperation("subject cannot dump attention");
}

json to_json(const DecodingSettings& d) {
  json j{{"temperature", d.temperature}, {"max_tokens", d.max_tokens}, {"logprobs", d.logprobs}};
  j["seed"] = d.seed ? json(*d.seed) : json(nullptr);
  return j;
}

DecodingSettings decoding_from_json(const json& j) {
  DecodingSettings d;
  if (j.is_null()) return d;
  d.temperature = field_or<double>(j, "temperature", d.temperature, "decoding");
  d.max_tokens = field_or<int>(j, "max_tokens", d.max_tokens, "decoding");
  d.logprobs = field_or<bool>(j, "logprobs", d.logprobs, "decoding");
  if (j.contains("seed") && !j.at("seed").is_null()) d.seed = field<std::uint64_t>(j, "seed", "decoding");
  if (d.temperature < 0) throw ValidationError("decoding.temperature must be >= 0");
  if (d.max_tokens < 1) throw ValidationError("decoding.max_tokens must be >= 1");
  return d;
}

namespace {

constexpr int kLetterCount = 26;

void require_user_turn(const Transcript& t) {
  if (!t.ends_with_user()) throw InvariantViolation("transcript must end with a user turn");
}

void check_span(std::string_view reply, CharRange span) {
  if (span.begin >= span.end || span.end > reply.size())
    throw AlignmentError("scored span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) +
                             ") is not inside the forced reply of length " + std::to_string(reply.size()),
                         static_cast<long>(span.begin));
}

MaybeLetter back(const LetterSeq& seq, int step, int lag) {
  if (step - lag < 1) return std::nullopt;
  return seq[static_cast<std::size_t>(step - lag - 1)];
}

std::vector<MaybeLetter> recent_of(const LetterSeq& seq, int step, int count) {
  std::vector<MaybeLetter> out;
  for (int k = 1; k <= count; ++k) out.push_back(back(seq, step, k));
  return out;
}

std::string answer(const LetterSeq& seq, int step, MaybeLetter retrieved, const FormatVariant& variant) {
  const Letter cur = seq[static_cast<std::size_t>(step - 1)];
  const Label label = (retrieved && *retrieved == cur) ? Label::identical : Label::different;
  std::vector<MaybeLetter> recent;
  if (variant.kind == FormatVariant::Kind::recite) recent = recent_of(seq, step, variant.lag);
  return format_response(cur, retrieved, label, variant, recent);
}

// Stream for one decision point of a session.
SplitMix64 decision_rng(std::uint64_t session, std::uint64_t a, std::uint64_t b) {
  return SplitMix64(derive_seed(derive_seed(session, a), b));
}

constexpr std::uint64_t kTestTag = 1;
constexpr std::uint64_t kInteractiveTag = 2;

struct TestStep {
  LetterSeq stimuli;
  std::vector<std::string> replies;
  int step = 0;
};

TestStep test_step(const Transcript& t) {
  require_user_turn(t);
  TestStep s;
  s.stimuli = t.test_stimuli();
  s.replies = t.test_replies();
  s.step = static_cast<int>(s.stimuli.size());
  return s;
}

// Text in a scored span: a letter, "none", or a malformed slot.
std::optional<MaybeLetter> slot_value(std::string_view text) {
  if (text.size() == 1 && Letter::valid(text[0])) return MaybeLetter{Letter::from(text[0])};
  if (text.size() == 4) {
    std::string lower;
    for (char c : text) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "none") return MaybeLetter{};
  }
  return std::nullopt;
}

}  // namespace

// ---------------------------------------------------------------------------

void ScriptedAgentConfig::validate() const {
  if (behavior_lag && *behavior_lag < 1) throw ValidationError("behavior_lag must be >= 1");
  if (drift_to.has_value() != drift_step.has_value())
    throw ValidationError("drift_to and drift_step must be given together");
  if (drift_to && *drift_to < 1) throw ValidationError("drift_to must be >= 1");
  if (drift_step && *drift_step < 1) throw ValidationError("drift_step must be >= 1");
  if (!(retrieval_noise >= 0.0 && retrieval_noise <= 1.0)) throw ValidationError("retrieval_noise must be in [0, 1]");
  if (!(imitation >= 0.0 && imitation <= 1.0)) throw ValidationError("imitation must be in [0, 1]");
}

json to_json(const ScriptedAgentConfig& c) {
  const auto opt = [](const std::optional<int>& v) { return v ? json(*v) : json(nullptr); };
  return {{"type", "scripted"},
          {"behavior_lag", opt(c.behavior_lag)},
          {"drift_to", opt(c.drift_to)},
          {"drift_step", opt(c.drift_step)},
          {"retrieval_noise", c.retrieval_noise},
          {"imitation", c.imitation},
          {"seed", c.seed}};
}

ScriptedAgentConfig scripted_from_json(const json& j) {
  ScriptedAgentConfig c;
  const auto opt = [&](const char* key) -> std::optional<int> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return field<int>(j, key, "subject");
  };
  c.behavior_lag = opt("behavior_lag");
  c.drift_to = opt("drift_to");
  c.drift_step = opt("drift_step");
  c.retrieval_noise = field_or<double>(j, "retrieval_noise", 0.0, "subject");
  c.imitation = field_or<double>(j, "imitation", 0.0, "subject");
  c.seed = field_or<std::uint64_t>(j, "seed", 0, "subject");
  c.validate();
  return c;
}

ScriptedAgent::ScriptedAgent(ScriptedAgentConfig config, std::uint64_t session_seed)
    : config_(std::move(config)), session_seed_(session_seed) {
  config_.validate();
}

int ScriptedAgent::base_lag(int step, int instructed_lag) const {
  if (config_.drift_step && step >= *config_.drift_step) return *config_.drift_to;
  return config_.behavior_lag.value_or(instructed_lag);
}

namespace {

// Smallest lag the reply at test step j retrieved consistently, if any.
std::optional<int> reply_lag(const LetterSeq& stimuli, int j, const std::string& reply, const FormatVariant& v) {
  const auto outcome = parse_response(reply, v);
  const ParsedResponse* p = as_parsed(outcome);
  if (!p || !p->retrieved) return std::nullopt;
  for (int m = 1; m < j; ++m)
    if (stimuli[static_cast<std::size_t>(j - m - 1)] == *p->retrieved) return m;
  return std::nullopt;
}

}  // namespace

double ScriptedAgent::retrieval_probability(const Transcript& t, MaybeLetter x) const {
  const TestStep s = test_step(t);
  const int i = s.step;
  const int base = base_lag(i, t.instructed_lag());
  const double eps = config_.retrieval_noise;
  const double h = i > 1 ? config_.imitation : 0.0;

  const auto hit = [&](int lag) { return back(s.stimuli, i, lag) == x ? 1.0 : 0.0; };
  double rule = (1.0 - h) * hit(base);
  if (h > 0) {
    double copied = 0;
    for (int j = 1; j < i; ++j)
      copied += hit(reply_lag(s.stimuli, j, s.replies[static_cast<std::size_t>(j - 1)], t.variant()).value_or(base));
    rule += h * copied / (i - 1);
  }
  return (1.0 - eps) * rule + (x ? eps / kLetterCount : 0.0);
}

std::string ScriptedAgent::generate(const Transcript& t) {
  require_user_turn(t);
  const FormatVariant& v = t.variant();
  const int n = t.instructed_lag();

  if (!t.test_begin()) {
    const auto seq = find_question_sequence(t.back().text);
    if (!seq) throw UnsupportedOperation("no test section and no interactive question to answer");
    std::string out;
    for (int j = 1; j <= static_cast<int>(seq->size()); ++j) {
      SplitMix64 rng = decision_rng(session_seed_, kInteractiveTag + t.size(), static_cast<std::uint64_t>(j));
      MaybeLetter r = back(*seq, j, base_lag(j, n));
      if (rng.unit() < config_.retrieval_noise) r = Letter::from(static_cast<char>('a' + rng.below(kLetterCount)));
      if (j > 1) out += "\n";
      out += answer(*seq, j, r, v);
    }
    return out;
  }

  const TestStep s = test_step(t);
  const int i = s.step;
  SplitMix64 rng = decision_rng(session_seed_, kTestTag, static_cast<std::uint64_t>(i));
  int lag = base_lag(i, n);
  if (i > 1 && rng.unit() < config_.imitation) {
    const int j = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(i - 1)));
    lag = reply_lag(s.stimuli, j, s.replies[static_cast<std::size_t>(j - 1)], v).value_or(lag);
  }
  MaybeLetter r = back(s.stimuli, i, lag);
  if (rng.unit() < config_.retrieval_noise) r = Letter::from(static_cast<char>('a' + rng.below(kLetterCount)));
  return answer(s.stimuli, i, r, v);
}

double ScriptedAgent::score(const Transcript& t, std::string_view reply, CharRange span) {
  check_span(reply, span);
  const TestStep s = test_step(t);
  MaybeLetter x;
  if (span.begin == 0 && span.end == reply.size()) {
    // Whole reply: everything but the retrieval is deterministic.
    const auto outcome = parse_response(reply, t.variant());
    const ParsedResponse* p = as_parsed(outcome);
    if (!p || answer(s.stimuli, s.step, p->retrieved, t.variant()) != reply)
      throw InvariantViolation("forced reply has probability zero under the scripted agent");
    x = p->retrieved;
  } else {
    const auto value = slot_value(reply.substr(span.begin, span.end - span.begin));
    if (!value) throw AlignmentError("scored span is not a letter slot", static_cast<long>(span.begin));
    x = *value;
  }
  const double p = retrieval_probability(t, x);
  if (!(p > 0)) throw InvariantViolation("forced retrieval '" + to_string(x) + "' has probability zero");
  return std::log(p);
}

json ScriptedAgent::describe() const { return to_json(config_); }

std::unique_ptr<Subject> make_scripted(const ScriptedAgentConfig& config, std::uint64_t session_seed) {
  return std::make_unique<ScriptedAgent>(config, session_seed);
}

double CertaintySubject::score(const Transcript&, std::string_view reply, CharRange span) {
  check_span(reply, span);
  return 0.0;
}

BernoulliAgent::BernoulliAgent(double p, std::uint64_t session_seed) : p_(p), session_seed_(session_seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("bernoulli p must be in [0, 1]");
}

std::string BernoulliAgent::generate(const Transcript& t) {
  require_user_turn(t);
  const FormatVariant& v = t.variant();
  const int n = t.instructed_lag();
  const auto line = [&](const LetterSeq& seq, int j, SplitMix64 rng) {
    MaybeLetter r = back(seq, j, n);
    if (rng.unit() >= p_) {
      if (!r) {
        r = Letter::from(static_cast<char>('a' + rng.below(kLetterCount)));
      } else {
        int k = static_cast<int>(rng.below(kLetterCount - 1));
        if (k >= r->value() - 'a') ++k;
        r = Letter::from(static_cast<char>('a' + k));
      }
    }
    return answer(seq, j, r, v);
  };

  if (t.test_begin()) {
    const TestStep s = test_step(t);
    return line(s.stimuli, s.step, decision_rng(session_seed_, kTestTag, static_cast<std::uint64_t>(s.step)));
  }
  const auto seq = find_question_sequence(t.back().text);
  if (!seq) throw UnsupportedOperation("no test section and no interactive question to answer");
  std::string out;
  for (int j = 1; j <= static_cast<int>(seq->size()); ++j) {
    if (j > 1) out += "\n";
    out += line(*seq, j, decision_rng(session_seed_, kInteractiveTag + t.size(), static_cast<std::uint64_t>(j)));
  }
  return out;
}

std::optional<LetterSeq> find_question_sequence(std::string_view text) {
  constexpr std::string_view kMarker = "given the sequence ";
  const std::size_t at = text.rfind(kMarker);
  if (at == std::string_view::npos) return std::nullopt;
  std::string_view rest = text.substr(at + kMarker.size());
  rest = rest.substr(0, rest.find('\n'));
  LetterSeq seq;
  std::size_t pos = 0;
  while (pos < rest.size()) {
    while (pos < rest.size() && rest[pos] == ' ') ++pos;
    if (pos >= rest.size() || !Letter::valid(rest[pos])) break;
    seq.push_back(Letter::from(rest[pos++]));
    if (pos >= rest.size() || rest[pos] != ',') break;
    ++pos;
  }
  if (seq.empty()) return std::nullopt;
  return seq;
}

// ---------------------------------------------------------------------------

json messages_json(const Transcript& t) {
  json out = json::array();
  for (const Turn& turn : t.turns()) out.push_back({{"role", to_string(turn.role)}, {"content", turn.text}});
  return out;
}

namespace {

template <typename Make>
class Factory : public SubjectFactory {
 public:
  Factory(SubjectCapabilities caps, json description, Make make)
      : caps_(caps), description_(std::move(description)), make_(std::move(make)) {}
  SubjectCapabilities capabilities() const override { return caps_; }
  std::unique_ptr<Subject> open(std::uint64_t session_seed) const override { return make_(session_seed); }
  json describe() const override { return description_; }

 private:
  SubjectCapabilities caps_;
  json description_;
  Make make_;
};

template <typename Make>
std::shared_ptr<SubjectFactory> factory(SubjectCapabilities caps, json description, Make make) {
  return std::make_shared<Factory<Make>>(caps, std::move(description), std::move(make));
}

}  // namespace

std::shared_ptr<SubjectFactory> make_subject_factory(const json& spec) {
  const auto type = field<std::string>(spec, "type", "subject");
  if (type == "scripted") {
    const ScriptedAgentConfig c = scripted_from_json(spec);
    return factory({true, true, false}, to_json(c), [c](std::uint64_t s) {
      return make_scripted(c, derive_seed(c.seed, s));
    });
  }
  if (type == "bernoulli") {
    const double p = field<double>(spec, "p", "subject");
    const auto seed = field_or<std::uint64_t>(spec, "seed", 0, "subject");
    BernoulliAgent check(p, 0);
    return factory({true, false, false}, json{{"type", "bernoulli"}, {"p", p}, {"seed", seed}},
                   [p, seed](std::uint64_t s) { return std::make_unique<BernoulliAgent>(p, derive_seed(seed, s)); });
  }
  if (type == "certainty") {
    return factory({false, true, false}, json{{"type", "certainty"}},
                   [](std::uint64_t) { return std::make_unique<CertaintySubject>(); });
  }
  if (type == "remote") {
    const RemoteConfig c = remote_from_json(spec);
    return factory({true, false, false}, to_json(c),
                   [c](std::uint64_t) { return std::make_unique<RemoteSubject>(c); });
  }
  if (type == "bridge") {
    auto conn = std::make_shared<BridgeConnection>(bridge_from_json(spec));
    return factory({true, true, true}, to_json(conn->config()),
                   [conn](std::uint64_t) { return std::make_unique<BridgeSubject>(conn); });
  }
  throw ParseError("subject.type", "unknown subject type '" + type + "'");
}

}  // namespace nback
