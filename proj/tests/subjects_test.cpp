#include <gtest/gtest.h>

#include <httplib.h>

#include <cmath>
#include <cstdlib>
#include <map>
#include <random>
#include <thread>

#include "fake_bridge.hpp"
#include "nback/subjects.hpp"
#include "nback/trials.hpp"

namespace nback {
namespace {

using json = nlohmann::json;

Transcript at_step(const std::string& stimuli, int n, const std::vector<std::string>& replies = {},
                   FormatVariant v = {}) {
  if (v.lag != n) v = FormatVariant::standard(n);
  Transcript t(build_instructions(n, v.kind), n, v);
  t.begin_test();
  for (std::size_t j = 0; j < stimuli.size(); ++j) {
    t.add_user(std::string(1, stimuli[j]));
    if (j + 1 < stimuli.size()) t.add_assistant(j < replies.size() ? replies[j] : "x and none are different.");
  }
  return t;
}

TEST(ScriptedAgent, PerfectTwoBackAnswer) {
  ScriptedAgent agent({}, 1);
  EXPECT_EQ(agent.generate(at_step("eff", 2)), "f and e are different.");
  EXPECT_EQ(agent.generate(at_step("efe", 2)), "e and e are identical.");
  EXPECT_EQ(agent.generate(at_step("ef", 2)), "f and none are different.");
}

TEST(ScriptedAgent, BehaviorLagOverridesInstructions) {
  ScriptedAgentConfig c;
  c.behavior_lag = 1;
  ScriptedAgent agent(c, 1);
  EXPECT_EQ(agent.generate(at_step("eff", 2)), "f and f are identical.");
}

TEST(ScriptedAgent, DriftFollowsClosedFormRule) {
  ScriptedAgentConfig c;
  c.behavior_lag = 2;
  c.drift_to = 1;
  c.drift_step = 12;
  const Trial trial = generate_trial({2, 24, 8, LurePolicy::uncontrolled}, 77);
  const std::string s = to_string(trial.test);
  ScriptedAgent agent(c, 5);
  Transcript t(build_instructions(2), 2, FormatVariant::standard(2));
  t.begin_test();
  for (int i = 1; i <= 24; ++i) {
    t.add_user(std::string(1, s[static_cast<std::size_t>(i - 1)]));
    const std::string reply = agent.generate(t);
    const int lag = i < 12 ? 2 : 1;
    const char expected = s[static_cast<std::size_t>(i - lag - 1)];
    const auto outcome = parse_response(reply, FormatVariant::standard(2));
    const auto* p = as_parsed(outcome);
    ASSERT_NE(p, nullptr);
    if (i > lag) {
      ASSERT_TRUE(p->retrieved.has_value()) << "step " << i;
      EXPECT_EQ(p->retrieved->value(), expected) << "step " << i;
    } else {
      EXPECT_FALSE(p->retrieved.has_value());
    }
    t.add_assistant(reply);
  }
}

TEST(ScriptedAgent, ConfigValidation) {
  ScriptedAgentConfig c;
  c.drift_to = 1;
  EXPECT_THROW(c.validate(), ValidationError);
  c.drift_step = 3;
  EXPECT_NO_THROW(c.validate());
  c.retrieval_noise = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(scripted_from_json(json{{"type", "scripted"}, {"behavior_lag", 0}}), ValidationError);
  const ScriptedAgentConfig round = scripted_from_json(to_json(ScriptedAgentConfig{2, 1, 12, 0.25, 0.1, 9}));
  EXPECT_EQ(round, (ScriptedAgentConfig{2, 1, 12, 0.25, 0.1, 9}));
}

TEST(ScriptedAgent, RequiresUserTurn) {
  ScriptedAgent agent({}, 1);
  Transcript t(build_instructions(2), 2, FormatVariant::standard(2));
  EXPECT_THROW(agent.generate(t), InvariantViolation);
  t.begin_test();
  t.add_user("a");
  t.add_assistant("a and none are different.");
  EXPECT_THROW(agent.generate(t), InvariantViolation);
}

TEST(ScriptedAgent, NoisyAccuracyMatchesExpectation) {
  ScriptedAgentConfig c;
  c.retrieval_noise = 0.3;
  const Transcript t = at_step("qzk", 2);
  int correct = 0;
  const int runs = 100000;
  for (int k = 0; k < runs; ++k) {
    ScriptedAgent agent(c, static_cast<std::uint64_t>(k));
    const auto outcome = parse_response(agent.generate(t), FormatVariant::standard(2));
    const auto* p = as_parsed(outcome);
    ASSERT_NE(p, nullptr);
    correct += p->retrieved == MaybeLetter{Letter::from('q')};
  }
  EXPECT_NEAR(static_cast<double>(correct) / runs, 1.0 - 0.3 * 25.0 / 26.0, 0.01);
}

// Direct statement of the agent's emission rule, without imitation.
double closed_form(const std::string& s, int lag, double eps, MaybeLetter x) {
  const int i = static_cast<int>(s.size());
  MaybeLetter rule;
  if (i > lag) rule = Letter::from(s[static_cast<std::size_t>(i - lag - 1)]);
  return (1 - eps) * (rule == x ? 1.0 : 0.0) + (x ? eps / 26 : 0.0);
}

TEST(ScriptedAgent, ScoreIsExactLogProbability) {
  std::mt19937_64 pick(3);
  for (int k = 0; k < 2000; ++k) {
    const int n = 1 + static_cast<int>(pick() % 4);
    const int len = 2 + static_cast<int>(pick() % 12);
    std::string s;
    for (int j = 0; j < len; ++j) s += static_cast<char>('a' + pick() % 5);
    ScriptedAgentConfig c;
    c.behavior_lag = 1 + static_cast<int>(pick() % 4);
    c.retrieval_noise = 0.05 + 0.9 * std::uniform_real_distribution<double>()(pick);
    ScriptedAgent agent(c, pick());
    const Transcript t = at_step(s, n);
    // Continuations are only scored where they name a letter (step > m).
    const int m = 1 + static_cast<int>(pick() % static_cast<unsigned>(std::min(4, len - 1)));
    const std::string reply = consistent_response(to_letters(s), len, m, FormatVariant::standard(n));
    const auto outcome = parse_response(reply, FormatVariant::standard(n));
    const auto* p = as_parsed(outcome);
    ASSERT_NE(p, nullptr);
    const double expected = std::log(closed_form(s, *c.behavior_lag, c.retrieval_noise, p->retrieved));
    EXPECT_NEAR(agent.score(t, reply, {p->slot_begin, p->slot_end}), expected, 1e-12);
    EXPECT_NEAR(agent.score(t, reply, {0, reply.size()}), expected, 1e-12);
  }
}

TEST(ScriptedAgent, ZeroProbabilityAndBadSpansAreErrors) {
  ScriptedAgent agent({}, 1);
  const Transcript t = at_step("abc", 2);
  EXPECT_THROW(agent.score(t, "c and b are different.", {6, 7}), InvariantViolation);
  EXPECT_THROW(agent.score(t, "c and a are different.", {0, 3}), AlignmentError);
  EXPECT_THROW(agent.score(t, "c and a are different.", {6, 40}), AlignmentError);
  EXPECT_DOUBLE_EQ(agent.score(t, "c and a are different.", {6, 7}), 0.0);
  // Whole-reply scoring only accepts the reply the agent could emit.
  EXPECT_THROW(agent.score(t, "c and a are identical.", {0, 22}), InvariantViolation);
}

TEST(ScriptedAgent, EmissionFrequenciesMatchScores) {
  ScriptedAgentConfig c;
  c.retrieval_noise = 0.4;
  c.imitation = 0.5;
  const std::string s = "abcab";
  // Earlier replies: steps 1 and 2 said none, steps 3 and 4 were 1-back.
  const Transcript t = at_step(s, 2, {"a and none are different.", "b and none are different.",
                                      "c and b are different.", "a and c are different."});
  const int runs = 60000;
  std::map<std::string, int> counts;
  for (int k = 0; k < runs; ++k) {
    ScriptedAgent agent(c, 1000 + static_cast<std::uint64_t>(k));
    const auto outcome = parse_response(agent.generate(t), FormatVariant::standard(2));
    counts[to_string(as_parsed(outcome)->retrieved)]++;
  }
  ScriptedAgent agent(c, 0);
  double total = 0;
  for (char x = 'a'; x <= 'z'; ++x) {
    const double p = agent.retrieval_probability(t, Letter::from(x));
    total += p;
    EXPECT_NEAR(counts[std::string(1, x)] / static_cast<double>(runs), p, 0.01) << x;
  }
  total += agent.retrieval_probability(t, std::nullopt);
  EXPECT_NEAR(total, 1.0, 1e-12);
  // Rule: 2-back 'c' with weight 1-h; imitation picks steps 1..4, whose lags
  // are (base, base, 1, 1), giving 'c','c','a','a'.
  EXPECT_NEAR(agent.retrieval_probability(t, Letter::from('c')), 0.6 * (0.5 + 0.5 * 0.5) + 0.4 / 26, 1e-12);
  EXPECT_NEAR(agent.retrieval_probability(t, Letter::from('a')), 0.6 * (0.5 * 0.5) + 0.4 / 26, 1e-12);
}

TEST(ScriptedAgent, RepliesAlwaysParse) {
  ScriptedAgentConfig c;
  c.retrieval_noise = 0.5;
  c.imitation = 0.3;
  for (auto kind : {FormatVariant::Kind::standard, FormatVariant::Kind::recite}) {
    for (int n = 1; n <= 4; ++n) {
      const FormatVariant v{kind, n};
      const Trial trial = generate_trial({n, 24, 8, LurePolicy::uncontrolled}, static_cast<std::uint64_t>(n));
      ScriptedAgent agent(c, 42);
      Transcript t(build_instructions(n, kind), n, v);
      t.begin_test();
      for (Letter l : trial.test) {
        t.add_user(std::string(1, l.value()));
        const std::string reply = agent.generate(t);
        ASSERT_TRUE(is_parsed(parse_response(reply, v))) << reply;
        t.add_assistant(reply);
      }
    }
  }
}

TEST(ScriptedAgent, DeterministicPerSession) {
  ScriptedAgentConfig c;
  c.retrieval_noise = 0.5;
  const Transcript t = at_step("abcdefgh", 3);
  ScriptedAgent a(c, 11), b(c, 11);
  EXPECT_EQ(a.generate(t), b.generate(t));
  EXPECT_EQ(a.generate(t), a.generate(t));
}

TEST(ScriptedAgent, AnswersInteractiveQuestions) {
  ScriptedAgent agent({}, 1);
  Transcript t(build_instructions(2), 2, FormatVariant::standard(2));
  t.add_user(interactive_opening(to_letters("abac"), to_letters("abcb"), FormatVariant::standard(2)));
  EXPECT_EQ(agent.generate(t),
            "a and none are different.\nb and none are different.\nc and a are different.\nb and b are identical.");
  EXPECT_EQ(find_question_sequence("given the sequence x, y, z,\nwhat"), to_letters("xyz"));
  EXPECT_FALSE(find_question_sequence("no question here").has_value());
}

TEST(CertaintySubject, ScoresZeroAndCannotGenerate) {
  CertaintySubject s;
  const Transcript t = at_step("abc", 2);
  EXPECT_EQ(s.score(t, "c and a are different.", {6, 7}), 0.0);
  EXPECT_THROW(s.generate(t), UnsupportedOperation);
  EXPECT_FALSE(s.capabilities().can_generate);
}

TEST(BernoulliAgent, ExtremesAreAlwaysRightOrWrong) {
  BernoulliAgent right(1.0, 3), wrong(0.0, 3);
  const Trial trial = generate_trial({2, 24, 8, LurePolicy::uncontrolled}, 9);
  Transcript t(build_instructions(2), 2, FormatVariant::standard(2));
  t.begin_test();
  for (int i = 1; i <= 24; ++i) {
    t.add_user(std::string(1, trial.test[static_cast<std::size_t>(i - 1)].value()));
    EXPECT_EQ(right.generate(t), ground_truth_response(trial.test, i, FormatVariant::standard(2)));
    const auto outcome = parse_response(wrong.generate(t), FormatVariant::standard(2));
    const MaybeLetter truth = i > 2 ? MaybeLetter{trial.test[static_cast<std::size_t>(i - 3)]} : MaybeLetter{};
    EXPECT_NE(as_parsed(outcome)->retrieved, truth);
    t.add_assistant(right.generate(t));
  }
  EXPECT_THROW(BernoulliAgent(1.5, 0), ValidationError);
}

// ---------------------------------------------------------------------------

class RemoteSubjectTest : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      bodies_.push_back(req.body);
      auth_.push_back(req.get_header_value("Authorization"));
      if (failures_ > 0) {
        --failures_;
        res.status = status_;
        return;
      }
      json reply{{"choices", {{{"message", {{"role", "assistant"}, {"content", "f and f are identical."}}}}}}};
      res.set_content(reply.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }
  RemoteConfig config() const {
    RemoteConfig c;
    c.url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
    c.model = "test-model";
    c.api_key_env = "NBACK_TEST_REMOTE_KEY";
    c.backoff_ms = 1;
    c.timeout_s = 5;
    return c;
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mutex_;
  std::vector<std::string> bodies_, auth_;
  int failures_ = 0;
  int status_ = 503;
};

TEST_F(RemoteSubjectTest, ReturnsCompletionText) {
  ::setenv("NBACK_TEST_REMOTE_KEY", "secret-token", 1);
  RemoteSubject s(config());
  EXPECT_EQ(s.generate(at_step("aff", 2)), "f and f are identical.");
  ASSERT_EQ(bodies_.size(), 1u);
  EXPECT_EQ(auth_[0], "Bearer secret-token");
  const json body = json::parse(bodies_[0]);
  EXPECT_EQ(body["model"], "test-model");
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_EQ(body["messages"].back()["content"], "f");
  EXPECT_EQ(s.describe().dump().find("secret-token"), std::string::npos);
  ::unsetenv("NBACK_TEST_REMOTE_KEY");
}

TEST_F(RemoteSubjectTest, RetriesResendIdenticalBytes) {
  failures_ = 2;
  RemoteSubject s(config());
  EXPECT_EQ(s.generate(at_step("aff", 2)), "f and f are identical.");
  ASSERT_EQ(bodies_.size(), 3u);
  EXPECT_EQ(bodies_[0], bodies_[1]);
  EXPECT_EQ(bodies_[1], bodies_[2]);
  EXPECT_EQ(bodies_[0], s.request_body(at_step("aff", 2)));
}

TEST_F(RemoteSubjectTest, ExhaustedRetriesReportAttempts) {
  failures_ = 10;
  RemoteConfig c = config();
  c.max_attempts = 4;
  RemoteSubject s(c);
  try {
    s.generate(at_step("aff", 2));
    FAIL() << "expected TransportError";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 4);
  }
  EXPECT_EQ(bodies_.size(), 4u);
}

TEST_F(RemoteSubjectTest, ClientErrorsAreNotRetried) {
  failures_ = 1;
  status_ = 400;
  RemoteSubject s(config());
  try {
    s.generate(at_step("aff", 2));
    FAIL() << "expected TransportError";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts(), 1);
  }
}

TEST(RemoteSubject, UnreachableEndpointFails) {
  RemoteConfig c;
  c.url = "http://127.0.0.1:1/v1/chat/completions";
  c.model = "m";
  c.max_attempts = 2;
  c.backoff_ms = 1;
  c.timeout_s = 2;
  RemoteSubject s(c);
  EXPECT_THROW(s.generate(at_step("a", 2)), TransportError);
  EXPECT_THROW(s.score(at_step("a", 2), "a and none are different.", {6, 10}), UnsupportedOperation);
  EXPECT_FALSE(s.capabilities().can_score);
}

// ---------------------------------------------------------------------------

TEST(SpanLogprobs, SumsTokensCoveringTheSlot) {
  const std::string reply = "c and a are different.";
  // " a" as one token: leading space is allowed.
  EXPECT_DOUBLE_EQ(sum_span_logprobs(json::array({{{"begin", 5}, {"end", 7}, {"logprob", -0.5}}}), reply, {6, 7}),
                   -0.5);
  EXPECT_DOUBLE_EQ(sum_span_logprobs(json::array({{{"begin", 5}, {"end", 6}, {"logprob", -0.25}},
                                                  {{"begin", 6}, {"end", 7}, {"logprob", -0.5}}}),
                                     reply, {6, 7}),
                   -0.75);
}

TEST(SpanLogprobs, MisalignmentReportsTokenIndex) {
  const std::string reply = "c and a are different.";
  try {
    sum_span_logprobs(json::array({{{"begin", 6}, {"end", 8}, {"logprob", -0.1}}, {{"begin", 8}, {"end", 11}, {"logprob", -0.1}}}),
                      reply, {6, 7});
    FAIL();
  } catch (const AlignmentError& e) {
    EXPECT_EQ(e.index(), 1);
  }
  try {
    sum_span_logprobs(json::array({{{"begin", 2}, {"end", 7}, {"logprob", -0.1}}}), reply, {6, 7});
    FAIL();
  } catch (const AlignmentError& e) {
    EXPECT_EQ(e.index(), 0);
  }
  EXPECT_THROW(sum_span_logprobs(json::array({{{"begin", 7}, {"end", 8}, {"logprob", -0.1}}}), reply, {6, 7}),
               AlignmentError);
  EXPECT_THROW(sum_span_logprobs(json::array(), reply, {6, 7}), AlignmentError);
  EXPECT_THROW(sum_span_logprobs(json::array({{{"begin", 6}, {"end", 7}, {"logprob", 0.3}}}), reply, {6, 7}),
               ValidationError);
}

TEST(BridgeSubject, RoundTripsRequests) {
  testing_support::FakeBridge bridge([](const json& req) -> json {
    const std::string kind = req["kind"];
    if (kind == "generate") return {{"ok", true}, {"text", "b and none are different."}};
    if (kind == "score") {
      const std::size_t b = req["span"][0], e = req["span"][1];
      return {{"ok", true}, {"tokens", {{{"text", " x"}, {"begin", b - 1}, {"end", e}, {"logprob", -1.25}}}}, {"sum", -1.25}};
    }
    return {{"ok", false}, {"error", {{"type", "unsupported"}, {"message", "no attention in this model"}}}};
  });
  BridgeConfig c;
  c.port = bridge.port();
  auto conn = std::make_shared<BridgeConnection>(c);
  BridgeSubject s(conn);
  const Transcript t = at_step("ab", 2);
  EXPECT_EQ(s.generate(t), "b and none are different.");
  EXPECT_DOUBLE_EQ(s.score(t, "b and a are different.", {6, 7}), -1.25);
  EXPECT_THROW(s.dump_attention(t, "/tmp"), UnsupportedOperation);

  // Sessions sharing the connection are serialized.
  std::vector<std::thread> threads;
  std::atomic<int> ok{0};
  for (int k = 0; k < 4; ++k)
    threads.emplace_back([&] {
      BridgeSubject session(conn);
      for (int j = 0; j < 25; ++j) ok += session.generate(t) == "b and none are different.";
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(ok, 100);
  EXPECT_EQ(bridge.requests(), 103);
}

TEST(BridgeSubject, ErrorsAndMissingServer) {
  testing_support::FakeBridge bridge([](const json&) -> json {
    return {{"ok", false}, {"error", {{"type", "out_of_memory"}, {"message", "CUDA OOM"}}}};
  });
  BridgeConfig c;
  c.port = bridge.port();
  BridgeSubject s(std::make_shared<BridgeConnection>(c));
  EXPECT_THROW(s.generate(at_step("ab", 2)), TransportError);

  BridgeConfig dead;
  dead.port = 1;
  BridgeSubject none(std::make_shared<BridgeConnection>(dead));
  EXPECT_THROW(none.generate(at_step("ab", 2)), TransportError);
}

TEST(SubjectFactory, BuildsFromSpecs) {
  auto scripted = make_subject_factory(json{{"type", "scripted"}, {"retrieval_noise", 0.2}, {"seed", 4}});
  EXPECT_TRUE(scripted->capabilities().can_score);
  const Transcript t = at_step("abcdefg", 2);
  EXPECT_EQ(scripted->open(7)->generate(t), scripted->open(7)->generate(t));
  EXPECT_EQ(scripted->describe()["retrieval_noise"], 0.2);
  EXPECT_FALSE(make_subject_factory(json{{"type", "certainty"}})->capabilities().can_generate);
  EXPECT_TRUE(make_subject_factory(json{{"type", "bernoulli"}, {"p", 0.5}})->capabilities().can_generate);
  EXPECT_THROW(make_subject_factory(json{{"type", "oracle"}}), ParseError);
  EXPECT_THROW(make_subject_factory(json{{"type", "remote"}}), ParseError);
}

}  // namespace
}  // namespace nback
