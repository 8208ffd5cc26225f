#include "nback/protocols.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>

#include "nback/json_util.hpp"
#include "nback/rng.hpp"

namespace nback {

using json = nlohmann::json;
using jsonutil::field;
using jsonutil::field_or;

std::string to_string(ContextKind k) { return k == ContextKind::standard ? "standard" : "curriculum"; }

ContextKind context_kind_from_string(const std::string& s) {
  if (s == "standard") return ContextKind::standard;
  if (s == "curriculum") return ContextKind::curriculum;
  throw ParseError("context", "unknown context '" + s + "'");
}

void RunConfig::validate() const {
  if (lag < 1) throw ValidationError("lag must be >= 1");
  if (variant.lag != lag) throw ValidationError("format variant lag differs from the run lag");
  if (context == ContextKind::curriculum && !with_demo) throw ValidationError("curriculum context requires a demo");
}

json to_json(const RunConfig& c) {
  return {{"lag", c.lag},
          {"demo", c.with_demo},
          {"context", to_string(c.context)},
          {"variant", to_string(c.variant.kind)},
          {"decoding", to_json(c.decoding)},
          {"seed", c.seed},
          {"timestamps", c.record_timestamps}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  c.lag = field<int>(j, "lag", "config");
  c.with_demo = field_or<bool>(j, "demo", true, "config");
  c.context = context_kind_from_string(field_or<std::string>(j, "context", "standard", "config"));
  c.variant = {variant_kind_from_string(field_or<std::string>(j, "variant", "standard", "config")), c.lag};
  c.decoding = decoding_from_json(j.value("decoding", json()));
  c.seed = field_or<std::uint64_t>(j, "seed", 0, "config");
  c.record_timestamps = field_or<bool>(j, "timestamps", true, "config");
  c.validate();
  return c;
}

namespace {

constexpr std::uint64_t kCurriculumTag = 0x63757272;    // "curr"
constexpr std::uint64_t kInteractiveTag = 0x696e7472;   // "intr"

std::string now_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

RunRecord new_record(const std::string& protocol, const Trial& trial, const RunConfig& config,
                     const Subject& subject) {
  RunRecord r;
  r.protocol = protocol;
  r.trial_id = trial.id;
  r.trial_seed = trial.seed;
  r.config = config;
  r.test = trial.test;
  r.subject = subject.describe();
  if (config.record_timestamps) r.started_at = now_utc();
  return r;
}

void finish(RunRecord& r) {
  if (r.config.record_timestamps) r.finished_at = now_utc();
}

void check_trial(const Trial& trial, const RunConfig& config) {
  config.validate();
  if (trial.lag != config.lag) throw ValidationError("trial lag differs from the run lag");
}

// Shared step loop for free runs and forced prefixes.
RunRecord run_steps(Subject& subject, const Trial& trial, const RunConfig& config, Transcript t,
                    const std::string& lead_in, const std::string& protocol, std::optional<int> forced_lag,
                    int prefix_len) {
  if (prefix_len > 0 && !forced_lag) throw InvariantViolation("forced prefix without a forced lag");
  if (prefix_len < static_cast<int>(trial.test.size()) && !subject.capabilities().can_generate)
    throw UnsupportedOperation("subject cannot generate replies");
  RunRecord r = new_record(protocol, trial, config, subject);
  r.forced_lag = forced_lag;
  r.forced_prefix = prefix_len;
  if (!t.test_begin()) t.begin_test();

  const int length = static_cast<int>(trial.test.size());
  for (int i = 1; i <= length; ++i) {
    std::string stimulus(1, trial.test[static_cast<std::size_t>(i - 1)].value());
    t.add_user(i == 1 ? lead_in + stimulus : stimulus);
    StepRecord step;
    step.step = i;
    if (i <= prefix_len) {
      step.raw = consistent_response(trial.test, i, *forced_lag, config.variant);
      step.forced = true;
    } else {
      try {
        step.raw = subject.generate(t);
      } catch (const TransportError& e) {
        r.complete = false;
        r.error = "step " + std::to_string(i) + ": " + e.what();
        break;
      }
    }
    step.parsed = parse_response(step.raw, config.variant);
    if (step.raw.empty()) {
      // An empty turn cannot enter the dialogue; keep the reply, stop the run.
      r.steps.push_back(std::move(step));
      r.complete = false;
      r.error = "step " + std::to_string(i) + ": empty reply";
      break;
    }
    t.add_assistant(step.raw);
    r.steps.push_back(std::move(step));
  }
  r.transcript = std::move(t);
  finish(r);
  return r;
}

}  // namespace

std::uint64_t session_seed(const RunConfig& config, const Trial& trial) { return derive_seed(config.seed, trial.seed); }

Transcript build_context(const Trial& trial, const RunConfig& config) {
  check_trial(trial, config);
  const int n = config.lag;
  if (config.context == ContextKind::curriculum) {
    const Curriculum c = build_curriculum_context(trial, config.variant, derive_seed(trial.seed, kCurriculumTag));
    Transcript t(c.system_text, n, config.variant);
    t.append(c.turns);
    t.begin_test();
    return t;
  }
  Transcript t(build_instructions(n, config.variant.kind), n, config.variant);
  if (config.with_demo) t.append(build_demo_turns(trial, config.variant));
  t.begin_test();
  return t;
}

RunRecord run_standard(Subject& subject, const Trial& trial, const RunConfig& config) {
  return run_standard(subject, trial, config, build_context(trial, config));
}

RunRecord run_standard(Subject& subject, const Trial& trial, const RunConfig& config, Transcript context,
                       const std::string& lead_in) {
  check_trial(trial, config);
  return run_steps(subject, trial, config, std::move(context), lead_in, "standard", std::nullopt, 0);
}

RunRecord run_history_manipulation(Subject& subject, const Trial& trial, const RunConfig& config, int forced_lag,
                                   int prefix_len) {
  check_trial(trial, config);
  if (forced_lag < 1) throw ValidationError("forced lag must be >= 1");
  if (prefix_len < 0 || prefix_len >= static_cast<int>(trial.test.size()))
    throw ValidationError("prefix length must be in [0, " + std::to_string(trial.test.size()) + ")");
  return run_steps(subject, trial, config, build_context(trial, config), "", "history", forced_lag, prefix_len);
}

std::vector<StepScore> score_continuations(Subject& subject, const Trial& trial, const RunConfig& config,
                                           int m, ScoreTarget target) {
  if (!subject.capabilities().can_score) throw UnsupportedOperation("subject cannot score forced continuations");
  if (config.variant.kind != FormatVariant::Kind::standard)
    throw UnsupportedOperation("counterfactual continuations are defined for the standard format only");
  const int length = static_cast<int>(trial.test.size());
  if (m < 1 || m >= length) throw ValidationError("continuation lag must be in [1, " + std::to_string(length) + ")");

  Transcript t = build_context(trial, config);
  std::vector<StepScore> scores;
  scores.reserve(static_cast<std::size_t>(length - m));
  for (int i = 1; i <= length; ++i) {
    t.add_user(std::string(1, trial.test[static_cast<std::size_t>(i - 1)].value()));
    const std::string reply = consistent_response(trial.test, i, m, config.variant);
    if (i > m) {
      CharRange span{0, reply.size()};
      if (target == ScoreTarget::retrieved_slot) {
        const auto outcome = parse_response(reply, config.variant);
        const ParsedResponse* p = as_parsed(outcome);
        span = {p->slot_begin, p->slot_end};
      }
      const double lp = subject.score(t, reply, span);
      if (!std::isfinite(lp) || lp > 0)
        throw ValidationError("subject returned logprob " + std::to_string(lp) + " at step " + std::to_string(i));
      scores.push_back({i, lp});
    }
    t.add_assistant(reply);
  }
  return scores;
}

RunRecord run_scoring(Subject& subject, const Trial& trial, const RunConfig& config, const std::vector<int>& lags,
                      ScoreTarget target) {
  check_trial(trial, config);
  RunRecord r = new_record("score", trial, config, subject);
  for (int m : lags) {
    try {
      r.scores[m] = score_continuations(subject, trial, config, m, target);
    } catch (const TransportError& e) {
      r.complete = false;
      r.error = "lag " + std::to_string(m) + ": " + e.what();
      break;
    }
  }
  finish(r);
  return r;
}

// ---------------------------------------------------------------------------

LetterSeq interactive_template_match_first(const LetterSeq& x) {
  if (x.size() < 3) throw InvariantViolation("interactive templates need lag >= 2");
  LetterSeq s(x.begin(), x.end() - 1);
  s.push_back(x.front());
  s.push_back(x.back());
  return s;
}

LetterSeq interactive_template_match_last(const LetterSeq& x) {
  if (x.size() < 3) throw InvariantViolation("interactive templates need lag >= 2");
  LetterSeq s(x.begin(), x.end() - 1);
  s.push_back(x.back());
  s.push_back(x[1]);
  return s;
}

std::vector<LetterSeq> interactive_sequences(int lag, int count, std::uint64_t seed, const Alphabet& alphabet) {
  if (lag < 2) throw ValidationError("the interactive demo is defined for lag >= 2");
  if (static_cast<int>(alphabet.size()) < lag + 1) throw InfeasibleConstraints("alphabet too small for the templates");
  SplitMix64 rng(seed);
  std::vector<LetterSeq> out;
  while (static_cast<int>(out.size()) < count + 1) {
    std::string pool = alphabet.letters();
    LetterSeq letters;
    for (int k = 0; k <= lag; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) + rng.below(pool.size() - static_cast<std::size_t>(k));
      std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
      letters.push_back(Letter::from(pool[static_cast<std::size_t>(k)]));
    }
    out.push_back(interactive_template_match_last(letters));
    out.push_back(interactive_template_match_first(letters));
  }
  out.resize(static_cast<std::size_t>(count + 1));
  return out;
}

std::vector<bool> grade_interactive_reply(const std::string& reply, const LetterSeq& seq,
                                          const FormatVariant& variant) {
  const auto answers = parse_answers(reply, variant);
  std::vector<bool> lines;
  for (int i = 1; i <= static_cast<int>(seq.size()); ++i) {
    bool ok = false;
    if (i <= static_cast<int>(answers.size())) {
      const auto truth_outcome = parse_response(ground_truth_response(seq, i, variant), variant);
      const ParsedResponse& truth = std::get<ParsedResponse>(truth_outcome);
      const ParsedResponse& a = answers[static_cast<std::size_t>(i - 1)];
      ok = a.current == truth.current && a.retrieved == truth.retrieved && a.label == truth.label;
    }
    lines.push_back(ok);
  }
  return lines;
}

InteractiveOutcome run_interactive(Subject& subject, const RunConfig& config, const Trial* test_trial,
                                   InteractiveLimits limits) {
  config.validate();
  if (!subject.capabilities().can_generate) throw UnsupportedOperation("subject cannot generate replies");
  if (limits.max_sequences < 1 || limits.max_attempts_per_seq < 2)
    throw ValidationError("interactive limits: need max_sequences >= 1 and max_attempts_per_seq >= 2");
  if (test_trial) check_trial(*test_trial, config);
  const int n = config.lag;
  const FormatVariant& v = config.variant;
  const auto seqs = interactive_sequences(
      n, limits.max_sequences, derive_seed(config.seed ^ (test_trial ? test_trial->seed : 0), kInteractiveTag));

  InteractiveOutcome out{{}, Transcript(build_instructions(n, v.kind), n, v), std::nullopt};
  Transcript& t = out.transcript;
  t.add_user(interactive_opening(seqs[0], seqs[1], v));
  for (int q = 1; q <= limits.max_sequences; ++q) {
    const LetterSeq& seq = seqs[static_cast<std::size_t>(q)];
    std::string reply = subject.generate(t);
    if (reply.empty()) throw InvariantViolation("empty reply in interactive demo");
    t.add_assistant(reply);

    InteractiveAttempt a{seq, reply, grade_interactive_reply(reply, seq, v), false};
    a.all_correct = std::find(a.lines.begin(), a.lines.end(), false) == a.lines.end();
    const int checked = std::min(static_cast<int>(a.lines.size()), limits.max_attempts_per_seq);
    int streak = 0;
    for (int k = 0; k < checked && streak < 2; ++k) streak = a.lines[static_cast<std::size_t>(k)] ? streak + 1 : 0;
    out.summary.attempts.push_back(a);
    out.summary.sequences_used = q;

    if (streak >= 2) {
      out.summary.passed = true;
      if (test_trial) {
        const std::string head = interactive_feedback(seq, a.all_correct, v, std::nullopt) + "\n";
        out.test = run_standard(subject, *test_trial, config, t, head + interactive_test_lead_in());
        t = *out.test->transcript;
      }
      return out;
    }
    if (q < limits.max_sequences)
      t.add_user(interactive_feedback(seq, a.all_correct, v, seqs[static_cast<std::size_t>(q + 1)]));
  }
  return out;
}

RunRecord to_record(const InteractiveOutcome& o, const Trial& trial, const RunConfig& config, const json& subject) {
  RunRecord r;
  if (o.test) {
    r = *o.test;
  } else {
    r.trial_id = trial.id;
    r.trial_seed = trial.seed;
    r.config = config;
    r.test = trial.test;
    r.subject = subject;
    r.transcript = o.transcript;
  }
  r.protocol = "interactive";
  r.interactive = o.summary;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

json maybe_letter_json(const MaybeLetter& l) { return to_string(l); }

MaybeLetter maybe_letter_from(const std::string& s, const std::string& path) {
  if (s == "none") return std::nullopt;
  if (s.size() != 1 || !Letter::valid(s[0])) throw ParseError(path, "expected a letter or 'none'");
  return Letter::from(s[0]);
}

json outcome_json(const ParseOutcome& o) {
  if (const auto* p = as_parsed(o)) {
    json recent = json::array();
    for (const auto& l : p->recent) recent.push_back(maybe_letter_json(l));
    return {{"current", std::string(1, p->current.value())},
            {"retrieved", maybe_letter_json(p->retrieved)},
            {"label", to_string(p->label)},
            {"recent", recent},
            {"slot", {p->slot_begin, p->slot_end}}};
  }
  return {{"malformed", std::get<MalformedResponse>(o).reason}};
}

ParseOutcome outcome_from(const json& j, const std::string& raw, const std::string& path) {
  if (j.contains("malformed")) return MalformedResponse{raw, field<std::string>(j, "malformed", path)};
  ParsedResponse p;
  const auto cur = field<std::string>(j, "current", path);
  if (cur.size() != 1 || !Letter::valid(cur[0])) throw ParseError(path + ".current", "expected a letter");
  p.current = Letter::from(cur[0]);
  p.retrieved = maybe_letter_from(field<std::string>(j, "retrieved", path), path + ".retrieved");
  const auto label = field<std::string>(j, "label", path);
  if (label != "identical" && label != "different") throw ParseError(path + ".label", "unknown label");
  p.label = label == "identical" ? Label::identical : Label::different;
  for (const auto& l : field<std::vector<std::string>>(j, "recent", path))
    p.recent.push_back(maybe_letter_from(l, path + ".recent"));
  const auto slot = field<std::vector<std::size_t>>(j, "slot", path);
  if (slot.size() != 2) throw ParseError(path + ".slot", "expected [begin, end]");
  p.slot_begin = slot[0];
  p.slot_end = slot[1];
  p.raw = raw;
  return p;
}

bool same_outcome(const ParseOutcome& a, const ParseOutcome& b) {
  const auto* pa = as_parsed(a);
  const auto* pb = as_parsed(b);
  if (!pa || !pb) return !pa && !pb;
  return pa->same_answer(*pb) && pa->slot_begin == pb->slot_begin && pa->slot_end == pb->slot_end;
}

}  // namespace

json to_json(const RunRecord& r) {
  json j;
  j["protocol"] = r.protocol;
  j["trial_id"] = r.trial_id;
  j["trial_seed"] = r.trial_seed;
  j["config"] = to_json(r.config);
  j["subject"] = r.subject;
  j["test"] = to_string(r.test);
  j["complete"] = r.complete;
  j["error"] = r.error;
  j["forced_lag"] = r.forced_lag ? json(*r.forced_lag) : json(nullptr);
  j["forced_prefix"] = r.forced_prefix;
  json steps = json::array();
  for (const StepRecord& s : r.steps)
    steps.push_back({{"step", s.step}, {"raw", s.raw}, {"forced", s.forced}, {"parsed", outcome_json(s.parsed)}});
  j["steps"] = std::move(steps);
  json scores = json::object();
  for (const auto& [m, list] : r.scores) {
    json arr = json::array();
    for (const StepScore& s : list) arr.push_back({s.step, s.logprob});
    scores[std::to_string(m)] = std::move(arr);
  }
  j["scores"] = std::move(scores);
  if (r.interactive) {
    json attempts = json::array();
    for (const auto& a : r.interactive->attempts)
      attempts.push_back({{"sequence", to_string(a.sequence)},
                          {"reply", a.reply},
                          {"lines", a.lines},
                          {"all_correct", a.all_correct}});
    j["interactive"] = {{"passed", r.interactive->passed},
                        {"sequences_used", r.interactive->sequences_used},
                        {"attempts", std::move(attempts)}};
  } else {
    j["interactive"] = nullptr;
  }
  if (r.transcript) {
    json turns = json::array();
    for (const Turn& t : r.transcript->turns()) turns.push_back({{"role", to_string(t.role)}, {"text", t.text}});
    const auto tb = r.transcript->test_begin();
    j["transcript"] = {{"turns", std::move(turns)}, {"test_begin", tb ? json(*tb) : json(nullptr)}};
  } else {
    j["transcript"] = nullptr;
  }
  j["started_at"] = r.started_at ? json(*r.started_at) : json(nullptr);
  j["finished_at"] = r.finished_at ? json(*r.finished_at) : json(nullptr);
  return j;
}

namespace {

RunRecord record_from(const json& j) {
  RunRecord r;
  r.protocol = field<std::string>(j, "protocol");
  r.trial_id = field<int>(j, "trial_id");
  r.trial_seed = field<std::uint64_t>(j, "trial_seed");
  if (!j.contains("config")) throw ParseError("config", "missing field");
  r.config = run_config_from_json(j.at("config"));
  r.subject = j.value("subject", json());
  try {
    r.test = to_letters(field<std::string>(j, "test"));
  } catch (const InvariantViolation& e) {
    throw ParseError("test", e.what());
  }
  r.complete = field<bool>(j, "complete");
  r.error = field_or<std::string>(j, "error", "");
  if (j.contains("forced_lag") && !j.at("forced_lag").is_null()) r.forced_lag = field<int>(j, "forced_lag");
  r.forced_prefix = field_or<int>(j, "forced_prefix", 0);
  const json& steps = j.at("steps");
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const std::string path = "steps[" + std::to_string(k) + "]";
    StepRecord s;
    s.step = field<int>(steps[k], "step", path);
    s.raw = field<std::string>(steps[k], "raw", path);
    s.forced = field_or<bool>(steps[k], "forced", false, path);
    if (!steps[k].contains("parsed")) throw ParseError(path + ".parsed", "missing field");
    s.parsed = outcome_from(steps[k].at("parsed"), s.raw, path + ".parsed");
    r.steps.push_back(std::move(s));
  }
  if (j.contains("scores"))
    for (const auto& [key, arr] : j.at("scores").items()) {
      auto& list = r.scores[std::stoi(key)];
      for (const auto& pair : arr) list.push_back({pair.at(0).get<int>(), pair.at(1).get<double>()});
    }
  if (j.contains("interactive") && !j.at("interactive").is_null()) {
    const json& ij = j.at("interactive");
    InteractiveSummary s;
    s.passed = field<bool>(ij, "passed", "interactive");
    s.sequences_used = field<int>(ij, "sequences_used", "interactive");
    for (const auto& a : ij.at("attempts"))
      s.attempts.push_back({to_letters(a.at("sequence").get<std::string>()), a.at("reply").get<std::string>(),
                            a.at("lines").get<std::vector<bool>>(), a.at("all_correct").get<bool>()});
    r.interactive = std::move(s);
  }
  if (j.contains("transcript") && !j.at("transcript").is_null()) {
    const json& tj = j.at("transcript");
    std::vector<Turn> turns;
    for (const auto& t : tj.at("turns"))
      turns.push_back({role_from_string(t.at("role").get<std::string>()), t.at("text").get<std::string>()});
    std::optional<std::size_t> tb;
    if (!tj.at("test_begin").is_null()) tb = tj.at("test_begin").get<std::size_t>();
    r.transcript = Transcript::from_turns(std::move(turns), r.config.lag, r.config.variant, tb);
  }
  if (j.contains("started_at") && !j.at("started_at").is_null()) r.started_at = j.at("started_at").get<std::string>();
  if (j.contains("finished_at") && !j.at("finished_at").is_null())
    r.finished_at = j.at("finished_at").get<std::string>();
  return r;
}

}  // namespace

RunRecord run_record_from_json(const json& j) {
  try {
    return record_from(j);
  } catch (const json::exception& e) {
    throw ParseError("run record", e.what());
  }
}

void check_replay(const RunRecord& r) {
  for (const StepRecord& s : r.steps) {
    const ParseOutcome fresh = parse_response(s.raw, r.config.variant);
    if (!same_outcome(fresh, s.parsed))
      throw ValidationError("stored parse of step " + std::to_string(s.step) + " differs from a fresh parse");
  }
}

}  // namespace nback
