#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nback/dialogue.hpp"
#include "nback/subjects.hpp"
#include "nback/trials.hpp"

namespace nback {

enum class ContextKind { standard, curriculum };
std::string to_string(ContextKind k);
ContextKind context_kind_from_string(const std::string& s);

struct RunConfig {
  int lag = 2;
  bool with_demo = true;
  ContextKind context = ContextKind::standard;
  FormatVariant variant = FormatVariant::standard(2);
  DecodingSettings decoding;
  std::uint64_t seed = 0;
  /// Wall-clock start/finish times in records. Off for reproducible logs.
  bool record_timestamps = true;

  /// Curriculum needs a demo; variant lag must equal `lag`.
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};
nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

struct StepRecord {
  int step = 0;
  std::string raw;
  ParseOutcome parsed;
  /// Teacher-forced (history manipulation prefix) rather than generated.
  bool forced = false;
};

struct InteractiveAttempt {
  LetterSeq sequence;
  std::string reply;
  std::vector<bool> lines;  // per answer line: retrieval and label correct
  bool all_correct = false;
  bool operator==(const InteractiveAttempt&) const = default;
};

struct InteractiveSummary {
  bool passed = false;
  int sequences_used = 0;
  std::vector<InteractiveAttempt> attempts;
  bool operator==(const InteractiveSummary&) const = default;
};

/// Provenance of one executed trial.
struct RunRecord {
  std::string protocol;  // standard | history | score | interactive
  int trial_id = 0;
  std::uint64_t trial_seed = 0;
  RunConfig config;
  LetterSeq test;
  std::vector<StepRecord> steps;  // one per test step when complete (generation protocols)
  std::optional<int> forced_lag;
  int forced_prefix = 0;
  /// Continuation scores keyed by counterfactual lag m (score protocol).
  std::map<int, std::vector<StepScore>> scores;
  std::optional<InteractiveSummary> interactive;
  bool complete = true;
  std::string error;
  std::optional<Transcript> transcript;
  nlohmann::json subject;
  std::optional<std::string> started_at, finished_at;

  /// True when every step was generated by the subject (no forced prefix).
  bool free_run() const { return forced_prefix == 0; }
};

/// System turn plus demo (or curriculum) for a trial, with the test section
/// opened. Without a demo only the system turn is present.
Transcript build_context(const Trial& trial, const RunConfig& config);

/// Seed of the per-trial subject session.
std::uint64_t session_seed(const RunConfig& config, const Trial& trial);

/// Presents the test letters one per user turn and records each reply.
/// `lead_in` is prepended to the first test user turn.
RunRecord run_standard(Subject& subject, const Trial& trial, const RunConfig& config);
RunRecord run_standard(Subject& subject, const Trial& trial, const RunConfig& config, Transcript context,
                       const std::string& lead_in = "");

/// Steps 1..prefix_len are teacher-forced m-back-consistent answers; the
/// rest are generated.
RunRecord run_history_manipulation(Subject& subject, const Trial& trial, const RunConfig& config, int forced_lag,
                                   int prefix_len);

enum class ScoreTarget { retrieved_slot, whole_reply };

/// Teacher-forces the m-back-consistent answer at every step and scores each
/// step i > m. Returns exactly |test| - m scores. Standard variant only.
std::vector<StepScore> score_continuations(Subject& subject, const Trial& trial, const RunConfig& config,
                                           int continuation_lag, ScoreTarget target = ScoreTarget::retrieved_slot);

/// Scores for several continuation lags, as one record.
RunRecord run_scoring(Subject& subject, const Trial& trial, const RunConfig& config, const std::vector<int>& lags,
                      ScoreTarget target = ScoreTarget::retrieved_slot);

// ---------------------------------------------------------------------------
// Interactive demo

struct InteractiveLimits {
  int max_sequences = 10;
  int max_attempts_per_seq = 10;
};

/// Template sequences for lag n >= 2 from n+1 distinct letters x1..xn, y:
/// match_first = x1..xn, x1, y (2-back: A-B-A-C) and
/// match_last  = x1..xn, y, x2 (2-back: A-B-C-B).
LetterSeq interactive_template_match_first(const LetterSeq& letters);
LetterSeq interactive_template_match_last(const LetterSeq& letters);

/// Sequences used by the dialogue: element 0 is the worked example, the rest
/// are the questions in order. Each fresh letter set yields match_last then
/// match_first; the first set's match_last is the worked example.
std::vector<LetterSeq> interactive_sequences(int lag, int count, std::uint64_t seed, const Alphabet& alphabet = {});

/// Per-line grading of a multi-line reply against lag-n ground truth.
std::vector<bool> grade_interactive_reply(const std::string& reply, const LetterSeq& sequence,
                                          const FormatVariant& variant);

struct InteractiveOutcome {
  InteractiveSummary summary;
  Transcript transcript;
  std::optional<RunRecord> test;
  bool passed() const { return summary.passed; }
};

/// Worked example, then questions with corrective feedback until the subject
/// gives two consecutive correct answer lines within one sequence (checking
/// at most max_attempts_per_seq lines of it). On a pass and when `test_trial`
/// is given, the test follows in the same dialogue.
InteractiveOutcome run_interactive(Subject& subject, const RunConfig& config, const Trial* test_trial,
                                   InteractiveLimits limits = {});

/// Log form of an interactive outcome.
RunRecord to_record(const InteractiveOutcome& outcome, const Trial& trial, const RunConfig& config,
                    const nlohmann::json& subject);

// ---------------------------------------------------------------------------
// Record serialization (one JSON object per line)

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

/// Re-parses every stored raw reply; throws ValidationError if any stored
/// parse differs from a fresh one.
void check_replay(const RunRecord& r);

}  // namespace nback
