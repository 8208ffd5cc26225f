#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nback/letter.hpp"
#include "nback/trials.hpp"

namespace nback {

enum class Role { system, user, assistant };
std::string to_string(Role r);
Role role_from_string(const std::string& s);

struct Turn {
  Role role = Role::user;
  std::string text;
  bool operator==(const Turn&) const = default;
};

enum class Label { identical, different };
std::string to_string(Label l);

/// Answer template. `recite` lists the `lag` most recent letters before the
/// usual comparison clause.
struct FormatVariant {
  enum class Kind { standard, recite };
  Kind kind = Kind::standard;
  int lag = 1;

  static FormatVariant standard(int lag) { return {Kind::standard, lag}; }
  static FormatVariant recite(int lag) { return {Kind::recite, lag}; }
  bool operator==(const FormatVariant&) const = default;
};
std::string to_string(FormatVariant::Kind k);
FormatVariant::Kind variant_kind_from_string(const std::string& s);

/// A dialogue: one system turn followed by strictly alternating user and
/// assistant turns, starting with a user turn. Appends that would break the
/// alternation throw InvariantViolation.
class Transcript {
 public:
  Transcript(std::string system_text, int instructed_lag, FormatVariant variant);

  /// Rebuilds a transcript from stored turns, validating the invariant.
  static Transcript from_turns(std::vector<Turn> turns, int instructed_lag, FormatVariant variant,
                               std::optional<std::size_t> test_begin);

  void add_user(std::string text);
  void add_assistant(std::string text);
  void append(Turn turn);
  void append(const std::vector<Turn>& turns);

  /// Marks the next (user) turn as the first turn of the test sequence.
  void begin_test();

  const std::vector<Turn>& turns() const { return turns_; }
  std::size_t size() const { return turns_.size(); }
  const Turn& back() const { return turns_.back(); }
  bool ends_with_user() const { return turns_.back().role == Role::user; }

  int instructed_lag() const { return instructed_lag_; }
  const FormatVariant& variant() const { return variant_; }
  std::optional<std::size_t> test_begin() const { return test_begin_; }

  /// Number of test stimuli presented so far (0 before begin_test()).
  int test_steps() const;
  /// Stimuli of the test section, in presentation order.
  LetterSeq test_stimuli() const;
  /// Assistant replies of the test section, in order.
  std::vector<std::string> test_replies() const;

  /// Re-checks the alternation invariant; throws on violation.
  void validate() const;

  bool operator==(const Transcript&) const = default;

 private:
  Transcript() = default;
  std::vector<Turn> turns_;
  int instructed_lag_ = 1;
  FormatVariant variant_;
  std::optional<std::size_t> test_begin_;
};

/// Stimulus carried by a user turn: its last non-space character. Plain
/// stimulus turns are a single letter; lead-in text may precede it.
std::optional<Letter> stimulus_of(std::string_view user_text);
/// Offset of that character within the text.
std::optional<std::size_t> stimulus_offset(std::string_view user_text);

struct ParsedResponse {
  Letter current = Letter::from('a');
  MaybeLetter retrieved;
  Label label = Label::different;
  /// Recite variant only: letters 1..n back, most recent first.
  std::vector<MaybeLetter> recent;
  std::string raw;
  /// Character range of the retrieved-letter slot within `raw`.
  std::size_t slot_begin = 0;
  std::size_t slot_end = 0;

  bool same_answer(const ParsedResponse& o) const {
    return current == o.current && retrieved == o.retrieved && label == o.label && recent == o.recent;
  }
};

struct MalformedResponse {
  std::string raw;
  std::string reason;
};

using ParseOutcome = std::variant<ParsedResponse, MalformedResponse>;

inline const ParsedResponse* as_parsed(const ParseOutcome& o) { return std::get_if<ParsedResponse>(&o); }
const ParsedResponse* as_parsed(ParseOutcome&&) = delete;
inline bool is_parsed(const ParseOutcome& o) { return std::holds_alternative<ParsedResponse>(o); }

/// Instruction text for an n-back task, rendered from the versioned master.
std::string build_instructions(int lag, FormatVariant::Kind kind = FormatVariant::Kind::standard);

/// Renders one answer. Throws InvariantViolation for "none ... identical" or a
/// recite `recent` list whose length differs from the variant lag.
std::string format_response(Letter current, MaybeLetter retrieved, Label label, const FormatVariant& variant,
                            const std::vector<MaybeLetter>& recent = {});

/// First well-formed answer line of `raw`. Extra text after it is ignored.
ParseOutcome parse_response(std::string_view raw, const FormatVariant& variant);
/// Every well-formed answer line, in order (multi-line replies).
std::vector<ParsedResponse> parse_answers(std::string_view raw, const FormatVariant& variant);

/// Correct answer at 1-based step i of `seq` for the variant's lag.
std::string ground_truth_response(const LetterSeq& seq, int step, const FormatVariant& variant);
/// Answer at step i that retrieves the letter `lag` back (m-back consistent).
/// Standard variant only when lag differs from the variant lag.
std::string consistent_response(const LetterSeq& seq, int step, int lag, const FormatVariant& variant);

/// 2·|seq| alternating user/assistant turns with ground-truth answers.
std::vector<Turn> build_demo_turns(const LetterSeq& seq, const FormatVariant& variant);
std::vector<Turn> build_demo_turns(const Trial& trial, const FormatVariant& variant);

struct CurriculumBlock {
  int lag = 1;
  std::size_t first_turn = 0;  // index into Curriculum::turns
  LetterSeq demo;
};

/// 1-back .. n-back demonstration blocks. The n-back instructions go in the
/// system turn; earlier blocks carry their instructions in their first user
/// turn. The final block reuses the trial's own demo sequence.
struct Curriculum {
  std::string system_text;
  std::vector<Turn> turns;
  std::vector<CurriculumBlock> blocks;
};

Curriculum build_curriculum_context(const Trial& trial, const FormatVariant& variant, std::uint64_t seed,
                                    const Alphabet& alphabet = {});

// Interactive demo messages (worked example, corrective feedback).

std::string format_sequence_list(const LetterSeq& seq);
std::string interactive_opening(const LetterSeq& example, const LetterSeq& question, const FormatVariant& variant);
/// Feedback on a reply; `next` is the next question, or nullopt when the
/// dialogue moves on to the test (the tail is then omitted).
std::string interactive_feedback(const LetterSeq& answered, bool all_correct, const FormatVariant& variant,
                                 const std::optional<LetterSeq>& next);
std::string interactive_test_lead_in();

}  // namespace nback
