#include "nback/dialogue.hpp"

#include <cctype>

#include "nback/instructions_resource.hpp"

namespace nback {

std::string to_string(Role r) {
  switch (r) {
    case Role::system:
      return "system";
    case Role::user:
      return "user";
    case Role::assistant:
      return "assistant";
  }
  return "?";
}

Role role_from_string(const std::string& s) {
  if (s == "system") return Role::system;
  if (s == "user") return Role::user;
  if (s == "assistant") return Role::assistant;
  throw ParseError("role", "unknown role '" + s + "'");
}

std::string to_string(Label l) { return l == Label::identical ? "identical" : "different"; }

std::string to_string(FormatVariant::Kind k) { return k == FormatVariant::Kind::standard ? "standard" : "recite"; }

FormatVariant::Kind variant_kind_from_string(const std::string& s) {
  if (s == "standard") return FormatVariant::Kind::standard;
  if (s == "recite") return FormatVariant::Kind::recite;
  throw ParseError("variant", "unknown format variant '" + s + "'");
}

// ---------------------------------------------------------------------------
// Transcript

Transcript::Transcript(std::string system_text, int instructed_lag, FormatVariant variant)
    : instructed_lag_(instructed_lag), variant_(variant) {
  turns_.push_back({Role::system, std::move(system_text)});
}

Transcript Transcript::from_turns(std::vector<Turn> turns, int instructed_lag, FormatVariant variant,
                                  std::optional<std::size_t> test_begin) {
  Transcript t;
  t.turns_ = std::move(turns);
  t.instructed_lag_ = instructed_lag;
  t.variant_ = variant;
  t.test_begin_ = test_begin;
  t.validate();
  return t;
}

void Transcript::append(Turn turn) {
  const Role expected = turns_.back().role == Role::user ? Role::assistant : Role::user;
  if (turn.role != expected)
    throw InvariantViolation("transcript alternation: expected " + to_string(expected) + " turn at index " +
                             std::to_string(turns_.size()) + ", got " + to_string(turn.role));
  if (turn.text.empty())
    throw InvariantViolation("empty " + to_string(turn.role) + " turn at index " + std::to_string(turns_.size()));
  turns_.push_back(std::move(turn));
}

void Transcript::append(const std::vector<Turn>& turns) {
  for (const Turn& t : turns) append(t);
}

void Transcript::add_user(std::string text) { append(Turn{Role::user, std::move(text)}); }
void Transcript::add_assistant(std::string text) { append(Turn{Role::assistant, std::move(text)}); }

void Transcript::begin_test() {
  if (turns_.back().role == Role::user) throw InvariantViolation("test must begin at a user turn");
  test_begin_ = turns_.size();
}

int Transcript::test_steps() const {
  if (!test_begin_ || *test_begin_ >= turns_.size()) return 0;
  return static_cast<int>((turns_.size() - *test_begin_ + 1) / 2);
}

LetterSeq Transcript::test_stimuli() const {
  LetterSeq out;
  if (!test_begin_) return out;
  for (std::size_t i = *test_begin_; i < turns_.size(); i += 2) {
    auto s = stimulus_of(turns_[i].text);
    if (!s) throw InvariantViolation("test user turn " + std::to_string(i) + " carries no stimulus letter");
    out.push_back(*s);
  }
  return out;
}

std::vector<std::string> Transcript::test_replies() const {
  std::vector<std::string> out;
  if (!test_begin_) return out;
  for (std::size_t i = *test_begin_ + 1; i < turns_.size(); i += 2) out.push_back(turns_[i].text);
  return out;
}

void Transcript::validate() const {
  if (turns_.empty() || turns_[0].role != Role::system) throw InvariantViolation("transcript must start with a system turn");
  for (std::size_t i = 1; i < turns_.size(); ++i) {
    const Role expected = (i % 2 == 1) ? Role::user : Role::assistant;
    if (turns_[i].role != expected)
      throw InvariantViolation("transcript alternation broken at turn " + std::to_string(i));
    if (turns_[i].text.empty()) throw InvariantViolation("empty turn at index " + std::to_string(i));
  }
  if (test_begin_ && (*test_begin_ % 2 != 1 || *test_begin_ > turns_.size()))
    throw InvariantViolation("test section must begin at a user turn");
}

std::optional<std::size_t> stimulus_offset(std::string_view text) {
  std::size_t end = text.size();
  while (end > 0 && std::isspace(static_cast<unsigned char>(text[end - 1]))) --end;
  if (end == 0 || !Letter::valid(text[end - 1])) return std::nullopt;
  // The stimulus must be a standalone token.
  if (end >= 2 && std::isalpha(static_cast<unsigned char>(text[end - 2]))) return std::nullopt;
  return end - 1;
}

std::optional<Letter> stimulus_of(std::string_view text) {
  auto off = stimulus_offset(text);
  if (!off) return std::nullopt;
  return Letter::from(text[*off]);
}

// ---------------------------------------------------------------------------
// Instructions

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

std::string strip_trailing_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

std::string steps_word(int n) { return n == 1 ? "step" : "steps"; }

}  // namespace

std::string build_instructions(int lag, FormatVariant::Kind kind) {
  if (lag < 1) throw InvariantViolation("lag must be >= 1");
  std::string text = strip_trailing_newlines(kind == FormatVariant::Kind::standard ? resources::kStandardInstructions
                                                                                  : resources::kReciteInstructions);
  const std::string n = std::to_string(lag);
  if (kind == FormatVariant::Kind::recite) {
    std::string slots;
    for (int k = 1; k <= lag; ++k) {
      if (k > 1) slots += ", ";
      slots += std::to_string(k) + " back: [letter " + std::to_string(k) + " back]";
    }
    replace_all(text, "{slots}", slots);
  }
  replace_all(text, "{first}", lag == 1 ? std::string("letter") : n + " letters");
  replace_all(text, "{steps}", steps_word(lag));
  replace_all(text, "{n}", n);
  return text;
}

// ---------------------------------------------------------------------------
// Formatting

std::string format_response(Letter current, MaybeLetter retrieved, Label label, const FormatVariant& variant,
                            const std::vector<MaybeLetter>& recent) {
  if (!retrieved && label == Label::identical)
    throw InvariantViolation("a 'none' retrieval cannot be labelled identical");
  const std::string cur(1, current.value());
  const std::string tail = " are " + to_string(label) + ".";
  if (variant.kind == FormatVariant::Kind::standard) return cur + " and " + to_string(retrieved) + tail;

  if (static_cast<int>(recent.size()) != variant.lag)
    throw InvariantViolation("recite format needs exactly " + std::to_string(variant.lag) + " recent letters, got " +
                             std::to_string(recent.size()));
  std::string out = "current: " + cur;
  for (int k = 1; k <= variant.lag; ++k)
    out += ", " + std::to_string(k) + " back: " + to_string(recent[static_cast<std::size_t>(k - 1)]);
  out += "; current letter " + cur + " and letter " + std::to_string(variant.lag) + " back " + to_string(retrieved) + tail;
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

// Cursor over one answer line; keyword matches are case-insensitive.
class LineCursor {
 public:
  explicit LineCursor(std::string_view line) : s_(line) {}

  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ >= s_.size(); }

  void skip_spaces() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\r')) ++pos_;
  }
  bool spaces() {
    const std::size_t start = pos_;
    skip_spaces();
    return pos_ > start;
  }
  bool literal(std::string_view word) {
    if (s_.size() - pos_ < word.size()) return false;
    for (std::size_t k = 0; k < word.size(); ++k)
      if (std::tolower(static_cast<unsigned char>(s_[pos_ + k])) != word[k]) return false;
    pos_ += word.size();
    return true;
  }
  // A keyword must not run into further letters.
  bool keyword(std::string_view word) {
    const std::size_t start = pos_;
    if (!literal(word)) return false;
    if (!at_end() && std::isalpha(static_cast<unsigned char>(s_[pos_]))) {
      pos_ = start;
      return false;
    }
    return true;
  }
  std::optional<Letter> letter() {
    if (at_end()) return std::nullopt;
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(s_[pos_])));
    if (!Letter::valid(c)) return std::nullopt;
    if (pos_ + 1 < s_.size() && std::isalpha(static_cast<unsigned char>(s_[pos_ + 1]))) return std::nullopt;
    ++pos_;
    return Letter::from(c);
  }
  // letter | "none"; sets `ok` false when neither matches.
  MaybeLetter letter_or_none(bool& ok) {
    ok = true;
    if (keyword("none")) return std::nullopt;
    if (auto l = letter()) return l;
    ok = false;
    return std::nullopt;
  }
  std::optional<Label> label() {
    if (keyword("identical")) return Label::identical;
    if (keyword("different")) return Label::different;
    return std::nullopt;
  }
  std::optional<int> number() {
    std::size_t start = pos_;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    if (pos_ == start || pos_ - start > 6) {
      pos_ = start;
      return std::nullopt;
    }
    return std::stoi(std::string(s_.substr(start, pos_ - start)));
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

struct LineResult {
  std::optional<ParsedResponse> parsed;
  std::string reason;
};

LineResult parse_standard_line(std::string_view line, std::size_t offset) {
  LineCursor c(line);
  ParsedResponse r;
  c.skip_spaces();
  auto cur = c.letter();
  if (!cur) return {std::nullopt, "expected current letter"};
  r.current = *cur;
  if (!c.spaces() || !c.keyword("and") || !c.spaces()) return {std::nullopt, "expected ' and '"};
  const std::size_t slot = c.pos();
  bool ok = false;
  r.retrieved = c.letter_or_none(ok);
  if (!ok) return {std::nullopt, "expected retrieved letter or 'none'"};
  r.slot_begin = offset + slot;
  r.slot_end = offset + c.pos();
  if (!c.spaces() || !c.keyword("are") || !c.spaces()) return {std::nullopt, "expected ' are '"};
  auto label = c.label();
  if (!label) return {std::nullopt, "expected identical/different"};
  r.label = *label;
  if (!r.retrieved && r.label == Label::identical) return {std::nullopt, "'none' retrieval labelled identical"};
  return {std::move(r), {}};
}

LineResult parse_recite_line(std::string_view line, std::size_t offset, int lag) {
  LineCursor c(line);
  ParsedResponse r;
  c.skip_spaces();
  if (!c.literal("current:")) return {std::nullopt, "expected 'current:'"};
  c.skip_spaces();
  auto cur = c.letter();
  if (!cur) return {std::nullopt, "expected current letter"};
  r.current = *cur;
  for (int k = 1; k <= lag; ++k) {
    c.skip_spaces();
    if (!c.literal(",")) return {std::nullopt, "expected ','"};
    c.skip_spaces();
    auto num = c.number();
    if (!num || *num != k) return {std::nullopt, "expected '" + std::to_string(k) + " back:'"};
    if (!c.spaces() || !c.literal("back:")) return {std::nullopt, "expected 'back:'"};
    c.skip_spaces();
    bool ok = false;
    auto l = c.letter_or_none(ok);
    if (!ok) return {std::nullopt, "expected letter or 'none' for " + std::to_string(k) + " back"};
    r.recent.push_back(l);
  }
  c.skip_spaces();
  if (!c.literal(";")) return {std::nullopt, "expected ';'"};
  c.skip_spaces();
  if (!c.keyword("current") || !c.spaces() || !c.keyword("letter") || !c.spaces())
    return {std::nullopt, "expected 'current letter'"};
  auto cur2 = c.letter();
  if (!cur2 || *cur2 != r.current) return {std::nullopt, "current letter repeated inconsistently"};
  if (!c.spaces() || !c.keyword("and") || !c.spaces() || !c.keyword("letter") || !c.spaces())
    return {std::nullopt, "expected 'and letter'"};
  auto num = c.number();
  if (!num || *num != lag) return {std::nullopt, "expected lag " + std::to_string(lag)};
  if (!c.spaces() || !c.keyword("back") || !c.spaces()) return {std::nullopt, "expected 'back'"};
  const std::size_t slot = c.pos();
  bool ok = false;
  r.retrieved = c.letter_or_none(ok);
  if (!ok) return {std::nullopt, "expected retrieved letter or 'none'"};
  r.slot_begin = offset + slot;
  r.slot_end = offset + c.pos();
  if (!c.spaces() || !c.keyword("are") || !c.spaces()) return {std::nullopt, "expected ' are '"};
  auto label = c.label();
  if (!label) return {std::nullopt, "expected identical/different"};
  r.label = *label;
  if (!r.retrieved && r.label == Label::identical) return {std::nullopt, "'none' retrieval labelled identical"};
  return {std::move(r), {}};
}

template <typename Fn>
void for_each_line(std::string_view raw, Fn&& fn) {
  std::size_t start = 0;
  while (start <= raw.size()) {
    std::size_t end = raw.find('\n', start);
    if (end == std::string_view::npos) end = raw.size();
    if (!fn(raw.substr(start, end - start), start)) return;
    start = end + 1;
  }
}

LineResult parse_line(std::string_view line, std::size_t offset, const FormatVariant& variant) {
  return variant.kind == FormatVariant::Kind::standard ? parse_standard_line(line, offset)
                                                       : parse_recite_line(line, offset, variant.lag);
}

}  // namespace

ParseOutcome parse_response(std::string_view raw, const FormatVariant& variant) {
  std::optional<ParsedResponse> found;
  std::string reason = "empty reply";
  for_each_line(raw, [&](std::string_view line, std::size_t offset) {
    bool blank = true;
    for (char ch : line) blank = blank && std::isspace(static_cast<unsigned char>(ch));
    if (blank) return true;
    LineResult r = parse_line(line, offset, variant);
    if (r.parsed) {
      found = std::move(r.parsed);
      return false;
    }
    if (reason == "empty reply") reason = r.reason;
    return true;
  });
  if (!found) return MalformedResponse{std::string(raw), "no answer line: " + reason};
  found->raw = std::string(raw);
  return *std::move(found);
}

std::vector<ParsedResponse> parse_answers(std::string_view raw, const FormatVariant& variant) {
  std::vector<ParsedResponse> out;
  for_each_line(raw, [&](std::string_view line, std::size_t offset) {
    LineResult r = parse_line(line, offset, variant);
    if (r.parsed) {
      r.parsed->raw = std::string(line);
      out.push_back(*std::move(r.parsed));
    }
    return true;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Demos

namespace {

MaybeLetter back(const LetterSeq& seq, int step, int lag) {
  if (step - lag < 1) return std::nullopt;
  return seq[static_cast<std::size_t>(step - lag - 1)];
}

std::vector<MaybeLetter> recent_letters(const LetterSeq& seq, int step, int count) {
  std::vector<MaybeLetter> out;
  for (int k = 1; k <= count; ++k) out.push_back(back(seq, step, k));
  return out;
}

}  // namespace

std::string consistent_response(const LetterSeq& seq, int step, int lag, const FormatVariant& variant) {
  if (step < 1 || step > static_cast<int>(seq.size())) throw InvariantViolation("step out of range");
  if (variant.kind == FormatVariant::Kind::recite && lag != variant.lag)
    throw UnsupportedOperation("recite answers cannot express a lag other than the instructed lag");
  const Letter cur = seq[static_cast<std::size_t>(step - 1)];
  const MaybeLetter ret = back(seq, step, lag);
  const Label label = (ret && *ret == cur) ? Label::identical : Label::different;
  std::vector<MaybeLetter> recent;
  if (variant.kind == FormatVariant::Kind::recite) recent = recent_letters(seq, step, variant.lag);
  return format_response(cur, ret, label, variant, recent);
}

std::string ground_truth_response(const LetterSeq& seq, int step, const FormatVariant& variant) {
  return consistent_response(seq, step, variant.lag, variant);
}

std::vector<Turn> build_demo_turns(const LetterSeq& seq, const FormatVariant& variant) {
  std::vector<Turn> turns;
  turns.reserve(seq.size() * 2);
  for (int i = 1; i <= static_cast<int>(seq.size()); ++i) {
    turns.push_back({Role::user, std::string(1, seq[static_cast<std::size_t>(i - 1)].value())});
    turns.push_back({Role::assistant, ground_truth_response(seq, i, variant)});
  }
  return turns;
}

std::vector<Turn> build_demo_turns(const Trial& trial, const FormatVariant& variant) {
  return build_demo_turns(trial.demo, variant);
}

Curriculum build_curriculum_context(const Trial& trial, const FormatVariant& variant, std::uint64_t seed,
                                    const Alphabet& alphabet) {
  const int n = trial.lag;
  if (n < 1) throw InvariantViolation("lag must be >= 1");
  Curriculum c;
  c.system_text = build_instructions(n, variant.kind);
  const int length = static_cast<int>(trial.demo.size());
  const int matches = static_cast<int>(trial.demo_matches.size());
  for (int k = 1; k <= n; ++k) {
    CurriculumBlock block;
    block.lag = k;
    block.first_turn = c.turns.size();
    if (k == n) {
      block.demo = trial.demo;
    } else {
      SequenceSpec spec{k, length, std::min(matches, length - k), LurePolicy::uncontrolled};
      SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
      std::vector<int> positions;
      block.demo = generate_sequence(spec, alphabet, rng, positions);
    }
    const FormatVariant block_variant{variant.kind, k};
    std::vector<Turn> turns = build_demo_turns(block.demo, block_variant);
    if (k < n) turns.front().text = build_instructions(k, variant.kind) + "\n\n" + turns.front().text;
    c.turns.insert(c.turns.end(), turns.begin(), turns.end());
    c.blocks.push_back(std::move(block));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Interactive demo messages

std::string format_sequence_list(const LetterSeq& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ", ";
    out += seq[i].value();
  }
  return out;
}

namespace {

std::string question(const LetterSeq& seq) {
  return "Now, given the sequence " + format_sequence_list(seq) + ",\nwhat should the answers be?";
}

}  // namespace

std::string interactive_opening(const LetterSeq& example, const LetterSeq& q, const FormatVariant& variant) {
  std::string out = "For example, given the sequence " + format_sequence_list(example) + ",\nthe answers should be:\n";
  for (int i = 1; i <= static_cast<int>(example.size()); ++i) out += ground_truth_response(example, i, variant) + "\n";
  return out + question(q);
}

std::string interactive_feedback(const LetterSeq& answered, bool all_correct, const FormatVariant& variant,
                                 const std::optional<LetterSeq>& next) {
  std::string out;
  if (all_correct) {
    out = "This is correct.\n";
  } else {
    const int n = variant.lag;
    const std::string unit = std::to_string(n) + " " + steps_word(n);
    out = "This is incorrect.\nThe answers should be:\n";
    for (int i = 1; i <= static_cast<int>(answered.size()); ++i) {
      out += ground_truth_response(answered, i, variant) + "\n";
      const MaybeLetter src = back(answered, i, n);
      out += src ? "(The letter " + unit + " ago was " + std::string(1, src->value()) + ".)\n"
                 : "(There was no letter " + unit + " ago.)\n";
    }
  }
  if (next) out += question(*next);
  else out.pop_back();
  return out;
}

std::string interactive_test_lead_in() {
  return "Now, a new sequence begins. The letters will be shown one at a time.\n";
}

}  // namespace nback
