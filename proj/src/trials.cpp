#include "nback/trials.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace nback {

std::string to_string(LurePolicy p) {
  switch (p) {
    case LurePolicy::uncontrolled:
      return "uncontrolled";
    case LurePolicy::exclude_adjacent:
      return "exclude_adjacent";
  }
  return "?";
}

LurePolicy lure_policy_from_string(const std::string& s) {
  if (s == "uncontrolled") return LurePolicy::uncontrolled;
  if (s == "exclude_adjacent") return LurePolicy::exclude_adjacent;
  throw ParseError("lure_policy", "unknown lure policy '" + s + "'");
}

namespace {

// Lags (other than n) that must differ at a non-match position i.
std::vector<int> lure_lags(const SequenceSpec& spec, int i) {
  std::vector<int> lags;
  if (spec.lure_policy != LurePolicy::exclude_adjacent) return lags;
  const int n = spec.lag;
  if (n - 1 >= 1 && i - (n - 1) >= 1) lags.push_back(n - 1);
  if (i - (n + 1) >= 1) lags.push_back(n + 1);
  return lags;
}

void check_feasible(const SequenceSpec& spec, const Alphabet& alphabet) {
  const int n = spec.lag, len = spec.length;
  if (n < 1) throw InfeasibleConstraints("lag must be >= 1, got " + std::to_string(n));
  if (len <= n)
    throw InfeasibleConstraints("length " + std::to_string(len) + " must exceed lag " + std::to_string(n));
  if (spec.matches < 0 || spec.matches > len - n)
    throw InfeasibleConstraints("matches " + std::to_string(spec.matches) + " outside [0, " +
                                std::to_string(len - n) + "]");
  if (alphabet.size() < 2) throw InfeasibleConstraints("alphabet needs at least 2 letters");
  // Worst-case number of letters a non-match position must avoid.
  std::size_t worst = 0;
  for (int i = 1; i <= len; ++i) {
    std::size_t excluded = (i > n ? 1 : 0) + lure_lags(spec, i).size();
    worst = std::max(worst, excluded);
  }
  if (alphabet.size() <= worst)
    throw InfeasibleConstraints("lure policy " + to_string(spec.lure_policy) + " needs more than " +
                                std::to_string(worst) + " letters; alphabet has " +
                                std::to_string(alphabet.size()));
}

}  // namespace

LetterSeq generate_sequence(const SequenceSpec& spec, const Alphabet& alphabet, SplitMix64& rng,
                            std::vector<int>& match_positions) {
  check_feasible(spec, alphabet);
  const int n = spec.lag, len = spec.length;

  // Partial Fisher-Yates over the candidate positions n+1..len.
  std::vector<int> candidates(static_cast<std::size_t>(len - n));
  std::iota(candidates.begin(), candidates.end(), n + 1);
  const auto pool = static_cast<std::uint64_t>(candidates.size());
  for (int j = 0; j < spec.matches; ++j) {
    const auto r = static_cast<std::size_t>(j + rng.below(pool - static_cast<std::uint64_t>(j)));
    std::swap(candidates[static_cast<std::size_t>(j)], candidates[r]);
  }
  match_positions.assign(candidates.begin(), candidates.begin() + spec.matches);
  std::sort(match_positions.begin(), match_positions.end());

  std::vector<bool> is_match(static_cast<std::size_t>(len + 1), false);
  for (int p : match_positions) is_match[static_cast<std::size_t>(p)] = true;

  std::string seq(static_cast<std::size_t>(len + 1), '\0');  // 1-based
  const std::string& letters = alphabet.letters();
  std::string allowed;
  for (int i = 1; i <= len; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    if (is_match[ui]) {
      seq[ui] = seq[ui - static_cast<std::size_t>(n)];
      continue;
    }
    std::set<char> excluded;
    if (i > n) excluded.insert(seq[ui - static_cast<std::size_t>(n)]);
    for (int lag : lure_lags(spec, i)) excluded.insert(seq[ui - static_cast<std::size_t>(lag)]);
    allowed.clear();
    for (char c : letters)
      if (!excluded.count(c)) allowed.push_back(c);
    seq[ui] = allowed[static_cast<std::size_t>(rng.below(allowed.size()))];
  }
  return to_letters(std::string_view(seq).substr(1));
}

Trial generate_trial(const SequenceSpec& spec, std::uint64_t seed, const Alphabet& alphabet, int id) {
  return generate_trial(spec, spec, seed, alphabet, id);
}

Trial generate_trial(const SequenceSpec& test_spec, const SequenceSpec& demo_spec, std::uint64_t seed,
                     const Alphabet& alphabet, int id) {
  if (test_spec.lag != demo_spec.lag) throw InfeasibleConstraints("demo and test lags differ");
  Trial t;
  t.id = id;
  t.lag = test_spec.lag;
  t.seed = seed;
  SplitMix64 demo_rng(derive_seed(seed, kDemoStreamTag));
  SplitMix64 test_rng(derive_seed(seed, kTestStreamTag));
  t.demo = generate_sequence(demo_spec, alphabet, demo_rng, t.demo_matches);
  t.test = generate_sequence(test_spec, alphabet, test_rng, t.test_matches);
  return t;
}

TrialSet generate_trialset(const SequenceSpec& spec, int count, std::uint64_t base_seed, const Alphabet& alphabet) {
  if (count < 1) throw InfeasibleConstraints("trial count must be >= 1");
  TrialSet set;
  set.alphabet = alphabet;
  set.lag = spec.lag;
  set.length = spec.length;
  set.demo_length = spec.length;
  set.matches = spec.matches;
  set.lure_policy = spec.lure_policy;
  set.base_seed = base_seed;
  SplitMix64 seeds(base_seed);
  set.trials.reserve(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) set.trials.push_back(generate_trial(spec, seeds.next(), alphabet, j));
  return set;
}

std::vector<int> scan_matches(const LetterSeq& seq, int lag) {
  std::vector<int> out;
  for (int i = lag + 1; i <= static_cast<int>(seq.size()); ++i)
    if (seq[static_cast<std::size_t>(i - 1)] == seq[static_cast<std::size_t>(i - 1 - lag)]) out.push_back(i);
  return out;
}

namespace {

void validate_sequence(const char* which, int trial_id, const LetterSeq& seq, const std::vector<int>& matches,
                       const SequenceSpec& spec, const Alphabet& alphabet) {
  const std::string where = "trial " + std::to_string(trial_id) + " " + which;
  if (static_cast<int>(seq.size()) != spec.length)
    throw ValidationError(where + ": length " + std::to_string(seq.size()) + " != " + std::to_string(spec.length));
  for (Letter l : seq)
    if (!alphabet.contains(l)) throw ValidationError(where + ": letter '" + std::string(1, l.value()) + "' not in alphabet");
  if (static_cast<int>(matches.size()) != spec.matches)
    throw ValidationError(where + ": " + std::to_string(matches.size()) + " match positions, expected " +
                          std::to_string(spec.matches));
  if (!std::is_sorted(matches.begin(), matches.end()) ||
      std::adjacent_find(matches.begin(), matches.end()) != matches.end())
    throw ValidationError(where + ": match positions not strictly increasing");
  if (scan_matches(seq, spec.lag) != matches)
    throw ValidationError(where + ": match positions disagree with lag-" + std::to_string(spec.lag) + " scan");
  if (spec.lure_policy == LurePolicy::exclude_adjacent) {
    for (int i = 1; i <= spec.length; ++i) {
      if (std::binary_search(matches.begin(), matches.end(), i)) continue;
      for (int lag : lure_lags(spec, i))
        if (seq[static_cast<std::size_t>(i - 1)] == seq[static_cast<std::size_t>(i - 1 - lag)])
          throw ValidationError(where + ": lure at position " + std::to_string(i) + " (lag " + std::to_string(lag) + ")");
    }
  }
}

}  // namespace

void validate_trial(const Trial& t, const SequenceSpec& test_spec, const SequenceSpec& demo_spec,
                    const Alphabet& alphabet) {
  if (t.lag != test_spec.lag) throw ValidationError("trial " + std::to_string(t.id) + ": lag mismatch");
  validate_sequence("demo", t.id, t.demo, t.demo_matches, demo_spec, alphabet);
  validate_sequence("test", t.id, t.test, t.test_matches, test_spec, alphabet);
}

void validate_trialset(const TrialSet& set) {
  if (set.trials.empty()) throw ValidationError("trial set is empty");
  const SequenceSpec test_spec{set.lag, set.length, set.matches, set.lure_policy};
  const SequenceSpec demo_spec{set.lag, set.demo_length, set.matches, set.lure_policy};
  std::set<int> ids;
  for (const Trial& t : set.trials) {
    if (!ids.insert(t.id).second) throw ValidationError("duplicate trial id " + std::to_string(t.id));
    validate_trial(t, test_spec, demo_spec, set.alphabet);
  }
}

}  // namespace nback
