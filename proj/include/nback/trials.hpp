#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nback/letter.hpp"
#include "nback/rng.hpp"

namespace nback {

inline constexpr const char* kGeneratorVersion = "nback-gen/1";

enum class LurePolicy { uncontrolled, exclude_adjacent };

std::string to_string(LurePolicy p);
LurePolicy lure_policy_from_string(const std::string& s);

/// Parameters of one generated sequence.
struct SequenceSpec {
  int lag = 2;
  int length = 24;
  int matches = 8;
  LurePolicy lure_policy = LurePolicy::uncontrolled;
  bool operator==(const SequenceSpec&) const = default;
};

/// One n-back instance. Match positions are 1-based and sorted.
struct Trial {
  int id = 0;
  int lag = 2;
  std::uint64_t seed = 0;
  LetterSeq demo;
  std::vector<int> demo_matches;
  LetterSeq test;
  std::vector<int> test_matches;
  bool operator==(const Trial&) const = default;
};

struct TrialSet {
  std::string generator_version = kGeneratorVersion;
  Alphabet alphabet;
  int lag = 2;
  int length = 24;
  int demo_length = 24;
  int matches = 8;
  LurePolicy lure_policy = LurePolicy::uncontrolled;
  std::uint64_t base_seed = 0;
  std::vector<Trial> trials;
  bool operator==(const TrialSet&) const = default;
};

/// Generates one sequence with exactly `spec.matches` lag-n repeats and no
/// other lag-n coincidences. Throws InfeasibleConstraints on bad parameters.
/// Returns the sequence and writes the sorted 1-based match positions.
LetterSeq generate_sequence(const SequenceSpec& spec, const Alphabet& alphabet, SplitMix64& rng,
                            std::vector<int>& match_positions);

/// Demo and test are drawn with the same spec from independent seed streams.
Trial generate_trial(const SequenceSpec& spec, std::uint64_t seed, const Alphabet& alphabet = {}, int id = 0);
Trial generate_trial(const SequenceSpec& test_spec, const SequenceSpec& demo_spec, std::uint64_t seed,
                     const Alphabet& alphabet = {}, int id = 0);

/// `count` trials whose seeds are successive SplitMix64 outputs of `base_seed`.
TrialSet generate_trialset(const SequenceSpec& spec, int count, std::uint64_t base_seed,
                           const Alphabet& alphabet = {});

/// 1-based positions i > lag with seq[i] == seq[i - lag].
std::vector<int> scan_matches(const LetterSeq& seq, int lag);

/// Checks every Trial invariant; throws ValidationError naming the problem.
void validate_trial(const Trial& t, const SequenceSpec& test_spec, const SequenceSpec& demo_spec,
                    const Alphabet& alphabet);
void validate_trialset(const TrialSet& set);

// Stream tags used to derive the demo and test sub-seeds of a trial.
inline constexpr std::uint64_t kDemoStreamTag = 0x64656d6f;  // "demo"
inline constexpr std::uint64_t kTestStreamTag = 0x74657374;  // "test"

}  // namespace nback
