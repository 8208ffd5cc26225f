#pragma once

#include <compare>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nback/error.hpp"

namespace nback {

/// One lowercase Latin stimulus letter.
class Letter {
 public:
  static Letter from(char c) {
    if (c < 'a' || c > 'z') throw InvariantViolation(std::string("not a lowercase letter: '") + c + "'");
    return Letter(c);
  }
  static constexpr bool valid(char c) { return c >= 'a' && c <= 'z'; }

  constexpr char value() const { return value_; }
  auto operator<=>(const Letter&) const = default;

 private:
  explicit constexpr Letter(char c) : value_(c) {}
  char value_;
};

using LetterSeq = std::vector<Letter>;
/// A retrieved letter, or nothing when the subject answered "none".
using MaybeLetter = std::optional<Letter>;

inline std::string to_string(const LetterSeq& seq) {
  std::string out;
  out.reserve(seq.size());
  for (Letter l : seq) out.push_back(l.value());
  return out;
}

inline LetterSeq to_letters(std::string_view s) {
  LetterSeq out;
  out.reserve(s.size());
  for (char c : s) out.push_back(Letter::from(c));
  return out;
}

inline std::string to_string(const MaybeLetter& l) { return l ? std::string(1, l->value()) : std::string("none"); }

/// Stimulus alphabet: a sorted set of distinct lowercase letters.
class Alphabet {
 public:
  Alphabet() : Alphabet("abcdefghijklmnopqrstuvwxyz") {}
  explicit Alphabet(std::string_view letters);

  const std::string& letters() const { return letters_; }
  std::size_t size() const { return letters_.size(); }
  bool contains(Letter l) const { return letters_.find(l.value()) != std::string::npos; }
  bool operator==(const Alphabet&) const = default;

 private:
  std::string letters_;
};

}  // namespace nback
