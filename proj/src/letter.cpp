#include "nback/letter.hpp"

#include <algorithm>

namespace nback {

Alphabet::Alphabet(std::string_view letters) : letters_(letters) {
  for (char c : letters_) Letter::from(c);
  std::sort(letters_.begin(), letters_.end());
  if (std::adjacent_find(letters_.begin(), letters_.end()) != letters_.end())
    throw InvariantViolation("alphabet contains duplicate letters: " + std::string(letters));
}

}  // namespace nback
