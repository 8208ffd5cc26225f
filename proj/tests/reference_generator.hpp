#pragma once

// Test-only re-implementation of the trial generator, written from the
// procedure in docs/formats.md and sharing no code with src/trials.cpp.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

namespace reference {

struct Generated {
  std::string demo, test;
  std::vector<int> demo_matches, test_matches;
};

inline std::uint64_t mix(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

struct Stream {
  std::uint64_t s;
  std::uint64_t next() { return mix(s += 0x9E3779B97F4A7C15ull); }
  std::uint64_t below(std::uint64_t b) {
    std::uint64_t limit = (~b + 1) % b;
    std::uint64_t r;
    do r = next(); while (r < limit);
    return r % b;
  }
};

inline std::string sequence(const std::string& alphabet, int n, int len, int k, bool lures, Stream& rng,
                            std::vector<int>& matches) {
  int pool[4096];
  int size = len - n;
  for (int j = 0; j < size; ++j) pool[j] = n + 1 + j;
  for (int j = 0; j < k; ++j) {
    int r = j + static_cast<int>(rng.below(static_cast<std::uint64_t>(size - j)));
    int tmp = pool[j];
    pool[j] = pool[r];
    pool[r] = tmp;
  }
  matches.assign(pool, pool + k);
  std::sort(matches.begin(), matches.end());

  std::string s(static_cast<std::size_t>(len), ' ');
  for (int i = 1; i <= len; ++i) {
    if (std::find(matches.begin(), matches.end(), i) != matches.end()) {
      s[i - 1] = s[i - 1 - n];
      continue;
    }
    std::string banned;
    if (i > n) banned += s[i - 1 - n];
    if (lures && n >= 2 && i - n + 1 >= 1) banned += s[i - n];
    if (lures && i - n - 1 >= 1) banned += s[i - n - 2];
    std::string ok;
    for (char c : alphabet)
      if (banned.find(c) == std::string::npos) ok += c;
    s[i - 1] = ok[rng.below(ok.size())];
  }
  return s;
}

inline Generated generate(std::string alphabet, int n, int len, int k, bool lures, std::uint64_t seed) {
  std::sort(alphabet.begin(), alphabet.end());
  Generated g;
  Stream demo{mix(seed ^ mix(0x64656d6f))};
  Stream test{mix(seed ^ mix(0x74657374))};
  g.demo = sequence(alphabet, n, len, k, lures, demo, g.demo_matches);
  g.test = sequence(alphabet, n, len, k, lures, test, g.test_matches);
  return g;
}

}  // namespace reference
