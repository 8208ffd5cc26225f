#pragma once

// Synthetic tokenizations and dumps for attention tests. The tokenizer here is
// deliberately unrelated to anything in the library: template markers, words
// and single punctuation characters.

#include <cctype>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "nback/attention.hpp"

namespace testing_support {

inline nback::TokenTable word_tokenize(const nback::Transcript& t) {
  nback::TokenTable out;
  const auto& turns = t.turns();
  for (std::size_t i = 0; i < turns.size(); ++i) {
    out.push_back({-1, 0, 0, "<|" + nback::to_string(turns[i].role) + "|>"});
    const std::string& s = turns[i].text;
    std::size_t p = 0;
    while (p < s.size()) {
      const auto c = static_cast<unsigned char>(s[p]);
      if (std::isspace(c)) {
        ++p;
        continue;
      }
      std::size_t e = p + 1;
      if (std::isalnum(c))
        while (e < s.size() && std::isalnum(static_cast<unsigned char>(s[e]))) ++e;
      out.push_back({static_cast<int>(i), p, e, s.substr(p, e - p)});
      p = e;
    }
    out.push_back({-1, 0, 0, "<|end|>"});
  }
  return out;
}

/// Writes a dump whose row q of every (layer, head) is given by `row(l, h, q, buffer)`;
/// buffer holds q+1 zeros on entry.
inline void write_rows(const std::filesystem::path& path, nback::DumpShape shape,
                       const std::function<void(std::uint32_t, std::uint32_t, std::uint32_t, float*)>& row) {
  nback::DumpWriter w(path, shape);
  std::vector<float> m(shape.matrix_values());
  for (std::uint32_t l = 0; l < shape.layers; ++l)
    for (std::uint32_t h = 0; h < shape.heads; ++h) {
      std::fill(m.begin(), m.end(), 0.0f);
      for (std::uint32_t q = 0; q < shape.seq_len; ++q) row(l, h, q, m.data() + nback::packed_index(q, 0));
      w.write_matrix(m);
    }
  w.close();
}

inline void write_uniform_dump(const std::filesystem::path& path, nback::DumpShape shape) {
  write_rows(path, shape, [](std::uint32_t, std::uint32_t, std::uint32_t q, float* r) {
    for (std::uint32_t k = 0; k <= q; ++k) r[k] = 1.0f / static_cast<float>(q + 1);
  });
}

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "nback-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
