#include "nback/attention.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

namespace nback {

using json = nlohmann::json;

namespace {

std::string sys_error(const std::string& what, const std::filesystem::path& p) {
  return what + " " + p.string() + ": " + std::strerror(errno);
}

void write_all(int fd, const void* data, std::size_t n, const std::filesystem::path& p) {
  const char* c = static_cast<const char*>(data);
  while (n > 0) {
    const ssize_t w = ::write(fd, c, n);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw Error(sys_error("cannot write", p));
    }
    c += w;
    n -= static_cast<std::size_t>(w);
  }
}

void pread_all(int fd, void* data, std::size_t n, std::uint64_t offset, const std::filesystem::path& p) {
  char* c = static_cast<char*>(data);
  while (n > 0) {
    const ssize_t r = ::pread(fd, c, n, static_cast<off_t>(offset));
    if (r < 0) {
      if (errno == EINTR) continue;
      throw Error(sys_error("cannot read", p));
    }
    if (r == 0) throw ParseError("dump", "unexpected end of file in " + p.string());
    c += r;
    n -= static_cast<std::size_t>(r);
    offset += static_cast<std::uint64_t>(r);
  }
}

std::uint32_t load_u32(const unsigned char* p, bool swapped) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return swapped ? __builtin_bswap32(v) : v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dump files

DumpWriter::DumpWriter(const std::filesystem::path& path, DumpShape shape) : shape_(shape), path_(path) {
  if (shape.layers == 0 || shape.heads == 0 || shape.seq_len == 0)
    throw ValidationError("dump shape must be positive in every dimension");
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(sys_error("cannot create", path));
  unsigned char header[kDumpHeaderBytes] = {};
  std::memcpy(header, kDumpMagic, 8);
  const std::uint32_t fields[6] = {kDumpVersion, kEndianMarker, shape.layers, shape.heads, shape.seq_len, 0};
  std::memcpy(header + 8, fields, sizeof fields);
  write_all(fd_, header, sizeof header, path_);
}

DumpWriter::~DumpWriter() {
  if (fd_ >= 0) ::close(fd_);
}

void DumpWriter::write_matrix(std::span<const float> packed) {
  if (fd_ < 0) throw InvariantViolation("dump writer is closed");
  if (packed.size() != shape_.matrix_values())
    throw ValidationError("matrix has " + std::to_string(packed.size()) + " values, expected " +
                          std::to_string(shape_.matrix_values()));
  if (written_ == std::uint64_t{shape_.layers} * shape_.heads) throw ValidationError("dump already complete");
  write_all(fd_, packed.data(), packed.size_bytes(), path_);
  ++written_;
}

void DumpWriter::close() {
  if (fd_ < 0) return;
  const std::uint64_t expected = std::uint64_t{shape_.layers} * shape_.heads;
  const int fd = fd_;
  fd_ = -1;
  if (::close(fd) != 0) throw Error(sys_error("cannot close", path_));
  if (written_ != expected)
    throw ValidationError("dump " + path_.string() + " has " + std::to_string(written_) + " of " +
                          std::to_string(expected) + " matrices");
}

DumpReader::DumpReader(const std::filesystem::path& path) : path_(path) {
  fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd_ < 0) throw Error(sys_error("cannot open", path));
  try {
    unsigned char h[kDumpHeaderBytes];
    pread_all(fd_, h, sizeof h, 0, path_);
    if (std::memcmp(h, kDumpMagic, 8) != 0) throw ParseError("dump.magic", path.string() + " is not an attention dump");
    const std::uint32_t marker = load_u32(h + 12, false);
    if (marker == kEndianMarker) swapped_ = false;
    else if (__builtin_bswap32(marker) == kEndianMarker) swapped_ = true;
    else throw ParseError("dump.endianness", "unrecognised byte-order marker");
    const std::uint32_t version = load_u32(h + 8, swapped_);
    if (version != kDumpVersion) throw ParseError("dump.version", "unsupported version " + std::to_string(version));
    shape_ = {load_u32(h + 16, swapped_), load_u32(h + 20, swapped_), load_u32(h + 24, swapped_)};
    if (shape_.layers == 0 || shape_.heads == 0 || shape_.seq_len == 0)
      throw ParseError("dump.shape", "zero dimension");
    const std::uint64_t expected = kDumpHeaderBytes + shape_.total_values() * sizeof(float);
    const auto actual = std::filesystem::file_size(path);
    if (actual != expected)
      throw ParseError("dump.size", std::to_string(actual) + " bytes, header implies " + std::to_string(expected));
  } catch (...) {
    ::close(fd_);
    throw;
  }
}

DumpReader::~DumpReader() {
  if (fd_ >= 0) ::close(fd_);
}

void DumpReader::read_matrix(std::uint32_t layer, std::uint32_t head, std::vector<float>& out) const {
  if (layer >= shape_.layers || head >= shape_.heads)
    throw ValidationError("no matrix (" + std::to_string(layer) + ", " + std::to_string(head) + ")");
  const std::uint64_t n = shape_.matrix_values();
  out.resize(n);
  const std::uint64_t index = std::uint64_t{layer} * shape_.heads + head;
  pread_all(fd_, out.data(), n * sizeof(float), kDumpHeaderBytes + index * n * sizeof(float), path_);
  if (swapped_) {
    for (float& f : out) {
      std::uint32_t v;
      std::memcpy(&v, &f, 4);
      v = __builtin_bswap32(v);
      std::memcpy(&f, &v, 4);
    }
  }
}

float AttentionTensor::at(std::uint32_t layer, std::uint32_t head, std::uint32_t q, std::uint32_t k) const {
  if (layer >= shape.layers || head >= shape.heads || q >= shape.seq_len || k > q)
    throw ValidationError("attention index out of range");
  const std::uint64_t base = (std::uint64_t{layer} * shape.heads + head) * shape.matrix_values();
  return values[base + packed_index(q, k)];
}

AttentionTensor load_dump(const std::filesystem::path& path) {
  const DumpReader reader(path);
  AttentionTensor t;
  t.shape = reader.shape();
  t.values.reserve(t.shape.total_values());
  std::vector<float> m;
  for (std::uint32_t l = 0; l < t.shape.layers; ++l)
    for (std::uint32_t h = 0; h < t.shape.heads; ++h) {
      reader.read_matrix(l, h, m);
      t.values.insert(t.values.end(), m.begin(), m.end());
    }
  return t;
}

void write_dump(const std::filesystem::path& path, const AttentionTensor& t) {
  if (t.values.size() != t.shape.total_values()) throw ValidationError("tensor size does not match its shape");
  DumpWriter w(path, t.shape);
  const std::size_t n = t.shape.matrix_values();
  for (std::size_t off = 0; off < t.values.size(); off += n) w.write_matrix({t.values.data() + off, n});
  w.close();
}

void validate_dump(const DumpReader& reader, double tolerance) {
  const DumpShape& s = reader.shape();
  std::vector<float> m;
  for (std::uint32_t l = 0; l < s.layers; ++l)
    for (std::uint32_t h = 0; h < s.heads; ++h) {
      reader.read_matrix(l, h, m);
      std::uint64_t idx = 0;
      for (std::uint32_t q = 0; q < s.seq_len; ++q) {
        double sum = 0;
        for (std::uint32_t k = 0; k <= q; ++k, ++idx) {
          const float w = m[idx];
          if (!(w >= 0.0f && w <= 1.0f))
            throw ValidationError("weight " + std::to_string(w) + " outside [0, 1] at layer " + std::to_string(l) +
                                  ", head " + std::to_string(h) + ", row " + std::to_string(q));
          sum += w;
        }
        if (std::abs(sum - 1.0) > tolerance)
          throw ValidationError("row sum " + std::to_string(sum) + " at layer " + std::to_string(l) + ", head " +
                                std::to_string(h) + ", row " + std::to_string(q));
      }
    }
}

// ---------------------------------------------------------------------------
// Token table

json token_table_to_json(const TokenTable& t) {
  json tokens = json::array();
  for (const TokenSpan& s : t) tokens.push_back({s.turn, s.begin, s.end, s.text});
  return {{"format", "nback-tokens/1"}, {"tokens", std::move(tokens)}};
}

TokenTable token_table_from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != "nback-tokens/1")
    throw ParseError("format", "expected \"nback-tokens/1\"");
  const json& tokens = j.at("tokens");
  if (!tokens.is_array()) throw ParseError("tokens", "expected an array");
  TokenTable out;
  out.reserve(tokens.size());
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const json& e = tokens[k];
    const std::string where = "tokens[" + std::to_string(k) + "]";
    if (!e.is_array() || e.size() != 4 || !e[0].is_number_integer() || !e[1].is_number_unsigned() ||
        !e[2].is_number_unsigned() || !e[3].is_string())
      throw ParseError(where, "expected [turn, begin, end, text]");
    out.push_back({e[0].get<int>(), e[1].get<std::size_t>(), e[2].get<std::size_t>(), e[3].get<std::string>()});
  }
  return out;
}

TokenTable read_token_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return token_table_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ParseError("token table", e.what());
  }
}

void write_token_table(const std::filesystem::path& path, const TokenTable& t) {
  std::ofstream out(path);
  if (!out) throw Error("cannot create " + path.string());
  out << token_table_to_json(t).dump() << '\n';
  if (!out) throw Error("cannot write " + path.string());
}

void check_alignment(const TokenTable& table, const Transcript& transcript) {
  const auto& turns = transcript.turns();
  std::size_t turn = 0, pos = 0;  // text before (turn, pos) is accounted for
  const auto blank = [&](std::size_t t, std::size_t from, std::size_t to) {
    const std::string& s = turns[t].text;
    for (std::size_t c = from; c < to && c < s.size(); ++c)
      if (!std::isspace(static_cast<unsigned char>(s[c]))) return false;
    return true;
  };
  const auto advance = [&](std::size_t to_turn, std::size_t to_pos, long index) {
    for (; turn < to_turn; ++turn, pos = 0)
      if (!blank(turn, pos, turns[turn].text.size()))
        throw AlignmentError("text of turn " + std::to_string(turn) + " not covered by tokens", index);
    if (!blank(turn, pos, to_pos))
      throw AlignmentError("text of turn " + std::to_string(turn) + " not covered by tokens", index);
  };

  for (std::size_t k = 0; k < table.size(); ++k) {
    const TokenSpan& tok = table[k];
    const long index = static_cast<long>(k);
    if (tok.turn < 0) continue;
    const auto t = static_cast<std::size_t>(tok.turn);
    if (t >= turns.size()) throw AlignmentError("token refers to missing turn " + std::to_string(t), index);
    if (t < turn || (t == turn && tok.begin < pos)) throw AlignmentError("token out of transcript order", index);
    const std::string& text = turns[t].text;
    if (tok.end < tok.begin || tok.end > text.size()) throw AlignmentError("token range outside its turn", index);
    advance(t, tok.begin, index);
    if (text.compare(tok.begin, tok.end - tok.begin, tok.text) != 0)
      throw AlignmentError("token text differs from turn " + std::to_string(t), index);
    pos = tok.end;
  }
  if (!turns.empty()) advance(turns.size() - 1, turns.back().text.size(), static_cast<long>(table.size()));
}

std::string to_string(TokenSlot s) {
  switch (s) {
    case TokenSlot::stimulus:
      return "stimulus";
    case TokenSlot::retrieved_letter:
      return "retrieved-letter";
    case TokenSlot::other:
      return "other";
  }
  return "?";
}

std::vector<TokenInfo> annotate_tokens(const TokenTable& table, const RunRecord& record) {
  if (!record.transcript) throw ValidationError("record has no transcript");
  const Transcript& tr = *record.transcript;
  check_alignment(table, tr);
  const auto& turns = tr.turns();
  const auto begin = tr.test_begin();

  // Character ranges of the slots, per turn.
  std::vector<std::optional<std::pair<std::size_t, std::size_t>>> slot(turns.size());
  std::vector<int> step_of(turns.size(), 0);
  if (begin) {
    for (std::size_t t = *begin; t < turns.size(); ++t) {
      const int step = static_cast<int>((t - *begin) / 2) + 1;
      step_of[t] = step;
      if (turns[t].role == Role::user) {
        if (const auto off = stimulus_offset(turns[t].text)) slot[t] = {{*off, *off + 1}};
      } else if (step <= static_cast<int>(record.steps.size())) {
        const StepRecord& s = record.steps[static_cast<std::size_t>(step - 1)];
        if (s.raw != turns[t].text)
          throw ValidationError("step " + std::to_string(step) + " reply differs from its transcript turn");
        if (const auto* p = as_parsed(s.parsed)) slot[t] = {{p->slot_begin, p->slot_end}};
      }
    }
  }

  std::vector<TokenInfo> out(table.size());
  for (std::size_t k = 0; k < table.size(); ++k) {
    const TokenSpan& tok = table[k];
    if (tok.turn < 0) continue;
    const auto t = static_cast<std::size_t>(tok.turn);
    TokenInfo& info = out[k];
    info.role = turns[t].role;
    info.step = step_of[t];
    if (slot[t] && tok.begin < slot[t]->second && tok.end > slot[t]->first)
      info.slot = turns[t].role == Role::user ? TokenSlot::stimulus : TokenSlot::retrieved_letter;
  }
  return out;
}

// ---------------------------------------------------------------------------
// MRAT

RetrievalEvents locate_retrieval_events(const RunRecord& record, const TokenTable& table, std::uint32_t seq_len,
                                        int n) {
  if (n < 1) throw ValidationError("lag must be >= 1");
  if (table.size() != seq_len)
    throw AlignmentError("token table has " + std::to_string(table.size()) + " entries for a " +
                             std::to_string(seq_len) + "-token dump",
                         static_cast<long>(std::min<std::size_t>(table.size(), seq_len)));
  const std::vector<TokenInfo> info = annotate_tokens(table, record);

  const int steps = static_cast<int>(record.steps.size());
  std::vector<std::vector<std::uint32_t>> query_tokens(static_cast<std::size_t>(steps + 1));
  std::vector<std::vector<std::uint32_t>> key_tokens(static_cast<std::size_t>(steps + 1));
  for (std::size_t k = 0; k < info.size(); ++k) {
    const TokenInfo& t = info[k];
    if (t.step < 1 || t.step > steps) continue;
    if (t.slot == TokenSlot::retrieved_letter) query_tokens[static_cast<std::size_t>(t.step)].push_back(static_cast<std::uint32_t>(k));
    if (t.slot == TokenSlot::stimulus) key_tokens[static_cast<std::size_t>(t.step)].push_back(static_cast<std::uint32_t>(k));
  }

  RetrievalEvents out;
  const auto first = [&](const std::vector<std::uint32_t>& tokens, int step, const char* what) {
    if (tokens.empty()) throw ValidationError(std::string("no token for the ") + what + " of step " + std::to_string(step));
    if (tokens.size() > 1)
      out.warnings.push_back(std::string(what) + " of step " + std::to_string(step) + " spans " +
                             std::to_string(tokens.size()) + " tokens; using the first");
    return tokens.front();
  };
  for (int i = n + 1; i <= steps; ++i) {
    const StepRecord& s = record.steps[static_cast<std::size_t>(i - 1)];
    if (s.forced || !is_parsed(s.parsed)) continue;
    // A reply that never entered the transcript (empty) has no tokens.
    if (query_tokens[static_cast<std::size_t>(i)].empty() && s.raw.empty()) continue;
    RetrievalEvent e;
    e.trial_id = record.trial_id;
    e.step = i;
    e.query = first(query_tokens[static_cast<std::size_t>(i)], i, "retrieved letter");
    e.key = first(key_tokens[static_cast<std::size_t>(i - n)], i - n, "stimulus");
    if (e.key >= e.query) throw ValidationError("source token follows its retrieval at step " + std::to_string(i));
    out.events.push_back(e);
  }
  return out;
}

namespace {

void check_events(const std::vector<RetrievalEvent>& events, const DumpShape& shape) {
  if (events.empty()) throw ValidationError("no retrieval events");
  for (const RetrievalEvent& e : events) {
    if (e.trial_id != events.front().trial_id) throw ValidationError("events from several trials");
    if (e.query >= shape.seq_len || e.key > e.query)
      throw ValidationError("event (" + std::to_string(e.query) + ", " + std::to_string(e.key) + ") at step " +
                            std::to_string(e.step) + " outside the " + std::to_string(shape.seq_len) +
                            "-token matrix");
  }
}

template <class Weight>
double mean_weight(const std::vector<RetrievalEvent>& events, Weight weight) {
  double sum = 0;
  for (const RetrievalEvent& e : events) sum += weight(e.query, e.key);
  return sum / static_cast<double>(events.size());
}

}  // namespace

std::vector<MratCell> compute_mrat(const DumpReader& reader, const std::vector<RetrievalEvent>& events,
                                   int threads) {
  const DumpShape& s = reader.shape();
  check_events(events, s);
  const int trial = events.front().trial_id;
  std::vector<MratCell> cells(std::uint64_t{s.layers} * s.heads);
  std::atomic<std::uint32_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  const auto work = [&] {
    std::vector<float> m;
    try {
      for (std::uint32_t l = next++; l < s.layers; l = next++) {
        for (std::uint32_t h = 0; h < s.heads; ++h) {
          reader.read_matrix(l, h, m);
          const double v =
              mean_weight(events, [&](std::uint32_t q, std::uint32_t k) { return m[packed_index(q, k)]; });
          cells[std::uint64_t{l} * s.heads + h] = {trial, l, h, v};
        }
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = s.layers;
    }
  };
  const int workers = std::clamp(threads, 1, static_cast<int>(s.layers));
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return cells;
}

std::vector<MratCell> compute_mrat(const AttentionTensor& tensor, const std::vector<RetrievalEvent>& events) {
  const DumpShape& s = tensor.shape;
  check_events(events, s);
  std::vector<MratCell> cells;
  cells.reserve(std::uint64_t{s.layers} * s.heads);
  for (std::uint32_t l = 0; l < s.layers; ++l)
    for (std::uint32_t h = 0; h < s.heads; ++h)
      cells.push_back({events.front().trial_id, l, h,
                       mean_weight(events, [&](std::uint32_t q, std::uint32_t k) { return tensor.at(l, h, q, k); })});
  return cells;
}

MratHistogram mrat_histogram(const std::vector<MratCell>& a, const std::vector<MratCell>& b, double lo, double hi,
                             int bins) {
  if (a.empty() || b.empty()) throw ValidationError("histogram needs two non-empty cell collections");
  if (!(lo < hi) || bins < 1) throw ValidationError("histogram needs lo < hi and at least one bin");
  MratHistogram h;
  h.lo = lo;
  h.hi = hi;
  h.bins = bins;
  h.size_a = a.size();
  h.size_b = b.size();
  const auto count = [&](const std::vector<MratCell>& cells) {
    std::vector<int> c(static_cast<std::size_t>(bins), 0);
    for (const MratCell& cell : cells) {
      const double v = cell.value;
      if (!(v >= lo && v <= hi)) continue;
      int i = std::min(bins - 1, static_cast<int>((v - lo) / (hi - lo) * bins));
      while (i > 0 && v < h.edge(i)) --i;
      while (i < bins - 1 && v >= h.edge(i + 1)) ++i;
      ++c[static_cast<std::size_t>(i)];
    }
    return c;
  };
  h.raw_a = count(a);
  h.raw_b = count(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  h.scale_factor = std::max(na, nb) / std::min(na, nb);
  const double fa = na < nb ? nb / na : 1.0;
  const double fb = nb < na ? na / nb : 1.0;
  for (int x : h.raw_a) h.scaled_a.push_back(x * fa);
  for (int x : h.raw_b) h.scaled_b.push_back(x * fb);
  return h;
}

}  // namespace nback
