#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nback/dialogue.hpp"
#include "nback/protocols.hpp"

namespace nback {

// ---------------------------------------------------------------------------
// Dump files. Layout (docs/formats.md): a 32-byte header, then one chunk per
// layer holding `heads` packed lower-triangular float32 matrices. Row q of a
// matrix stores keys 0..q.

inline constexpr char kDumpMagic[8] = {'N', 'B', 'K', 'A', 'T', 'T', 'N', '1'};
inline constexpr std::uint32_t kDumpVersion = 1;
inline constexpr std::uint32_t kEndianMarker = 0x01020304;
inline constexpr std::uint64_t kDumpHeaderBytes = 32;

struct DumpShape {
  std::uint32_t layers = 0;
  std::uint32_t heads = 0;
  std::uint32_t seq_len = 0;

  std::uint64_t matrix_values() const { return std::uint64_t{seq_len} * (seq_len + 1) / 2; }
  std::uint64_t total_values() const { return matrix_values() * layers * heads; }
  bool operator==(const DumpShape&) const = default;
};

/// Offset of (q, k) in a packed matrix; requires k <= q.
inline std::uint64_t packed_index(std::uint64_t q, std::uint64_t k) { return q * (q + 1) / 2 + k; }

/// Writes matrices in (layer, head) order without holding more than one.
class DumpWriter {
 public:
  DumpWriter(const std::filesystem::path& path, DumpShape shape);
  ~DumpWriter();
  DumpWriter(const DumpWriter&) = delete;
  DumpWriter& operator=(const DumpWriter&) = delete;

  void write_matrix(std::span<const float> packed);
  /// Throws ValidationError unless every matrix was written.
  void close();

 private:
  int fd_ = -1;
  DumpShape shape_;
  std::uint64_t written_ = 0;
  std::filesystem::path path_;
};

/// Random access to one matrix at a time. read_matrix is safe to call from
/// several threads.
class DumpReader {
 public:
  explicit DumpReader(const std::filesystem::path& path);
  ~DumpReader();
  DumpReader(const DumpReader&) = delete;
  DumpReader& operator=(const DumpReader&) = delete;

  const DumpShape& shape() const { return shape_; }
  /// Written on a host of the other byte order; values are swapped on read.
  bool byte_swapped() const { return swapped_; }
  void read_matrix(std::uint32_t layer, std::uint32_t head, std::vector<float>& out) const;

 private:
  int fd_ = -1;
  DumpShape shape_;
  bool swapped_ = false;
  std::filesystem::path path_;
};

/// A whole dump in memory. Only for dumps that fit comfortably.
struct AttentionTensor {
  DumpShape shape;
  std::vector<float> values;  // matrices in file order

  float at(std::uint32_t layer, std::uint32_t head, std::uint32_t q, std::uint32_t k) const;
};
AttentionTensor load_dump(const std::filesystem::path& path);
void write_dump(const std::filesystem::path& path, const AttentionTensor& t);

/// Weights in [0, 1] and every row summing to 1 within `tolerance`; throws
/// ValidationError naming the first bad (layer, head, row).
void validate_dump(const DumpReader& reader, double tolerance = 1e-4);

// ---------------------------------------------------------------------------
// Token table: token index -> (turn, character range, text). Turn -1 marks
// chat-template tokens that belong to no transcript turn.

struct TokenSpan {
  int turn = -1;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string text;
  bool operator==(const TokenSpan&) const = default;
};
using TokenTable = std::vector<TokenSpan>;

nlohmann::json token_table_to_json(const TokenTable& t);
TokenTable token_table_from_json(const nlohmann::json& j);
TokenTable read_token_table(const std::filesystem::path& path);
void write_token_table(const std::filesystem::path& path, const TokenTable& t);

/// Tokens must appear in transcript order, quote their turn text exactly and
/// leave only whitespace uncovered. Throws AlignmentError at the first bad
/// token index (the table size when text is missing at the end).
void check_alignment(const TokenTable& table, const Transcript& transcript);

enum class TokenSlot { stimulus, retrieved_letter, other };
std::string to_string(TokenSlot s);

struct TokenInfo {
  std::optional<Role> role;  // empty for template tokens
  int step = 0;              // test step, 0 outside the test section
  TokenSlot slot = TokenSlot::other;
};

/// Role, test step and slot of every token of an aligned table.
std::vector<TokenInfo> annotate_tokens(const TokenTable& table, const RunRecord& record);

// ---------------------------------------------------------------------------
// Mean retrieval attention

struct RetrievalEvent {
  int trial_id = 0;
  int step = 0;
  std::uint32_t query = 0;  // first token of the retrieved-letter slot of reply i
  std::uint32_t key = 0;    // first token of stimulus i-n in the test section
  bool operator==(const RetrievalEvent&) const = default;
};

struct RetrievalEvents {
  std::vector<RetrievalEvent> events;
  /// Slots spanning several tokens (the first one is used).
  std::vector<std::string> warnings;
};

/// One event per generated step i > n with a parsed reply.
RetrievalEvents locate_retrieval_events(const RunRecord& record, const TokenTable& table, std::uint32_t seq_len,
                                        int n);

struct MratCell {
  int trial = 0;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;
  double value = 0.0;
};

/// Per (layer, head) mean of attention[query][key] over the events. The
/// streaming form reads one matrix at a time per worker thread.
std::vector<MratCell> compute_mrat(const DumpReader& reader, const std::vector<RetrievalEvent>& events,
                                   int threads = 1);
std::vector<MratCell> compute_mrat(const AttentionTensor& tensor, const std::vector<RetrievalEvent>& events);

struct MratHistogram {
  double lo = 0.2, hi = 1.0;
  int bins = 0;
  std::vector<int> raw_a, raw_b;
  std::vector<double> scaled_a, scaled_b;
  /// Larger collection size over smaller; applied to the smaller one.
  double scale_factor = 1.0;
  std::size_t size_a = 0, size_b = 0;

  double edge(int i) const { return lo + (hi - lo) * i / bins; }
};

/// Bins are [edge(i), edge(i+1)); the last bin also takes hi. Values outside
/// [lo, hi] are not counted.
MratHistogram mrat_histogram(const std::vector<MratCell>& a, const std::vector<MratCell>& b, double lo = 0.2,
                             double hi = 1.0, int bins = 16);

}  // namespace nback
