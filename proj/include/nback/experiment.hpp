#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nback/attention.hpp"
#include "nback/metrics.hpp"
#include "nback/protocols.hpp"
#include "nback/trials.hpp"

namespace nback {

inline constexpr const char* kRunLogSchema = "nback-runlog/1";
std::string tool_version();

enum class Command { run, score, interactive, curriculum };
std::string to_string(Command c);
Command command_from_string(const std::string& s);

struct HistoryParams {
  int forced_lag = 1;
  std::vector<int> prefixes;
};

/// One protocol invocation. Config files use the JSON form (docs/formats.md).
struct ExperimentConfig {
  Command command = Command::run;
  nlohmann::json subject;
  /// {"path": file} or generation parameters {lag, count, length, matches,
  /// seed, lure_policy, alphabet}.
  nlohmann::json trials;
  bool with_demo = true;
  FormatVariant::Kind variant = FormatVariant::Kind::standard;
  DecodingSettings decoding;
  std::optional<HistoryParams> history;  // run only
  std::vector<int> score_lags;           // score only; empty means 1..min(10, L-1)
  ScoreTarget score_target = ScoreTarget::retrieved_slot;
  InteractiveLimits limits;
  std::filesystem::path output = "out";
  std::optional<std::filesystem::path> log;
  int parallelism = 1;
  std::uint64_t seed = 0;
  bool timestamps = true;

  std::filesystem::path log_path() const;
};

/// Unknown keys are rejected. Relative trial paths resolve against `base`.
ExperimentConfig experiment_from_json(const nlohmann::json& j, Command command, const std::filesystem::path& base = {});
nlohmann::json to_json(const ExperimentConfig& c);

TrialSet resolve_trials(const ExperimentConfig& c);
RunConfig run_config(const ExperimentConfig& c, const TrialSet& set);
/// Short name for a subject spec: its "label", else type plus a content hash.
std::string subject_label(const nlohmann::json& subject);

/// The part of a configuration that determines results (no paths, no
/// parallelism); the log header stores it and the config hash covers it.
nlohmann::json identity_json(const ExperimentConfig& c, const TrialSet& set);
std::string config_hash(const nlohmann::json& identity);

struct RunLogHeader {
  std::string schema = kRunLogSchema;
  std::string tool_version;
  std::string config_hash;
  nlohmann::json config;
};
nlohmann::json to_json(const RunLogHeader& h);
RunLogHeader run_log_header_from_json(const nlohmann::json& j);

struct RunLog {
  RunLogHeader header;
  std::vector<RunRecord> records;
  /// Byte length of the well-formed prefix; a torn last line lies beyond it.
  std::uintmax_t valid_bytes = 0;
  bool torn_tail = false;
};
/// Reads a log; an unterminated or unparsable last line is ignored. Schema
/// mismatches raise ParseError("schema").
RunLog read_run_log(const std::filesystem::path& path);

/// Resume key: trial id, plus the prefix length for history records.
std::string job_key(const RunRecord& r);

struct ExperimentResult {
  std::filesystem::path log;
  int jobs = 0;
  int skipped = 0;    // already in the log
  int written = 0;
  int incomplete = 0; // failed records in the whole log
};

using ProgressFn = std::function<void(const std::string&)>;

/// Runs every pending job, appending records to the log in job order
/// regardless of parallelism. An existing log is resumed when its config
/// hash matches and rejected otherwise.
ExperimentResult run_experiment(const ExperimentConfig& c, const ProgressFn& progress = {});

// ---------------------------------------------------------------------------
// MRAT over a log

/// Dumps are looked up as <dir>/trial-<id>/attention.bin and tokens.json.
std::filesystem::path dump_dir_for(const std::filesystem::path& dir, int trial_id);

/// Requests dumps from an attention-capable subject for every complete
/// record lacking one.
void collect_dumps(const RunLog& log, const nlohmann::json& subject, const std::filesystem::path& dir);

struct MratRun {
  std::vector<MratCell> cells;
  std::vector<std::string> warnings;
  int trials = 0;
};
MratRun mrat_for_log(const RunLog& log, const std::filesystem::path& dir, int threads = 1);

void write_mrat_cells(const std::filesystem::path& path, const std::vector<MratCell>& cells,
                      const std::vector<std::string>& header_lines);
std::vector<MratCell> read_mrat_cells(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Report

struct ReportOptions {
  bool force = false;
  std::vector<std::filesystem::path> mrat_cells;  // zero or two files
  int mrat_bins = 16;
  double mrat_lo = 0.2, mrat_hi = 1.0;
  TierThresholds thresholds;
};

struct ReportResult {
  std::vector<std::filesystem::path> files;
  std::string summary;
};

/// Writes summary.txt and plot-ready TSV files into `out`. Logs that
/// describe the same aggregate (subject, protocol, lag, demo, context,
/// variant) must share a config hash unless `force` is set.
ReportResult write_report(const std::vector<std::filesystem::path>& logs, const std::filesystem::path& out,
                          const ReportOptions& options = {});

}  // namespace nback
