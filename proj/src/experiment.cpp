#include "nback/experiment.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "nback/json_util.hpp"
#include "nback/rng.hpp"
#include "nback/trialset_io.hpp"

namespace nback {

using json = nlohmann::json;
using jsonutil::field;
using jsonutil::field_or;

std::string tool_version() { return NBACK_VERSION; }

std::string to_string(Command c) {
  switch (c) {
    case Command::run:
      return "run";
    case Command::score:
      return "score";
    case Command::interactive:
      return "interactive";
    case Command::curriculum:
      return "curriculum";
  }
  return "?";
}

Command command_from_string(const std::string& s) {
  if (s == "run") return Command::run;
  if (s == "score") return Command::score;
  if (s == "interactive") return Command::interactive;
  if (s == "curriculum") return Command::curriculum;
  throw ParseError("command", "unknown command '" + s + "'");
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string score_target_name(ScoreTarget t) { return t == ScoreTarget::whole_reply ? "reply" : "slot"; }

ScoreTarget score_target_from(const std::string& s) {
  if (s == "slot") return ScoreTarget::retrieved_slot;
  if (s == "reply") return ScoreTarget::whole_reply;
  throw ParseError("score_target", "expected \"slot\" or \"reply\"");
}

std::vector<int> resolved_score_lags(const ExperimentConfig& c, const TrialSet& set) {
  if (!c.score_lags.empty()) return c.score_lags;
  std::vector<int> lags;
  for (int m = 1; m <= std::min(10, set.length - 1); ++m) lags.push_back(m);
  return lags;
}

}  // namespace

std::filesystem::path ExperimentConfig::log_path() const {
  return log ? *log : output / (to_string(command) + ".jsonl");
}

ExperimentConfig experiment_from_json(const json& j, Command command, const std::filesystem::path& base) {
  if (!j.is_object()) throw ParseError("<root>", "expected an object");
  static const std::set<std::string> common = {"subject", "trials",   "demo",        "variant", "decoding", "output",
                                                "log",     "parallelism", "seed", "timestamps"};
  for (const auto& [key, value] : j.items()) {
    const bool allowed = common.count(key) || (key == "history" && command == Command::run) ||
                         ((key == "score_lags" || key == "score_target") && command == Command::score) ||
                         (key == "limits" && command == Command::interactive);
    if (!allowed) throw ParseError(key, "not a " + to_string(command) + " setting");
  }
  ExperimentConfig c;
  c.command = command;
  c.subject = field<json>(j, "subject");
  if (!c.subject.is_object() || !c.subject.contains("type")) throw ParseError("subject", "expected {\"type\": ...}");
  c.trials = field<json>(j, "trials");
  if (!c.trials.is_object()) throw ParseError("trials", "expected an object");
  if (c.trials.contains("path")) {
    std::filesystem::path p = field<std::string>(c.trials, "path", "trials");
    if (p.is_relative() && !base.empty()) p = base / p;
    if (!std::filesystem::exists(p)) throw ParseError("trials.path", "no such file: " + p.string());
    c.trials["path"] = p.string();
  }
  c.with_demo = field_or<bool>(j, "demo", true);
  c.variant = variant_kind_from_string(field_or<std::string>(j, "variant", "standard"));
  if (j.contains("decoding")) c.decoding = decoding_from_json(j.at("decoding"));
  if (j.contains("history")) {
    const json& h = j.at("history");
    HistoryParams p;
    p.forced_lag = field<int>(h, "forced_lag", "history");
    p.prefixes = field<std::vector<int>>(h, "prefixes", "history");
    if (p.prefixes.empty()) throw ParseError("history.prefixes", "at least one prefix length");
    c.history = p;
  }
  c.score_lags = field_or<std::vector<int>>(j, "score_lags", {});
  c.score_target = score_target_from(field_or<std::string>(j, "score_target", "slot"));
  if (j.contains("limits")) {
    c.limits.max_sequences = field_or<int>(j.at("limits"), "max_sequences", 10, "limits");
    c.limits.max_attempts_per_seq = field_or<int>(j.at("limits"), "max_attempts_per_sequence", 10, "limits");
  }
  c.output = field_or<std::string>(j, "output", "out");
  if (c.output.is_relative() && !base.empty()) c.output = base / c.output;
  if (j.contains("log")) {
    std::filesystem::path p = field<std::string>(j, "log");
    if (p.is_relative() && !base.empty()) p = base / p;
    c.log = p;
  }
  c.parallelism = field_or<int>(j, "parallelism", 1);
  if (c.parallelism < 1) throw ParseError("parallelism", "must be >= 1");
  c.seed = field_or<std::uint64_t>(j, "seed", 0);
  c.timestamps = field_or<bool>(j, "timestamps", true);
  if (command == Command::curriculum && !c.with_demo) throw ParseError("demo", "curriculum needs demonstrations");
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j = {{"subject", c.subject},
            {"trials", c.trials},
            {"demo", c.with_demo},
            {"variant", to_string(c.variant)},
            {"decoding", to_json(c.decoding)},
            {"output", c.output.string()},
            {"parallelism", c.parallelism},
            {"seed", c.seed},
            {"timestamps", c.timestamps}};
  if (c.log) j["log"] = c.log->string();
  if (c.command == Command::run && c.history)
    j["history"] = {{"forced_lag", c.history->forced_lag}, {"prefixes", c.history->prefixes}};
  if (c.command == Command::score) {
    j["score_lags"] = c.score_lags;
    j["score_target"] = score_target_name(c.score_target);
  }
  if (c.command == Command::interactive)
    j["limits"] = {{"max_sequences", c.limits.max_sequences},
                   {"max_attempts_per_sequence", c.limits.max_attempts_per_seq}};
  return j;
}

TrialSet resolve_trials(const ExperimentConfig& c) {
  if (c.trials.contains("path")) return load_trialset(field<std::string>(c.trials, "path", "trials"));
  SequenceSpec spec;
  spec.lag = field<int>(c.trials, "lag", "trials");
  spec.length = field_or<int>(c.trials, "length", 24, "trials");
  spec.matches = field_or<int>(c.trials, "matches", 8, "trials");
  spec.lure_policy = lure_policy_from_string(field_or<std::string>(c.trials, "lure_policy", "uncontrolled", "trials"));
  const int count = field_or<int>(c.trials, "count", 50, "trials");
  const auto seed = field_or<std::uint64_t>(c.trials, "seed", 0, "trials");
  const Alphabet alphabet(field_or<std::string>(c.trials, "alphabet", Alphabet().letters(), "trials"));
  return generate_trialset(spec, count, seed, alphabet);
}

RunConfig run_config(const ExperimentConfig& c, const TrialSet& set) {
  RunConfig r;
  r.lag = set.lag;
  r.with_demo = c.with_demo;
  r.context = c.command == Command::curriculum ? ContextKind::curriculum : ContextKind::standard;
  r.variant = {c.variant, set.lag};
  r.decoding = c.decoding;
  r.seed = c.seed;
  r.record_timestamps = c.timestamps;
  r.validate();
  return r;
}

std::string subject_label(const json& subject) {
  if (subject.contains("label") && subject.at("label").is_string()) return subject.at("label").get<std::string>();
  json rest = subject;
  rest.erase("label");
  return subject.value("type", "subject") + "-" + hex64(fnv1a64(rest.dump())).substr(0, 8);
}

json identity_json(const ExperimentConfig& c, const TrialSet& set) {
  json j = {{"command", to_string(c.command)},
            {"subject", c.subject},
            {"trials",
             {{"fingerprint", hex64(fnv1a64(serialize_trialset(set)))},
              {"lag", set.lag},
              {"length", set.length},
              {"count", set.trials.size()}}},
            {"demo", c.with_demo},
            {"variant", to_string(c.variant)},
            {"decoding", to_json(c.decoding)},
            {"seed", c.seed},
            {"timestamps", c.timestamps}};
  if (c.command == Command::run && c.history)
    j["history"] = {{"forced_lag", c.history->forced_lag}, {"prefixes", c.history->prefixes}};
  if (c.command == Command::score) {
    j["score_lags"] = resolved_score_lags(c, set);
    j["score_target"] = score_target_name(c.score_target);
  }
  if (c.command == Command::interactive)
    j["limits"] = {{"max_sequences", c.limits.max_sequences},
                   {"max_attempts_per_sequence", c.limits.max_attempts_per_seq}};
  return j;
}

std::string config_hash(const json& identity) { return hex64(fnv1a64(identity.dump())); }

json to_json(const RunLogHeader& h) {
  return {{"schema", h.schema}, {"tool_version", h.tool_version}, {"config_hash", h.config_hash}, {"config", h.config}};
}

RunLogHeader run_log_header_from_json(const json& j) {
  if (!j.is_object() || !j.contains("schema")) throw ParseError("schema", "not a run log (no schema field)");
  RunLogHeader h;
  h.schema = field<std::string>(j, "schema");
  if (h.schema != kRunLogSchema)
    throw ParseError("schema", "log schema '" + h.schema + "', this tool reads '" + kRunLogSchema + "'");
  h.tool_version = field<std::string>(j, "tool_version");
  h.config_hash = field<std::string>(j, "config_hash");
  h.config = field<json>(j, "config");
  return h;
}

RunLog read_run_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();

  RunLog log;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    ++line_no;
    if (nl == std::string::npos) {
      log.torn_tail = true;
      break;
    }
    const std::string line = text.substr(pos, nl - pos);
    const bool last = nl + 1 == text.size();
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      if (last && line_no > 1) {
        log.torn_tail = true;
        break;
      }
      throw ParseError("line " + std::to_string(line_no), e.what());
    }
    if (line_no == 1) log.header = run_log_header_from_json(j);
    else log.records.push_back(run_record_from_json(j));
    pos = nl + 1;
    log.valid_bytes = pos;
  }
  if (line_no == 0 || (line_no == 1 && log.torn_tail)) throw ParseError("log", path.string() + " has no header line");
  return log;
}

std::string job_key(const RunRecord& r) {
  std::string k = std::to_string(r.trial_id);
  if (r.protocol == "history") k += "/" + std::to_string(r.forced_prefix);
  return k;
}

namespace {

struct Job {
  const Trial* trial = nullptr;
  int prefix = -1;  // history prefix, or -1
  std::string key;
};

RunRecord failed_record(const ExperimentConfig& c, const RunConfig& rc, const Job& job, const json& subject,
                        const std::string& what) {
  RunRecord r;
  switch (c.command) {
    case Command::run:
      r.protocol = job.prefix >= 0 ? "history" : "standard";
      break;
    case Command::curriculum:
      r.protocol = "standard";
      break;
    case Command::score:
      r.protocol = "score";
      break;
    case Command::interactive:
      r.protocol = "interactive";
      break;
  }
  r.trial_id = job.trial->id;
  r.trial_seed = job.trial->seed;
  r.config = rc;
  r.test = job.trial->test;
  if (job.prefix >= 0) {
    r.forced_lag = c.history->forced_lag;
    r.forced_prefix = job.prefix;
  }
  r.complete = false;
  r.error = what;
  r.subject = subject;
  return r;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& c, const ProgressFn& progress) {
  const TrialSet set = resolve_trials(c);
  const RunConfig rc = run_config(c, set);
  const json identity = identity_json(c, set);
  const std::string hash = config_hash(identity);
  json subject_spec = c.subject;
  subject_spec.erase("label");
  const auto factory = make_subject_factory(subject_spec);
  const SubjectCapabilities caps = factory->capabilities();
  if (c.command == Command::score ? !caps.can_score : !caps.can_generate)
    throw UnsupportedOperation("subject '" + subject_label(c.subject) + "' cannot " +
                               (c.command == Command::score ? "score" : "generate"));
  const std::vector<int> lags = resolved_score_lags(c, set);

  std::vector<Job> jobs;
  for (const Trial& t : set.trials) {
    if (c.command == Command::run && c.history) {
      for (int p : c.history->prefixes) jobs.push_back({&t, p, std::to_string(t.id) + "/" + std::to_string(p)});
    } else {
      jobs.push_back({&t, -1, std::to_string(t.id)});
    }
  }

  ExperimentResult result;
  result.log = c.log_path();
  result.jobs = static_cast<int>(jobs.size());
  if (result.log.has_parent_path()) std::filesystem::create_directories(result.log.parent_path());

  std::set<std::string> done;
  bool fresh = true;
  if (std::filesystem::exists(result.log) && std::filesystem::file_size(result.log) > 0) {
    std::optional<RunLog> existing;
    try {
      existing = read_run_log(result.log);
    } catch (const ParseError& e) {
      // Only a header cut off mid-write is recoverable.
      std::ifstream in(result.log);
      std::string first;
      std::getline(in, first);
      if (!in.eof()) throw;
    }
    if (existing) {
      if (existing->header.config_hash != hash)
        throw ValidationError("log " + result.log.string() + " belongs to config " + existing->header.config_hash +
                              ", not " + hash + "; choose another log path");
      if (existing->torn_tail) std::filesystem::resize_file(result.log, existing->valid_bytes);
      for (const RunRecord& r : existing->records) {
        done.insert(job_key(r));
        result.incomplete += !r.complete;
      }
      fresh = false;
    }
  }

  std::FILE* out = std::fopen(result.log.c_str(), fresh ? "wb" : "ab");
  if (!out) throw Error("cannot open " + result.log.string() + " for writing");
  const auto write_line = [&](const std::string& line) {
    if (std::fwrite(line.data(), 1, line.size(), out) != line.size() || std::fputc('\n', out) == EOF ||
        std::fflush(out) != 0) {
      std::fclose(out);
      throw Error("cannot write " + result.log.string());
    }
  };
  if (fresh) write_line(to_json(RunLogHeader{kRunLogSchema, tool_version(), hash, identity}).dump());

  std::vector<const Job*> pending;
  for (const Job& j : jobs) {
    if (done.count(j.key)) ++result.skipped;
    else pending.push_back(&j);
  }

  const auto execute = [&](const Job& job) -> RunRecord {
    const Trial& trial = *job.trial;
    const auto subject = factory->open(session_seed(rc, trial));
    try {
      switch (c.command) {
        case Command::run:
          if (job.prefix >= 0) return run_history_manipulation(*subject, trial, rc, c.history->forced_lag, job.prefix);
          return run_standard(*subject, trial, rc);
        case Command::curriculum:
          return run_standard(*subject, trial, rc);
        case Command::score:
          return run_scoring(*subject, trial, rc, lags, c.score_target);
        case Command::interactive:
          return to_record(run_interactive(*subject, rc, &trial, c.limits), trial, rc, subject->describe());
      }
    } catch (const Error& e) {
      return failed_record(c, rc, job, subject->describe(), e.what());
    }
    throw InvariantViolation("unhandled command");
  };

  // Workers fill slots; this thread writes them strictly in job order.
  std::vector<std::optional<std::string>> lines(pending.size());
  std::vector<char> failed(pending.size(), 0);
  std::mutex m;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  const auto worker = [&] {
    for (std::size_t i = next++; i < pending.size(); i = next++) {
      try {
        const RunRecord r = execute(*pending[i]);
        std::string line = to_json(r).dump();
        std::lock_guard lock(m);
        lines[i] = std::move(line);
        failed[i] = !r.complete;
      } catch (...) {
        std::lock_guard lock(m);
        if (!failure) failure = std::current_exception();
        next = pending.size();
      }
      cv.notify_all();
    }
  };
  std::vector<std::thread> pool;
  const int workers = std::max(1, std::min<int>(c.parallelism, static_cast<int>(pending.size())));
  for (int w = 0; w < workers && !pending.empty(); ++w) pool.emplace_back(worker);

  std::exception_ptr write_failure;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    std::string line;
    {
      std::unique_lock lock(m);
      cv.wait(lock, [&] { return lines[i].has_value() || failure; });
      if (!lines[i]) break;
      line = std::move(*lines[i]);
      lines[i].reset();
    }
    try {
      write_line(line);
    } catch (...) {
      write_failure = std::current_exception();
      next = pending.size();
      break;
    }
    ++result.written;
    result.incomplete += failed[i];
    if (progress)
      progress("trial " + pending[i]->key + (failed[i] ? " failed" : " done") + " (" +
               std::to_string(result.skipped + result.written) + "/" + std::to_string(result.jobs) + ")");
  }
  for (auto& t : pool) t.join();
  if (!write_failure) std::fclose(out);
  if (write_failure) std::rethrow_exception(write_failure);
  if (failure) std::rethrow_exception(failure);
  return result;
}

// ---------------------------------------------------------------------------
// MRAT over a log

std::filesystem::path dump_dir_for(const std::filesystem::path& dir, int trial_id) {
  return dir / ("trial-" + std::to_string(trial_id));
}

void collect_dumps(const RunLog& log, const json& subject, const std::filesystem::path& dir) {
  json spec = subject;
  spec.erase("label");
  const auto factory = make_subject_factory(spec);
  if (!factory->capabilities().can_dump_attention)
    throw UnsupportedOperation("subject '" + subject_label(subject) + "' cannot dump attention");
  for (const RunRecord& r : log.records) {
    if (!r.transcript || !r.complete) continue;
    const auto d = dump_dir_for(dir, r.trial_id);
    if (std::filesystem::exists(d / "attention.bin") && std::filesystem::exists(d / "tokens.json")) continue;
    std::filesystem::create_directories(d);
    const auto s = factory->open(0);
    const AttentionArtifacts a = s->dump_attention(*r.transcript, d);
    if (a.dump != d / "attention.bin") std::filesystem::rename(a.dump, d / "attention.bin");
    if (a.token_table != d / "tokens.json") std::filesystem::rename(a.token_table, d / "tokens.json");
  }
}

MratRun mrat_for_log(const RunLog& log, const std::filesystem::path& dir, int threads) {
  MratRun out;
  for (const RunRecord& r : log.records) {
    const std::string who = "trial " + std::to_string(r.trial_id) + ": ";
    const auto d = dump_dir_for(dir, r.trial_id);
    if (!r.transcript) {
      out.warnings.push_back(who + "record has no transcript");
      continue;
    }
    if (!std::filesystem::exists(d / "attention.bin") || !std::filesystem::exists(d / "tokens.json")) {
      out.warnings.push_back(who + "no dump in " + d.string());
      continue;
    }
    const DumpReader reader(d / "attention.bin");
    const TokenTable table = read_token_table(d / "tokens.json");
    RetrievalEvents ev = locate_retrieval_events(r, table, reader.shape().seq_len, r.config.lag);
    for (auto& w : ev.warnings) out.warnings.push_back(who + w);
    if (ev.events.empty()) {
      out.warnings.push_back(who + "no retrieval events");
      continue;
    }
    const auto cells = compute_mrat(reader, ev.events, threads);
    out.cells.insert(out.cells.end(), cells.begin(), cells.end());
    ++out.trials;
  }
  return out;
}

void write_mrat_cells(const std::filesystem::path& path, const std::vector<MratCell>& cells,
                      const std::vector<std::string>& header_lines) {
  std::ofstream out(path);
  if (!out) throw Error("cannot create " + path.string());
  for (const auto& h : header_lines) out << "# " << h << '\n';
  out << "trial\tlayer\thead\tmrat\n";
  char buf[64];
  for (const MratCell& c : cells) {
    std::snprintf(buf, sizeof buf, "%.9f", c.value);
    out << c.trial << '\t' << c.layer << '\t' << c.head << '\t' << buf << '\n';
  }
  if (!out) throw Error("cannot write " + path.string());
}

std::vector<MratCell> read_mrat_cells(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<MratCell> cells;
  std::string line;
  int line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "trial\tlayer\thead\tmrat") throw ParseError("line " + std::to_string(line_no), "bad column header");
      header = true;
      continue;
    }
    std::istringstream fields(line);
    MratCell c;
    if (!(fields >> c.trial >> c.layer >> c.head >> c.value) || c.value < 0 || c.value > 1)
      throw ParseError("line " + std::to_string(line_no), "expected trial, layer, head, mrat in [0, 1]");
    cells.push_back(c);
  }
  if (!header) throw ParseError(path.string(), "no column header");
  return cells;
}

}  // namespace nback
