// nback: generate trials, run protocols against subjects, analyse the logs.

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>

#include "nback/experiment.hpp"
#include "nback/trialset_io.hpp"

namespace {

using json = nlohmann::json;
using namespace nback;

struct GenOptions {
  int lag = 2;
  int count = 50;
  int length = 24;
  int matches = 8;
  std::uint64_t seed = 0;
  std::string lure = "uncontrolled";
  std::string alphabet = Alphabet().letters();
  std::string out;
};

int cmd_gen(const GenOptions& o) {
  const SequenceSpec spec{o.lag, o.length, o.matches, lure_policy_from_string(o.lure)};
  const TrialSet set = generate_trialset(spec, o.count, o.seed, Alphabet(o.alphabet));
  validate_trialset(set);
  save_trialset(set, o.out);
  std::cerr << "wrote " << set.trials.size() << " " << o.lag << "-back trials (length " << o.length << ", "
            << o.matches << " matches) to " << o.out << "\n";
  return 0;
}

// Flags that override fields of the config file.
struct RunOptions {
  std::string config;
  std::string subject;
  std::string trials;
  std::string out;
  std::string log;
  int parallel = 0;
  std::optional<std::uint64_t> seed;
  bool no_demo = false;
  std::string variant;
  std::optional<bool> timestamps;
  std::optional<double> temperature;
  std::optional<int> max_tokens;
  std::optional<int> forced_lag;
  std::vector<int> prefixes;
  std::vector<int> lags;
  std::string target;
  std::optional<int> max_sequences;
  std::optional<int> max_lines;
  bool quiet = false;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path, e.what());
  }
}

int cmd_experiment(Command command, const RunOptions& o) {
  json j = o.config.empty() ? json::object() : read_json_file(o.config);
  const std::filesystem::path base = o.config.empty() ? std::filesystem::path{}
                                                      : std::filesystem::absolute(o.config).parent_path();
  if (!o.subject.empty()) {
    try {
      j["subject"] = json::parse(o.subject);
    } catch (const json::parse_error& e) {
      throw ParseError("--subject", e.what());
    }
  }
  if (!o.trials.empty()) j["trials"] = {{"path", std::filesystem::absolute(o.trials).string()}};
  if (!o.out.empty()) j["output"] = std::filesystem::absolute(o.out).string();
  if (!o.log.empty()) j["log"] = std::filesystem::absolute(o.log).string();
  if (o.parallel > 0) j["parallelism"] = o.parallel;
  if (o.seed) j["seed"] = *o.seed;
  if (o.no_demo) j["demo"] = false;
  if (!o.variant.empty()) j["variant"] = o.variant;
  if (o.timestamps) j["timestamps"] = *o.timestamps;
  if (o.temperature) j["decoding"]["temperature"] = *o.temperature;
  if (o.max_tokens) j["decoding"]["max_tokens"] = *o.max_tokens;
  if (o.forced_lag || !o.prefixes.empty()) {
    if (o.forced_lag) j["history"]["forced_lag"] = *o.forced_lag;
    if (!o.prefixes.empty()) j["history"]["prefixes"] = o.prefixes;
  }
  if (!o.lags.empty()) j["score_lags"] = o.lags;
  if (!o.target.empty()) j["score_target"] = o.target;
  if (o.max_sequences) j["limits"]["max_sequences"] = *o.max_sequences;
  if (o.max_lines) j["limits"]["max_attempts_per_sequence"] = *o.max_lines;

  const ExperimentConfig cfg = experiment_from_json(j, command, base);
  ProgressFn progress;
  if (!o.quiet) progress = [](const std::string& s) { std::cerr << s << "\n"; };
  const ExperimentResult r = run_experiment(cfg, progress);
  std::cerr << r.log.string() << ": " << r.written << " written, " << r.skipped << " already present, "
            << r.incomplete << " incomplete\n";
  return r.incomplete ? 2 : 0;
}

struct MratOptions {
  std::string log;
  std::string dumps;
  std::string out;
  std::string subject;
  bool collect = false;
  int threads = 1;
};

int cmd_mrat(const MratOptions& o) {
  const RunLog log = read_run_log(o.log);
  if (o.collect) {
    json subject = log.header.config.at("subject");
    if (!o.subject.empty()) subject = json::parse(o.subject);
    collect_dumps(log, subject, o.dumps);
  }
  const MratRun run = mrat_for_log(log, o.dumps, o.threads);
  for (const auto& w : run.warnings) std::cerr << "warning: " << w << "\n";
  if (run.cells.empty()) throw ValidationError("no MRAT cells computed");
  write_mrat_cells(o.out, run.cells,
                   {"tool_version=" + tool_version(), "config_hash=" + log.header.config_hash,
                    "subject=" + subject_label(log.header.config.at("subject"))});
  const auto top = std::max_element(run.cells.begin(), run.cells.end(),
                                    [](const MratCell& a, const MratCell& b) { return a.value < b.value; });
  std::cout << run.trials << " trials, " << run.cells.size() << " cells; highest MRAT " << top->value << " at trial "
            << top->trial << ", layer " << top->layer << ", head " << top->head << "\n";
  return 0;
}

struct ReportCliOptions {
  std::vector<std::string> logs;
  std::string out;
  ReportOptions report;
  std::vector<std::string> mrat;
};

int cmd_report(ReportCliOptions o) {
  for (const auto& m : o.mrat) o.report.mrat_cells.emplace_back(m);
  std::vector<std::filesystem::path> logs(o.logs.begin(), o.logs.end());
  const ReportResult r = write_report(logs, o.out, o.report);
  std::cout << r.summary;
  return 0;
}

void add_run_flags(CLI::App* app, RunOptions& o) {
  app->add_option("-c,--config", o.config, "Experiment config file (JSON)");
  app->add_option("--subject", o.subject, "Subject spec as inline JSON");
  app->add_option("--trials", o.trials, "Trial set file");
  app->add_option("-o,--out", o.out, "Output directory");
  app->add_option("--log", o.log, "Run log path (default <out>/<command>.jsonl)");
  app->add_option("-j,--parallel", o.parallel, "Trials run concurrently")->check(CLI::PositiveNumber);
  app->add_option("--seed", o.seed, "Run seed");
  app->add_flag("--no-demo", o.no_demo, "Omit the demonstration");
  app->add_option("--variant", o.variant, "Answer format: standard or recite");
  app->add_option("--timestamps", o.timestamps, "Record wall-clock times (true/false)");
  app->add_option("--temperature", o.temperature, "Sampling temperature");
  app->add_option("--max-tokens", o.max_tokens, "Reply token limit");
  app->add_flag("-q,--quiet", o.quiet, "No per-trial progress");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"n-back working-memory harness"};
  app.set_version_flag("--version", nback::tool_version());
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen", "Generate a trial set");
  g->add_option("-n,--lag", gen.lag, "Lag n")->required();
  g->add_option("--count", gen.count, "Number of trials");
  g->add_option("--length", gen.length, "Test (and demo) length");
  g->add_option("--matches", gen.matches, "Lag-n matches per sequence");
  g->add_option("--seed", gen.seed, "Base seed");
  g->add_option("--lure", gen.lure, "Lure policy: uncontrolled or exclude_adjacent");
  g->add_option("--alphabet", gen.alphabet, "Stimulus letters");
  g->add_option("-o,--out", gen.out, "Output file")->required();

  RunOptions run, score, interactive, curriculum;
  auto* r = app.add_subcommand("run", "Free runs (or teacher-forced prefixes with --forced-lag)");
  add_run_flags(r, run);
  r->add_option("--forced-lag", run.forced_lag, "Lag of the teacher-forced prefix");
  r->add_option("--prefixes", run.prefixes, "Prefix lengths")->delimiter(',');
  auto* s = app.add_subcommand("score", "Counterfactual continuation scoring");
  add_run_flags(s, score);
  s->add_option("--lags", score.lags, "Continuation lags m")->delimiter(',');
  s->add_option("--target", score.target, "Scored span: slot or reply");
  auto* i = app.add_subcommand("interactive", "Interactive demonstration, then the test");
  add_run_flags(i, interactive);
  i->add_option("--max-sequences", interactive.max_sequences, "Questions before giving up");
  i->add_option("--max-lines", interactive.max_lines, "Answer lines checked per question");
  auto* c = app.add_subcommand("curriculum", "Free runs after 1-back..n-back demonstrations");
  add_run_flags(c, curriculum);

  MratOptions mrat;
  auto* m = app.add_subcommand("mrat", "Mean retrieval attention from attention dumps");
  m->add_option("--log", mrat.log, "Run log")->required();
  m->add_option("--dumps", mrat.dumps, "Dump directory (trial-<id>/attention.bin, tokens.json)")->required();
  m->add_option("-o,--out", mrat.out, "Cell table (TSV)")->required();
  m->add_flag("--collect", mrat.collect, "Request missing dumps from the subject first");
  m->add_option("--subject", mrat.subject, "Subject spec overriding the log's (inline JSON)");
  m->add_option("-j,--threads", mrat.threads, "Layers processed concurrently")->check(CLI::PositiveNumber);

  ReportCliOptions rep;
  auto* p = app.add_subcommand("report", "Tables and plot data from run logs");
  p->add_option("logs", rep.logs, "Run logs");
  p->add_option("-o,--out", rep.out, "Output directory")->required();
  p->add_flag("--force", rep.report.force, "Pool logs whose config hashes differ");
  p->add_option("--mrat", rep.mrat, "Two MRAT cell tables to compare")->expected(2);
  p->add_option("--bins", rep.report.mrat_bins, "MRAT histogram bins");
  p->add_option("--lo", rep.report.mrat_lo, "MRAT histogram lower bound");
  p->add_option("--hi", rep.report.mrat_hi, "MRAT histogram upper bound");
  p->add_option("--tier-low", rep.report.thresholds.low, "T3 threshold (both accuracies <=)");
  p->add_option("--tier-high", rep.report.thresholds.high, "T1 threshold (both accuracies >)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g->parsed()) return cmd_gen(gen);
    if (r->parsed()) return cmd_experiment(Command::run, run);
    if (s->parsed()) return cmd_experiment(Command::score, score);
    if (i->parsed()) return cmd_experiment(Command::interactive, interactive);
    if (c->parsed()) return cmd_experiment(Command::curriculum, curriculum);
    if (m->parsed()) return cmd_mrat(mrat);
    if (p->parsed()) return cmd_report(rep);
  } catch (const std::exception& e) {
    std::cerr << "nback: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
