#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "nback/experiment.hpp"
#include "nback/metrics.hpp"

namespace nback {

using json = nlohmann::json;

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// One aggregate: records that may be pooled.
struct CellKey {
  std::string subject;
  std::string protocol;
  int lag = 0;
  bool demo = true;
  std::string context;
  std::string variant;
  auto tie() const { return std::tie(subject, protocol, lag, demo, context, variant); }
  bool operator<(const CellKey& o) const { return tie() < o.tie(); }
};

struct Cell {
  std::vector<RunRecord> records;
  std::set<std::string> hashes;
  std::set<std::pair<std::string, std::string>> keys;  // (config hash, job key)
};

std::string describe(const CellKey& k) {
  return k.subject + " " + k.protocol + " n=" + std::to_string(k.lag) + (k.demo ? " demo" : " no-demo") +
         " context=" + k.context + " variant=" + k.variant;
}

class Tsv {
 public:
  Tsv(const std::filesystem::path& path, const std::vector<std::string>& preamble, const std::string& columns)
      : path_(path), out_(path) {
    if (!out_) throw Error("cannot create " + path.string());
    for (const auto& p : preamble) out_ << "# " << p << '\n';
    out_ << columns << '\n';
  }
  template <class... T>
  void row(const T&... fields) {
    std::size_t i = 0;
    ((out_ << (i++ ? "\t" : "") << fields), ...);
    out_ << '\n';
  }
  ~Tsv() = default;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

}  // namespace

ReportResult write_report(const std::vector<std::filesystem::path>& logs, const std::filesystem::path& out_dir,
                          const ReportOptions& options) {
  if (logs.empty() && options.mrat_cells.empty()) throw ValidationError("nothing to report");
  if (!options.mrat_cells.empty() && options.mrat_cells.size() != 2)
    throw ValidationError("MRAT histograms compare exactly two cell files");

  std::map<CellKey, Cell> cells;
  std::set<std::string> all_hashes;
  for (const auto& path : logs) {
    const RunLog log = read_run_log(path);
    const std::string label = subject_label(log.header.config.at("subject"));
    all_hashes.insert(log.header.config_hash);
    for (const RunRecord& r : log.records) {
      CellKey k{label, r.protocol, r.config.lag, r.config.with_demo, to_string(r.config.context),
                to_string(r.config.variant.kind)};
      Cell& cell = cells[k];
      cell.hashes.insert(log.header.config_hash);
      if (!cell.keys.insert({log.header.config_hash, job_key(r)}).second)
        throw ValidationError("trial " + job_key(r) + " appears twice in " + describe(k) + " (" + path.string() + ")");
      cell.records.push_back(r);
    }
  }
  std::vector<std::string> mixed;
  for (const auto& [k, cell] : cells)
    if (cell.hashes.size() > 1) mixed.push_back(describe(k));
  if (!mixed.empty() && !options.force) {
    std::string what = "logs with different config hashes feed one aggregate:";
    for (const auto& m : mixed) what += "\n  " + m;
    throw ValidationError(what + "\n(use --force to pool them anyway)");
  }

  std::string hash_list;
  for (const auto& h : all_hashes) hash_list += (hash_list.empty() ? "" : ",") + h;
  const std::vector<std::string> preamble = {"tool_version=" + tool_version(), "config_hashes=" + hash_list};

  std::filesystem::create_directories(out_dir);
  ReportResult result;
  std::ostringstream summary;
  summary << "nback report\n";
  summary << "tool version: " << tool_version() << "\n";
  summary << "config hashes: " << (hash_list.empty() ? "-" : hash_list) << "\n";
  for (const auto& m : mixed) summary << "WARNING: pooled logs with different config hashes: " << m << "\n";

  // Free-run accuracy, maintenance curves and per-trial values.
  {
    Tsv acc(out_dir / "accuracy.tsv", preamble,
            "subject\tprotocol\tcontext\tdemo\tvariant\tn\tm\tcorrect\ttotal\tvalue");
    Tsv bars(out_dir / "stacked_bars.tsv", preamble,
             "subject\tcontext\tdemo\tvariant\tn\ttask_accuracy\tretrieval_accuracy\ttrials");
    Tsv per_trial(out_dir / "per_trial.tsv", preamble,
                  "subject\tprotocol\tcontext\tdemo\tvariant\tn\ttrial\tretrieval\ttask");
    Tsv curves(out_dir / "maintenance.tsv", preamble,
               "subject\tprotocol\tcontext\tdemo\tvariant\tn\tm\tstep\tvalue\tcount");
    std::map<std::string, std::map<int, double>> tier_input;
    summary << "\n== Accuracy (free runs) ==\n";
    for (const auto& [k, cell] : cells) {
      if (k.protocol != "standard") continue;
      const AccuracySummary s = retrieval_accuracy(cell.records, k.lag);
      int incomplete = 0;
      for (const auto& r : cell.records) incomplete += !r.complete;
      const std::string demo = k.demo ? "yes" : "no";
      for (const auto& [m, count] : s.by_lag)
        acc.row(k.subject, k.protocol, k.context, demo, k.variant, k.lag, m, count.correct, count.total,
                fixed(count.value()));
      bars.row(k.subject, k.context, demo, k.variant, k.lag, fixed(s.task_accuracy()), fixed(s.retrieval_accuracy()),
               s.trials);
      for (std::size_t i = 0; i < cell.records.size(); ++i)
        per_trial.row(k.subject, k.protocol, k.context, demo, k.variant, k.lag, cell.records[i].trial_id,
                      fixed(s.per_trial_retrieval[i]), fixed(s.per_trial_task[i]));
      for (const MaintenanceCurve& c : maintenance_curves(cell.records, k.lag))
        for (const CurvePoint& p : c.points)
          curves.row(k.subject, k.protocol, k.context, demo, k.variant, k.lag, c.lag, p.step, fixed(p.value()),
                     p.count.total);
      summary << describe(k) << ": trials " << s.trials << ", retrieval " << fixed(s.retrieval_accuracy(), 4) << " ("
              << s.retrieval.correct << "/" << s.retrieval.total << "), task " << fixed(s.task_accuracy(), 4) << " ("
              << s.task.correct << "/" << s.task.total << ")";
      if (incomplete) summary << ", incomplete " << incomplete;
      summary << "\n";
      if (k.demo && k.context == "standard" && k.variant == "standard")
        tier_input[k.subject][k.lag] = s.retrieval_accuracy();
    }
    result.files.insert(result.files.end(), {acc.path(), bars.path(), per_trial.path(), curves.path()});

    Tsv tiers(out_dir / "tiers.tsv", preamble, "subject\tacc2\tacc3\ttier");
    summary << "\n== Tiers (2-back, 3-back retrieval with demonstrations) ==\n";
    for (const auto& [subject, by_n] : tier_input) {
      if (!by_n.count(2) || !by_n.count(3)) {
        summary << subject << ": needs both 2-back and 3-back runs\n";
        continue;
      }
      const TierLabel t = classify_tier(by_n.at(2), by_n.at(3), options.thresholds);
      tiers.row(subject, fixed(t.acc2), fixed(t.acc3), to_string(t.tier));
      summary << subject << ": " << to_string(t.tier) << " (" << fixed(t.acc2, 4) << ", " << fixed(t.acc3, 4) << ")\n";
    }
    result.files.push_back(tiers.path());
  }

  // Teacher-forced prefixes.
  {
    Tsv prefix(out_dir / "forced_prefix.tsv", preamble,
               "subject\tcontext\tdemo\tvariant\tn\tforced_lag\tprefix\tcorrect\ttotal\tvalue");
    bool any = false;
    for (const auto& [k, cell] : cells) {
      if (k.protocol != "history") continue;
      if (!any) summary << "\n== Forced prefixes ==\n";
      any = true;
      for (const ForcedPrefixPoint& p : forced_prefix_accuracy(cell.records)) {
        prefix.row(k.subject, k.context, k.demo ? "yes" : "no", k.variant, k.lag, p.forced_lag, p.prefix,
                   p.count.correct, p.count.total, fixed(p.count.value()));
        summary << describe(k) << ": forced " << p.forced_lag << "-back prefix " << p.prefix << " -> "
                << fixed(p.count.value(), 4) << " (" << p.count.correct << "/" << p.count.total << ")\n";
      }
    }
    result.files.push_back(prefix.path());
  }

  // Counterfactual log-probability tables, one pair per subject.
  {
    Tsv lp(out_dir / "logprob.tsv", preamble, "subject\ttable\tn\tm\tvalue\ttrials");
    std::map<std::string, std::vector<RunRecord>> by_subject;
    for (const auto& [k, cell] : cells)
      if (k.protocol == "score")
        for (const auto& r : cell.records)
          if (r.complete) by_subject[k.subject].push_back(r);
    if (!by_subject.empty()) summary << "\n== Counterfactual log-probabilities (NA = not measured) ==\n";
    for (const auto& [subject, records] : by_subject) {
      const LogprobTables t = counterfactual_logprob_table(records);
      for (const auto& [name, table] : {std::pair<std::string, const LogprobTable*>{"P", &t.with_demo},
                                        std::pair<std::string, const LogprobTable*>{"P-", &t.without_demo}}) {
        if (table->cells().empty()) continue;
        int max_n = 0, max_m = 0;
        for (const auto& [n, row] : table->cells()) {
          max_n = std::max(max_n, n);
          for (const auto& [m, cell] : row) max_m = std::max(max_m, m);
        }
        summary << subject << " " << name << " (rows n, columns m = 1.." << max_m << ")\n";
        for (int n = 1; n <= max_n; ++n) {
          if (!table->cells().count(n)) continue;
          summary << "  n=" << n << ":";
          for (int m = 1; m <= max_m; ++m) {
            const auto v = table->at(n, m);
            lp.row(subject, name, n, m, v ? fixed(*v, 9) : "NA", table->trials(n, m));
            summary << " " << (v ? fixed(*v, 4) : "NA");
          }
          summary << (table->diagonal_dominant(n) ? "  [max at m=n]" : "") << "\n";
        }
      }
    }
    result.files.push_back(lp.path());
  }

  // Interactive demonstrations.
  {
    Tsv it(out_dir / "interactive.tsv", preamble,
           "subject\tn\ttrials\tpassed\tpass_rate\tmean_sequences_to_pass\ttest_retrieval_accuracy");
    bool any = false;
    for (const auto& [k, cell] : cells) {
      if (k.protocol != "interactive") continue;
      if (!any) summary << "\n== Interactive demonstrations ==\n";
      any = true;
      int passed = 0, sequences = 0;
      std::vector<RunRecord> tests;
      for (const auto& r : cell.records) {
        if (!r.interactive || !r.interactive->passed) continue;
        ++passed;
        sequences += r.interactive->sequences_used;
        tests.push_back(r);
      }
      const int trials = static_cast<int>(cell.records.size());
      const std::string mean_seq = passed ? fixed(static_cast<double>(sequences) / passed, 3) : "NA";
      const std::string test_acc = tests.empty() ? "NA" : fixed(retrieval_accuracy(tests, k.lag).retrieval_accuracy());
      it.row(k.subject, k.lag, trials, passed, fixed(static_cast<double>(passed) / trials), mean_seq, test_acc);
      summary << describe(k) << ": passed " << passed << "/" << trials << ", mean sequences to pass " << mean_seq
              << ", test retrieval " << test_acc << "\n";
    }
    result.files.push_back(it.path());
  }

  if (options.mrat_cells.size() == 2) {
    const auto a = read_mrat_cells(options.mrat_cells[0]);
    const auto b = read_mrat_cells(options.mrat_cells[1]);
    const MratHistogram h = mrat_histogram(a, b, options.mrat_lo, options.mrat_hi, options.mrat_bins);
    Tsv hist(out_dir / "mrat_hist.tsv", preamble, "bin_lo\tbin_hi\traw_a\traw_b\tscaled_a\tscaled_b");
    for (int i = 0; i < h.bins; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      hist.row(fixed(h.edge(i), 4), fixed(h.edge(i + 1), 4), h.raw_a[idx], h.raw_b[idx], fixed(h.scaled_a[idx], 3),
               fixed(h.scaled_b[idx], 3));
    }
    result.files.push_back(hist.path());
    summary << "\n== MRAT histogram ==\n"
            << "a: " << options.mrat_cells[0].filename().string() << " (" << h.size_a << " cells), b: "
            << options.mrat_cells[1].filename().string() << " (" << h.size_b << " cells), smaller side scaled by "
            << fixed(h.scale_factor, 4) << "\n";
  }

  result.summary = summary.str();
  const auto summary_path = out_dir / "summary.txt";
  std::ofstream s(summary_path);
  if (!s) throw Error("cannot create " + summary_path.string());
  s << result.summary;
  result.files.insert(result.files.begin(), summary_path);
  return result;
}

}  // namespace nback
