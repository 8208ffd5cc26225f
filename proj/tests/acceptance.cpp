// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Expected values come from the oracles in this directory, never from
// the library under test.

#include <sys/resource.h>
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "attention_fixtures.hpp"
#include "nback/experiment.hpp"
#include "oracles.hpp"
#include "transcript_fixture.hpp"

namespace {

using namespace nback;
using testing_support::TempDir;

// Collects the first few problems of a check.
struct Check {
  std::vector<std::string> problems;
  void fail(const std::string& what) {
    if (problems.size() < 5) problems.push_back(what);
  }
  void expect(bool ok, const std::string& what) {
    if (!ok) fail(what);
  }
};

int failures = 0;

void criterion(const std::string& name, const std::function<void(Check&)>& body) {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.fail(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s  %-28s (%.2fs)\n", c.problems.empty() ? "PASS" : "FAIL", name.c_str(), secs);
  for (const auto& p : c.problems) std::printf("      %s\n", p.c_str());
  std::fflush(stdout);
  failures += !c.problems.empty();
}

RunConfig config_for(int n) {
  RunConfig c;
  c.lag = n;
  c.variant = FormatVariant::standard(n);
  c.record_timestamps = false;
  return c;
}

std::vector<int> lag_matches(const std::string& s, int n) {
  std::vector<int> out;
  for (std::size_t i = static_cast<std::size_t>(n); i < s.size(); ++i)
    if (s[i] == s[i - static_cast<std::size_t>(n)]) out.push_back(static_cast<int>(i) + 1);
  return out;
}

void generator(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string letters = "abcdefghijklmnopqrstuvwxyz";
  for (int n = 1; n <= 10; ++n) {
    const SequenceSpec spec{n, 24, 8, LurePolicy::uncontrolled};
    const TrialSet set = generate_trialset(spec, 1000, 1000 + static_cast<std::uint64_t>(n));
    for (const Trial& t : set.trials) {
      const std::string test = to_string(t.test);
      const std::string demo = to_string(t.demo);
      const std::string tag = "n=" + std::to_string(n) + " trial " + std::to_string(t.id);
      c.expect(test.size() == 24 && demo.size() == 24, tag + ": length");
      const auto tm = lag_matches(test, n);
      const auto dm = lag_matches(demo, n);
      c.expect(tm.size() == 8 && dm.size() == 8, tag + ": match count");
      c.expect(tm == t.test_matches && dm == t.demo_matches, tag + ": accidental or missing matches");
      c.expect((test + demo).find_first_not_of(letters) == std::string::npos, tag + ": letter outside alphabet");
    }
    c.expect(generate_trialset(spec, 1000, 1000 + static_cast<std::uint64_t>(n)) == set,
             "n=" + std::to_string(n) + ": not deterministic");
  }
  // A reduced alphabet is respected too.
  const Alphabet small("bcdfg");
  for (const Trial& t : generate_trialset({2, 24, 8, LurePolicy::uncontrolled}, 200, 5, small).trials)
    c.expect((to_string(t.test) + to_string(t.demo)).find_first_not_of("bcdfg") == std::string::npos, "reduced alphabet");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.expect(secs < 10.0, "took " + std::to_string(secs) + " s");
}

void parser(Check& c) {
  std::mt19937_64 rng(7);
  auto letter = [&] { return Letter::from(static_cast<char>('a' + rng() % 26)); };
  auto maybe = [&]() -> MaybeLetter { return rng() % 5 == 0 ? MaybeLetter{} : MaybeLetter{letter()}; };
  for (int recite = 0; recite < 2; ++recite)
    for (int k = 0; k < 100000; ++k) {
      const int lag = 1 + static_cast<int>(rng() % 10);
      const FormatVariant v = recite ? FormatVariant::recite(lag) : FormatVariant::standard(lag);
      const Letter cur = letter();
      const MaybeLetter ret = maybe();
      const Label label = (ret && rng() % 2) ? Label::identical : Label::different;
      std::vector<MaybeLetter> recent;
      if (recite)
        for (int j = 0; j < lag; ++j) recent.push_back(maybe());
      const std::string raw = format_response(cur, ret, label, v, recent);
      const auto outcome = parse_response(raw, v);
      const auto* p = as_parsed(outcome);
      c.expect(p && p->current == cur && p->retrieved == ret && p->label == label && p->recent == recent,
               "round trip: " + raw);
    }

  // The recorded 2-back interactive dialogue, graded line by line against a
  // direct reading of the 2-back rule.
  const auto dialogue = testing_support::load_chatml(NBACK_TEST_DATA "/t3_interactive_2back.txt");
  c.expect(dialogue.size() == 23, "corpus turn count");
  const std::vector<std::string> asked = {"tzth", "vncn", "vnvc", "klbl", "klkb", "rfmf",
                                          "rfrm", "ypwp", "ypyw", "sjgj", "sjsg"};
  const std::vector<std::string> outcomes = {"1000", "1001", "1000", "1001", "1000", "1001",
                                             "1000", "1001", "1000", "1001", "1000"};
  const FormatVariant v = FormatVariant::standard(2);
  for (std::size_t r = 0; r < asked.size() && 2 + 2 * r < dialogue.size(); ++r) {
    const std::string& s = asked[r];
    const auto answers = parse_answers(dialogue[2 + 2 * r].text, v);
    if (answers.size() != 4) {
      c.fail("reply " + std::to_string(r) + ": " + std::to_string(answers.size()) + " answer lines");
      continue;
    }
    std::string got;
    for (std::size_t i = 0; i < 4; ++i) {
      const char expected_ret = i >= 2 ? s[i - 2] : 0;
      const bool same = expected_ret && expected_ret == s[i];
      const auto& a = answers[i];
      const bool ret_ok = expected_ret ? (a.retrieved && a.retrieved->value() == expected_ret) : !a.retrieved;
      got += (ret_ok && (a.label == Label::identical) == same) ? '1' : '0';
    }
    c.expect(got == outcomes[r], "reply " + std::to_string(r) + ": " + got + " vs " + outcomes[r]);
  }
}

std::vector<RunRecord> run_scripted(const TrialSet& set, const ScriptedAgentConfig& agent, int n) {
  std::vector<RunRecord> out;
  for (const Trial& t : set.trials) {
    ScriptedAgent a(agent, t.seed);
    out.push_back(run_standard(a, t, config_for(n)));
  }
  return out;
}

void metrics_oracle(Check& c) {
  for (int n = 1; n <= 4; ++n)
    for (int m = 1; m <= 4; ++m) {
      const TrialSet set = generate_trialset({n, 24, 8, LurePolicy::uncontrolled}, 40, 300 + 10 * n + m);
      ScriptedAgentConfig agent;
      agent.behavior_lag = m;
      const auto records = run_scripted(set, agent, n);
      const std::string tag = "n=" + std::to_string(n) + " m=" + std::to_string(m);
      for (const MaintenanceCurve& curve : maintenance_curves(records, n))
        if (curve.lag == m)
          for (const CurvePoint& p : curve.points)
            c.expect(p.step <= m || p.count.correct == p.count.total, tag + ": A(m,i) < 1 at " + std::to_string(p.step));
      int correct = 0;
      for (const Trial& t : set.trials) correct += oracle::coincidences(to_string(t.test), m, n);
      const AccuracySummary s = retrieval_accuracy(records, n);
      c.expect(s.retrieval.correct == correct && s.retrieval.total == 40 * (24 - n),
               tag + ": " + std::to_string(s.retrieval.correct) + " vs scan " + std::to_string(correct));
    }
}

void drift(Check& c) {
  const TrialSet set = generate_trialset({2, 24, 8, LurePolicy::uncontrolled}, 50, 77);
  for (int k : {6, 12, 18}) {
    ScriptedAgentConfig agent;
    agent.drift_to = 1;
    agent.drift_step = k;
    const auto curves = maintenance_curves(run_scripted(set, agent, 2), 2);
    // Oracle: first step where every trial retrieved 1-back and some trial missed 2-back.
    std::optional<int> expected;
    for (int i = 3; i <= 24 && !expected; ++i) {
      bool all1 = true, all2 = true;
      for (const Trial& t : set.trials) {
        const std::string s = to_string(t.test);
        const char ret = i >= k ? s[static_cast<std::size_t>(i - 2)] : s[static_cast<std::size_t>(i - 3)];
        all1 = all1 && ret == s[static_cast<std::size_t>(i - 2)];
        all2 = all2 && ret == s[static_cast<std::size_t>(i - 3)];
      }
      if (all1 && !all2) expected = i;
    }
    const auto got = detect_switch_step(curves, 2, 1);
    c.expect(expected == k, "oracle disagrees with k=" + std::to_string(k));
    c.expect(got == k, "k=" + std::to_string(k) + ": detected " + (got ? std::to_string(*got) : "nothing"));
  }
}

void counterfactual(Check& c) {
  const double eps = 0.1;
  const std::vector<int> lags = {1, 2, 3, 4, 5};
  for (int n = 1; n <= 5; ++n) {
    const TrialSet set = generate_trialset({n, 24, 8, LurePolicy::uncontrolled}, 8, 500 + n);
    std::vector<RunRecord> scripted, certain;
    ScriptedAgentConfig agent;
    agent.retrieval_noise = eps;
    for (const Trial& t : set.trials) {
      ScriptedAgent a(agent, t.seed);
      scripted.push_back(run_scoring(a, t, config_for(n), lags));
      CertaintySubject cs;
      certain.push_back(run_scoring(cs, t, config_for(n), lags));
    }
    const LogprobTable p = counterfactual_logprob_table(scripted).with_demo;
    const LogprobTable zero = counterfactual_logprob_table(certain).with_demo;
    for (int m : lags) {
      double expected = 0;
      for (const Trial& t : set.trials) {
        const std::string s = to_string(t.test);
        double sum = 0;
        for (int i = m + 1; i <= 24; ++i)
          sum += oracle::scripted_logprob(s.substr(0, static_cast<std::size_t>(i)), n, eps,
                                          s[static_cast<std::size_t>(i - m - 1)]);
        expected += sum / (24 - m);
      }
      expected /= static_cast<double>(set.trials.size());
      const auto got = p.at(n, m);
      const std::string tag = "P[" + std::to_string(n) + "][" + std::to_string(m) + "]";
      c.expect(got && std::abs(*got - expected) <= 1e-9, tag + " off closed form");
      c.expect(zero.at(n, m) == 0.0, tag + " nonzero for certainty subject");
    }
    c.expect(p.diagonal_dominant(n), "row " + std::to_string(n) + " not diagonal dominant");
  }
}

void interactive(Check& c) {
  const Trial trial = generate_trial({2, 24, 8, LurePolicy::uncontrolled}, 11);
  {
    ScriptedAgent perfect({}, 1);
    const InteractiveOutcome o = run_interactive(perfect, config_for(2), &trial);
    c.expect(o.passed() && o.summary.sequences_used == 1, "perfect agent did not pass on the first sequence");
  }
  {
    BernoulliAgent never(0.0, 1);
    const InteractiveOutcome o = run_interactive(never, config_for(2), &trial);
    c.expect(!o.passed() && o.summary.sequences_used == 10,
             "never-correct agent used " + std::to_string(o.summary.sequences_used) + " sequences");
  }
  for (double p : {0.3, 0.6}) {
    const int runs = 100000;
    int passes = 0;
    for (int r = 0; r < runs; ++r) {
      BernoulliAgent agent(p, static_cast<std::uint64_t>(r) + 1);
      RunConfig cfg = config_for(2);
      cfg.seed = static_cast<std::uint64_t>(r);
      passes += run_interactive(agent, cfg, nullptr).passed();
    }
    const double got = static_cast<double>(passes) / runs;
    const double expected = oracle::interactive_pass_rate(p, 4, 10, 10, 100000, 2024);
    char buf[128];
    std::snprintf(buf, sizeof buf, "p=%.1f: pass rate %.4f vs oracle %.4f", p, got, expected);
    c.expect(std::abs(got - expected) <= 0.01, buf);
  }
}

RunRecord perfect_record(int n, std::uint64_t seed) {
  const Trial trial = generate_trial({n, 24, 8, LurePolicy::uncontrolled}, seed, {}, 1);
  ScriptedAgent agent({}, 0);
  return run_standard(agent, trial, config_for(n));
}

void mrat(Check& c) {
  TempDir dir;
  {
    const RunRecord r = perfect_record(2, 3);
    const TokenTable table = testing_support::word_tokenize(*r.transcript);
    const auto len = static_cast<std::uint32_t>(table.size());
    const auto events = locate_retrieval_events(r, table, len, 2).events;
    std::map<std::uint32_t, std::uint32_t> key_of;
    for (const auto& e : events) key_of[e.query] = e.key;
    testing_support::write_rows(dir / "onehot.bin", {3, 4, len}, [&](std::uint32_t, std::uint32_t, std::uint32_t q, float* row) {
      const auto it = key_of.find(q);
      row[it == key_of.end() ? 0 : it->second] = 1.0f;
    });
    for (const MratCell& cell : compute_mrat(DumpReader(dir / "onehot.bin"), events))
      c.expect(cell.value == 1.0, "one-hot cell " + std::to_string(cell.value));

    testing_support::write_uniform_dump(dir / "uniform.bin", {3, 4, len});
    double expected = 0;
    for (const auto& e : events) expected += 1.0 / (e.query + 1.0);
    expected /= static_cast<double>(events.size());
    const DumpReader uniform(dir / "uniform.bin");
    const auto streamed = compute_mrat(uniform, events, 3);
    const auto whole = compute_mrat(load_dump(dir / "uniform.bin"), events);
    for (std::size_t i = 0; i < streamed.size(); ++i) {
      c.expect(std::abs(streamed[i].value - expected) <= 1e-6, "uniform closed form");
      c.expect(std::abs(streamed[i].value - whole[i].value) <= 1e-7, "streaming vs whole tensor");
    }
  }
  {
    std::vector<MratCell> a(100, {0, 0, 0, 0.5}), b(320, {0, 0, 0, 0.7});
    const MratHistogram h = mrat_histogram(a, b);
    c.expect(std::abs(h.scale_factor - 3.2) < 1e-12, "scale factor " + std::to_string(h.scale_factor));
  }
  // 40 x 64 x 600 in a child limited to 1 GiB of address space.
  const auto big = dir / "big.bin";
  const DumpShape shape{40, 64, 600};
  std::vector<RetrievalEvent> events;
  double expected = 0;
  for (std::uint32_t q = 150; q < 600; q += 30) {
    events.push_back({1, static_cast<int>(q), q, q - 50});
    expected += 1.0 / (q + 1.0);
  }
  expected /= static_cast<double>(events.size());
  const pid_t pid = ::fork();
  if (pid == 0) {
    rlimit lim{1ull << 30, 1ull << 30};
    if (::setrlimit(RLIMIT_AS, &lim) != 0) ::_exit(10);
    try {
      testing_support::write_uniform_dump(big, shape);
      const auto cells = compute_mrat(DumpReader(big), events, 2);
      if (cells.size() != 40u * 64u) ::_exit(11);
      for (const MratCell& cell : cells)
        if (std::abs(cell.value - expected) > 1e-6) ::_exit(12);
    } catch (...) {
      ::_exit(13);
    }
    ::_exit(0);
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  c.expect(WIFEXITED(status) && WEXITSTATUS(status) == 0,
           "large dump under 1 GiB: child status " + std::to_string(WEXITSTATUS(status)));
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int sh(const std::string& cmd) { return std::system((cmd + " >/dev/null 2>&1").c_str()); }

// gen -> run (several subjects, lags and protocols) -> report through the CLI.
std::map<std::string, std::string> pipeline(const std::filesystem::path& dir, Check& c) {
  const std::string cli = NBACK_CLI;
  const std::string d = dir.string();
  std::vector<std::string> logs;
  for (int n : {2, 3}) {
    const std::string trials = d + "/t" + std::to_string(n) + ".json";
    c.expect(sh(cli + " gen -n " + std::to_string(n) + " --count 20 --seed 9 -o " + trials) == 0, "gen failed");
    const std::vector<std::pair<std::string, std::string>> subjects = {
        {"perfect", R"({"type":"scripted","label":"perfect"})"},
        {"noisy", R"({"type":"scripted","label":"noisy","retrieval_noise":0.5})"},
        {"onehot", R"({"type":"scripted","label":"lagging","behavior_lag":1})"}};
    for (const auto& [name, spec] : subjects) {
      const std::string log = d + "/" + name + std::to_string(n) + ".jsonl";
      c.expect(sh(cli + " run -q -j 2 --timestamps false --trials " + trials + " --subject '" + spec + "' --log " +
                  log) == 0,
               "run failed");
      logs.push_back(log);
    }
    const std::string hist = d + "/hist" + std::to_string(n) + ".jsonl";
    c.expect(sh(cli + " run -q --timestamps false --trials " + trials +
                R"( --subject '{"type":"scripted","label":"perfect","imitation":0.4}' --forced-lag 1 --prefixes 0,6,12 --log )" +
                hist) == 0,
             "forced run failed");
    const std::string score = d + "/score" + std::to_string(n) + ".jsonl";
    c.expect(sh(cli + " score -q --timestamps false --trials " + trials +
                R"( --subject '{"type":"scripted","label":"perfect","retrieval_noise":0.2}' --lags 1,2,3 --log )" +
                score) == 0,
             "score failed");
    logs.push_back(hist);
    logs.push_back(score);
  }
  std::string all;
  for (const auto& l : logs) all += " " + l;
  c.expect(sh(cli + " report -o " + d + "/report" + all) == 0, "report failed");
  std::map<std::string, std::string> files;
  for (const auto& l : logs) files[std::filesystem::path(l).filename().string()] = slurp(l);
  for (const auto& e : std::filesystem::directory_iterator(dir / "report"))
    files["report/" + e.path().filename().string()] = slurp(e.path());
  return files;
}

void determinism(Check& c) {
  TempDir one, two;
  const auto a = pipeline(one.path(), c);
  const auto b = pipeline(two.path(), c);
  c.expect(a.size() == b.size() && a.size() > 12, "file sets differ");
  for (const auto& [name, content] : a) {
    const auto it = b.find(name);
    c.expect(it != b.end() && it->second == content, name + " differs between executions");
    c.expect(!content.empty(), name + " is empty");
  }
}

}  // namespace

int main() {
  criterion("generator properties", generator);
  criterion("parser round trip", parser);
  criterion("metrics oracle", metrics_oracle);
  criterion("drift recovery", drift);
  criterion("counterfactual scoring", counterfactual);
  criterion("interactive state machine", interactive);
  criterion("MRAT", mrat);
  criterion("end-to-end determinism", determinism);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures ? 1 : 0;
}
