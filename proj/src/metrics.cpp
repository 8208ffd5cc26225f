#include "nback/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace nback {

std::optional<MaybeLetter> step_retrieval(const StepRecord& s) {
  if (const auto* p = as_parsed(s.parsed)) return p->retrieved;
  return std::nullopt;
}

namespace {

MaybeLetter lag_letter(const LetterSeq& test, int step, int lag) {
  if (step - lag < 1) return std::nullopt;
  return test[static_cast<std::size_t>(step - lag - 1)];
}

// Step i of a record, or nullptr when the run stopped before it.
const StepRecord* step_at(const RunRecord& r, int i) {
  if (i < 1 || i > static_cast<int>(r.steps.size())) return nullptr;
  const StepRecord& s = r.steps[static_cast<std::size_t>(i - 1)];
  return s.step == i ? &s : nullptr;
}

bool retrieved_at_lag(const RunRecord& r, int i, int m) {
  const StepRecord* s = step_at(r, i);
  if (!s) return false;
  const auto got = step_retrieval(*s);
  return got && *got == lag_letter(r.test, i, m);
}

Count lag_count(const RunRecord& r, int m, int from_step = 1) {
  Count c;
  for (int i = std::max(m + 1, from_step); i <= static_cast<int>(r.test.size()); ++i) {
    ++c.total;
    c.correct += retrieved_at_lag(r, i, m);
  }
  return c;
}

Count task_count(const RunRecord& r) {
  Count c;
  const int n = r.config.lag;
  for (int i = 1; i <= static_cast<int>(r.test.size()); ++i) {
    const MaybeLetter src = lag_letter(r.test, i, n);
    const Label truth = (src && *src == r.test[static_cast<std::size_t>(i - 1)]) ? Label::identical : Label::different;
    ++c.total;
    const StepRecord* s = step_at(r, i);
    const auto* p = s ? as_parsed(s->parsed) : nullptr;
    c.correct += p && p->label == truth;
  }
  return c;
}

void require_generation_records(const std::vector<RunRecord>& records, bool free_run_only) {
  if (records.empty()) throw ValidationError("no records to aggregate");
  const RunRecord& first = records.front();
  for (const RunRecord& r : records) {
    if (r.protocol == "score") throw ValidationError("score records carry no generated steps");
    if (free_run_only && !r.free_run())
      throw ValidationError("trial " + std::to_string(r.trial_id) + " has a forced prefix; free-run records only");
    if (r.test.size() != first.test.size()) throw ValidationError("records differ in test length");
    const RunConfig& a = r.config;
    const RunConfig& b = first.config;
    if (a.lag != b.lag || a.with_demo != b.with_demo || a.context != b.context || a.variant != b.variant ||
        a.decoding != b.decoding)
      throw ValidationError("records mix run configurations (trial " + std::to_string(r.trial_id) + ")");
  }
}

}  // namespace

AccuracySummary retrieval_accuracy(const std::vector<RunRecord>& records, int m) {
  require_generation_records(records, true);
  const int length = static_cast<int>(records.front().test.size());
  if (m < 1 || m >= length) throw ValidationError("target lag must be in [1, " + std::to_string(length) + ")");
  AccuracySummary s;
  s.target_lag = m;
  s.instructed_lag = records.front().config.lag;
  const int max_lag = std::min(std::max(s.instructed_lag, m) + 1, length - 1);
  for (const RunRecord& r : records) {
    const Count retrieval = lag_count(r, m);
    const Count task = task_count(r);
    s.retrieval += retrieval;
    s.task += task;
    for (int k = 1; k <= max_lag; ++k) s.by_lag[k] += lag_count(r, k);
    s.per_trial_retrieval.push_back(retrieval.value());
    s.per_trial_task.push_back(task.value());
    ++s.trials;
  }
  return s;
}

std::optional<double> MaintenanceCurve::at(int step) const {
  for (const CurvePoint& p : points)
    if (p.step == step) return p.value();
  return std::nullopt;
}

std::vector<MaintenanceCurve> maintenance_curves(const std::vector<RunRecord>& records, int n) {
  require_generation_records(records, true);
  const int length = static_cast<int>(records.front().test.size());
  if (n < 1) throw ValidationError("n must be >= 1");
  std::vector<MaintenanceCurve> curves;
  for (int m = 1; m <= n && m < length; ++m) {
    MaintenanceCurve c;
    c.lag = m;
    for (int i = m + 1; i <= length; ++i) {
      CurvePoint p;
      p.step = i;
      for (const RunRecord& r : records) {
        ++p.count.total;
        p.count.correct += retrieved_at_lag(r, i, m);
      }
      c.points.push_back(p);
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

std::optional<int> detect_switch_step(const std::vector<MaintenanceCurve>& curves, int from_lag, int to_lag) {
  const MaintenanceCurve* from = nullptr;
  const MaintenanceCurve* to = nullptr;
  for (const auto& c : curves) {
    if (c.lag == from_lag) from = &c;
    if (c.lag == to_lag) to = &c;
  }
  if (!from || !to) throw ValidationError("curves for both lags are required");
  for (const CurvePoint& p : to->points) {
    const auto a_from = from->at(p.step);
    if (p.count.total > 0 && p.count.correct == p.count.total && a_from && *a_from < 1.0) return p.step;
  }
  return std::nullopt;
}

std::vector<ForcedPrefixPoint> forced_prefix_accuracy(const std::vector<RunRecord>& records) {
  require_generation_records(records, false);
  std::map<std::pair<int, int>, Count> groups;
  for (const RunRecord& r : records) {
    if (!r.forced_lag) throw ValidationError("trial " + std::to_string(r.trial_id) + " is not a history record");
    groups[{*r.forced_lag, r.forced_prefix}] += lag_count(r, *r.forced_lag, r.forced_prefix + 1);
  }
  std::vector<ForcedPrefixPoint> out;
  for (const auto& [key, count] : groups) out.push_back({key.first, key.second, count});
  return out;
}

void LogprobTable::add(int n, int m, double trial_mean) {
  auto& cell = sums_[n][m];
  cell.first += trial_mean;
  cell.second += 1;
}

std::optional<double> LogprobTable::at(int n, int m) const {
  const auto row = sums_.find(n);
  if (row == sums_.end()) return std::nullopt;
  const auto cell = row->second.find(m);
  if (cell == row->second.end() || cell->second.second == 0) return std::nullopt;
  return cell->second.first / cell->second.second;
}

int LogprobTable::trials(int n, int m) const {
  const auto row = sums_.find(n);
  if (row == sums_.end()) return 0;
  const auto cell = row->second.find(m);
  return cell == row->second.end() ? 0 : cell->second.second;
}

std::vector<std::vector<std::optional<double>>> LogprobTable::dense(int max_n, int max_m) const {
  std::vector<std::vector<std::optional<double>>> out;
  for (int n = 1; n <= max_n; ++n) {
    std::vector<std::optional<double>> row;
    for (int m = 1; m <= max_m; ++m) row.push_back(at(n, m));
    out.push_back(std::move(row));
  }
  return out;
}

bool LogprobTable::diagonal_dominant(int n) const {
  const auto diag = at(n, n);
  if (!diag) return false;
  const auto row = sums_.find(n);
  for (const auto& [m, cell] : row->second) {
    const auto v = at(n, m);
    if (v && *v > *diag) return false;
  }
  return true;
}

LogprobTables counterfactual_logprob_table(const std::vector<RunRecord>& records) {
  LogprobTables t;
  std::optional<ContextKind> demo_context;
  for (const RunRecord& r : records) {
    if (r.protocol != "score") throw ValidationError("trial " + std::to_string(r.trial_id) + " is not a score record");
    if (r.config.with_demo) {
      if (demo_context && *demo_context != r.config.context)
        throw ValidationError("score records mix standard and curriculum demonstrations");
      demo_context = r.config.context;
    }
    LogprobTable& table = r.config.with_demo ? t.with_demo : t.without_demo;
    for (const auto& [m, scores] : r.scores) {
      if (scores.empty()) continue;
      double sum = 0;
      for (const StepScore& s : scores) sum += s.logprob;
      table.add(r.config.lag, m, sum / static_cast<double>(scores.size()));
    }
  }
  return t;
}

std::string to_string(Tier t) {
  switch (t) {
    case Tier::T1:
      return "T1";
    case Tier::T2:
      return "T2";
    case Tier::T3:
      return "T3";
  }
  return "?";
}

TierLabel classify_tier(double acc2, double acc3, TierThresholds th) {
  const auto in_range = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_range(acc2) || !in_range(acc3)) throw ValidationError("tier accuracies must lie in [0, 1]");
  TierLabel l{Tier::T2, acc2, acc3};
  if (acc2 <= th.low && acc3 <= th.low) l.tier = Tier::T3;
  else if (acc2 > th.high && acc3 > th.high) l.tier = Tier::T1;
  return l;
}

}  // namespace nback
